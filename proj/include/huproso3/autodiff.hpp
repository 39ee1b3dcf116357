#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

// Reverse-mode automatic differentiation over small batched tensors.
//
// Every node holds a (rows x cols) array. By convention rows index the batch
// and columns index features, so one tape records a whole mini-batch and the
// number of nodes stays proportional to the model size, not the batch size.
// Binary elementwise ops broadcast operands of shape 1x1, 1xC or Rx1.

namespace huproso3::ad {

using Array = Eigen::ArrayXXd;

/// Named parameter arrays with immutable shapes.
class ParamStore {
 public:
  std::size_t add(const std::string& name, Array value);

  std::size_t size() const { return values_.size(); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index_of(const std::string& name) const;
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Array& value(std::size_t i) const { return values_.at(i); }
  const Array& value(const std::string& name) const { return values_.at(index_of(name)); }

  /// Replaces a value; the shape must match the registered one.
  void set_value(std::size_t i, const Array& v);
  Array& mutable_value(std::size_t i);

  std::uint64_t version() const { return version_; }
  std::size_t total_size() const;
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);

 private:
  std::vector<std::string> names_;
  std::vector<Array> values_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t version_ = 0;
};

/// Gradients laid out like a ParamStore (one array per parameter).
using Gradients = std::vector<Array>;

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  const Array& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  /// With `record_gradients` false no backward closures are stored; values
  /// are identical either way.
  explicit Tape(const ParamStore* params = nullptr, bool record_gradients = true);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  Var variable(Array value);
  Var param(std::size_t index);
  Var param(const std::string& name);

  /// Appends a node. `fn(tape, id)` must read tape.grad_of(id) and call
  /// tape.accumulate(input, ...) for each input.
  Var push(const char* op, Array value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var push(const char* op, Array value, std::span<const Var> inputs, BackwardFn fn);

  const Array& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool recording() const { return record_; }
  const char* op_name(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }
  std::size_t size() const { return nodes_.size(); }
  const ParamStore* params() const { return params_; }

  const Array& grad_of(int id) const { return grads_[static_cast<std::size_t>(id)]; }
  void accumulate(Var input, const Array& g);

  /// Runs the reverse sweep from a 1x1 output. Throws std::invalid_argument
  /// for a non-scalar output.
  void backward(Var output);

  /// Adjoint of a leaf after backward(); zeros if the node was unreached.
  Array gradient(Var v) const;

  /// Parameter adjoints summed over all param() leaves; zeros for unused ones.
  Gradients param_gradients() const;

 private:
  struct Node {
    Array value;
    const char* op;
    BackwardFn backward;
    int param = -1;
    bool requires_grad = false;
    bool leaf = false;
  };

  Var add_node(const char* op, Array value, bool requires_grad, bool leaf, int param, BackwardFn fn);

  const ParamStore* params_;
  bool record_;
  std::vector<Node> nodes_;
  std::vector<Array> grads_;
};

/// Convenience wrapper: backward from `output` and return parameter adjoints.
Gradients backward(Tape& tape, Var output);

// Elementwise arithmetic with broadcasting.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double s);
Var operator+(double s, Var a);
Var operator-(Var a, double s);
Var operator-(double s, Var a);
Var operator*(Var a, double s);
Var operator*(double s, Var a);
Var operator/(Var a, double s);

Var square(Var a);
Var sqrt(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
/// Pass-through gradient inside [lo, hi], zero outside.
Var clamp(Var a, double lo, double hi);

/// Matrix product (R x K) * (K x C).
Var matmul(Var a, Var b);
/// Row-wise dot product of two R x C arrays, giving R x 1.
Var dot_rows(Var a, Var b);
/// Row-wise cross product of two R x 3 arrays.
Var cross_rows(Var a, Var b);
/// Row-wise Euclidean norm, R x 1.
Var norm_rows(Var a);
/// Row-wise Hamilton product of two R x 4 quaternion arrays (w, x, y, z).
Var quat_mul_rows(Var a, Var b);
/// Negates the vector part of R x 4 quaternions.
Var quat_conj_rows(Var a);

Var sum(Var a);
Var mean(Var a);
/// Sum across columns, R x 1.
Var sum_cols(Var a);

Var cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);

/// Max over all parameter entries of |analytic - central difference| /
/// max(|analytic|, |central difference|, 1e-6). The floor keeps exactly-zero
/// gradients from turning difference noise into a large ratio. `f` builds a
/// 1x1 output on the tape it is given.
double grad_check(const std::function<Var(Tape&)>& f, ParamStore& params, double h);

/// One scalar entry of a parameter array (column-major index).
struct ParamEntry {
  std::size_t param;
  Eigen::Index index;
};

/// As above, restricted to the listed entries.
double grad_check(const std::function<Var(Tape&)>& f, ParamStore& params, double h, std::span<const ParamEntry> entries);

}  // namespace huproso3::ad
