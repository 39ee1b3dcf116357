#include "huproso3/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace huproso3::ad {

// ---------------------------------------------------------------------------
// ParamStore

std::size_t ParamStore::add(const std::string& name, Array value) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  index_.emplace(name, values_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
  ++version_;
  return values_.size() - 1;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
  return it->second;
}

void ParamStore::set_value(std::size_t i, const Array& v) {
  Array& dst = values_.at(i);
  if (dst.rows() != v.rows() || dst.cols() != v.cols()) {
    throw std::invalid_argument("ParamStore: shape mismatch for " + names_[i]);
  }
  dst = v;
  ++version_;
}

Array& ParamStore::mutable_value(std::size_t i) {
  ++version_;
  return values_.at(i);
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (const auto& v : values_) out.insert(out.end(), v.data(), v.data() + v.size());
  return out;
}

void ParamStore::assign_flat(std::span<const double> flat) {
  if (flat.size() != total_size()) throw std::invalid_argument("ParamStore: flat size mismatch");
  std::size_t off = 0;
  for (auto& v : values_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), v.size(), v.data());
    off += static_cast<std::size_t>(v.size());
  }
  ++version_;
}

// ---------------------------------------------------------------------------
// Tape

const Array& Var::value() const { return tape_->value(id_); }

Tape::Tape(const ParamStore* params, bool record_gradients)
    : params_(params), record_(record_gradients) {}

Var Tape::add_node(const char* op, Array value, bool requires_grad, bool leaf, int param,
                   BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = requires_grad && record_;
  n.leaf = leaf;
  n.param = param;
  if (n.requires_grad && !leaf) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Array value) { return add_node("constant", std::move(value), false, true, -1, {}); }

Var Tape::variable(Array value) { return add_node("variable", std::move(value), true, true, -1, {}); }

Var Tape::param(std::size_t index) {
  if (!params_) throw std::logic_error("Tape::param: tape has no ParamStore");
  return add_node("param", params_->value(index), true, true, static_cast<int>(index), {});
}

Var Tape::param(const std::string& name) {
  if (!params_) throw std::logic_error("Tape::param: tape has no ParamStore");
  return param(params_->index_of(name));
}

Var Tape::push(const char* op, Array value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return push(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::push(const char* op, Array value, std::span<const Var> inputs, BackwardFn fn) {
  bool rg = false;
  for (const Var& v : inputs) {
    if (v.tape() != this) throw std::logic_error(std::string("Tape::push: operand of ") + op + " from another tape");
    rg = rg || requires_grad(v.id());
  }
  return add_node(op, std::move(value), rg, false, -1, std::move(fn));
}

void Tape::accumulate(Var input, const Array& g) {
  const auto id = static_cast<std::size_t>(input.id());
  if (!nodes_[id].requires_grad) return;
  Array& dst = grads_[id];
  if (dst.size() == 0) {
    dst = g;
  } else {
    dst += g;
  }
}

void Tape::backward(Var output) {
  if (output.tape() != this) throw std::logic_error("Tape::backward: output from another tape");
  const Array& out = value(output.id());
  if (out.rows() != 1 || out.cols() != 1) {
    throw std::invalid_argument("Tape::backward: output must be a 1x1 scalar, got " +
                                std::to_string(out.rows()) + "x" + std::to_string(out.cols()));
  }
  grads_.assign(nodes_.size(), Array());
  if (!nodes_[static_cast<std::size_t>(output.id())].requires_grad) return;
  grads_[static_cast<std::size_t>(output.id())] = Array::Ones(1, 1);
  for (int id = output.id(); id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.leaf || !node.requires_grad) continue;
    if (grads_[static_cast<std::size_t>(id)].size() == 0) continue;
    node.backward(*this, id);
    grads_[static_cast<std::size_t>(id)] = Array();
  }
}

Array Tape::gradient(Var v) const {
  const auto id = static_cast<std::size_t>(v.id());
  if (id < grads_.size() && grads_[id].size() != 0) return grads_[id];
  return Array::Zero(value(v.id()).rows(), value(v.id()).cols());
}

Gradients Tape::param_gradients() const {
  if (!params_) return {};
  Gradients g(params_->size());
  for (std::size_t i = 0; i < params_->size(); ++i) {
    g[i] = Array::Zero(params_->value(i).rows(), params_->value(i).cols());
  }
  for (std::size_t id = 0; id < nodes_.size() && id < grads_.size(); ++id) {
    if (nodes_[id].param >= 0 && grads_[id].size() != 0) g[static_cast<std::size_t>(nodes_[id].param)] += grads_[id];
  }
  return g;
}

Gradients backward(Tape& tape, Var output) {
  tape.backward(output);
  return tape.param_gradients();
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace {

Array expand(const Array& a, Eigen::Index r, Eigen::Index c) {
  if (a.rows() == r && a.cols() == c) return a;
  if (a.rows() == 1 && a.cols() == 1) return Array::Constant(r, c, a(0, 0));
  if (a.rows() == 1) return a.replicate(r, 1);
  return a.replicate(1, c);
}

Array reduce_to(const Array& g, Eigen::Index r, Eigen::Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  if (r == 1 && c == 1) return Array::Constant(1, 1, g.sum());
  if (r == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const Array& a, const Array& b, const char* op) {
  auto dim = [op](Eigen::Index x, Eigen::Index y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw std::invalid_argument(std::string("broadcast mismatch in ") + op);
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

template <typename F>
Array binary_value(const Array& a, const Array& b, const char* op, F f) {
  auto [r, c] = broadcast_shape(a, b, op);
  if (a.rows() == r && a.cols() == c && b.rows() == r && b.cols() == c) return f(a, b);
  return f(expand(a, r, c), expand(b, r, c));
}

[[noreturn]] void domain_fail(const Tape& t, const char* op, int input) {
  throw std::domain_error(std::string(op) + " of non-positive value (operand node #" + std::to_string(input) +
                          ", op " + t.op_name(input) + ", next node #" + std::to_string(t.size()) + ")");
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops

Var operator+(Var a, Var b) {
  Tape& t = *a.tape();
  Array v = binary_value(a.value(), b.value(), "add", [](const Array& x, const Array& y) -> Array { return x + y; });
  return t.push("add", std::move(v), {a, b}, [a, b](Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    tp.accumulate(a, reduce_to(g, a.rows(), a.cols()));
    tp.accumulate(b, reduce_to(g, b.rows(), b.cols()));
  });
}

Var operator-(Var a, Var b) {
  Tape& t = *a.tape();
  Array v = binary_value(a.value(), b.value(), "sub", [](const Array& x, const Array& y) -> Array { return x - y; });
  return t.push("sub", std::move(v), {a, b}, [a, b](Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    tp.accumulate(a, reduce_to(g, a.rows(), a.cols()));
    tp.accumulate(b, reduce_to(-g, b.rows(), b.cols()));
  });
}

Var operator*(Var a, Var b) {
  Tape& t = *a.tape();
  Array v = binary_value(a.value(), b.value(), "mul", [](const Array& x, const Array& y) -> Array { return x * y; });
  return t.push("mul", std::move(v), {a, b}, [a, b](Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    const Eigen::Index r = g.rows(), c = g.cols();
    if (tp.requires_grad(a.id())) tp.accumulate(a, reduce_to(g * expand(b.value(), r, c), a.rows(), a.cols()));
    if (tp.requires_grad(b.id())) tp.accumulate(b, reduce_to(g * expand(a.value(), r, c), b.rows(), b.cols()));
  });
}

Var operator/(Var a, Var b) {
  Tape& t = *a.tape();
  Array v = binary_value(a.value(), b.value(), "div", [](const Array& x, const Array& y) -> Array { return x / y; });
  return t.push("div", std::move(v), {a, b}, [a, b](Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    const Eigen::Index r = g.rows(), c = g.cols();
    const Array bb = expand(b.value(), r, c);
    if (tp.requires_grad(a.id())) tp.accumulate(a, reduce_to(g / bb, a.rows(), a.cols()));
    if (tp.requires_grad(b.id())) {
      const Array aa = expand(a.value(), r, c);
      tp.accumulate(b, reduce_to(-g * aa / (bb * bb), b.rows(), b.cols()));
    }
  });
}

Var operator-(Var a) {
  return a.tape()->push("neg", -a.value(), {a}, [a](Tape& tp, int id) { tp.accumulate(a, -tp.grad_of(id)); });
}

Var operator+(Var a, double s) {
  return a.tape()->push("add_scalar", a.value() + s, {a}, [a](Tape& tp, int id) { tp.accumulate(a, tp.grad_of(id)); });
}
Var operator+(double s, Var a) { return a + s; }
Var operator-(Var a, double s) { return a + (-s); }
Var operator-(double s, Var a) {
  return a.tape()->push("rsub_scalar", s - a.value(), {a}, [a](Tape& tp, int id) { tp.accumulate(a, -tp.grad_of(id)); });
}
Var operator*(Var a, double s) {
  return a.tape()->push("scale", a.value() * s, {a}, [a, s](Tape& tp, int id) { tp.accumulate(a, tp.grad_of(id) * s); });
}
Var operator*(double s, Var a) { return a * s; }
Var operator/(Var a, double s) { return a * (1.0 / s); }

Var square(Var a) {
  return a.tape()->push("square", a.value().square(), {a},
                        [a](Tape& tp, int id) { tp.accumulate(a, 2.0 * tp.grad_of(id) * a.value()); });
}

Var sqrt(Var a) {
  Tape& t = *a.tape();
  if ((a.value() < 0.0).any()) domain_fail(t, "sqrt", a.id());
  Array v = a.value().sqrt();
  return t.push("sqrt", std::move(v), {a}, [a](Tape& tp, int id) {
    tp.accumulate(a, tp.grad_of(id) * 0.5 / tp.value(id));
  });
}

Var exp(Var a) {
  return a.tape()->push("exp", a.value().exp(), {a},
                        [a](Tape& tp, int id) { tp.accumulate(a, tp.grad_of(id) * tp.value(id)); });
}

Var log(Var a) {
  Tape& t = *a.tape();
  if (!(a.value() > 0.0).all()) domain_fail(t, "log", a.id());
  return t.push("log", a.value().log(), {a}, [a](Tape& tp, int id) { tp.accumulate(a, tp.grad_of(id) / a.value()); });
}

Var tanh(Var a) {
  return a.tape()->push("tanh", a.value().tanh(), {a}, [a](Tape& tp, int id) {
    const Array& y = tp.value(id);
    tp.accumulate(a, tp.grad_of(id) * (1.0 - y.square()));
  });
}

Var relu(Var a) {
  return a.tape()->push("relu", a.value().max(0.0), {a}, [a](Tape& tp, int id) {
    tp.accumulate(a, (a.value() > 0.0).select(tp.grad_of(id), 0.0));
  });
}

Var clamp(Var a, double lo, double hi) {
  return a.tape()->push("clamp", a.value().max(lo).min(hi), {a}, [a, lo, hi](Tape& tp, int id) {
    const Array& x = a.value();
    tp.accumulate(a, ((x >= lo) && (x <= hi)).select(tp.grad_of(id), 0.0));
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Array v = (a.value().matrix() * b.value().matrix()).array();
  return a.tape()->push("matmul", std::move(v), {a, b}, [a, b](Tape& tp, int id) {
    const auto g = tp.grad_of(id).matrix();
    if (tp.requires_grad(a.id())) tp.accumulate(a, (g * b.value().matrix().transpose()).array());
    if (tp.requires_grad(b.id())) tp.accumulate(b, (a.value().matrix().transpose() * g).array());
  });
}

Var dot_rows(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("dot_rows: shape mismatch");
  Array v = (a.value() * b.value()).rowwise().sum();
  return a.tape()->push("dot", std::move(v), {a, b}, [a, b](Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    const Eigen::Index c = a.cols();
    if (tp.requires_grad(a.id())) tp.accumulate(a, b.value() * g.replicate(1, c));
    if (tp.requires_grad(b.id())) tp.accumulate(b, a.value() * g.replicate(1, c));
  });
}

namespace {
Array cross_arrays(const Array& a, const Array& b) {
  Array out(a.rows(), 3);
  out.col(0) = a.col(1) * b.col(2) - a.col(2) * b.col(1);
  out.col(1) = a.col(2) * b.col(0) - a.col(0) * b.col(2);
  out.col(2) = a.col(0) * b.col(1) - a.col(1) * b.col(0);
  return out;
}
}  // namespace

Var cross_rows(Var a, Var b) {
  if (a.cols() != 3 || b.cols() != 3 || a.rows() != b.rows()) throw std::invalid_argument("cross_rows: need Rx3");
  return a.tape()->push("cross", cross_arrays(a.value(), b.value()), {a, b}, [a, b](Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    // d(a x b) = da x b + a x db;  adjoints: ga = b x g, gb = g x a.
    if (tp.requires_grad(a.id())) tp.accumulate(a, cross_arrays(b.value(), g));
    if (tp.requires_grad(b.id())) tp.accumulate(b, cross_arrays(g, a.value()));
  });
}

Var norm_rows(Var a) {
  Array v = a.value().square().rowwise().sum().sqrt();
  if (!(v > 0.0).all()) domain_fail(*a.tape(), "norm", a.id());
  return a.tape()->push("norm", std::move(v), {a}, [a](Tape& tp, int id) {
    const Array scale = tp.grad_of(id) / tp.value(id);
    tp.accumulate(a, a.value() * scale.replicate(1, a.cols()));
  });
}

namespace {
Array quat_mul_arrays(const Array& a, const Array& b) {
  Array o(a.rows(), 4);
  o.col(0) = a.col(0) * b.col(0) - a.col(1) * b.col(1) - a.col(2) * b.col(2) - a.col(3) * b.col(3);
  o.col(1) = a.col(0) * b.col(1) + a.col(1) * b.col(0) + a.col(2) * b.col(3) - a.col(3) * b.col(2);
  o.col(2) = a.col(0) * b.col(2) - a.col(1) * b.col(3) + a.col(2) * b.col(0) + a.col(3) * b.col(1);
  o.col(3) = a.col(0) * b.col(3) + a.col(1) * b.col(2) - a.col(2) * b.col(1) + a.col(3) * b.col(0);
  return o;
}
Array conj_array(const Array& a) {
  Array o = -a;
  o.col(0) = a.col(0);
  return o;
}
}  // namespace

Var quat_mul_rows(Var a, Var b) {
  if (a.cols() != 4 || b.cols() != 4 || a.rows() != b.rows()) throw std::invalid_argument("quat_mul_rows: need Rx4");
  return a.tape()->push("quat_mul", quat_mul_arrays(a.value(), b.value()), {a, b}, [a, b](Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    // p = a*b is bilinear: ga = g * conj(b), gb = conj(a) * g.
    if (tp.requires_grad(a.id())) tp.accumulate(a, quat_mul_arrays(g, conj_array(b.value())));
    if (tp.requires_grad(b.id())) tp.accumulate(b, quat_mul_arrays(conj_array(a.value()), g));
  });
}

Var quat_conj_rows(Var a) {
  if (a.cols() != 4) throw std::invalid_argument("quat_conj_rows: need Rx4");
  return a.tape()->push("quat_conj", conj_array(a.value()), {a},
                        [a](Tape& tp, int id) { tp.accumulate(a, conj_array(tp.grad_of(id))); });
}

Var sum(Var a) {
  return a.tape()->push("sum", Array::Constant(1, 1, a.value().sum()), {a}, [a](Tape& tp, int id) {
    tp.accumulate(a, Array::Constant(a.rows(), a.cols(), tp.grad_of(id)(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return sum(a) / n;
}

Var sum_cols(Var a) {
  return a.tape()->push("sum_cols", a.value().rowwise().sum(), {a},
                        [a](Tape& tp, int id) { tp.accumulate(a, tp.grad_of(id).replicate(1, a.cols())); });
}

Var cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("cols: slice out of range");
  return a.tape()->push("cols", a.value().middleCols(start, count), {a}, [a, start, count](Tape& tp, int id) {
    Array g = Array::Zero(a.rows(), a.cols());
    g.middleCols(start, count) = tp.grad_of(id);
    tp.accumulate(a, g);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  const Eigen::Index r = parts[0].rows();
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
    c += p.cols();
  }
  Array v(r, c);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape()->push("concat", std::move(v), parts, [ins](Tape& tp, int id) {
    const Array& g = tp.grad_of(id);
    Eigen::Index o = 0;
    for (const Var& p : ins) {
      if (tp.requires_grad(p.id())) tp.accumulate(p, g.middleCols(o, p.cols()));
      o += p.cols();
    }
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var(Tape&)>& f, ParamStore& params, double h,
                  std::span<const ParamEntry> entries) {
  Gradients analytic;
  {
    Tape tape(&params);
    Var out = f(tape);
    analytic = backward(tape, out);
  }
  auto eval = [&]() {
    Tape tape(&params, false);
    return f(tape).scalar();
  };
  double worst = 0.0;
  for (const ParamEntry& e : entries) {
    Array& v = params.mutable_value(e.param);
    if (e.index < 0 || e.index >= v.size()) throw std::out_of_range("grad_check: entry index out of range");
    const double saved = v.data()[e.index];
    v.data()[e.index] = saved + h;
    const double fp = eval();
    v.data()[e.index] = saved - h;
    const double fm = eval();
    v.data()[e.index] = saved;
    const double fd = (fp - fm) / (2.0 * h);
    const double a = analytic[e.param].data()[e.index];
    worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6}));
  }
  return worst;
}

double grad_check(const std::function<Var(Tape&)>& f, ParamStore& params, double h) {
  std::vector<ParamEntry> all;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index k = 0; k < params.value(p).size(); ++k) all.push_back({p, k});
  }
  return grad_check(f, params, h, all);
}

}  // namespace huproso3::ad
