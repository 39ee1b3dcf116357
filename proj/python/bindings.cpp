// Python bindings. Poses cross the boundary as float64 arrays of shape
// (B, N, 3, 3); keypoints as (J, k).

#include "huproso3/binary_io.hpp"
#include "huproso3/checkpoint.hpp"
#include "huproso3/flow.hpp"
#include "huproso3/kinematics.hpp"
#include "huproso3/metrics.hpp"
#include "huproso3/synthetic.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

namespace py = pybind11;
using namespace huproso3;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<ProductPose> to_poses(const Array& a) {
  if (a.ndim() != 4 || a.shape(2) != 3 || a.shape(3) != 3) throw std::invalid_argument("poses must have shape (B, N, 3, 3)");
  const auto r = a.unchecked<4>();
  std::vector<ProductPose> out(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t b = 0; b < a.shape(0); ++b) {
    for (py::ssize_t n = 0; n < a.shape(1); ++n) {
      Eigen::Matrix3d m;
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) m(i, j) = r(b, n, i, j);
      }
      out[static_cast<std::size_t>(b)].push_back(Rotation::from_orthonormal(m));
    }
  }
  return out;
}

Array from_poses(const std::vector<ProductPose>& poses) {
  const py::ssize_t n = poses.empty() ? 0 : static_cast<py::ssize_t>(poses.front().size());
  Array a({static_cast<py::ssize_t>(poses.size()), n, py::ssize_t{3}, py::ssize_t{3}});
  auto w = a.mutable_unchecked<4>();
  for (std::size_t b = 0; b < poses.size(); ++b) {
    for (py::ssize_t k = 0; k < n; ++k) {
      const Eigen::Matrix3d& m = poses[b][static_cast<std::size_t>(k)].matrix();
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) w(static_cast<py::ssize_t>(b), k, i, j) = m(i, j);
      }
    }
  }
  return a;
}

Eigen::MatrixXd to_matrix(const Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  Eigen::MatrixXd m(a.shape(0), a.shape(1));
  const auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = r(i, j);
  }
  return m;
}

Array from_matrix(const Eigen::MatrixXd& m) {
  Array a({static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
  auto w = a.mutable_unchecked<2>();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) w(i, j) = m(i, j);
  }
  return a;
}

Eigen::VectorXd to_vector(const Array& a) {
  return Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
}

Mask to_mask(const std::optional<std::vector<int>>& mask, int n) {
  if (!mask) return Mask::all(n, true);
  Mask m;
  for (int v : *mask) m.m.push_back(v != 0 ? 1 : 0);
  return m;
}

py::tuple split(const std::vector<PoseSample>& samples) {
  std::vector<ProductPose> poses;
  std::vector<double> lp;
  for (const auto& s : samples) {
    poses.push_back(s.pose);
    lp.push_back(s.log_prob);
  }
  return py::make_tuple(from_poses(poses), py::array_t<double>(static_cast<py::ssize_t>(lp.size()), lp.data()));
}

py::dict dataset_dict(const PoseDataset& ds) {
  py::dict d;
  d["poses"] = from_poses(ds.poses);
  d["log_density"] = py::array_t<double>(static_cast<py::ssize_t>(ds.log_density.size()), ds.log_density.data());
  py::list kp;
  for (const auto& k : ds.keypoints) kp.append(from_matrix(k));
  d["keypoints"] = kp;
  d["masks"] = ds.masks;
  d["seed"] = ds.seed;
  d["spec_digest"] = ds.spec_digest;
  return d;
}

FlowConfig config_from_kwargs(int num_manifolds, int num_blocks, int hidden_width, int hidden_layers, int context_dim,
                              int num_keypoints, int keypoint_dim, int encoder_width, std::uint64_t seed) {
  FlowConfig c;
  c.num_manifolds = num_manifolds;
  c.num_blocks = num_blocks;
  c.hidden_width = hidden_width;
  c.hidden_layers = hidden_layers;
  c.context_dim = context_dim;
  c.num_keypoints = num_keypoints;
  c.keypoint_dim = keypoint_dim;
  c.encoder_width = encoder_width;
  c.seed = seed;
  return c;
}

}  // namespace

PYBIND11_MODULE(_huproso3, m) {
  m.doc() = "Normalizing flows on products of SO(3)";

  py::register_exception<io::FormatError>(m, "FormatError", PyExc_ValueError);

  m.def(
      "haar_sample",
      [](int n, int manifolds, std::uint64_t seed) {
        Rng rng(seed);
        std::vector<ProductPose> poses(static_cast<std::size_t>(n));
        for (auto& p : poses) {
          for (int j = 0; j < manifolds; ++j) p.push_back(haar_sample(rng));
        }
        return from_poses(poses);
      },
      py::arg("n"), py::arg("manifolds") = 1, py::arg("seed") = 0, "Haar-uniform poses of shape (n, manifolds, 3, 3).");
  m.def(
      "geodesic_distance",
      [](const Array& a, const Array& b) {
        const auto pa = to_poses(a), pb = to_poses(b);
        if (pa.size() != pb.size()) throw std::invalid_argument("pose batches differ in size");
        std::vector<double> out;
        for (std::size_t i = 0; i < pa.size(); ++i) {
          if (pa[i].size() != pb[i].size()) throw std::invalid_argument("pose lengths differ");
          for (std::size_t j = 0; j < pa[i].size(); ++j) out.push_back(geodesic_distance(pa[i][j], pb[i][j]));
        }
        return py::array_t<double>({a.shape(0), a.shape(1)}, out.data());
      },
      py::arg("a"), py::arg("b"), "Per-joint geodesic distances, shape (B, N).");
  m.def(
      "mgeo", [](const Array& a, const Array& b) { return mgeo(to_poses(a).at(0), to_poses(b).at(0)); }, py::arg("a"),
      py::arg("b"), "Mean geodesic distance between two poses of shape (1, N, 3, 3).");

  py::class_<Skeleton>(m, "Skeleton")
      .def_static("default", &default_skeleton, py::arg("variant") = "humanoid-19")
      .def_readonly("names", &Skeleton::names)
      .def_readonly("parent", &Skeleton::parent)
      .def_readonly("leaf_set", &Skeleton::leaf_set)
      .def_property_readonly("num_joints", &Skeleton::num_joints)
      .def_property_readonly("num_rotations", &Skeleton::num_rotations)
      .def_property_readonly("total_length", &Skeleton::total_length)
      .def("forward_kinematics",
           [](const Skeleton& s, const Array& poses) {
             py::list out;
             for (const auto& p : to_poses(poses)) out.append(from_matrix(forward_kinematics(p, s)));
             return out;
           })
      .def("mpjpe", [](const Skeleton& s, const Array& a, const Array& b) {
        return mpjpe(to_poses(a).at(0), to_poses(b).at(0), s);
      });

  py::class_<FlowModel>(m, "FlowModel")
      .def(py::init([](int num_manifolds, int num_blocks, int hidden_width, int hidden_layers, int context_dim,
                       int num_keypoints, int keypoint_dim, int encoder_width, std::uint64_t seed) {
             return FlowModel(config_from_kwargs(num_manifolds, num_blocks, hidden_width, hidden_layers, context_dim,
                                                 num_keypoints, keypoint_dim, encoder_width, seed));
           }),
           py::arg("num_manifolds") = 19, py::arg("num_blocks") = 12, py::arg("hidden_width") = 16,
           py::arg("hidden_layers") = 3, py::arg("context_dim") = 0, py::arg("num_keypoints") = 0,
           py::arg("keypoint_dim") = 0, py::arg("encoder_width") = 64, py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_checkpoint(path).model; }, py::arg("path"))
      .def(
          "save", [](const FlowModel& fm, const std::string& path) { save_checkpoint(path, fm); }, py::arg("path"))
      .def_property_readonly("num_manifolds", &FlowModel::num_manifolds)
      .def_property_readonly("conditional", [](const FlowModel& fm) { return fm.config().conditional(); })
      .def_property_readonly("num_parameters", [](const FlowModel& fm) { return fm.params().total_size(); })
      .def(
          "perturb",
          [](FlowModel& fm, double scale, std::uint64_t seed) {
            Rng rng(seed);
            fm.perturb(rng, scale);
          },
          py::arg("scale"), py::arg("seed") = 0)
      .def(
          "encode_context",
          [](const FlowModel& fm, const Array& keypoints, const std::optional<std::vector<int>>& mask) {
            const Eigen::MatrixXd kp = to_matrix(keypoints);
            const Eigen::VectorXd c = fm.encode_context(kp, to_mask(mask, static_cast<int>(kp.rows()))).c;
            return py::array_t<double>(static_cast<py::ssize_t>(c.size()), c.data());
          },
          py::arg("keypoints"), py::arg("mask") = py::none())
      .def(
          "log_prob",
          [](const FlowModel& fm, const Array& poses, const std::optional<Array>& ctx) {
            const auto p = to_poses(poses);
            std::vector<double> lp;
            if (ctx) {
              const Eigen::MatrixXd rows = ctx->ndim() == 1 ? Eigen::MatrixXd(to_vector(*ctx).transpose()) : to_matrix(*ctx);
              lp = fm.log_prob(p, &rows);
            } else {
              lp = fm.log_prob(p);
            }
            return py::array_t<double>(static_cast<py::ssize_t>(lp.size()), lp.data());
          },
          py::arg("poses"), py::arg("context") = py::none(), "Log-density w.r.t. normalized Haar measure.")
      .def(
          "sample",
          [](const FlowModel& fm, int n, std::uint64_t seed, const std::optional<Array>& ctx) {
            Rng rng(seed);
            std::optional<Context> c;
            if (ctx) c = Context{to_vector(*ctx)};
            return split(fm.sample(rng, n, c));
          },
          py::arg("n"), py::arg("seed") = 0, py::arg("context") = py::none(), "Returns (poses, log_prob).")
      .def(
          "pull_back",
          [](const FlowModel& fm, const Array& poses) { return split(fm.pull_back(to_poses(poses))); },
          py::arg("poses"), "Base-side poses and log-densities.");

  m.def(
      "generate_dataset",
      [](int joints, int components, int n, std::uint64_t spec_seed, std::uint64_t seed) {
        return dataset_dict(generate(random_prior_spec(joints, components, spec_seed), n, seed));
      },
      py::arg("joints"), py::arg("components"), py::arg("n"), py::arg("spec_seed") = 0, py::arg("seed") = 0,
      "Samples a random ball-mixture prior; returns poses and exact log-densities.");
  m.def(
      "read_dataset", [](const std::string& path) { return dataset_dict(read_dataset(path)); }, py::arg("path"));
}
