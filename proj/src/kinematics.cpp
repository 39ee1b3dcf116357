#include "huproso3/kinematics.hpp"

#include <algorithm>
#include <stdexcept>

namespace huproso3 {

int Skeleton::num_rotations() const {
  return static_cast<int>(std::count_if(manifold.begin(), manifold.end(), [](int m) { return m >= 0; }));
}

double Skeleton::total_length() const {
  double s = 0.0;
  for (int j = 1; j < num_joints(); ++j) s += offset[static_cast<std::size_t>(j)].norm();
  return s;
}

int Skeleton::index_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::invalid_argument("skeleton has no joint named '" + name + "'");
  return static_cast<int>(it - names.begin());
}

std::vector<int> Skeleton::ancestors(int j) const {
  std::vector<int> out;
  for (int k = j; k >= 0; k = parent.at(static_cast<std::size_t>(k))) out.push_back(k);
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<int> Skeleton::descendants(int j) const {
  std::vector<int> out;
  for (int k = 0; k < num_joints(); ++k) {
    const std::vector<int> chain = ancestors(k);
    if (std::find(chain.begin(), chain.end(), j) != chain.end()) out.push_back(k);
  }
  return out;
}

void Skeleton::validate() const {
  const auto n = parent.size();
  if (n == 0) throw std::invalid_argument("skeleton: no joints");
  if (offset.size() != n || manifold.size() != n || names.size() != n) {
    throw std::invalid_argument("skeleton: names, parents, offsets and rotating flags must have equal length");
  }
  if (parent[0] != -1) throw std::invalid_argument("skeleton: joint 0 must be the root (parent -1)");
  for (std::size_t j = 1; j < n; ++j) {
    // Parents precede children, which rules out cycles and extra roots.
    if (parent[j] < 0 || static_cast<std::size_t>(parent[j]) >= j) {
      throw std::invalid_argument("skeleton: joint '" + names[j] + "' must have a parent with a smaller index");
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (!offset[j].allFinite()) throw std::invalid_argument("skeleton: non-finite offset for '" + names[j] + "'");
  }
  std::vector<int> seen;
  for (int m : manifold) {
    if (m >= 0) seen.push_back(m);
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (seen[i] != static_cast<int>(i)) throw std::invalid_argument("skeleton: manifold indices must be 0..N-1, each once");
  }
  if (seen.empty()) throw std::invalid_argument("skeleton: no rotating joints");
  if (!(total_length() > 0.0)) throw std::invalid_argument("skeleton: total chain length must be positive");
  for (int l : leaf_set) {
    if (l < 0 || static_cast<std::size_t>(l) >= n) throw std::invalid_argument("skeleton: leaf index out of range");
  }
  std::vector<std::string> sorted = names;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("skeleton: duplicate joint names");
  }
}

Skeleton chain_skeleton(int bones) {
  if (bones < 1) throw std::invalid_argument("chain skeleton needs at least one bone");
  Skeleton s;
  for (int j = 0; j <= bones; ++j) {
    s.names.push_back(j == bones ? "end" : "j" + std::to_string(j));
    s.parent.push_back(j - 1);
    s.offset.push_back(j == 0 ? Eigen::Vector3d(Eigen::Vector3d::Zero()) : Eigen::Vector3d(Eigen::Vector3d::UnitX()));
    s.manifold.push_back(j < bones ? j : -1);
  }
  s.leaf_set = {bones};
  s.validate();
  return s;
}

Skeleton humanoid_skeleton() {
  // Y up, X to the subject's left, Z forward; units are metres.
  struct Def {
    const char* name;
    const char* parent;
    double x, y, z;
    bool rotating;
  };
  static const Def defs[] = {
      {"pelvis", nullptr, 0, 0, 0, false},
      {"spine1", "pelvis", 0, 0.10, 0, true},
      {"spine2", "spine1", 0, 0.12, 0, true},
      {"spine3", "spine2", 0, 0.12, 0, true},
      {"neck", "spine3", 0, 0.15, 0, true},
      {"head", "neck", 0, 0.10, 0, true},
      {"l_collar", "spine3", 0.07, 0.10, 0, true},
      {"l_shoulder", "l_collar", 0.10, 0.02, 0, true},
      {"l_elbow", "l_shoulder", 0.26, 0, 0, true},
      {"l_wrist", "l_elbow", 0.25, 0, 0, true},
      {"r_collar", "spine3", -0.07, 0.10, 0, true},
      {"r_shoulder", "r_collar", -0.10, 0.02, 0, true},
      {"r_elbow", "r_shoulder", -0.26, 0, 0, true},
      {"r_wrist", "r_elbow", -0.25, 0, 0, true},
      {"l_hip", "pelvis", 0.09, -0.05, 0, true},
      {"l_knee", "l_hip", 0, -0.40, 0, true},
      {"l_ankle", "l_knee", 0, -0.40, 0, true},
      {"r_hip", "pelvis", -0.09, -0.05, 0, true},
      {"r_knee", "r_hip", 0, -0.40, 0, true},
      {"r_ankle", "r_knee", 0, -0.40, 0, true},
      {"head_top", "head", 0, 0.15, 0.02, false},
      {"l_hand", "l_wrist", 0.08, 0, 0.01, false},
      {"r_hand", "r_wrist", -0.08, 0, 0.01, false},
      {"l_foot", "l_ankle", 0, -0.05, 0.12, false},
      {"r_foot", "r_ankle", 0, -0.05, 0.12, false},
  };
  Skeleton s;
  int next = 0;
  for (const Def& d : defs) {
    s.names.emplace_back(d.name);
    s.parent.push_back(d.parent ? s.index_of(d.parent) : -1);
    s.offset.emplace_back(d.x, d.y, d.z);
    s.manifold.push_back(d.rotating ? next++ : -1);
  }
  for (const char* leaf : {"head", "l_wrist", "r_wrist", "l_ankle", "r_ankle"}) s.leaf_set.push_back(s.index_of(leaf));
  s.validate();
  return s;
}

Skeleton default_skeleton(const std::string& variant) {
  if (variant == "humanoid-19") return humanoid_skeleton();
  if (variant.rfind("chain-", 0) == 0) {
    std::size_t used = 0;
    int n = 0;
    try {
      n = std::stoi(variant.substr(6), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == variant.size() - 6 && n >= 1) return chain_skeleton(n);
  }
  throw std::invalid_argument("unknown skeleton variant '" + variant + "' (expected chain-N or humanoid-19)");
}

nlohmann::json skeleton_to_json(const Skeleton& s) {
  nlohmann::json j;
  j["names"] = s.names;
  j["parents"] = s.parent;
  j["offsets"] = nlohmann::json::array();
  for (const auto& o : s.offset) j["offsets"].push_back({o.x(), o.y(), o.z()});
  j["rotating"] = nlohmann::json::array();
  for (int m : s.manifold) j["rotating"].push_back(m >= 0);
  j["leaf_set"] = nlohmann::json::array();
  for (int l : s.leaf_set) j["leaf_set"].push_back(s.names[static_cast<std::size_t>(l)]);
  return j;
}

Skeleton skeleton_from_json(const nlohmann::json& j) {
  Skeleton s;
  try {
    s.names = j.at("names").get<std::vector<std::string>>();
    s.parent = j.at("parents").get<std::vector<int>>();
    for (const auto& o : j.at("offsets")) s.offset.push_back(Eigen::Vector3d(o.at(0), o.at(1), o.at(2)));
    int next = 0;
    for (const auto& r : j.at("rotating")) s.manifold.push_back(r.get<bool>() ? next++ : -1);
    for (const auto& l : j.value("leaf_set", nlohmann::json::array())) {
      s.leaf_set.push_back(l.is_string() ? s.index_of(l.get<std::string>()) : l.get<int>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("skeleton document: ") + e.what());
  }
  s.validate();
  return s;
}

JointPositions forward_kinematics(const ProductPose& pose, const Skeleton& skel) {
  if (static_cast<int>(pose.size()) != skel.num_rotations()) {
    throw std::invalid_argument("forward_kinematics: pose has " + std::to_string(pose.size()) +
                                " rotations, skeleton expects " + std::to_string(skel.num_rotations()));
  }
  const int n = skel.num_joints();
  JointPositions p(n, 3);
  std::vector<Eigen::Matrix3d> global(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    const auto u = static_cast<std::size_t>(j);
    const int par = skel.parent[u];
    const Eigen::Matrix3d parent_rot = par < 0 ? Eigen::Matrix3d::Identity() : global[static_cast<std::size_t>(par)];
    const Eigen::Vector3d parent_pos = par < 0 ? Eigen::Vector3d::Zero() : Eigen::Vector3d(p.row(par).transpose());
    p.row(j) = (par < 0 ? Eigen::Vector3d::Zero() : Eigen::Vector3d(parent_pos + parent_rot * skel.offset[u])).transpose();
    const int m = skel.manifold[u];
    global[u] = m >= 0 ? Eigen::Matrix3d(parent_rot * pose[static_cast<std::size_t>(m)].matrix()) : parent_rot;
  }
  return p;
}

Eigen::Matrix<double, Eigen::Dynamic, 2> project_2d(const JointPositions& jp) { return jp.leftCols<2>(); }

std::vector<int> joint_group(const Skeleton& skel, const std::string& group) {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> groups = {
      {"left_arm", {"l_shoulder", "l_elbow", "l_wrist", "l_hand"}},
      {"right_arm", {"r_shoulder", "r_elbow", "r_wrist", "r_hand"}},
      {"left_leg", {"l_knee", "l_ankle", "l_foot"}},
      {"right_leg", {"r_knee", "r_ankle", "r_foot"}},
      {"head", {"head", "head_top"}},
  };
  for (const auto& [name, members] : groups) {
    if (name != group) continue;
    std::vector<int> out;
    for (const auto& m : members) out.push_back(skel.index_of(m));
    return out;
  }
  throw std::invalid_argument("unknown joint group '" + group + "'");
}

}  // namespace huproso3
