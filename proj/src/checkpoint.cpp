#include "huproso3/checkpoint.hpp"

#include "huproso3/binary_io.hpp"

namespace huproso3 {

namespace {

constexpr char kMagic[8] = {'H', 'P', 'S', 'O', '3', 'C', 'K', '\0'};

void put_array(io::Writer& w, const ad::Array& a) {
  w.put_bytes(a.data(), static_cast<std::size_t>(a.size()) * sizeof(double));
}

ad::Array get_array(io::Reader& r, Eigen::Index rows, Eigen::Index cols) {
  ad::Array a(rows, cols);
  r.get_bytes(a.data(), static_cast<std::size_t>(a.size()) * sizeof(double));
  return a;
}

}  // namespace

nlohmann::json flow_config_to_json(const FlowConfig& c) {
  return {{"num_manifolds", c.num_manifolds},   {"num_blocks", c.num_blocks},       {"hidden_width", c.hidden_width},
          {"hidden_layers", c.hidden_layers},   {"context_dim", c.context_dim},     {"num_keypoints", c.num_keypoints},
          {"keypoint_dim", c.keypoint_dim},     {"encoder_width", c.encoder_width}, {"seed", c.seed}};
}

FlowConfig flow_config_from_json(const nlohmann::json& j) {
  FlowConfig c;
  try {
    c.num_manifolds = j.value("num_manifolds", c.num_manifolds);
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.hidden_width = j.value("hidden_width", c.hidden_width);
  c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
  c.context_dim = j.value("context_dim", c.context_dim);
  c.num_keypoints = j.value("num_keypoints", c.num_keypoints);
  c.keypoint_dim = j.value("keypoint_dim", c.keypoint_dim);
  c.encoder_width = j.value("encoder_width", c.encoder_width);
  c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("flow config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string serialize_checkpoint(const FlowModel& model, const nlohmann::json& meta, const AdamState* optimizer) {
  const ad::ParamStore& ps = model.params();
  if (optimizer && !optimizer->matches(ps)) throw std::invalid_argument("checkpoint: optimizer state does not match model");
  nlohmann::json header;
  header["config"] = flow_config_to_json(model.config());
  header["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    header["params"].push_back({{"name", ps.name(i)}, {"rows", ps.value(i).rows()}, {"cols", ps.value(i).cols()}});
  }
  if (optimizer) {
    header["optimizer"] = {{"step", optimizer->step},
                           {"beta1", optimizer->beta1},
                           {"beta2", optimizer->beta2},
                           {"eps", optimizer->eps}};
  } else {
    header["optimizer"] = nullptr;
  }
  header["meta"] = meta;

  io::Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(header.dump());
  for (std::size_t i = 0; i < ps.size(); ++i) put_array(w, ps.value(i));
  if (optimizer) {
    for (const ad::Array& a : optimizer->m) put_array(w, a);
    for (const ad::Array& a : optimizer->v) put_array(w, a);
  }
  w.put<std::uint64_t>(io::fnv1a(w.bytes()));
  return w.bytes();
}

LoadedCheckpoint deserialize_checkpoint(std::string_view bytes) {
  io::Reader r(bytes, "checkpoint");
  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("bad magic (not a checkpoint file)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < sizeof(std::uint64_t) + r.position()) r.fail("truncated file");
  const std::string_view body = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
  if (stored != io::fnv1a(body)) r.fail("checksum mismatch (corrupt or truncated file)");

  io::Reader br(body, "checkpoint");
  br.get_bytes(magic, sizeof(magic));
  br.get<std::uint32_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(br.get_string());
  } catch (const nlohmann::json::exception& e) {
    br.fail(std::string("bad header: ") + e.what());
  }

  LoadedCheckpoint out{FlowModel(flow_config_from_json(header.at("config"))), header.value("meta", nlohmann::json::object()),
                       std::nullopt};
  ad::ParamStore& ps = out.model.params();
  const auto& table = header.at("params");
  if (table.size() != ps.size()) br.fail("parameter table does not match the model architecture");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& e = table[i];
    const auto rows = e.at("rows").get<Eigen::Index>(), cols = e.at("cols").get<Eigen::Index>();
    if (e.at("name").get<std::string>() != ps.name(i) || rows != ps.value(i).rows() || cols != ps.value(i).cols()) {
      br.fail("parameter '" + e.at("name").get<std::string>() + "' does not match the model architecture");
    }
    ps.set_value(i, get_array(br, rows, cols));
  }
  if (!header.at("optimizer").is_null()) {
    const auto& o = header.at("optimizer");
    AdamState s;
    s.step = o.at("step").get<std::int64_t>();
    s.beta1 = o.at("beta1").get<double>();
    s.beta2 = o.at("beta2").get<double>();
    s.eps = o.at("eps").get<double>();
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < ps.size(); ++i) {
        (pass == 0 ? s.m : s.v).push_back(get_array(br, ps.value(i).rows(), ps.value(i).cols()));
      }
    }
    out.optimizer = std::move(s);
  }
  if (br.remaining() != 0) br.fail("trailing bytes after payload");
  return out;
}

void save_checkpoint(const std::string& path, const FlowModel& model, const nlohmann::json& meta,
                     const AdamState* optimizer) {
  io::write_file_atomic(path, serialize_checkpoint(model, meta, optimizer));
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path)); }

}  // namespace huproso3
