#include "kd/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "kd/errors.hpp"

namespace kd::train {

namespace {

using ordered_json = nlohmann::ordered_json;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

ordered_json config_json(const model::ModelConfig& c) {
  ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_layers"] = c.n_layers;
  j["ffn_multiplier"] = c.ffn_multiplier;
  j["norm_eps"] = c.norm_eps;
  j["seed"] = c.seed;
  return j;
}

template <class T>
T field(const ordered_json& obj, const char* name) {
  if (!obj.contains(name)) throw FormatError(std::string("checkpoint header: missing field 'model.") + name + "'");
  try {
    return obj.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("checkpoint header: field 'model.") + name + "' has the wrong type");
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const model::Weights& weights) {
  ordered_json header;
  header["model"] = config_json(weights.config());
  ordered_json tensors = ordered_json::array();
  for (const auto& p : weights.params()) {
    tensors.push_back({{"name", p.name}, {"shape", p.param.value.shape}});
  }
  header["tensors"] = std::move(tensors);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + weights.param_count() * 8);
  for (const auto& p : weights.params()) {
    for (double d : p.param.value.data) put_f64(out, d);
  }
  return out;
}

model::Weights deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic bytes (expected 'CBCK')");
  }
  if (bytes.size() < 12) throw FormatError("checkpoint: truncated before header length");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t header_len = get_u32(bytes.data() + 8);
  if (bytes.size() - 12 < header_len) throw FormatError("checkpoint: truncated header");
  const std::string text(bytes.begin() + 12, bytes.begin() + 12 + header_len);

  ordered_json header;
  try {
    header = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header: invalid JSON (") + e.what() + ")");
  }
  if (!header.is_object() || !header.contains("model") || !header["model"].is_object()) {
    throw FormatError("checkpoint header: missing field 'model'");
  }
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw FormatError("checkpoint header: missing field 'tensors'");
  }
  const ordered_json& m = header["model"];
  model::ModelConfig cfg;
  cfg.vocab_size = field<std::size_t>(m, "vocab_size");
  cfg.max_seq_len = field<std::size_t>(m, "max_seq_len");
  cfg.d_model = field<std::size_t>(m, "d_model");
  cfg.n_heads = field<std::size_t>(m, "n_heads");
  cfg.n_layers = field<std::size_t>(m, "n_layers");
  cfg.ffn_multiplier = field<std::size_t>(m, "ffn_multiplier");
  cfg.norm_eps = field<double>(m, "norm_eps");
  cfg.seed = field<std::uint64_t>(m, "seed");
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  const auto expected = model::parameter_shapes(cfg);
  const ordered_json& tensors = header["tensors"];
  if (tensors.size() != expected.size()) {
    throw FormatError("checkpoint header: 'tensors' lists " + std::to_string(tensors.size()) +
                      " entries, config implies " + std::to_string(expected.size()));
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& entry = tensors[i];
    const auto& [name, shape] = expected[i];
    if (!entry.is_object() || !entry.contains("name") || entry["name"] != name) {
      throw FormatError("checkpoint header: tensor " + std::to_string(i) + " should be '" + name + "'");
    }
    Shape got;
    try {
      got = entry.at("shape").get<Shape>();
    } catch (const nlohmann::json::exception&) {
      throw FormatError("checkpoint header: tensor '" + name + "' has no valid shape");
    }
    if (got != shape) {
      throw FormatError("checkpoint header: tensor '" + name + "' has shape " + shape_str(got) +
                        ", expected " + shape_str(shape));
    }
    total += shape_numel(shape);
  }
  const std::size_t payload = bytes.size() - 12 - header_len;
  if (payload != total * 8) {
    throw FormatError("checkpoint payload: expected " + std::to_string(total * 8) + " bytes, found " +
                      std::to_string(payload) + (payload < total * 8 ? " (truncated)" : " (trailing data)"));
  }
  model::Weights w(cfg);
  const std::uint8_t* p = bytes.data() + 12 + header_len;
  for (auto& np : w.params()) {
    for (double& d : np.param.value.data) {
      d = get_f64(p);
      p += 8;
      if (!std::isfinite(d)) throw FormatError("checkpoint payload: non-finite value in '" + np.name + "'");
    }
  }
  return w;
}

void save_checkpoint(const model::Weights& weights, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(weights);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

model::Weights load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace kd::train
