#include "anon/checkpoint.hpp"

#include "json_io.hpp"

#include <cstring>
#include <fstream>

namespace anon {

namespace fs = std::filesystem;

namespace {

json adapter_config_json(const AdapterConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"depth", c.depth},
          {"heads", c.heads},
          {"feature_dim", c.feature_dim},
          {"ffn_multiplier", c.ffn_multiplier},
          {"dropout_rate", c.dropout_rate},
          {"attention_dropout_rate", c.attention_dropout_rate},
          {"seed", std::to_string(c.seed)}};
}

AdapterConfig adapter_config_from(const json& j) {
  AdapterConfig c;
  c.variant = adapter_variant_from_string(j.at("variant").get<std::string>());
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.ffn_multiplier = j.at("ffn_multiplier").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.attention_dropout_rate = j.at("attention_dropout_rate").get<double>();
  c.seed = std::stoull(j.at("seed").get<std::string>());
  return c;
}

json head_config_json(const HeadConfig& c) {
  return {{"kind", to_string(c.kind)},     {"input_dim", c.input_dim},       {"num_outputs", c.num_outputs},
          {"hidden", c.hidden},            {"kernel", c.kernel},             {"linear_probe", c.linear_probe},
          {"seed", std::to_string(c.seed)}};
}

HeadConfig head_config_from(const json& j) {
  HeadConfig c;
  c.kind = head_kind_from_string(j.at("kind").get<std::string>());
  c.input_dim = j.at("input_dim").get<int>();
  c.num_outputs = j.at("num_outputs").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.linear_probe = j.at("linear_probe").get<bool>();
  c.seed = std::stoull(j.at("seed").get<std::string>());
  return c;
}

void write_tensors(const fs::path& dir, const std::string& name, json meta,
                   const std::vector<const ParameterSet<float>*>& sets) {
  std::string bytes;
  json table = json::array();
  for (const auto* set : sets)
    for (const auto& p : *set) {
      table.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
      const auto* raw = reinterpret_cast<const char*>(p.value.data());
      bytes.append(raw, static_cast<std::size_t>(p.value.size()) * sizeof(float));
    }
  meta["tensors"] = table;
  meta["element"] = "float32-le";
  Fnv1a h;
  h.update(bytes);
  meta["payload_digest"] = h.hex();
  write_text_file(dir / (name + ".bin"), bytes);
  write_json_file(dir / (name + ".json"), meta);
}

// Fills every parameter of `sets` (in order) from the payload.
void read_tensors(const fs::path& dir, const std::string& name, const json& meta,
                  const std::vector<ParameterSet<float>*>& sets) {
  std::ifstream in(dir / (name + ".bin"), std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / (name + ".bin")).string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Fnv1a h;
  h.update(bytes);
  if (h.hex() != meta.at("payload_digest").get<std::string>())
    throw IoError("checkpoint " + name + " payload does not match its digest");
  const auto& table = meta.at("tensors");
  std::size_t i = 0, offset = 0;
  for (auto* set : sets)
    for (auto& p : *set) {
      if (i >= table.size()) throw IoError("checkpoint " + name + " has too few tensors");
      const auto& t = table[i++];
      if (t.at("name").get<std::string>() != p.name || t.at("rows").get<Eigen::Index>() != p.value.rows() ||
          t.at("cols").get<Eigen::Index>() != p.value.cols())
        throw IoError("checkpoint " + name + " tensor " + t.at("name").get<std::string>() + " does not match " + p.name);
      const std::size_t n = static_cast<std::size_t>(p.value.size()) * sizeof(float);
      if (offset + n > bytes.size()) throw IoError("checkpoint " + name + " payload is truncated");
      std::memcpy(p.value.data(), bytes.data() + offset, n);
      offset += n;
    }
  if (i != table.size() || offset != bytes.size()) throw IoError("checkpoint " + name + " has extra tensors");
}

json read_meta(const fs::path& dir, const std::string& name, const char* kind) {
  const auto path = dir / (name + ".json");
  if (!fs::exists(path)) throw IoError("missing checkpoint " + path.string());
  json meta = read_json_file(path);
  if (meta.value("kind", "") != kind) throw IoError(path.string() + " is not a " + std::string(kind) + " checkpoint");
  return meta;
}

}  // namespace

void save_adapter(const fs::path& dir, const Adapter<float>& adapter, const std::string& name) {
  json meta = {{"kind", "adapter"}, {"config", adapter_config_json(adapter.config())}, {"steps", adapter.steps()}};
  write_tensors(dir, name, std::move(meta), {&adapter.params(), &adapter.buffers()});
}

Adapter<float> load_adapter(const fs::path& dir, const std::string& name) {
  const json meta = read_meta(dir, name, "adapter");
  Adapter<float> a(adapter_config_from(meta.at("config")));
  read_tensors(dir, name, meta, {&a.params(), &a.buffers()});
  a.set_steps(meta.at("steps").get<long>());
  return a;
}

void save_head(const fs::path& dir, const Head<float>& head, const std::string& name) {
  json meta = {{"kind", "head"}, {"config", head_config_json(head.config())}};
  write_tensors(dir, name, std::move(meta), {&head.params()});
}

Head<float> load_head(const fs::path& dir, const std::string& name) {
  const json meta = read_meta(dir, name, "head");
  Head<float> h(head_config_from(meta.at("config")));
  read_tensors(dir, name, meta, {&h.params()});
  return h;
}

bool checkpoint_exists(const fs::path& dir, const std::string& name) {
  return fs::exists(dir / (name + ".json")) && fs::exists(dir / (name + ".bin"));
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Fnv1a h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

}  // namespace anon
