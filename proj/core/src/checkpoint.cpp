#include "hessdiag/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json_util.hpp"

namespace hessdiag {

using detail::json;

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in, const std::string& where) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError(where + ": truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

json header_json(const Model& m) {
  json layout = json::array();
  for (const auto& e : m.layout().entries()) {
    layout.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"size", e.size}, {"group", e.group}});
  }
  json registry = json::array();
  for (const auto& [name, idx] : m.registry.groups()) registry.push_back({{"group", name}, {"indices", idx}});
  return {{"format", "hessdiag-checkpoint"},
          {"format_version", kCheckpointFormatVersion},
          {"config", detail::to_json(m.config)},
          {"layout", layout},
          {"registry", registry},
          {"param_count", m.params.size()}};
}

ModelConfig config_from(const json& j, const std::string& where) {
  detail::Fields f(j, "config", where);
  ModelConfig c;
  c.kind = parse_model_kind(f.string("kind"));
  c.vocab_size = f.int32("vocab_size");
  c.embed_dim = f.int32("embed_dim");
  c.heads = f.int32("heads");
  c.classes = f.int32("classes");
  c.seq_len = f.int32("seq_len");
  c.sents_per_doc = f.int32("sents_per_doc");
  c.words_per_sent = f.int32("words_per_sent");
  c.init_seed = f.seed("init_seed");
  f.finish();
  return c;
}

std::pair<json, std::uint64_t> read_header(std::istream& in, const std::string& where) {
  const std::string magic = kCheckpointMagic;
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
    throw IoError(where + ": not a checkpoint (bad magic)");
  }
  const std::uint64_t len = get_u64(in, where);
  if (len > (1u << 26)) throw IoError(where + ": checkpoint header too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError(where + ": truncated checkpoint header");
  json h;
  try {
    h = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(where + ": corrupt checkpoint header: " + e.what());
  }
  return {h, len};
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  if (model.config.kind == ModelKind::kEngineered) throw ConfigError("engineered models cannot be checkpointed");
  const std::string header = header_json(model).dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCheckpointMagic, static_cast<std::streamsize>(std::strlen(kCheckpointMagic)));
  put_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (double x : model.params) put_u64(out, std::bit_cast<std::uint64_t>(x));
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path.string());
  return read_header(in, path.string()).first.dump(2);
}

Model load_checkpoint(const std::filesystem::path& path) {
  const std::string where = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + where);
  const auto [h, len] = read_header(in, where);
  try {
    if (h.at("format") != "hessdiag-checkpoint" || h.at("format_version") != kCheckpointFormatVersion) {
      throw IoError(where + ": unsupported checkpoint format");
    }
    Model m = build_model(config_from(h.at("config"), where));
    const json expected = header_json(m);
    if (h.at("layout") != expected.at("layout")) throw ConfigError(where + ": parameter layout does not match the model");
    if (h.at("registry") != expected.at("registry")) {
      throw ConfigError(where + ": group registry does not match the model");
    }
    const auto n = h.at("param_count").get<std::uint64_t>();
    if (n != m.params.size()) throw IoError(where + ": parameter count mismatch");
    for (auto& x : m.params) x = std::bit_cast<double>(get_u64(in, where));
    if (in.peek() != std::char_traits<char>::eof()) throw IoError(where + ": trailing bytes after parameters");
    return m;
  } catch (const json::exception& e) {
    throw IoError(where + ": malformed checkpoint header: " + e.what());
  }
}

}  // namespace hessdiag
