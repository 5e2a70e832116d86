#include "crackgen/checkpoint.hpp"

#include <fstream>
#include <sstream>

namespace crackgen {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'K', 'G', 'C', 'K', 'P', 'T'};

template <typename T>
void append_pod(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : arrays_) out.push_back(name);
  return out;
}

std::string Checkpoint::to_bytes() const {
  Json header;
  header["format_version"] = kFormatVersion;
  header["meta"] = meta;
  Json arrays = Json::array();
  size_t offset = 0;
  for (const auto& [name, a] : arrays_) {
    arrays.push_back(Json{{"name", name}, {"dtype", a.dtype}, {"rows", a.rows}, {"cols", a.cols},
                          {"offset", offset}, {"nbytes", a.bytes.size()}});
    offset += a.bytes.size();
  }
  header["arrays"] = std::move(arrays);
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  append_pod<std::uint32_t>(out, kFormatVersion);
  append_pod<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [_, a] : arrays_) out += a.bytes;
  return out;
}

Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  size_t pos = sizeof(kMagic);
  const auto version = read_pod<std::uint32_t>(bytes, pos);
  if (version != kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  const auto header_len = read_pod<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw std::runtime_error("checkpoint: truncated header");
  const Json header = Json::parse(bytes.substr(pos, header_len));
  pos += header_len;
  Checkpoint ck;
  ck.meta = header.at("meta");
  for (const auto& a : header.at("arrays")) {
    Array arr;
    arr.dtype = a.at("dtype").get<std::string>();
    arr.rows = a.at("rows").get<Index>();
    arr.cols = a.at("cols").get<Index>();
    const auto off = a.at("offset").get<size_t>();
    const auto n = a.at("nbytes").get<size_t>();
    const size_t elem = arr.dtype == "f32" ? 4 : 8;
    if (n != elem * static_cast<size_t>(arr.rows * arr.cols) || pos + off + n > bytes.size())
      throw std::runtime_error("checkpoint: inconsistent array '" + a.at("name").get<std::string>() + "'");
    arr.bytes = bytes.substr(pos + off, n);
    ck.arrays_[a.at("name").get<std::string>()] = std::move(arr);
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path.string());
  const std::string b = to_bytes();
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_bytes(ss.str());
}

Json to_json(const DenoiserConfig& cfg) {
  return Json{{"in_channels", cfg.in_channels}, {"base_channels", cfg.base_channels},
              {"mid_channels", cfg.mid_channels}, {"time_dim", cfg.time_dim}, {"embed_dim", cfg.embed_dim}};
}

DenoiserConfig denoiser_config_from_json(const Json& j) {
  DenoiserConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.mid_channels = j.at("mid_channels").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  return c;
}

Json to_json(const NoiseSchedule& s) {
  return Json{{"kind", "linear"}, {"steps", s.steps()}, {"beta_start", s.beta_start()},
              {"beta_end", s.beta_end()}, {"weighting", to_string(s.weighting())}};
}

NoiseSchedule schedule_from_json(const Json& j) {
  if (j.at("kind").get<std::string>() != "linear") throw std::invalid_argument("schedule: unknown kind");
  return make_schedule(j.at("steps").get<int>(), j.at("beta_start").get<double>(),
                       j.at("beta_end").get<double>(), ScheduleKind::linear, false,
                       parse_loss_weighting(j.at("weighting").get<std::string>()));
}

Checkpoint denoiser_checkpoint(const Denoiser<float>& model, const NoiseSchedule& s, const std::string& kind) {
  Checkpoint ck;
  ck.meta["kind"] = kind;
  ck.meta["arch_config"] = to_json(model.config());
  ck.meta["schedule"] = to_json(s);
  ck.meta["vocabulary"] = Json{{"embedding_dim", model.vocab().embedding_dim()}, {"tokens", model.vocab().tokens()}};
  ck.meta["model_hash"] = model.hash();
  ck.put_params("model.", model.params());
  return ck;
}

LoadedDenoiser denoiser_from_checkpoint(const Checkpoint& ck) {
  const Json& m = ck.meta;
  Vocabulary vocab(m.at("vocabulary").at("tokens").get<std::vector<std::string>>(),
                   m.at("vocabulary").at("embedding_dim").get<int>());
  auto model = Denoiser<float>::from_parts(denoiser_config_from_json(m.at("arch_config")), std::move(vocab),
                                           ck.get_params<float>("model."));
  if (m.contains("model_hash") && m.at("model_hash").get<std::string>() != model.hash())
    throw std::runtime_error("checkpoint: model hash mismatch (corrupted file?)");
  return LoadedDenoiser{std::move(model), schedule_from_json(m.at("schedule")), m};
}

void save_denoiser(const Denoiser<float>& model, const NoiseSchedule& s, const std::filesystem::path& path) {
  denoiser_checkpoint(model, s).save(path);
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
  return denoiser_from_checkpoint(Checkpoint::load(path));
}

}  // namespace crackgen
