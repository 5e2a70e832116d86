#pragma once

#include "crackgen/denoiser.hpp"
#include "crackgen/schedule.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace crackgen {

using Json = nlohmann::ordered_json;

/// Single-file container of named numeric arrays plus a JSON header.
///
/// Layout: 8-byte magic "CRKGCKPT", uint32 format version, uint64 header
/// length, UTF-8 JSON header, then the concatenated raw little-endian array
/// payloads in header order. Arrays keep their element type, so float and
/// double parameters round-trip bit-exactly.
class Checkpoint {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  Json meta = Json::object();

  template <typename Scalar>
  void put(const std::string& name, const Matrix<Scalar>& m) {
    static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
    Array a;
    a.dtype = std::is_same_v<Scalar, float> ? "f32" : "f64";
    a.rows = m.rows();
    a.cols = m.cols();
    a.bytes.assign(reinterpret_cast<const char*>(m.data()), sizeof(Scalar) * static_cast<size_t>(m.size()));
    arrays_[name] = std::move(a);
  }

  template <typename Scalar>
  Matrix<Scalar> get(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw std::out_of_range("checkpoint: no array '" + name + "'");
    const Array& a = it->second;
    const char* want = std::is_same_v<Scalar, float> ? "f32" : "f64";
    if (a.dtype != want) throw std::invalid_argument("checkpoint: array '" + name + "' is " + a.dtype);
    Matrix<Scalar> m(a.rows, a.cols);
    std::memcpy(m.data(), a.bytes.data(), a.bytes.size());
    return m;
  }

  template <typename Scalar>
  void put_params(const std::string& prefix, const ParameterSet<Scalar>& params) {
    for (const auto& [name, m] : params) put(prefix + name, m);
  }

  template <typename Scalar>
  ParameterSet<Scalar> get_params(const std::string& prefix) const {
    ParameterSet<Scalar> out;
    for (const auto& [name, _] : arrays_)
      if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), get<Scalar>(name));
    return out;
  }

  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  std::vector<std::string> names() const;

  std::string to_bytes() const;
  static Checkpoint from_bytes(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint& o) const { return meta == o.meta && arrays_ == o.arrays_; }

 private:
  struct Array {
    std::string dtype;
    Index rows = 0, cols = 0;
    std::string bytes;
    bool operator==(const Array&) const = default;
  };
  std::map<std::string, Array> arrays_;
};

Json to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const Json& j);
Json to_json(const NoiseSchedule& s);
NoiseSchedule schedule_from_json(const Json& j);

/// Denoiser + schedule + vocabulary in one container. `kind` tags the role
/// ("denoiser", "hypernetwork", ...).
Checkpoint denoiser_checkpoint(const Denoiser<float>& model, const NoiseSchedule& s,
                               const std::string& kind = "denoiser");

struct LoadedDenoiser {
  Denoiser<float> model;
  NoiseSchedule schedule;
  Json meta;
};

LoadedDenoiser denoiser_from_checkpoint(const Checkpoint& ck);

void save_denoiser(const Denoiser<float>& model, const NoiseSchedule& s, const std::filesystem::path& path);
LoadedDenoiser load_denoiser(const std::filesystem::path& path);

}  // namespace crackgen
