#pragma once

#include "crackgen/autograd.hpp"
#include "crackgen/rng.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace crackgen {

/// Hex SHA-256 of a byte buffer.
std::string sha256_hex(const void* data, size_t size);
std::string sha256_hex(const std::string& bytes);

/// Named parameter arrays kept in sorted-name order so iteration, hashing and
/// serialization are deterministic.
template <typename Scalar>
class ParameterSet {
 public:
  using Mat = Matrix<Scalar>;

  Mat& add(const std::string& name, Mat value) {
    auto [it, inserted] = arrays_.insert_or_assign(name, std::move(value));
    return it->second;
  }

  bool contains(const std::string& name) const { return arrays_.count(name) != 0; }

  Mat& operator[](const std::string& name) {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  const Mat& operator[](const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  auto begin() { return arrays_.begin(); }
  auto end() { return arrays_.end(); }
  auto begin() const { return arrays_.begin(); }
  auto end() const { return arrays_.end(); }
  size_t count() const { return arrays_.size(); }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& [_, m] : arrays_) n += m.size();
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& [name, m] : arrays_) out.add(name, Mat::Zero(m.rows(), m.cols()));
    return out;
  }

  void set_zero() {
    for (auto& [_, m] : arrays_) m.setZero();
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& [name, m] : arrays_) out.add(name, m.template cast<Other>());
    return out;
  }

  bool all_finite() const {
    for (const auto& [_, m] : arrays_)
      if (!m.allFinite()) return false;
    return true;
  }

  bool operator==(const ParameterSet& o) const {
    if (arrays_.size() != o.arrays_.size()) return false;
    for (const auto& [name, m] : arrays_) {
      auto it = o.arrays_.find(name);
      if (it == o.arrays_.end()) return false;
      if (m.rows() != it->second.rows() || m.cols() != it->second.cols() || m != it->second) return false;
    }
    return true;
  }

  /// SHA-256 over names, shapes and raw bytes; equal hashes imply bit-equal sets.
  std::string hash() const {
    std::string buf;
    for (const auto& [name, m] : arrays_) {
      buf += name;
      buf.push_back('\0');
      const std::int64_t shape[2] = {m.rows(), m.cols()};
      buf.append(reinterpret_cast<const char*>(shape), sizeof(shape));
      buf.append(reinterpret_cast<const char*>(m.data()), sizeof(Scalar) * static_cast<size_t>(m.size()));
    }
    return sha256_hex(buf);
  }

 private:
  std::map<std::string, Mat> arrays_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
template <typename Scalar>
Matrix<Scalar> fan_in_uniform(Index rows, Index cols, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix<Scalar> m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
  return m;
}

/// Binds parameters of a set into a graph, routing gradients into an optional
/// gradient set with the same names. Names rejected by `trainable` are frozen.
template <typename Scalar>
class Binder {
 public:
  Binder(Graph<Scalar>& g, const ParameterSet<Scalar>& params, ParameterSet<Scalar>* grads = nullptr,
         std::function<bool(const std::string&)> trainable = {})
      : g_(g), params_(params), grads_(grads), trainable_(std::move(trainable)) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Matrix<Scalar>* sink = nullptr;
    if (grads_ && (!trainable_ || trainable_(name))) sink = &(*grads_)[name];
    Var v = g_.parameter(params_[name], sink);
    cache_.emplace(name, v);
    return v;
  }

  Graph<Scalar>& graph() { return g_; }

 private:
  Graph<Scalar>& g_;
  const ParameterSet<Scalar>& params_;
  ParameterSet<Scalar>* grads_;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, Var> cache_;
};

}  // namespace crackgen
