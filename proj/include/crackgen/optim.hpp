#pragma once

#include "crackgen/params.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace crackgen {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

/// First-order optimizer over a ParameterSet. Parameters absent from the
/// gradient set are left untouched.
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(const ParameterSet<Scalar>& params, OptimizerConfig cfg) : cfg_(cfg) {
    if (cfg_.kind == OptimizerKind::adam) {
      m_ = params.zeros_like();
      v_ = params.zeros_like();
    }
  }

  double learning_rate() const { return cfg_.learning_rate; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

  void step(ParameterSet<Scalar>& params, const ParameterSet<Scalar>& grads) {
    double factor = 1.0;
    if (cfg_.grad_clip > 0) {
      double sq = 0;
      for (const auto& [_, g] : grads) sq += static_cast<double>(g.squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) factor = cfg_.grad_clip / norm;
    }
    ++t_;
    const Scalar lr = static_cast<Scalar>(cfg_.learning_rate);
    for (const auto& [name, g] : grads) {
      auto& p = params[name];
      const Scalar f = static_cast<Scalar>(factor);
      if (cfg_.kind == OptimizerKind::sgd) {
        p.noalias() -= (lr * f) * g;
        continue;
      }
      auto& m = m_[name];
      auto& v = v_[name];
      const Scalar b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
      m = b1 * m + (Scalar(1) - b1) * (f * g);
      v = b2 * v + (Scalar(1) - b2) * (f * g).cwiseAbs2();
      const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg_.beta1, t_));
      const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg_.beta2, t_));
      const Scalar eps = static_cast<Scalar>(cfg_.epsilon);
      p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
  }

 private:
  OptimizerConfig cfg_;
  ParameterSet<Scalar> m_, v_;
  long t_ = 0;
};

/// Half-cosine decay from `base` at step 0 to 0 after `total` steps.
inline double cosine_learning_rate(double base, long step, long total) {
  if (total <= 0) return base;
  return 0.5 * base * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)));
}

}  // namespace crackgen
