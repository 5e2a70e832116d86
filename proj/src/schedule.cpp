#include "crackgen/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace crackgen {

namespace {

void fill_derived(std::vector<double>& beta, std::vector<double>& alpha, std::vector<double>& alpha_bar,
                  std::vector<double>& sigma, std::vector<double>& omega, LossWeighting weighting) {
  const size_t n = beta.size();
  alpha.resize(n);
  alpha_bar.resize(n);
  sigma.resize(n);
  omega.resize(n);
  double prod = 1.0;
  for (size_t t = 0; t < n; ++t) {
    alpha[t] = 1.0 - beta[t];
    prod *= alpha[t];
    alpha_bar[t] = prod;
    sigma[t] = std::sqrt(beta[t]);
    if (weighting == LossWeighting::ones || alpha_bar[t] >= 1.0)
      omega[t] = 1.0;
    else
      omega[t] = alpha_bar[t] / (1.0 - alpha_bar[t]);
  }
}

void validate_betas(const std::vector<double>& betas, bool test_mode) {
  if (betas.empty()) throw std::invalid_argument("schedule: T must be >= 1");
  for (size_t t = 0; t < betas.size(); ++t) {
    const double b = betas[t];
    const bool ok = test_mode ? (b >= 0.0 && b < 1.0) : (b > 0.0 && b < 1.0);
    if (!ok || !std::isfinite(b))
      throw std::invalid_argument("schedule: beta[" + std::to_string(t) + "] = " + std::to_string(b) +
                                  " outside (0,1)");
  }
}

}  // namespace

int NoiseSchedule::step_from_unit(double u) const {
  const int t = static_cast<int>(std::floor(u * steps()));
  return std::clamp(t, 0, steps() - 1);
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind,
                            bool test_mode, LossWeighting weighting) {
  if (steps < 1) throw std::invalid_argument("schedule: T must be >= 1, got " + std::to_string(steps));
  if (beta_start > beta_end) throw std::invalid_argument("schedule: beta_start > beta_end");
  if (kind != ScheduleKind::linear) throw std::invalid_argument("schedule: unsupported kind");
  NoiseSchedule s;
  s.beta_.resize(static_cast<size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
    s.beta_[static_cast<size_t>(t)] = beta_start + f * (beta_end - beta_start);
  }
  validate_betas(s.beta_, test_mode);
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  s.weighting_ = weighting;
  fill_derived(s.beta_, s.alpha_, s.alpha_bar_, s.sigma_, s.omega_, weighting);
  return s;
}

NoiseSchedule schedule_from_betas(std::vector<double> betas, bool test_mode) {
  validate_betas(betas, test_mode);
  NoiseSchedule s;
  s.beta_ = std::move(betas);
  s.beta_start_ = s.beta_.front();
  s.beta_end_ = s.beta_.back();
  fill_derived(s.beta_, s.alpha_, s.alpha_bar_, s.sigma_, s.omega_, LossWeighting::ones);
  return s;
}

NoiseSchedule full_schedule() { return make_schedule(1000, 1e-4, 0.02); }

NoiseSchedule fast_schedule(LossWeighting weighting) {
  return make_schedule(50, 1e-4 * 20.0, 0.02 * 20.0, ScheduleKind::linear, false, weighting);
}

std::string to_string(LossWeighting w) { return w == LossWeighting::ones ? "ones" : "snr"; }

LossWeighting parse_loss_weighting(const std::string& s) {
  if (s == "ones") return LossWeighting::ones;
  if (s == "snr") return LossWeighting::snr;
  throw std::invalid_argument("unknown loss weighting '" + s + "'");
}

}  // namespace crackgen
