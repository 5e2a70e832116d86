#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace crackgen {

enum class ScheduleKind { linear };

/// Per-step loss weighting policy for omega.
enum class LossWeighting { ones, snr };

/// Every per-timestep diffusion constant in one immutable table.
/// Index t runs over [0, T); t = 0 is the least noisy step.
class NoiseSchedule {
 public:
  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(static_cast<size_t>(t)); }
  double alpha(int t) const { return alpha_.at(static_cast<size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<size_t>(t)); }
  double sigma(int t) const { return sigma_.at(static_cast<size_t>(t)); }
  double omega(int t) const { return omega_.at(static_cast<size_t>(t)); }

  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alphas() const { return alpha_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }
  const std::vector<double>& sigmas() const { return sigma_; }
  const std::vector<double>& omegas() const { return omega_; }

  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  LossWeighting weighting() const { return weighting_; }

  /// Maps a continuous time in [0,1] to a step index via floor(u * T).
  int step_from_unit(double u) const;

  bool operator==(const NoiseSchedule&) const = default;

  friend NoiseSchedule make_schedule(int, double, double, ScheduleKind, bool, LossWeighting);
  friend NoiseSchedule schedule_from_betas(std::vector<double>, bool);

 private:
  std::vector<double> beta_, alpha_, alpha_bar_, sigma_, omega_;
  double beta_start_ = 0, beta_end_ = 0;
  LossWeighting weighting_ = LossWeighting::ones;
};

/// Linear beta schedule. `test_mode` admits beta == 0 (identity chain).
/// sigma_t^2 = beta_t; omega_t = 1 (or the SNR weight alpha_bar/(1-alpha_bar)).
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end,
                            ScheduleKind kind = ScheduleKind::linear, bool test_mode = false,
                            LossWeighting weighting = LossWeighting::ones);

/// Schedule from an explicit beta vector (used for degenerate test cases).
NoiseSchedule schedule_from_betas(std::vector<double> betas, bool test_mode = false);

/// T = 1000, beta 1e-4 -> 0.02.
NoiseSchedule full_schedule();

/// T = 50 with the standard endpoints scaled by 1000/50 so the chain still
/// reaches (near) isotropic noise.
NoiseSchedule fast_schedule(LossWeighting weighting = LossWeighting::ones);

std::string to_string(LossWeighting w);
LossWeighting parse_loss_weighting(const std::string& s);

}  // namespace crackgen
