#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace robustclf {

enum class SamVariant {
  /// delta * sign(g), componentwise; sign(0) = 0.
  kSign,
  /// delta * g / ||g||_2 over the whole flattened parameter vector.
  kL2Normalized,
};

struct SamConfig {
  double delta = 0.05;
  SamVariant variant = SamVariant::kSign;
};

/// Sharpness-aware perturbation for the given gradient.
std::vector<double> compute_epsilon(std::span<const double> gradients, const SamConfig& cfg);
void compute_epsilon_into(std::span<const double> gradients, const SamConfig& cfg, std::vector<double>& eps);

struct AdamState {
  explicit AdamState(std::size_t n_params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step_count = 0;
  double beta1;
  double beta2;
  double eps_adam;
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> gradients, double lr);

enum class ScheduleKind { kCosine, kConstant };

struct LrSchedule {
  double initial_lr = 1e-3;
  std::uint64_t total_steps = 1;
  ScheduleKind kind = ScheduleKind::kCosine;
};

/// initial_lr * (1 + cos(pi * step / total_steps)) / 2 for cosine.
double lr_at(const LrSchedule& schedule, std::uint64_t step);

}  // namespace robustclf
