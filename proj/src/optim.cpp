#include "robustclf/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "robustclf/error.hpp"

namespace robustclf {

std::vector<double> compute_epsilon(std::span<const double> gradients, const SamConfig& cfg) {
  std::vector<double> eps;
  compute_epsilon_into(gradients, cfg, eps);
  return eps;
}

void compute_epsilon_into(std::span<const double> gradients, const SamConfig& cfg, std::vector<double>& eps) {
  if (!(cfg.delta > 0.0) || !std::isfinite(cfg.delta)) throw InvalidArgument("SAM delta must be positive");
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    if (!std::isfinite(gradients[i])) {
      throw InvalidArgument("non-finite gradient component at index " + std::to_string(i));
    }
  }
  eps.assign(gradients.size(), 0.0);
  if (cfg.variant == SamVariant::kSign) {
    for (std::size_t i = 0; i < gradients.size(); ++i) {
      const double g = gradients[i];
      eps[i] = g > 0.0 ? cfg.delta : (g < 0.0 ? -cfg.delta : 0.0);
    }
    return;
  }
  // Scale first so squaring cannot overflow or underflow.
  double max_abs = 0.0;
  for (double g : gradients) max_abs = std::max(max_abs, std::abs(g));
  if (max_abs == 0.0) return;
  double sum_sq = 0.0;
  for (double g : gradients) sum_sq += (g / max_abs) * (g / max_abs);
  const double norm = max_abs * std::sqrt(sum_sq);
  for (std::size_t i = 0; i < gradients.size(); ++i) eps[i] = cfg.delta * gradients[i] / norm;
}

AdamState::AdamState(std::size_t n_params, double beta1_, double beta2_, double eps_)
    : first_moment(n_params, 0.0), second_moment(n_params, 0.0), beta1(beta1_), beta2(beta2_), eps_adam(eps_) {}

void adam_step(AdamState& state, std::span<double> params, std::span<const double> gradients, double lr) {
  if (params.size() != gradients.size() || params.size() != state.first_moment.size()) {
    throw InvalidArgument("adam_step: parameter, gradient and state sizes differ");
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bias1 = 1.0 - std::pow(state.beta1, t);
  const double bias2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = gradients[i];
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    const double m_hat = m / bias1;
    const double v_hat = v / bias2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps_adam);
  }
}

double lr_at(const LrSchedule& schedule, std::uint64_t step) {
  if (schedule.total_steps == 0) throw InvalidArgument("schedule needs at least one step");
  if (step > schedule.total_steps) {
    throw InvalidArgument("step " + std::to_string(step) + " beyond schedule length " +
                          std::to_string(schedule.total_steps));
  }
  if (schedule.kind == ScheduleKind::kConstant) return schedule.initial_lr;
  if (step == schedule.total_steps) return 0.0;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.initial_lr * (1.0 + std::cos(phase)) / 2.0;
}

}  // namespace robustclf
