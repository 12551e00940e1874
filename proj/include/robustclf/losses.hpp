#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "robustclf/feature_bank.hpp"

namespace robustclf {

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] before logs.
inline constexpr double kProbClamp = 1e-12;

struct LambdaSearch {
  /// Bisection stops once the bracket is narrower than this.
  double tol = 1e-12;
  int max_iter = 200;
};

struct CvarConfig {
  double alpha = 0.8;
  LambdaSearch search;
  void validate() const;
};

struct AucConfig {
  double eta = 0.6;
  double p = 2.0;
  void validate() const;
};

struct LossReport {
  double cvar_value = 0.0;
  double fitted_lambda = 0.0;
  double auc_value = 0.0;
  double total = 0.0;
  double gamma = 0.0;
  std::size_t n_pairs = 0;
};

/// Binary cross-entropy of a probability, clamped.
double bce_per_example(double prob, Label label);
/// Binary cross-entropy from a logit: softplus(z) - y*z, no clamping needed.
double bce_from_logit(double logit, Label label);

struct CvarFit {
  double lambda = 0.0;
  double value = 0.0;
};

/// Minimizes phi(lambda) = lambda + sum_i [l_i - lambda]_+ / (alpha n).
///
/// Bisects on the sign of the subgradient 1 - #{l_i > lambda}/(alpha n)
/// over [min l, max l]. phi is piecewise linear with kinks at the data, so
/// the surviving bracket is then snapped to the smallest data point where
/// the subgradient is non-negative; that is the lowest minimizer. With
/// alpha = 1 the value is reported as the plain mean.
CvarFit cvar_lambda_star(std::span<const double> losses, double alpha, const LambdaSearch& search = {});

struct CvarTerm {
  double value = 0.0;
  std::vector<double> dvalue_dloss;
};

/// phi(lambda) at a given (fixed) lambda with its gradient w.r.t. each loss.
///
/// Losses above lambda get weight 1/(alpha n). Losses exactly at lambda
/// share the leftover mass (alpha n - #{l_i > lambda}) / (alpha n), clipped
/// to [0, 1/(alpha n)] per element; at the fitted optimum this is the true
/// derivative of the minimum value wherever it is differentiable.
CvarTerm cvar_at_lambda(std::span<const double> losses, double alpha, double lambda);

/// Fits lambda* and returns the CVaR value with gradients (lambda* is held
/// fixed when differentiating).
CvarTerm cvar_loss_and_grad(std::span<const double> losses, double alpha, const LambdaSearch& search = {},
                            double* fitted_lambda = nullptr);

struct AucTerm {
  double value = 0.0;
  std::vector<double> dvalue_dpos;
  std::vector<double> dvalue_dneg;
};

/// Mean over positive/negative pairs of (eta - (s_i - s_j))^p when
/// s_i - s_j < eta, else 0. For p == 2 a sorted prefix-sum evaluation runs
/// in O((|P| + |N|) log |N|); other exponents enumerate the pairs.
AucTerm auc_surrogate(std::span<const double> pos_scores, std::span<const double> neg_scores, const AucConfig& cfg);

struct TotalLoss {
  LossReport report;
  /// d(total)/d(score); filled by total_loss only.
  std::vector<double> dtotal_dscore;
  /// d(total)/d(logit); filled by total_loss_from_logits only.
  std::vector<double> dtotal_dlogit;
  std::vector<double> per_example;
};

/// gamma * CVaR(BCE) + (1 - gamma) * AUC surrogate on probability scores.
/// A single-class batch contributes AUC = 0 with zero gradient and
/// n_pairs = 0. The AUC term is skipped entirely when gamma == 1.
TotalLoss total_loss(std::span<const double> scores, std::span<const Label> labels, double gamma,
                     const CvarConfig& cvar_cfg, const AucConfig& auc_cfg);

/// As total_loss, but BCE is computed stably from logits and gradients are
/// also returned w.r.t. the logits. When `fixed_lambda` is non-null the CVaR
/// term is evaluated at that lambda instead of being refitted.
TotalLoss total_loss_from_logits(std::span<const double> logits, std::span<const Label> labels, double gamma,
                                 const CvarConfig& cvar_cfg, const AucConfig& auc_cfg,
                                 const double* fixed_lambda = nullptr);

}  // namespace robustclf
