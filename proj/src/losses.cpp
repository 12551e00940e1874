#include "robustclf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "robustclf/error.hpp"
#include "robustclf/net.hpp"

namespace robustclf {

namespace {

void check_losses(std::span<const double> losses, double alpha) {
  if (losses.empty()) throw InvalidArgument("CVaR of an empty loss vector");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("CVaR alpha must lie in (0, 1]");
  for (double l : losses) {
    if (!std::isfinite(l)) throw InvalidArgument("CVaR input contains a non-finite loss");
  }
}

std::size_t count_above(std::span<const double> losses, double lambda) {
  return static_cast<std::size_t>(std::count_if(losses.begin(), losses.end(), [lambda](double l) { return l > lambda; }));
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

void check_batch(std::span<const double> scores, std::span<const Label> labels, double gamma) {
  if (scores.size() != labels.size()) throw InvalidArgument("scores and labels differ in length");
  if (scores.empty()) throw InvalidArgument("empty batch");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("gamma must lie in [0, 1]");
}

struct Split {
  std::vector<double> pos;
  std::vector<double> neg;
  std::vector<std::size_t> pos_index;
  std::vector<std::size_t> neg_index;
};

Split split_by_label(std::span<const double> scores, std::span<const Label> labels) {
  Split s;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == Label::kGenerated) {
      s.pos.push_back(scores[i]);
      s.pos_index.push_back(i);
    } else {
      s.neg.push_back(scores[i]);
      s.neg_index.push_back(i);
    }
  }
  return s;
}

// Shared tail of total_loss / total_loss_from_logits: fills the report and
// returns d(total)/d(score) for the AUC part (already scaled by 1 - gamma).
std::vector<double> auc_part(std::span<const double> scores, std::span<const Label> labels, double gamma,
                             const AucConfig& auc_cfg, LossReport& report) {
  std::vector<double> grad(scores.size(), 0.0);
  const Split split = split_by_label(scores, labels);
  if (split.pos.empty() || split.neg.empty()) {
    report.auc_value = 0.0;
    report.n_pairs = 0;
    return grad;
  }
  const AucTerm auc = auc_surrogate(split.pos, split.neg, auc_cfg);
  report.auc_value = auc.value;
  report.n_pairs = split.pos.size() * split.neg.size();
  const double w = 1.0 - gamma;
  for (std::size_t k = 0; k < split.pos.size(); ++k) grad[split.pos_index[k]] = w * auc.dvalue_dpos[k];
  for (std::size_t k = 0; k < split.neg.size(); ++k) grad[split.neg_index[k]] = w * auc.dvalue_dneg[k];
  return grad;
}

}  // namespace

void CvarConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in (0, 1]");
  if (!(search.tol > 0.0)) throw InvalidArgument("lambda search tolerance must be positive");
  if (search.max_iter < 0) throw InvalidArgument("lambda search max_iter must be >= 0");
}

void AucConfig::validate() const {
  if (!(eta > 0.0 && eta <= 1.0)) throw InvalidArgument("eta must lie in (0, 1]");
  if (!(p > 1.0) || !std::isfinite(p)) throw InvalidArgument("p must be > 1");
}

double bce_per_example(double prob, Label label) {
  const double p = clamp_prob(prob);
  return label == Label::kGenerated ? -std::log(p) : -std::log1p(-p);
}

double bce_from_logit(double logit, Label label) {
  const double y = label == Label::kGenerated ? 1.0 : 0.0;
  return std::max(logit, 0.0) - y * logit + std::log1p(std::exp(-std::abs(logit)));
}

CvarFit cvar_lambda_star(std::span<const double> losses, double alpha, const LambdaSearch& search) {
  check_losses(losses, alpha);
  const double alpha_n = alpha * static_cast<double>(losses.size());
  const auto [min_it, max_it] = std::minmax_element(losses.begin(), losses.end());
  double lo = *min_it;
  double hi = *max_it;

  CvarFit fit;
  if (static_cast<double>(count_above(losses, lo)) <= alpha_n) {
    fit.lambda = lo;
  } else {
    // Invariant: subgradient < 0 at lo, >= 0 at hi.
    for (int iter = 0; iter < search.max_iter && hi - lo >= search.tol; ++iter) {
      const double mid = lo + 0.5 * (hi - lo);
      if (mid <= lo || mid >= hi) break;
      if (static_cast<double>(count_above(losses, mid)) <= alpha_n) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    // The subgradient only changes at data points, so the lowest minimizer
    // is a data point in (lo, hi].
    std::vector<double> candidates;
    for (double l : losses) {
      if (l > lo && l <= hi) candidates.push_back(l);
    }
    std::sort(candidates.begin(), candidates.end());
    fit.lambda = hi;
    for (double c : candidates) {
      if (static_cast<double>(count_above(losses, c)) <= alpha_n) {
        fit.lambda = c;
        break;
      }
    }
  }
  fit.value = cvar_at_lambda(losses, alpha, fit.lambda).value;
  return fit;
}

CvarTerm cvar_at_lambda(std::span<const double> losses, double alpha, double lambda) {
  check_losses(losses, alpha);
  const auto n = losses.size();
  const double alpha_n = alpha * static_cast<double>(n);
  const double above_weight = 1.0 / alpha_n;

  std::size_t above = 0;
  std::size_t ties = 0;
  double excess = 0.0;
  double sum = 0.0;
  for (double l : losses) {
    sum += l;
    if (l > lambda) {
      ++above;
      excess += l - lambda;
    } else if (l == lambda) {
      ++ties;
    }
  }

  CvarTerm term;
  const bool plain_mean = alpha == 1.0 && above + ties == n;
  term.value = plain_mean ? sum / static_cast<double>(n) : lambda + excess / alpha_n;

  double tie_weight = 0.0;
  if (ties > 0) {
    tie_weight = (alpha_n - static_cast<double>(above)) / (alpha_n * static_cast<double>(ties));
    tie_weight = std::clamp(tie_weight, 0.0, above_weight);
  }
  term.dvalue_dloss.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double l = losses[i];
    term.dvalue_dloss[i] = l > lambda ? above_weight : (l == lambda ? tie_weight : 0.0);
  }
  return term;
}

CvarTerm cvar_loss_and_grad(std::span<const double> losses, double alpha, const LambdaSearch& search,
                            double* fitted_lambda) {
  const CvarFit fit = cvar_lambda_star(losses, alpha, search);
  if (fitted_lambda != nullptr) *fitted_lambda = fit.lambda;
  return cvar_at_lambda(losses, alpha, fit.lambda);
}

AucTerm auc_surrogate(std::span<const double> pos_scores, std::span<const double> neg_scores, const AucConfig& cfg) {
  cfg.validate();
  if (pos_scores.empty() || neg_scores.empty()) {
    throw InvalidArgument("AUC surrogate needs at least one positive and one negative score");
  }
  const std::size_t n_pos = pos_scores.size();
  const std::size_t n_neg = neg_scores.size();
  const double eta = cfg.eta;
  const double norm = 1.0 / (static_cast<double>(n_pos) * static_cast<double>(n_neg));

  AucTerm out;
  out.dvalue_dpos.assign(n_pos, 0.0);
  out.dvalue_dneg.assign(n_neg, 0.0);

  if (cfg.p != 2.0) {
    const double p = cfg.p;
    double total = 0.0;
    for (std::size_t i = 0; i < n_pos; ++i) {
      for (std::size_t j = 0; j < n_neg; ++j) {
        const double diff = pos_scores[i] - neg_scores[j];
        if (diff < eta) {
          const double gap = eta - diff;
          const double slope = p * std::pow(gap, p - 1.0);
          total += std::pow(gap, p);
          out.dvalue_dpos[i] -= slope;
          out.dvalue_dneg[j] += slope;
        }
      }
    }
    out.value = total * norm;
    for (double& g : out.dvalue_dpos) g *= norm;
    for (double& g : out.dvalue_dneg) g *= norm;
    return out;
  }

  // p == 2: sum_j (eta - s_i + s_j)^2 over the active negatives expands into
  // count, sum and sum of squares, which prefix sums over sorted scores give
  // directly. Activity is decided with the same predicate as the pair
  // definition (s_i - s_j < eta), which is monotone in each sorted argument.
  auto sorted_with_prefix = [](std::span<const double> scores) {
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> s1(sorted.size() + 1, 0.0);
    std::vector<double> s2(sorted.size() + 1, 0.0);
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      s1[k + 1] = s1[k] + sorted[k];
      s2[k + 1] = s2[k] + sorted[k] * sorted[k];
    }
    return std::tuple(std::move(sorted), std::move(s1), std::move(s2));
  };
  const auto [neg_sorted, neg_s1, neg_s2] = sorted_with_prefix(neg_scores);
  const auto [pos_sorted, pos_s1, pos_s2] = sorted_with_prefix(pos_scores);

  double total = 0.0;
  for (std::size_t i = 0; i < n_pos; ++i) {
    const double s_i = pos_scores[i];
    const auto first = std::partition_point(neg_sorted.begin(), neg_sorted.end(),
                                            [&](double s_j) { return !(s_i - s_j < eta); });
    const auto k = static_cast<std::size_t>(first - neg_sorted.begin());
    const double m = static_cast<double>(n_neg - k);
    if (m == 0.0) continue;
    const double sum1 = neg_s1[n_neg] - neg_s1[k];
    const double sum2 = neg_s2[n_neg] - neg_s2[k];
    const double a = eta - s_i;
    total += std::max(0.0, m * a * a + 2.0 * a * sum1 + sum2);
    out.dvalue_dpos[i] = -2.0 * (m * a + sum1) * norm;
  }
  for (std::size_t j = 0; j < n_neg; ++j) {
    const double s_j = neg_scores[j];
    const auto end = std::partition_point(pos_sorted.begin(), pos_sorted.end(),
                                          [&](double s_i) { return s_i - s_j < eta; });
    const auto k = static_cast<std::size_t>(end - pos_sorted.begin());
    if (k == 0) continue;
    out.dvalue_dneg[j] = 2.0 * (static_cast<double>(k) * (eta + s_j) - pos_s1[k]) * norm;
  }
  out.value = total * norm;
  return out;
}

TotalLoss total_loss(std::span<const double> scores, std::span<const Label> labels, double gamma,
                     const CvarConfig& cvar_cfg, const AucConfig& auc_cfg) {
  check_batch(scores, labels, gamma);
  cvar_cfg.validate();
  auc_cfg.validate();

  TotalLoss out;
  out.per_example.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out.per_example[i] = bce_per_example(scores[i], labels[i]);

  LossReport& report = out.report;
  report.gamma = gamma;
  const CvarTerm cvar = cvar_loss_and_grad(out.per_example, cvar_cfg.alpha, cvar_cfg.search, &report.fitted_lambda);
  report.cvar_value = cvar.value;
  out.dtotal_dscore = auc_part(scores, labels, gamma, auc_cfg, report);
  report.total = gamma * report.cvar_value + (1.0 - gamma) * report.auc_value;

  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    double dloss_ds = 0.0;
    if (s > kProbClamp && s < 1.0 - kProbClamp) {
      dloss_ds = labels[i] == Label::kGenerated ? -1.0 / s : 1.0 / (1.0 - s);
    }
    out.dtotal_dscore[i] += gamma * cvar.dvalue_dloss[i] * dloss_ds;
  }
  return out;
}

TotalLoss total_loss_from_logits(std::span<const double> logits, std::span<const Label> labels, double gamma,
                                 const CvarConfig& cvar_cfg, const AucConfig& auc_cfg, const double* fixed_lambda) {
  check_batch(logits, labels, gamma);
  cvar_cfg.validate();
  auc_cfg.validate();

  const std::size_t n = logits.size();
  std::vector<double> probs(n);
  TotalLoss out;
  out.per_example.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    probs[i] = sigmoid(logits[i]);
    out.per_example[i] = bce_from_logit(logits[i], labels[i]);
  }

  LossReport& report = out.report;
  report.gamma = gamma;
  CvarTerm cvar;
  if (fixed_lambda != nullptr) {
    report.fitted_lambda = *fixed_lambda;
    cvar = cvar_at_lambda(out.per_example, cvar_cfg.alpha, *fixed_lambda);
  } else {
    cvar = cvar_loss_and_grad(out.per_example, cvar_cfg.alpha, cvar_cfg.search, &report.fitted_lambda);
  }
  report.cvar_value = cvar.value;
  std::vector<double> auc_grad = auc_part(probs, labels, gamma, auc_cfg, report);
  report.total = gamma * report.cvar_value + (1.0 - gamma) * report.auc_value;

  out.dtotal_dlogit.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = labels[i] == Label::kGenerated ? 1.0 : 0.0;
    const double p = probs[i];
    out.dtotal_dlogit[i] = gamma * cvar.dvalue_dloss[i] * (p - y) + auc_grad[i] * (p * (1.0 - p));
  }
  return out;
}

}  // namespace robustclf
