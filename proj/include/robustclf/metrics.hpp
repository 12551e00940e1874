#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "robustclf/feature_bank.hpp"

namespace robustclf {

class MlpModel;

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct ScoreStats {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
  static constexpr std::size_t kBins = 20;
  /// Counts over [0, 1] in kBins equal-width bins; 1.0 falls in the last.
  std::array<std::size_t, kBins> histogram{};
};

struct EvalReport {
  double auc = 0.0;
  std::vector<RocPoint> roc_points;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  ScoreStats pos_stats;
  ScoreStats neg_stats;
};

/// Mann-Whitney AUC: P(s_pos > s_neg) + 0.5 P(s_pos = s_neg), from one sort.
/// Wins and ties are counted as integers, so the result is bit-identical to
/// pair enumeration.
double exact_auc(std::span<const double> pos_scores, std::span<const double> neg_scores);

/// ROC curve from (0,0) to (1,1), one point per distinct score threshold in
/// descending order.
std::vector<RocPoint> roc_curve(std::span<const double> pos_scores, std::span<const double> neg_scores);

double trapezoid_area(std::span<const RocPoint> points);

ScoreStats score_stats(std::span<const double> scores);

/// Scores every example in eval mode. Throws on a single-class bank.
EvalReport evaluate(const MlpModel& model, const FeatureBank& bank);

/// Same as evaluate() but from precomputed scores.
EvalReport evaluate_scores(std::span<const double> scores, std::span<const Label> labels);

/// Writes "fpr,tpr" CSV.
void write_roc_csv(std::span<const RocPoint> points, const std::filesystem::path& path);

}  // namespace robustclf
