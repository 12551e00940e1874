#include "robustclf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "io_util.hpp"
#include "robustclf/error.hpp"
#include "robustclf/net.hpp"

namespace robustclf {

namespace {

void check_classes(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw InvalidArgument("AUC needs at least one positive and one negative score");
  const auto is_nan = [](double s) { return std::isnan(s); };
  if (std::any_of(pos.begin(), pos.end(), is_nan) || std::any_of(neg.begin(), neg.end(), is_nan)) {
    throw InvalidArgument("AUC input contains NaN scores");
  }
}

struct Tagged {
  double score;
  bool positive;
};

std::vector<Tagged> merge_sorted_desc(std::span<const double> pos, std::span<const double> neg) {
  std::vector<Tagged> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.push_back({s, true});
  for (double s : neg) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) { return a.score > b.score; });
  return all;
}

}  // namespace

double exact_auc(std::span<const double> pos_scores, std::span<const double> neg_scores) {
  check_classes(pos_scores, neg_scores);
  const auto all = merge_sorted_desc(pos_scores, neg_scores);
  // Walk groups of equal score from low to high; every positive in a group
  // beats all negatives seen in lower groups and ties those in its own.
  std::uint64_t neg_below = 0;
  std::uint64_t twice_wins = 0;  // 2 * wins + ties
  std::size_t end = all.size();
  while (end > 0) {
    std::size_t start = end - 1;
    while (start > 0 && all[start - 1].score == all[end - 1].score) --start;
    std::uint64_t pos_here = 0;
    std::uint64_t neg_here = 0;
    for (std::size_t k = start; k < end; ++k) (all[k].positive ? pos_here : neg_here) += 1;
    twice_wins += pos_here * (2 * neg_below + neg_here);
    neg_below += neg_here;
    end = start;
  }
  const double pairs = static_cast<double>(pos_scores.size()) * static_cast<double>(neg_scores.size());
  return static_cast<double>(twice_wins) / (2.0 * pairs);
}

std::vector<RocPoint> roc_curve(std::span<const double> pos_scores, std::span<const double> neg_scores) {
  check_classes(pos_scores, neg_scores);
  const auto all = merge_sorted_desc(pos_scores, neg_scores);
  const double n_pos = static_cast<double>(pos_scores.size());
  const double n_neg = static_cast<double>(neg_scores.size());
  std::vector<RocPoint> points{{0.0, 0.0}};
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (std::size_t k = 0; k < all.size();) {
    const double threshold = all[k].score;
    for (; k < all.size() && all[k].score == threshold; ++k) (all[k].positive ? tp : fp) += 1;
    points.push_back({static_cast<double>(fp) / n_neg, static_cast<double>(tp) / n_pos});
  }
  return points;
}

double trapezoid_area(std::span<const RocPoint> points) {
  double area = 0.0;
  for (std::size_t k = 1; k < points.size(); ++k) {
    area += (points[k].fpr - points[k - 1].fpr) * (points[k].tpr + points[k - 1].tpr) / 2.0;
  }
  return area;
}

ScoreStats score_stats(std::span<const double> scores) {
  ScoreStats stats;
  if (scores.empty()) return stats;
  stats.min = *std::min_element(scores.begin(), scores.end());
  stats.max = *std::max_element(scores.begin(), scores.end());
  double sum = 0.0;
  for (double s : scores) {
    sum += s;
    const double clamped = std::clamp(s, 0.0, 1.0);
    auto bin = static_cast<std::size_t>(clamped * ScoreStats::kBins);
    stats.histogram[std::min(bin, ScoreStats::kBins - 1)] += 1;
  }
  stats.mean = sum / static_cast<double>(scores.size());
  return stats;
}

EvalReport evaluate_scores(std::span<const double> scores, std::span<const Label> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("scores and labels differ in length");
  std::vector<double> pos;
  std::vector<double> neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] == Label::kGenerated ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty()) throw InvalidArgument("evaluation needs both classes in the bank");
  EvalReport report;
  report.auc = exact_auc(pos, neg);
  report.roc_points = roc_curve(pos, neg);
  report.n_pos = pos.size();
  report.n_neg = neg.size();
  report.pos_stats = score_stats(pos);
  report.neg_stats = score_stats(neg);
  return report;
}

EvalReport evaluate(const MlpModel& model, const FeatureBank& bank) {
  if (bank.dim() != model.input_dim()) throw InvalidArgument("bank dimension does not match the model");
  const auto counts = class_counts(bank);
  if (counts.n_pos == 0 || counts.n_neg == 0) throw InvalidArgument("evaluation needs both classes in the bank");
  const std::vector<double> scores = score_rows(model, bank.values(), bank.dim());
  return evaluate_scores(scores, bank.labels());
}

void write_roc_csv(std::span<const RocPoint> points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "fpr,tpr\n";
  for (const auto& p : points) out << detail::format_double(p.fpr) << ',' << detail::format_double(p.tpr) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace robustclf
