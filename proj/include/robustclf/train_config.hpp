#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "robustclf/losses.hpp"
#include "robustclf/optim.hpp"

namespace robustclf {

struct Ablation {
  bool use_cvar = true;
  bool use_auc = true;
  bool use_sam = true;

  bool operator==(const Ablation&) const = default;
};

/// How the SAM second pass treats batchnorm statistics.
enum class SamBatchStats { kRecompute, kFreeze };

/// Every hyperparameter of a training run. Defaults follow the reference
/// protocol: batch 32, Adam at 1e-3 with cosine annealing, delta 0.05,
/// eta 0.6, p 2, alpha 0.8, gamma 0.5.
struct TrainConfig {
  double alpha = 0.8;
  double gamma = 0.5;
  double eta = 0.6;
  double p = 2.0;
  double delta = 0.05;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  Ablation ablation;
  double dropout_rate = 0.1;
  SamVariant sam_variant = SamVariant::kSign;
  SamBatchStats sam_batch_stats = SamBatchStats::kRecompute;
  std::size_t hidden = 1536;
  ScheduleKind schedule = ScheduleKind::kCosine;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double lambda_tol = 1e-12;
  int lambda_max_iter = 200;

  /// Throws InvalidArgument naming the offending key.
  void validate() const;

  /// alpha, or 1 when CVaR is disabled (plain mean BCE).
  double effective_alpha() const { return ablation.use_cvar ? alpha : 1.0; }
  /// gamma, or 1 when the AUC term is disabled.
  double effective_gamma() const { return ablation.use_auc ? gamma : 1.0; }
  CvarConfig cvar_config() const;
  AucConfig auc_config() const;
  SamConfig sam_config() const;

  /// Sets one key from its text form. Unknown keys and unparsable values
  /// throw InvalidArgument.
  void set(std::string_view key, std::string_view value);

  /// Flat "key=value" lines, one per key, values in round-trip form.
  std::string to_text() const;

  bool operator==(const TrainConfig&) const = default;
};

/// Applies "key=value" lines ('#' starts a comment) on top of `base`.
TrainConfig parse_config(std::string_view text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
void save_config(const TrainConfig& config, const std::filesystem::path& path);

}  // namespace robustclf
