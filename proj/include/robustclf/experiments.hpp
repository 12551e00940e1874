#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "robustclf/feature_bank.hpp"
#include "robustclf/losses.hpp"
#include "robustclf/net.hpp"
#include "robustclf/train_config.hpp"

namespace robustclf {

/// A training bank and a held-out bank the trainer never sees.
struct DataSplit {
  FeatureBank train;
  FeatureBank heldout;
};

/// Stratified split: each class is shuffled with `seed` and the first
/// round(fraction * class size) rows go to the held-out bank.
DataSplit split_bank(const FeatureBank& bank, double heldout_fraction, std::uint64_t seed);

/// Trains on split.train and returns the exact AUC on split.heldout.
double train_and_evaluate(const DataSplit& split, const TrainConfig& config);

/// Runs fn(0..count-1) on up to `jobs` threads. Results must be written to
/// per-index slots; the first exception is rethrown after all workers stop.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn);

struct AblationRow {
  std::string name;
  bool use_cvar = false;
  bool use_auc = false;
  bool use_sam = false;
  double gamma = 0.0;
  double auc = 0.0;
};

/// The five ablation variants, in order: V1 CVaR only, V2 AUC only
/// (gamma = 0), V3 CVaR + AUC, V4 CVaR + SAM, full.
std::vector<AblationRow> ablation_variants(const TrainConfig& base);

/// Trains every variant with the base seed on the same split.
std::vector<AblationRow> run_ablation(const DataSplit& split, const TrainConfig& base, std::size_t jobs = 1);

enum class SweepParameter { kAlpha, kGamma };

std::string_view parameter_name(SweepParameter parameter);

struct SweepRow {
  double value = 0.0;
  double auc = 0.0;
};

std::vector<SweepRow> run_sweep(const DataSplit& split, const TrainConfig& base, SweepParameter parameter,
                                std::span<const double> values, std::size_t jobs = 1);

struct TwoStageSweep {
  std::vector<SweepRow> alpha_rows;
  double best_alpha = 0.0;
  std::vector<SweepRow> gamma_rows;
  double best_gamma = 0.0;
};

/// Sweeps alpha with the base gamma, fixes the best alpha (first maximum),
/// then sweeps gamma.
TwoStageSweep run_two_stage_sweep(const DataSplit& split, const TrainConfig& base, std::span<const double> alphas,
                                  std::span<const double> gammas, std::size_t jobs = 1);

/// Writes "<parameter>,auc" CSV.
void write_sweep_csv(std::span<const SweepRow> rows, SweepParameter parameter, const std::filesystem::path& path);
void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path);

/// Parses "lo:hi:step" (inclusive, with a 1e-9 relative slack on hi) or a
/// comma-separated list.
std::vector<double> parse_value_list(std::string_view text);

/// Total loss of the model over the whole bank in eval mode, with lambda
/// fitted on the full bank and pairs formed across the full bank.
LossReport dataset_loss(const MlpModel& model, const FeatureBank& bank, const TrainConfig& config);

struct LandscapePoint {
  double a = 0.0;
  double b = 0.0;
  double loss = 0.0;
};

struct LandscapeSlice {
  std::size_t grid = 0;
  double radius = 0.0;
  double center_loss = 0.0;
  /// Row-major over (a index, b index).
  std::vector<LandscapePoint> points;
};

/// Two random parameter directions, filter-normalized: each row of every
/// weight matrix is rescaled to the norm of the matching row of the model's
/// weights; bias and batchnorm entries are left at zero.
std::pair<std::vector<double>, std::vector<double>> landscape_directions(const MlpModel& model, std::uint64_t seed);

/// dataset_loss at theta + a d1 + b d2 over a grid x grid lattice on
/// [-radius, radius]^2. Coordinates are radius * (2k - (grid - 1)) / (grid - 1),
/// so an odd grid contains (0, 0) exactly and the lattice is symmetric.
LandscapeSlice landscape_slice(const MlpModel& model, const FeatureBank& bank, const TrainConfig& config,
                               std::size_t grid, double radius, std::uint64_t seed);

void write_landscape_csv(const LandscapeSlice& slice, const std::filesystem::path& path);

}  // namespace robustclf
