#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace robustclf {

class Rng;

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class Mode { kTrain, kEval };

/// Number of linear layers; the first two are followed by
/// batchnorm -> ReLU -> dropout, the last by a sigmoid.
inline constexpr int kNumLayers = 3;
inline constexpr int kNumHidden = 2;

/// Offsets of every trainable tensor inside the flat parameter vector.
/// Order: W1 b1 bn1.scale bn1.shift W2 b2 bn2.scale bn2.shift W3 b3.
/// Weights are stored row-major as (out x in).
struct ParamLayout {
  struct Section {
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 1;
    std::size_t size() const { return rows * cols; }
  };

  ParamLayout(std::size_t input_dim, std::size_t hidden);

  std::size_t input_dim;
  std::size_t hidden;
  std::array<Section, kNumLayers> weight;
  std::array<Section, kNumLayers> bias;
  std::array<Section, kNumHidden> bn_scale;
  std::array<Section, kNumHidden> bn_shift;
  std::size_t total = 0;
};

/// Flat gradient with the same layout as MlpModel::parameters().
using Gradients = std::vector<double>;

/// The three-layer classifier. Trainable parameters live in one contiguous
/// buffer so optimizers and perturbations act on a single span; the
/// accessors return Eigen views into it.
class MlpModel {
 public:
  static constexpr double kDefaultDropout = 0.1;
  static constexpr double kDefaultBnMomentum = 0.1;
  static constexpr double kDefaultBnEps = 1e-5;

  /// Zero-initialized model: all weights and biases 0, batchnorm scale 1,
  /// shift 0, running mean 0, running variance 1.
  MlpModel(std::size_t input_dim, std::size_t hidden = 1536, double dropout_rate = kDefaultDropout);

  /// Trainable parameter count for the given widths, batchnorm included.
  static std::size_t parameter_count(std::size_t input_dim, std::size_t hidden);

  /// Kaiming-uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases 0;
  /// batchnorm scale 1 and shift 0; running stats reset.
  void initialize(Rng& rng);

  std::size_t input_dim() const { return layout_.input_dim; }
  std::size_t hidden() const { return layout_.hidden; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t parameter_count() const { return params_.size(); }

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  Eigen::Map<Matrix> weight(int layer);
  Eigen::Map<const Matrix> weight(int layer) const;
  Eigen::Map<Vector> bias(int layer);
  Eigen::Map<const Vector> bias(int layer) const;
  Eigen::Map<Vector> bn_scale(int i);
  Eigen::Map<const Vector> bn_scale(int i) const;
  Eigen::Map<Vector> bn_shift(int i);
  Eigen::Map<const Vector> bn_shift(int i) const;

  Vector& running_mean(int i) { return running_mean_[i]; }
  const Vector& running_mean(int i) const { return running_mean_[i]; }
  Vector& running_var(int i) { return running_var_[i]; }
  const Vector& running_var(int i) const { return running_var_[i]; }

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }
  double dropout_rate() const { return dropout_rate_; }
  void set_dropout_rate(double rate);
  double bn_momentum() const { return bn_momentum_; }
  void set_bn_momentum(double momentum);
  double bn_eps() const { return bn_eps_; }
  void set_bn_eps(double eps);

  bool operator==(const MlpModel& other) const;

 private:
  ParamLayout layout_;
  std::vector<double> params_;
  std::array<Vector, kNumHidden> running_mean_;
  std::array<Vector, kNumHidden> running_var_;
  double dropout_rate_;
  double bn_momentum_ = kDefaultBnMomentum;
  double bn_eps_ = kDefaultBnEps;
  Mode mode_ = Mode::kTrain;
};

struct BatchNormStats {
  RowVector mean;
  RowVector var;
};

/// Caches of one hidden block: linear -> batchnorm -> ReLU -> dropout.
struct HiddenTrace {
  Matrix linear_out;
  Matrix normalized;
  Matrix activated;
  /// Dropout multipliers (0 or 1/(1-rate)); empty means no dropout.
  Matrix mask;
  Matrix output;
  BatchNormStats stats;
  /// True when `stats` were computed from this batch, so gradients flow
  /// through them. False for running or frozen statistics.
  bool stats_from_batch = false;
};

struct ForwardTrace {
  Mode mode = Mode::kEval;
  Matrix input;
  std::array<HiddenTrace, kNumHidden> hidden;
  Vector logits;
  Vector probabilities;
  std::size_t parameter_count = 0;
};

/// How a replayed train-mode pass treats batchnorm statistics.
enum class StatsPolicy {
  /// Recompute batch statistics at the current parameters.
  kRecompute,
  /// Reuse the reference pass's statistics as constants.
  kFreeze,
};

/// Forward pass in the model's current mode. Train mode samples fresh
/// dropout masks from `rng`, normalizes with batch statistics and updates the
/// running statistics; it needs at least two rows. Eval mode uses running
/// statistics and no dropout and does not touch `rng`.
ForwardTrace forward(MlpModel& model, const Matrix& batch, Rng& rng);

/// Eval-mode pass regardless of model.mode(). Read-only.
ForwardTrace forward_eval(const MlpModel& model, const Matrix& batch);

/// Train-mode pass that reuses the dropout masks of `reference` and never
/// updates running statistics.
ForwardTrace forward_replay(const MlpModel& model, const Matrix& batch, const ForwardTrace& reference,
                            StatsPolicy policy);

/// Gradient of a scalar loss w.r.t. every trainable parameter, given the
/// loss's derivative w.r.t. each output probability.
Gradients backward(const MlpModel& model, const ForwardTrace& trace, std::span<const double> dloss_dprob);

/// Same as backward() but starting from d(loss)/d(logit).
Gradients backward_from_logits(const MlpModel& model, const ForwardTrace& trace,
                               std::span<const double> dloss_dlogit);

/// backward_from_logits() writing into `out`, which is resized to the
/// parameter count and reuses its storage across calls.
void backward_from_logits_into(const MlpModel& model, const ForwardTrace& trace,
                               std::span<const double> dloss_dlogit, Gradients& out);

/// Eval-mode probability for a single feature vector.
double score(const MlpModel& model, std::span<const double> feature);

/// Eval-mode probabilities for every row, computed in fixed-size chunks.
std::vector<double> score_rows(const MlpModel& model, std::span<const double> rows_major, std::size_t dim);

/// Eval-mode logits for every row, chunked like score_rows.
std::vector<double> logit_rows(const MlpModel& model, std::span<const double> rows_major, std::size_t dim);

double sigmoid(double logit);

/// Copies the listed rows of a row-major buffer into a batch matrix.
Matrix gather_rows(std::span<const double> values, std::size_t dim, std::span<const std::size_t> rows);

void save_checkpoint(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_checkpoint(const std::filesystem::path& path);

}  // namespace robustclf
