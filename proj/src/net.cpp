#include "robustclf/net.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "io_util.hpp"
#include "robustclf/error.hpp"
#include "robustclf/rng.hpp"

namespace robustclf {

namespace {

constexpr std::array<char, 6> kCheckpointMagic = {'M', 'L', 'P', 'C', '\x00', '\x01'};
constexpr std::size_t kScoreChunk = 1024;

void check_layer(int layer, int count) {
  if (layer < 0 || layer >= count) throw InvalidArgument("layer index out of range");
}

void check_batch(const MlpModel& model, const Matrix& batch) {
  if (static_cast<std::size_t>(batch.cols()) != model.input_dim()) {
    throw InvalidArgument("batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                          std::to_string(model.input_dim()));
  }
  if (batch.rows() == 0) throw InvalidArgument("empty batch");
}

BatchNormStats batch_stats(const Matrix& z) {
  BatchNormStats s;
  s.mean = z.colwise().mean();
  s.var = (z.rowwise() - s.mean).array().square().colwise().mean().matrix();
  return s;
}

Matrix sample_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  if (rate == 0.0) return {};
  Matrix mask(rows, cols);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) mask(i, j) = rng.uniform() < rate ? 0.0 : keep_scale;
  }
  return mask;
}

enum class StatsSource { kBatch, kRunning, kGiven };

struct PassControl {
  StatsSource stats = StatsSource::kBatch;
  Rng* rng = nullptr;                        // sample fresh masks
  const ForwardTrace* reference = nullptr;   // reuse masks (and stats if kGiven)
};

ForwardTrace run_forward(const MlpModel& model, const Matrix& batch, Mode mode, const PassControl& ctl) {
  check_batch(model, batch);
  if (mode == Mode::kTrain && batch.rows() < 2) {
    throw InvalidArgument("train-mode batchnorm needs at least 2 rows");
  }
  ForwardTrace trace;
  trace.mode = mode;
  trace.input = batch;
  trace.parameter_count = model.parameter_count();

  const Matrix* layer_input = &trace.input;
  for (int l = 0; l < kNumHidden; ++l) {
    HiddenTrace& h = trace.hidden[l];
    h.linear_out = (*layer_input) * model.weight(l).transpose();
    h.linear_out.rowwise() += model.bias(l).transpose();

    switch (ctl.stats) {
      case StatsSource::kBatch:
        h.stats = batch_stats(h.linear_out);
        h.stats_from_batch = true;
        break;
      case StatsSource::kRunning:
        h.stats.mean = model.running_mean(l).transpose();
        h.stats.var = model.running_var(l).transpose();
        break;
      case StatsSource::kGiven:
        h.stats = ctl.reference->hidden[l].stats;
        break;
    }
    const RowVector inv_std = (h.stats.var.array() + model.bn_eps()).rsqrt().matrix();
    h.normalized = ((h.linear_out.rowwise() - h.stats.mean).array().rowwise() * inv_std.array()).matrix();
    Matrix y = (h.normalized.array().rowwise() * model.bn_scale(l).transpose().array()).matrix();
    y.rowwise() += model.bn_shift(l).transpose();
    h.activated = y.cwiseMax(0.0);

    if (mode == Mode::kTrain) {
      if (ctl.reference != nullptr) {
        h.mask = ctl.reference->hidden[l].mask;
      } else {
        h.mask = sample_mask(h.activated.rows(), h.activated.cols(), model.dropout_rate(), *ctl.rng);
      }
    }
    if (h.mask.size() != 0) {
      if (h.mask.rows() != h.activated.rows() || h.mask.cols() != h.activated.cols()) {
        throw InvalidArgument("reference trace does not match batch shape");
      }
      h.output = h.activated.cwiseProduct(h.mask);
    } else {
      h.output = h.activated;
    }
    layer_input = &h.output;
  }

  trace.logits = (*layer_input) * model.weight(2).transpose();
  trace.logits.array() += model.bias(2)(0);
  trace.probabilities = trace.logits.unaryExpr([](double z) { return sigmoid(z); });
  return trace;
}

template <typename T, typename Elem>
Eigen::Map<T> map_section(std::span<Elem> flat, const ParamLayout::Section& s) {
  if constexpr (std::is_same_v<std::remove_const_t<T>, Matrix>) {
    return Eigen::Map<T>(flat.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                         static_cast<Eigen::Index>(s.cols));
  } else {
    return Eigen::Map<T>(flat.data() + s.offset, static_cast<Eigen::Index>(s.size()));
  }
}

}  // namespace

ParamLayout::ParamLayout(std::size_t input_dim_, std::size_t hidden_) : input_dim(input_dim_), hidden(hidden_) {
  if (input_dim == 0 || hidden == 0) throw InvalidArgument("model widths must be positive");
  const std::array<std::size_t, kNumLayers + 1> widths = {input_dim, hidden, hidden, 1};
  std::size_t offset = 0;
  for (int l = 0; l < kNumLayers; ++l) {
    weight[l] = {offset, widths[l + 1], widths[l]};
    offset += weight[l].size();
    bias[l] = {offset, widths[l + 1], 1};
    offset += bias[l].size();
    if (l < kNumHidden) {
      bn_scale[l] = {offset, hidden, 1};
      offset += hidden;
      bn_shift[l] = {offset, hidden, 1};
      offset += hidden;
    }
  }
  total = offset;
}

double sigmoid(double logit) {
  if (logit >= 0.0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

MlpModel::MlpModel(std::size_t input_dim, std::size_t hidden, double dropout_rate)
    : layout_(input_dim, hidden), params_(layout_.total, 0.0), dropout_rate_(0.0) {
  set_dropout_rate(dropout_rate);
  for (int i = 0; i < kNumHidden; ++i) {
    bn_scale(i).setOnes();
    running_mean_[i] = Vector::Zero(static_cast<Eigen::Index>(hidden));
    running_var_[i] = Vector::Ones(static_cast<Eigen::Index>(hidden));
  }
}

std::size_t MlpModel::parameter_count(std::size_t input_dim, std::size_t hidden) {
  return ParamLayout(input_dim, hidden).total;
}

void MlpModel::initialize(Rng& rng) {
  std::fill(params_.begin(), params_.end(), 0.0);
  for (int l = 0; l < kNumLayers; ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(layout_.weight[l].cols));
    auto w = weight(l);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-bound, bound);
    }
  }
  for (int i = 0; i < kNumHidden; ++i) {
    bn_scale(i).setOnes();
    running_mean_[i].setZero();
    running_var_[i].setOnes();
  }
}

Eigen::Map<Matrix> MlpModel::weight(int layer) {
  check_layer(layer, kNumLayers);
  return map_section<Matrix>(parameters(), layout_.weight[layer]);
}
Eigen::Map<const Matrix> MlpModel::weight(int layer) const {
  check_layer(layer, kNumLayers);
  return map_section<const Matrix>(parameters(), layout_.weight[layer]);
}
Eigen::Map<Vector> MlpModel::bias(int layer) {
  check_layer(layer, kNumLayers);
  return map_section<Vector>(parameters(), layout_.bias[layer]);
}
Eigen::Map<const Vector> MlpModel::bias(int layer) const {
  check_layer(layer, kNumLayers);
  return map_section<const Vector>(parameters(), layout_.bias[layer]);
}
Eigen::Map<Vector> MlpModel::bn_scale(int i) {
  check_layer(i, kNumHidden);
  return map_section<Vector>(parameters(), layout_.bn_scale[i]);
}
Eigen::Map<const Vector> MlpModel::bn_scale(int i) const {
  check_layer(i, kNumHidden);
  return map_section<const Vector>(parameters(), layout_.bn_scale[i]);
}
Eigen::Map<Vector> MlpModel::bn_shift(int i) {
  check_layer(i, kNumHidden);
  return map_section<Vector>(parameters(), layout_.bn_shift[i]);
}
Eigen::Map<const Vector> MlpModel::bn_shift(int i) const {
  check_layer(i, kNumHidden);
  return map_section<const Vector>(parameters(), layout_.bn_shift[i]);
}

void MlpModel::set_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("dropout rate must lie in [0, 1)");
  dropout_rate_ = rate;
}

void MlpModel::set_bn_momentum(double momentum) {
  if (!(momentum > 0.0 && momentum < 1.0)) throw InvalidArgument("batchnorm momentum must lie in (0, 1)");
  bn_momentum_ = momentum;
}

void MlpModel::set_bn_eps(double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("batchnorm epsilon must be positive");
  bn_eps_ = eps;
}

bool MlpModel::operator==(const MlpModel& other) const {
  if (layout_.input_dim != other.layout_.input_dim || layout_.hidden != other.layout_.hidden) return false;
  for (int i = 0; i < kNumHidden; ++i) {
    if (running_mean_[i] != other.running_mean_[i] || running_var_[i] != other.running_var_[i]) return false;
  }
  return params_ == other.params_ && dropout_rate_ == other.dropout_rate_ &&
         bn_momentum_ == other.bn_momentum_ && bn_eps_ == other.bn_eps_;
}

ForwardTrace forward(MlpModel& model, const Matrix& batch, Rng& rng) {
  if (model.mode() == Mode::kEval) return forward_eval(model, batch);
  PassControl ctl;
  ctl.rng = &rng;
  ForwardTrace trace = run_forward(model, batch, Mode::kTrain, ctl);
  const double m = model.bn_momentum();
  for (int l = 0; l < kNumHidden; ++l) {
    model.running_mean(l) = (1.0 - m) * model.running_mean(l) + m * trace.hidden[l].stats.mean.transpose();
    model.running_var(l) = (1.0 - m) * model.running_var(l) + m * trace.hidden[l].stats.var.transpose();
  }
  return trace;
}

ForwardTrace forward_eval(const MlpModel& model, const Matrix& batch) {
  PassControl ctl;
  ctl.stats = StatsSource::kRunning;
  return run_forward(model, batch, Mode::kEval, ctl);
}

ForwardTrace forward_replay(const MlpModel& model, const Matrix& batch, const ForwardTrace& reference,
                            StatsPolicy policy) {
  if (reference.mode != Mode::kTrain) throw InvalidArgument("replay needs a train-mode reference trace");
  PassControl ctl;
  ctl.reference = &reference;
  ctl.stats = policy == StatsPolicy::kRecompute ? StatsSource::kBatch : StatsSource::kGiven;
  return run_forward(model, batch, Mode::kTrain, ctl);
}

Gradients backward(const MlpModel& model, const ForwardTrace& trace, std::span<const double> dloss_dprob) {
  if (dloss_dprob.size() != static_cast<std::size_t>(trace.probabilities.size())) {
    throw InvalidArgument("upstream gradient length does not match batch size");
  }
  std::vector<double> dlogit(dloss_dprob.size());
  for (std::size_t i = 0; i < dlogit.size(); ++i) {
    const double p = trace.probabilities(static_cast<Eigen::Index>(i));
    dlogit[i] = dloss_dprob[i] * p * (1.0 - p);
  }
  return backward_from_logits(model, trace, dlogit);
}

Gradients backward_from_logits(const MlpModel& model, const ForwardTrace& trace,
                               std::span<const double> dloss_dlogit) {
  Gradients grad;
  backward_from_logits_into(model, trace, dloss_dlogit, grad);
  return grad;
}

void backward_from_logits_into(const MlpModel& model, const ForwardTrace& trace,
                               std::span<const double> dloss_dlogit, Gradients& out) {
  if (trace.parameter_count != model.parameter_count() ||
      static_cast<std::size_t>(trace.input.cols()) != model.input_dim() ||
      trace.hidden[0].linear_out.cols() != static_cast<Eigen::Index>(model.hidden())) {
    throw InvalidArgument("trace was not produced by this model");
  }
  const auto batch = trace.logits.size();
  if (static_cast<Eigen::Index>(dloss_dlogit.size()) != batch) {
    throw InvalidArgument("upstream gradient length does not match batch size");
  }
  const ParamLayout& layout = model.layout();
  out.resize(layout.total);
  std::span<double> flat(out);

  const Eigen::Map<const Vector> dz3(dloss_dlogit.data(), batch);
  map_section<Matrix>(flat, layout.weight[2]).noalias() = dz3.transpose() * trace.hidden[1].output;
  map_section<Vector>(flat, layout.bias[2])(0) = dz3.sum();
  Matrix upstream = dz3 * model.weight(2);

  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (int l = kNumHidden - 1; l >= 0; --l) {
    const HiddenTrace& h = trace.hidden[l];
    Matrix d_act = h.mask.size() != 0 ? Matrix(upstream.cwiseProduct(h.mask)) : upstream;
    const Matrix d_y = (h.activated.array() > 0.0).select(d_act, 0.0);

    map_section<Vector>(flat, layout.bn_scale[l]) = d_y.cwiseProduct(h.normalized).colwise().sum().transpose();
    map_section<Vector>(flat, layout.bn_shift[l]) = d_y.colwise().sum().transpose();

    const RowVector inv_std = (h.stats.var.array() + model.bn_eps()).rsqrt().matrix();
    const Matrix d_norm = (d_y.array().rowwise() * model.bn_scale(l).transpose().array()).matrix();
    Matrix d_z;
    if (h.stats_from_batch) {
      const RowVector sum_d = d_norm.colwise().sum();
      const RowVector sum_dx = d_norm.cwiseProduct(h.normalized).colwise().sum();
      const Matrix centered = (d_norm.rowwise() - sum_d * inv_batch) -
                              (h.normalized.array().rowwise() * (sum_dx * inv_batch).array()).matrix();
      d_z = (centered.array().rowwise() * inv_std.array()).matrix();
    } else {
      d_z = (d_norm.array().rowwise() * inv_std.array()).matrix();
    }

    const Matrix& layer_input = l == 0 ? trace.input : trace.hidden[l - 1].output;
    map_section<Matrix>(flat, layout.weight[l]).noalias() = d_z.transpose() * layer_input;
    map_section<Vector>(flat, layout.bias[l]) = d_z.colwise().sum().transpose();
    if (l > 0) upstream.noalias() = d_z * model.weight(l);
  }
}

double score(const MlpModel& model, std::span<const double> feature) {
  if (feature.size() != model.input_dim()) {
    throw InvalidArgument("feature length " + std::to_string(feature.size()) + " does not match model input " +
                          std::to_string(model.input_dim()));
  }
  const Matrix row = Eigen::Map<const Matrix>(feature.data(), 1, static_cast<Eigen::Index>(feature.size()));
  return forward_eval(model, row).probabilities(0);
}

namespace {

template <typename Pick>
std::vector<double> eval_rows(const MlpModel& model, std::span<const double> rows_major, std::size_t dim, Pick pick) {
  if (dim != model.input_dim() || rows_major.size() % dim != 0) {
    throw InvalidArgument("eval rows: dimension mismatch");
  }
  const std::size_t n = rows_major.size() / dim;
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += kScoreChunk) {
    const std::size_t rows = std::min(kScoreChunk, n - start);
    const Matrix chunk = Eigen::Map<const Matrix>(rows_major.data() + start * dim,
                                                  static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
    const ForwardTrace t = forward_eval(model, chunk);
    const Vector& v = pick(t);
    out.insert(out.end(), v.data(), v.data() + v.size());
  }
  return out;
}

}  // namespace

std::vector<double> score_rows(const MlpModel& model, std::span<const double> rows_major, std::size_t dim) {
  return eval_rows(model, rows_major, dim, [](const ForwardTrace& t) -> const Vector& { return t.probabilities; });
}

std::vector<double> logit_rows(const MlpModel& model, std::span<const double> rows_major, std::size_t dim) {
  return eval_rows(model, rows_major, dim, [](const ForwardTrace& t) -> const Vector& { return t.logits; });
}

Matrix gather_rows(std::span<const double> values, std::size_t dim, std::span<const std::size_t> rows) {
  Matrix batch(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = values.data() + rows[i] * dim;
    std::copy(src, src + dim, batch.row(static_cast<Eigen::Index>(i)).data());
  }
  return batch;
}

// Layout: magic(6) | u64 layer count | u64 widths[layers + 1] | f64 dropout |
// f64 bn momentum | f64 bn eps | f64 parameters[...] | f64 running mean/var
// per hidden layer.
void save_checkpoint(const MlpModel& model, const std::filesystem::path& path) {
  if (path.empty()) throw IoError("save_checkpoint: empty path");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_u64(out, kNumLayers);
  for (std::size_t w : {model.input_dim(), model.hidden(), model.hidden(), std::size_t{1}}) detail::put_u64(out, w);
  detail::put_f64(out, model.dropout_rate());
  detail::put_f64(out, model.bn_momentum());
  detail::put_f64(out, model.bn_eps());
  for (double v : model.parameters()) detail::put_f64(out, v);
  for (int l = 0; l < kNumHidden; ++l) {
    for (double v : model.running_mean(l)) detail::put_f64(out, v);
    for (double v : model.running_var(l)) detail::put_f64(out, v);
  }
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

MlpModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::array<char, 6> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw FormatError("not a model checkpoint: " + path.string());
  }
  std::uint64_t layers = 0;
  if (!detail::get_u64(in, layers) || layers != kNumLayers) throw FormatError("unsupported layer count");
  std::array<std::uint64_t, kNumLayers + 1> widths{};
  for (auto& w : widths) {
    if (!detail::get_u64(in, w)) throw FormatError("truncated checkpoint header");
  }
  if (widths[0] == 0 || widths[1] == 0 || widths[2] != widths[1] || widths[3] != 1) {
    throw FormatError("unsupported layer widths");
  }
  double dropout = 0.0;
  double momentum = 0.0;
  double eps = 0.0;
  if (!detail::get_f64(in, dropout) || !detail::get_f64(in, momentum) || !detail::get_f64(in, eps)) {
    throw FormatError("truncated checkpoint header");
  }
  MlpModel model(widths[0], widths[1], dropout);
  model.set_bn_momentum(momentum);
  model.set_bn_eps(eps);
  auto read_values = [&in](double* dst, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!detail::get_f64(in, dst[i])) throw FormatError("truncated checkpoint body");
      if (!std::isfinite(dst[i])) throw FormatError("checkpoint contains a non-finite value");
    }
  };
  read_values(model.parameters().data(), model.parameter_count());
  for (int l = 0; l < kNumHidden; ++l) {
    read_values(model.running_mean(l).data(), model.hidden());
    read_values(model.running_var(l).data(), model.hidden());
    if ((model.running_var(l).array() <= 0.0).any()) throw FormatError("checkpoint running variance not positive");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in checkpoint");
  return model;
}

}  // namespace robustclf
