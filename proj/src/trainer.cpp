#include "robustclf/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <utility>

#include "io_util.hpp"
#include "robustclf/error.hpp"
#include "robustclf/rng.hpp"

namespace robustclf {

namespace {

// Independent generator streams per run.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kDropoutStream = 3;

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string state_dump(const MlpModel& model, const LossReport& report, double lr, std::string_view where) {
  std::ostringstream out;
  std::size_t non_finite = 0;
  double sq = 0.0;
  for (double v : model.parameters()) {
    if (std::isfinite(v)) {
      sq += v * v;
    } else {
      ++non_finite;
    }
  }
  out << "where=" << where << '\n'
      << "lr=" << detail::format_double(lr) << '\n'
      << "loss.total=" << report.total << '\n'
      << "loss.cvar=" << report.cvar_value << '\n'
      << "loss.auc=" << report.auc_value << '\n'
      << "loss.lambda=" << report.fitted_lambda << '\n'
      << "loss.n_pairs=" << report.n_pairs << '\n'
      << "params.count=" << model.parameter_count() << '\n'
      << "params.non_finite=" << non_finite << '\n'
      << "params.l2_norm_finite=" << std::sqrt(sq) << '\n';
  return out.str();
}

void check_logits(const Vector& logits, const MlpModel& model, double lr, std::string_view where) {
  if (!logits.allFinite()) {
    throw TrainingDiverged("non-finite model output during training (" + std::string(where) + ")",
                           state_dump(model, LossReport{}, lr, where));
  }
}

void check_loss(const TotalLoss& loss, const MlpModel& model, double lr, std::string_view where) {
  if (!std::isfinite(loss.report.total) || !all_finite(loss.dtotal_dlogit)) {
    throw TrainingDiverged("non-finite loss during training (" + std::string(where) + ")",
                           state_dump(model, loss.report, lr, where));
  }
}

}  // namespace

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& shuffle_rng) {
  if (batch_size < 2) throw InvalidArgument("batch_size must be >= 2");
  if (n < 2) throw InvalidArgument("training needs at least 2 examples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(std::span<std::size_t>(order), shuffle_rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

MlpModel initial_model(std::size_t input_dim, const TrainConfig& config) {
  MlpModel model(input_dim, config.hidden, config.dropout_rate);
  model.set_bn_momentum(config.bn_momentum);
  model.set_bn_eps(config.bn_eps);
  Rng init_rng = Rng::stream(config.seed, kInitStream);
  model.initialize(init_rng);
  model.set_mode(Mode::kTrain);
  return model;
}

StepOutcome training_step(MlpModel& model, AdamState& adam, const Matrix& batch, std::span<const Label> labels,
                          const TrainConfig& config, double lr, Rng& dropout_rng) {
  StepWorkspace workspace;
  training_step(model, adam, batch, labels, config, lr, dropout_rng, workspace);
  return std::move(workspace.outcome);
}

const StepOutcome& training_step(MlpModel& model, AdamState& adam, const Matrix& batch,
                                 std::span<const Label> labels, const TrainConfig& config, double lr,
                                 Rng& dropout_rng, StepWorkspace& workspace) {
  const double gamma = config.effective_gamma();
  const CvarConfig cvar_cfg = config.cvar_config();
  const AucConfig auc_cfg = config.auc_config();

  model.set_mode(Mode::kTrain);
  const ForwardTrace clean_trace = forward(model, batch, dropout_rng);
  check_logits(clean_trace.logits, model, lr, "clean pass");
  const std::span<const double> clean_logits(clean_trace.logits.data(), static_cast<std::size_t>(clean_trace.logits.size()));
  const TotalLoss clean = total_loss_from_logits(clean_logits, labels, gamma, cvar_cfg, auc_cfg);
  check_loss(clean, model, lr, "clean pass");

  StepOutcome& outcome = workspace.outcome;
  outcome.clean = clean.report;
  backward_from_logits_into(model, clean_trace, clean.dtotal_dlogit, outcome.clean_gradient);

  if (!config.ablation.use_sam) {
    outcome.perturbed = clean.report;
    outcome.applied_gradient = outcome.clean_gradient;
    outcome.epsilon.clear();
  } else {
    compute_epsilon_into(outcome.clean_gradient, config.sam_config(), outcome.epsilon);
    std::span<double> params = model.parameters();
    workspace.saved_params.assign(params.begin(), params.end());
    for (std::size_t i = 0; i < params.size(); ++i) params[i] += outcome.epsilon[i];

    const StatsPolicy policy =
        config.sam_batch_stats == SamBatchStats::kFreeze ? StatsPolicy::kFreeze : StatsPolicy::kRecompute;
    const ForwardTrace perturbed_trace = forward_replay(model, batch, clean_trace, policy);
    check_logits(perturbed_trace.logits, model, lr, "perturbed pass");
    const std::span<const double> logits(perturbed_trace.logits.data(),
                                         static_cast<std::size_t>(perturbed_trace.logits.size()));
    const double lambda = clean.report.fitted_lambda;
    const TotalLoss perturbed = total_loss_from_logits(logits, labels, gamma, cvar_cfg, auc_cfg, &lambda);
    check_loss(perturbed, model, lr, "perturbed pass");
    outcome.perturbed = perturbed.report;
    backward_from_logits_into(model, perturbed_trace, perturbed.dtotal_dlogit, outcome.applied_gradient);
    std::copy(workspace.saved_params.begin(), workspace.saved_params.end(), params.begin());
  }

  adam_step(adam, model.parameters(), outcome.applied_gradient, lr);
  if (!all_finite(model.parameters())) {
    throw TrainingDiverged("non-finite parameters after update", state_dump(model, outcome.clean, lr, "adam step"));
  }
  return outcome;
}

TrainResult train(const FeatureBank& bank, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (bank.empty()) throw InvalidArgument("cannot train on an empty bank");
  if (bank.size() < 2) throw InvalidArgument("training needs at least 2 examples");
  const ClassCounts counts = class_counts(bank);
  const bool single_class = counts.n_pos == 0 || counts.n_neg == 0;
  if (single_class && config.effective_gamma() == 0.0) {
    throw InvalidArgument("AUC loss undefined without both classes (gamma = 0 leaves no objective)");
  }

  TrainResult result{initial_model(bank.dim(), config), {}};
  MlpModel& model = result.model;
  TrainRunRecord& record = result.record;
  record.config = config;
  record.n_examples = bank.size();
  record.n_pos = counts.n_pos;
  record.n_neg = counts.n_neg;
  record.auc_term_inactive = single_class && config.effective_gamma() < 1.0;

  Rng shuffle_rng = Rng::stream(config.seed, kShuffleStream);
  Rng dropout_rng = Rng::stream(config.seed, kDropoutStream);
  AdamState adam(model.parameter_count());
  StepWorkspace workspace;

  // Batch count per epoch does not depend on the shuffle.
  {
    Rng probe(0);
    record.batches_per_epoch = epoch_batches(bank.size(), config.batch_size, probe).size();
  }
  const LrSchedule schedule{config.lr, config.epochs * record.batches_per_epoch, config.schedule};
  record.total_steps = schedule.total_steps;

  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.lr = lr_at(schedule, step);
    for (const auto& rows : epoch_batches(bank.size(), config.batch_size, shuffle_rng)) {
      const Matrix batch = gather_rows(bank.values(), bank.dim(), rows);
      std::vector<Label> labels(rows.size());
      for (std::size_t k = 0; k < rows.size(); ++k) labels[k] = bank.label(rows[k]);

      const StepOutcome& outcome =
          training_step(model, adam, batch, labels, config, lr_at(schedule, step), dropout_rng, workspace);
      ++step;
      metrics.mean_total += outcome.clean.total;
      metrics.mean_cvar += outcome.clean.cvar_value;
      metrics.mean_auc += outcome.clean.auc_value;
      metrics.mean_lambda += outcome.clean.fitted_lambda;
      if (outcome.clean.n_pairs == 0) ++metrics.single_class_batches;
      ++metrics.batches;
    }
    const double nb = static_cast<double>(metrics.batches);
    metrics.mean_total /= nb;
    metrics.mean_cvar /= nb;
    metrics.mean_auc /= nb;
    metrics.mean_lambda /= nb;
    metrics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record.epochs.push_back(metrics);
    if (on_epoch) on_epoch(metrics);
  }
  model.set_mode(Mode::kEval);
  return result;
}

std::string run_record_text(const TrainRunRecord& record) {
  std::ostringstream out;
  auto num = [](double v) { return detail::format_double(v); };
  out << "# training run record\n";
  std::istringstream cfg(record.config.to_text());
  for (std::string line; std::getline(cfg, line);) out << "config." << line << '\n';
  out << "run.seed=" << record.config.seed << '\n'
      << "run.n_examples=" << record.n_examples << '\n'
      << "run.n_pos=" << record.n_pos << '\n'
      << "run.n_neg=" << record.n_neg << '\n'
      << "run.batches_per_epoch=" << record.batches_per_epoch << '\n'
      << "run.total_steps=" << record.total_steps << '\n'
      << "run.auc_term_inactive=" << (record.auc_term_inactive ? "true" : "false") << '\n'
      << "run.checkpoint=" << record.checkpoint_path << '\n'
      << "run.epochs_completed=" << record.epochs.size() << '\n';
  for (const auto& e : record.epochs) {
    const std::string k = "epoch." + std::to_string(e.epoch) + ".";
    out << k << "mean_total=" << num(e.mean_total) << '\n'
        << k << "mean_cvar=" << num(e.mean_cvar) << '\n'
        << k << "mean_auc=" << num(e.mean_auc) << '\n'
        << k << "mean_lambda=" << num(e.mean_lambda) << '\n'
        << k << "lr=" << num(e.lr) << '\n'
        << k << "wall_seconds=" << num(e.wall_seconds) << '\n'
        << k << "batches=" << e.batches << '\n'
        << k << "single_class_batches=" << e.single_class_batches << '\n';
  }
  return out.str();
}

void write_run_record(const TrainRunRecord& record, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write run record: " + path.string());
  out << run_record_text(record);
  if (!out) throw IoError("write failed: " + path.string());
}

TrainRunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run record: " + path.string());
  TrainRunRecord record;
  std::string config_text;
  std::map<std::size_t, EpochMetrics> epochs;
  auto as_double = [](const std::string& v) {
    double d = 0.0;
    if (!detail::parse_double(v, d)) throw FormatError("run record: bad number '" + v + "'");
    return d;
  };
  auto as_size = [](const std::string& v) { return static_cast<std::size_t>(std::stoull(v)); };

  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("run record: expected key=value: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key.starts_with("config.")) {
      config_text += key.substr(7) + "=" + value + "\n";
    } else if (key == "run.n_examples") {
      record.n_examples = as_size(value);
    } else if (key == "run.n_pos") {
      record.n_pos = as_size(value);
    } else if (key == "run.n_neg") {
      record.n_neg = as_size(value);
    } else if (key == "run.batches_per_epoch") {
      record.batches_per_epoch = as_size(value);
    } else if (key == "run.total_steps") {
      record.total_steps = as_size(value);
    } else if (key == "run.auc_term_inactive") {
      record.auc_term_inactive = value == "true";
    } else if (key == "run.checkpoint") {
      record.checkpoint_path = value;
    } else if (key.starts_with("epoch.")) {
      const auto dot = key.find('.', 6);
      if (dot == std::string::npos) throw FormatError("run record: bad epoch key " + key);
      const std::size_t idx = as_size(key.substr(6, dot - 6));
      const std::string metric = key.substr(dot + 1);
      EpochMetrics& e = epochs[idx];
      e.epoch = idx;
      if (metric == "mean_total") e.mean_total = as_double(value);
      else if (metric == "mean_cvar") e.mean_cvar = as_double(value);
      else if (metric == "mean_auc") e.mean_auc = as_double(value);
      else if (metric == "mean_lambda") e.mean_lambda = as_double(value);
      else if (metric == "lr") e.lr = as_double(value);
      else if (metric == "wall_seconds") e.wall_seconds = as_double(value);
      else if (metric == "batches") e.batches = as_size(value);
      else if (metric == "single_class_batches") e.single_class_batches = as_size(value);
    }
  }
  record.config = parse_config(config_text);
  for (auto& [idx, e] : epochs) record.epochs.push_back(e);
  return record;
}

}  // namespace robustclf
