#include "robustclf/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "io_util.hpp"
#include "robustclf/error.hpp"
#include "robustclf/metrics.hpp"
#include "robustclf/rng.hpp"
#include "robustclf/trainer.hpp"

namespace robustclf {

namespace {

constexpr std::uint64_t kSplitStream = 21;

void require_both_classes(const FeatureBank& bank, std::string_view which) {
  const auto c = class_counts(bank);
  if (c.n_pos == 0 || c.n_neg == 0) {
    throw InvalidArgument("AUC loss undefined without both classes (" + std::string(which) + " bank)");
  }
}

double round_decimal(double v) { return std::round(v * 1e12) / 1e12; }

}  // namespace

DataSplit split_bank(const FeatureBank& bank, double heldout_fraction, std::uint64_t seed) {
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) {
    throw InvalidArgument("held-out fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < bank.size(); ++i) (bank.label(i) == Label::kGenerated ? pos : neg).push_back(i);

  Rng rng = Rng::stream(seed, kSplitStream);
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> heldout_rows;
  for (auto* cls : {&pos, &neg}) {
    shuffle(std::span<std::size_t>(*cls), rng);
    const auto k = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(cls->size())));
    heldout_rows.insert(heldout_rows.end(), cls->begin(), cls->begin() + static_cast<std::ptrdiff_t>(k));
    train_rows.insert(train_rows.end(), cls->begin() + static_cast<std::ptrdiff_t>(k), cls->end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(heldout_rows.begin(), heldout_rows.end());
  DataSplit split{bank.subset(train_rows), bank.subset(heldout_rows)};
  split.train.set_source_tag(bank.source_tag() + "#train");
  split.heldout.set_source_tag(bank.source_tag() + "#heldout");
  return split;
}

double train_and_evaluate(const DataSplit& split, const TrainConfig& config) {
  const TrainResult result = train(split.train, config);
  return evaluate(result.model, split.heldout).auc;
}

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<AblationRow> ablation_variants(const TrainConfig& base) {
  std::vector<AblationRow> rows = {
      {"V1", true, false, false, base.gamma, 0.0},
      {"V2", false, true, false, 0.0, 0.0},
      {"V3", true, true, false, base.gamma, 0.0},
      {"V4", true, false, true, base.gamma, 0.0},
      {"full", true, true, true, base.gamma, 0.0},
  };
  for (auto& r : rows) {
    if (!r.use_auc) r.gamma = 1.0;
  }
  return rows;
}

std::vector<AblationRow> run_ablation(const DataSplit& split, const TrainConfig& base, std::size_t jobs) {
  require_both_classes(split.train, "training");
  require_both_classes(split.heldout, "held-out");
  std::vector<AblationRow> rows = ablation_variants(base);
  parallel_for(rows.size(), jobs, [&](std::size_t i) {
    TrainConfig cfg = base;
    cfg.ablation = {rows[i].use_cvar, rows[i].use_auc, rows[i].use_sam};
    cfg.gamma = rows[i].gamma;
    rows[i].auc = train_and_evaluate(split, cfg);
  });
  return rows;
}

std::string_view parameter_name(SweepParameter parameter) {
  return parameter == SweepParameter::kAlpha ? "alpha" : "gamma";
}

std::vector<SweepRow> run_sweep(const DataSplit& split, const TrainConfig& base, SweepParameter parameter,
                                std::span<const double> values, std::size_t jobs) {
  if (values.empty()) throw InvalidArgument("sweep needs at least one value");
  std::vector<TrainConfig> configs;
  for (double v : values) {
    TrainConfig cfg = base;
    (parameter == SweepParameter::kAlpha ? cfg.alpha : cfg.gamma) = v;
    cfg.validate();
    configs.push_back(cfg);
  }
  require_both_classes(split.heldout, "held-out");
  std::vector<SweepRow> rows(values.size());
  parallel_for(rows.size(), jobs, [&](std::size_t i) {
    rows[i] = {values[i], train_and_evaluate(split, configs[i])};
  });
  return rows;
}

TwoStageSweep run_two_stage_sweep(const DataSplit& split, const TrainConfig& base, std::span<const double> alphas,
                                  std::span<const double> gammas, std::size_t jobs) {
  auto best_of = [](const std::vector<SweepRow>& rows) {
    return std::max_element(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.auc < b.auc; })
        ->value;
  };
  TwoStageSweep out;
  out.alpha_rows = run_sweep(split, base, SweepParameter::kAlpha, alphas, jobs);
  out.best_alpha = best_of(out.alpha_rows);
  TrainConfig second = base;
  second.alpha = out.best_alpha;
  out.gamma_rows = run_sweep(split, second, SweepParameter::kGamma, gammas, jobs);
  out.best_gamma = best_of(out.gamma_rows);
  return out;
}

void write_sweep_csv(std::span<const SweepRow> rows, SweepParameter parameter, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << parameter_name(parameter) << ",auc\n";
  for (const auto& r : rows) out << detail::format_double(r.value) << ',' << detail::format_double(r.auc) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

void write_ablation_csv(std::span<const AblationRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "variant,use_cvar,use_auc,use_sam,gamma,auc\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.use_cvar << ',' << r.use_auc << ',' << r.use_sam << ','
        << detail::format_double(r.gamma) << ',' << detail::format_double(r.auc) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<double> parse_value_list(std::string_view text) {
  text = detail::trim(text);
  std::vector<double> values;
  auto number = [](std::string_view s) {
    double v = 0.0;
    if (!detail::parse_double(detail::trim(s), v) || !std::isfinite(v)) {
      throw InvalidArgument("not a number: '" + std::string(s) + "'");
    }
    return v;
  };
  if (text.find(':') != std::string_view::npos) {
    const auto c1 = text.find(':');
    const auto c2 = text.find(':', c1 + 1);
    if (c2 == std::string_view::npos || text.find(':', c2 + 1) != std::string_view::npos) {
      throw InvalidArgument("range must look like lo:hi:step");
    }
    const double lo = number(text.substr(0, c1));
    const double hi = number(text.substr(c1 + 1, c2 - c1 - 1));
    const double step = number(text.substr(c2 + 1));
    if (!(step > 0.0) || hi < lo) throw InvalidArgument("range needs step > 0 and hi >= lo");
    const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step * (1.0 + 1e-9) + 1e-9)) + 1;
    for (std::size_t k = 0; k < count; ++k) values.push_back(round_decimal(lo + static_cast<double>(k) * step));
  } else {
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto comma = text.find(',', start);
      values.push_back(number(text.substr(start, comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
  }
  return values;
}

LossReport dataset_loss(const MlpModel& model, const FeatureBank& bank, const TrainConfig& config) {
  if (bank.empty()) throw InvalidArgument("loss over an empty bank");
  const std::vector<double> logits = logit_rows(model, bank.values(), bank.dim());
  return total_loss_from_logits(logits, bank.labels(), config.effective_gamma(), config.cvar_config(),
                                config.auc_config())
      .report;
}

std::pair<std::vector<double>, std::vector<double>> landscape_directions(const MlpModel& model, std::uint64_t seed) {
  Rng rng(seed);
  const ParamLayout& layout = model.layout();
  const std::span<const double> theta = model.parameters();
  auto draw = [&] {
    std::vector<double> dir(layout.total, 0.0);
    for (int l = 0; l < kNumLayers; ++l) {
      const auto& w = layout.weight[l];
      for (std::size_t r = 0; r < w.rows; ++r) {
        const std::size_t off = w.offset + r * w.cols;
        double dir_sq = 0.0;
        double theta_sq = 0.0;
        for (std::size_t c = 0; c < w.cols; ++c) {
          dir[off + c] = rng.normal();
          dir_sq += dir[off + c] * dir[off + c];
          theta_sq += theta[off + c] * theta[off + c];
        }
        const double scale = dir_sq > 0.0 ? std::sqrt(theta_sq / dir_sq) : 0.0;
        for (std::size_t c = 0; c < w.cols; ++c) dir[off + c] *= scale;
      }
    }
    return dir;
  };
  auto d1 = draw();
  auto d2 = draw();
  return {std::move(d1), std::move(d2)};
}

LandscapeSlice landscape_slice(const MlpModel& model, const FeatureBank& bank, const TrainConfig& config,
                               std::size_t grid, double radius, std::uint64_t seed) {
  if (grid < 2) throw InvalidArgument("landscape grid must be >= 2");
  if (!(radius > 0.0) || !std::isfinite(radius)) throw InvalidArgument("landscape radius must be positive");
  if (bank.dim() != model.input_dim()) throw InvalidArgument("bank dimension does not match the model");

  const auto [d1, d2] = landscape_directions(model, seed);
  LandscapeSlice slice;
  slice.grid = grid;
  slice.radius = radius;
  slice.center_loss = dataset_loss(model, bank, config).total;

  const auto span = static_cast<double>(grid - 1);
  auto coord = [&](std::size_t k) {
    return radius * (2.0 * static_cast<double>(k) - span) / span;
  };
  MlpModel probe = model;
  const std::span<const double> theta = model.parameters();
  std::span<double> params = probe.parameters();
  for (std::size_t ia = 0; ia < grid; ++ia) {
    for (std::size_t ib = 0; ib < grid; ++ib) {
      const double a = coord(ia);
      const double b = coord(ib);
      for (std::size_t i = 0; i < params.size(); ++i) params[i] = theta[i] + a * d1[i] + b * d2[i];
      slice.points.push_back({a, b, dataset_loss(probe, bank, config).total});
    }
  }
  return slice;
}

void write_landscape_csv(const LandscapeSlice& slice, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "a,b,loss\n";
  for (const auto& p : slice.points) {
    out << detail::format_double(p.a) << ',' << detail::format_double(p.b) << ',' << detail::format_double(p.loss)
        << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace robustclf
