#include "robustclf/cli.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "io_util.hpp"
#include "robustclf/error.hpp"
#include "robustclf/experiments.hpp"
#include "robustclf/feature_bank.hpp"
#include "robustclf/metrics.hpp"
#include "robustclf/net.hpp"
#include "robustclf/train_config.hpp"
#include "robustclf/trainer.hpp"

namespace robustclf {

namespace {

namespace fs = std::filesystem;

constexpr const char* kSeedEnv = "ROBUST_CLF_SEED";

/// Config sources shared by train, ablate, sweep and landscape.
/// Precedence: --seed / --set > --config file > ROBUST_CLF_SEED > defaults.
struct ConfigOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Flat key=value config file");
    app->add_option("--set", overrides, "Override one config key (key=value); repeatable");
    app->add_option("--seed", seed, "Run seed (falls back to $ROBUST_CLF_SEED)");
    app->add_option("--epochs", epochs, "Number of epochs");
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (const char* env = std::getenv(kSeedEnv); env != nullptr && *env != '\0') cfg.set("seed", env);
    if (!config_path.empty()) cfg = load_config(config_path, cfg);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
      cfg.set(detail::trim(std::string_view(kv).substr(0, eq)), std::string_view(kv).substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (epochs) cfg.epochs = *epochs;
    cfg.validate();
    return cfg;
  }
};

/// Bank inputs for experiments: a held-out bank, or a stratified split.
struct SplitOptions {
  std::string bank_path;
  std::string test_path;
  double holdout = 0.2;

  void attach(CLI::App* app) {
    app->add_option("--bank", bank_path, "Training feature bank")->required();
    app->add_option("--test", test_path, "Held-out feature bank (otherwise split off --bank)");
    app->add_option("--holdout", holdout, "Held-out fraction when --test is absent")->check(CLI::Range(0.0, 1.0));
  }

  DataSplit load(std::uint64_t seed) const {
    FeatureBank bank = load_bank(bank_path, format_from_path(bank_path));
    if (!test_path.empty()) return {std::move(bank), load_bank(test_path, format_from_path(test_path))};
    return split_bank(bank, holdout, seed);
  }
};

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string auc_text(double auc) { return fixed(auc, 10) + " (" + fixed(100.0 * auc, 6) + "%)"; }

fs::path ensure_dir(const std::string& dir) {
  const fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  return p;
}

std::uint64_t seed_or_env(std::optional<std::uint64_t> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv(kSeedEnv); env != nullptr && *env != '\0') {
    TrainConfig probe;
    probe.set("seed", env);
    return probe.seed;
  }
  return 0;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string eval_report_text(const EvalReport& r) {
  std::ostringstream out;
  auto num = [](double v) { return detail::format_double(v); };
  out << "auc=" << num(r.auc) << '\n'
      << "auc_percent=" << fixed(100.0 * r.auc, 6) << '\n'
      << "n_pos=" << r.n_pos << '\n'
      << "n_neg=" << r.n_neg << '\n'
      << "roc_points=" << r.roc_points.size() << '\n';
  for (const auto& [name, s] : {std::pair{"pos", &r.pos_stats}, std::pair{"neg", &r.neg_stats}}) {
    out << name << ".min=" << num(s->min) << '\n' << name << ".mean=" << num(s->mean) << '\n'
        << name << ".max=" << num(s->max) << '\n' << name << ".histogram=";
    for (std::size_t b = 0; b < ScoreStats::kBins; ++b) out << (b ? "," : "") << s->histogram[b];
    out << '\n';
  }
  return out.str();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust real-vs-generated image classifier on precomputed feature banks", "robustclf"};
  app.require_subcommand(1);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic two-Gaussian feature bank");
  std::size_t n_pos = 500;
  std::size_t n_neg = 500;
  std::size_t dim = 16;
  double sep = 6.0;
  std::optional<std::uint64_t> gen_seed;
  std::string gen_out;
  std::string gen_format;
  gen->add_option("--n-pos", n_pos, "Number of generated (label 1) examples");
  gen->add_option("--n-neg", n_neg, "Number of real (label 0) examples");
  gen->add_option("--dim", dim, "Feature dimension")->check(CLI::PositiveNumber);
  gen->add_option("--sep", sep, "Mean shift of positives along coordinate 0")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "Generator seed (falls back to $ROBUST_CLF_SEED)");
  gen->add_option("--out", gen_out, "Output bank path")->required();
  gen->add_option("--format", gen_format, "binary or csv (default: from extension)")
      ->check(CLI::IsMember({"binary", "csv"}));

  // inspect-bank
  auto* inspect = app.add_subcommand("inspect-bank", "Print the size, class counts and dimension of a bank");
  std::string inspect_path;
  inspect->add_option("bank", inspect_path, "Bank path")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a classifier and write model, config and run record");
  std::string train_bank;
  std::string train_out;
  ConfigOptions train_cfg;
  train_cmd->add_option("--bank", train_bank, "Training feature bank")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cfg.attach(train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Exact AUC and ROC of a model on a bank");
  std::string eval_bank;
  std::string eval_model;
  std::string eval_out;
  eval_cmd->add_option("--bank", eval_bank, "Evaluation feature bank")->required();
  eval_cmd->add_option("--model", eval_model, "Model checkpoint")->required();
  eval_cmd->add_option("--out", eval_out, "Output directory for eval_report.txt and roc.csv");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "Train the five ablation variants on one split");
  SplitOptions ablate_split;
  ConfigOptions ablate_cfg;
  std::string ablate_out;
  std::size_t ablate_jobs = 1;
  ablate_split.attach(ablate_cmd);
  ablate_cfg.attach(ablate_cmd);
  ablate_cmd->add_option("--out", ablate_out, "Output directory")->required();
  ablate_cmd->add_option("--jobs", ablate_jobs, "Concurrent training runs")->check(CLI::PositiveNumber);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "One-dimensional alpha or gamma sweep, or the two-stage protocol");
  SplitOptions sweep_split;
  ConfigOptions sweep_cfg;
  std::string sweep_param = "alpha";
  std::string sweep_values = "0.1:0.9:0.1";
  std::string sweep_gamma_values = "0.1:0.9:0.1";
  std::string sweep_out;
  std::size_t sweep_jobs = 1;
  sweep_split.attach(sweep_cmd);
  sweep_cfg.attach(sweep_cmd);
  sweep_cmd->add_option("--parameter", sweep_param, "alpha, gamma, or protocol (alpha then gamma)")
      ->check(CLI::IsMember({"alpha", "gamma", "protocol"}));
  sweep_cmd->add_option("--values", sweep_values, "lo:hi:step or comma list (alpha values for protocol)");
  sweep_cmd->add_option("--gamma-values", sweep_gamma_values, "gamma values for the protocol's second stage");
  sweep_cmd->add_option("--out", sweep_out, "Output directory")->required();
  sweep_cmd->add_option("--jobs", sweep_jobs, "Concurrent training runs")->check(CLI::PositiveNumber);

  // landscape
  auto* land_cmd = app.add_subcommand("landscape", "Loss on a 2-D slice through parameter space");
  std::string land_bank;
  std::string land_model;
  std::string land_out;
  std::size_t land_grid = 21;
  double land_radius = 1.0;
  std::optional<std::uint64_t> land_seed;
  ConfigOptions land_cfg;
  land_cmd->add_option("--bank", land_bank, "Feature bank the loss is measured on")->required();
  land_cmd->add_option("--model", land_model, "Model checkpoint")->required();
  land_cmd->add_option("--out", land_out, "Output directory")->required();
  land_cmd->add_option("--grid", land_grid, "Lattice points per axis")->check(CLI::Range(2, 100000));
  land_cmd->add_option("--radius", land_radius, "Half-width of the lattice")->check(CLI::PositiveNumber);
  land_cmd->add_option("--direction-seed", land_seed, "Seed for the random directions (default: config seed)");
  land_cfg.attach(land_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kExitOk;
    err << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) {
      const std::uint64_t seed = seed_or_env(gen_seed);
      const FeatureBank bank = generate_synthetic(n_pos, n_neg, dim, sep, seed);
      const BankFormat fmt = gen_format.empty() ? format_from_path(gen_out)
                                                : (gen_format == "csv" ? BankFormat::kCsv : BankFormat::kBinary);
      if (const fs::path parent = fs::path(gen_out).parent_path(); !parent.empty()) ensure_dir(parent.string());
      save_bank(bank, gen_out, fmt);
      out << "wrote " << bank.size() << " examples (n_pos=" << n_pos << ", n_neg=" << n_neg << ", dim=" << dim
          << ", seed=" << seed << ") to " << gen_out << '\n';
    } else if (*inspect) {
      const FeatureBank bank = load_bank(inspect_path, format_from_path(inspect_path));
      const auto c = class_counts(bank);
      out << "n=" << bank.size() << " n_pos=" << c.n_pos << " n_neg=" << c.n_neg << " dim=" << bank.dim() << '\n';
    } else if (*train_cmd) {
      const TrainConfig cfg = train_cfg.resolve();
      const FeatureBank bank = load_bank(train_bank, format_from_path(train_bank));
      const fs::path dir = ensure_dir(train_out);
      save_config(cfg, dir / "config.cfg");
      try {
        TrainResult result = train(bank, cfg, [&](const EpochMetrics& e) {
          out << "epoch " << e.epoch << "/" << cfg.epochs << " total=" << fixed(e.mean_total, 6)
              << " cvar=" << fixed(e.mean_cvar, 6) << " auc_loss=" << fixed(e.mean_auc, 6)
              << " lambda=" << fixed(e.mean_lambda, 6) << " lr=" << detail::format_double(e.lr)
              << " time=" << fixed(e.wall_seconds, 2) << "s\n";
        });
        const fs::path ckpt = dir / "model.ckpt";
        save_checkpoint(result.model, ckpt);
        result.record.checkpoint_path = ckpt.string();
        write_run_record(result.record, dir / "run_record.txt");
        out << "model written to " << ckpt.string() << '\n';
      } catch (const TrainingDiverged& e) {
        write_text(dir / "divergence_dump.txt", e.dump());
        throw;
      }
    } else if (*eval_cmd) {
      const MlpModel model = load_checkpoint(eval_model);
      const FeatureBank bank = load_bank(eval_bank, format_from_path(eval_bank));
      const EvalReport report = evaluate(model, bank);
      out << "AUC: " << auc_text(report.auc) << '\n'
          << "n_pos=" << report.n_pos << " n_neg=" << report.n_neg << '\n';
      if (!eval_out.empty()) {
        const fs::path dir = ensure_dir(eval_out);
        write_text(dir / "eval_report.txt", eval_report_text(report));
        write_roc_csv(report.roc_points, dir / "roc.csv");
      }
    } else if (*ablate_cmd) {
      const TrainConfig cfg = ablate_cfg.resolve();
      const DataSplit split = ablate_split.load(cfg.seed);
      const fs::path dir = ensure_dir(ablate_out);
      save_config(cfg, dir / "config.cfg");
      const auto rows = run_ablation(split, cfg, ablate_jobs);
      write_ablation_csv(rows, dir / "ablation.csv");
      for (const auto& r : rows) {
        out << std::left << std::setw(5) << r.name << " cvar=" << r.use_cvar << " auc=" << r.use_auc
            << " sam=" << r.use_sam << " gamma=" << detail::format_double(r.gamma) << "  AUC " << auc_text(r.auc)
            << '\n';
      }
    } else if (*sweep_cmd) {
      const TrainConfig cfg = sweep_cfg.resolve();
      const DataSplit split = sweep_split.load(cfg.seed);
      const fs::path dir = ensure_dir(sweep_out);
      save_config(cfg, dir / "config.cfg");
      auto print = [&](SweepParameter p, const std::vector<SweepRow>& rows) {
        for (const auto& r : rows) {
          out << parameter_name(p) << "=" << detail::format_double(r.value) << "  AUC " << auc_text(r.auc) << '\n';
        }
      };
      const auto values = parse_value_list(sweep_values);
      if (sweep_param == "protocol") {
        const auto gammas = parse_value_list(sweep_gamma_values);
        const TwoStageSweep result = run_two_stage_sweep(split, cfg, values, gammas, sweep_jobs);
        write_sweep_csv(result.alpha_rows, SweepParameter::kAlpha, dir / "sweep_alpha.csv");
        write_sweep_csv(result.gamma_rows, SweepParameter::kGamma, dir / "sweep_gamma.csv");
        print(SweepParameter::kAlpha, result.alpha_rows);
        out << "best alpha=" << detail::format_double(result.best_alpha) << '\n';
        print(SweepParameter::kGamma, result.gamma_rows);
        out << "best gamma=" << detail::format_double(result.best_gamma) << '\n';
      } else {
        const SweepParameter p = sweep_param == "alpha" ? SweepParameter::kAlpha : SweepParameter::kGamma;
        const auto rows = run_sweep(split, cfg, p, values, sweep_jobs);
        write_sweep_csv(rows, p, dir / ("sweep_" + std::string(parameter_name(p)) + ".csv"));
        print(p, rows);
      }
    } else if (*land_cmd) {
      const TrainConfig cfg = land_cfg.resolve();
      const MlpModel model = load_checkpoint(land_model);
      const FeatureBank bank = load_bank(land_bank, format_from_path(land_bank));
      const fs::path dir = ensure_dir(land_out);
      const LandscapeSlice slice = landscape_slice(model, bank, cfg, land_grid, land_radius, land_seed.value_or(cfg.seed));
      write_landscape_csv(slice, dir / "landscape.csv");
      out << "landscape " << land_grid << "x" << land_grid << " radius=" << detail::format_double(land_radius)
          << " center_loss=" << detail::format_double(slice.center_loss) << " -> " << (dir / "landscape.csv").string()
          << '\n';
    }
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << " (state dump written to the output directory)\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace robustclf
