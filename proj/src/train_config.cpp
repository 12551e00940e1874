#include "robustclf/train_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "io_util.hpp"
#include "robustclf/error.hpp"

namespace robustclf {

namespace {

double to_double(std::string_view key, std::string_view value) {
  double out = 0.0;
  if (!detail::parse_double(value, out) || !std::isfinite(out)) {
    throw InvalidArgument("config key '" + std::string(key) + "': not a finite number: '" + std::string(value) + "'");
  }
  return out;
}

std::uint64_t to_uint(std::string_view key, std::string_view value) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (value.empty() || ec != std::errc{} || ptr != value.data() + value.size()) {
    throw InvalidArgument("config key '" + std::string(key) + "': not a non-negative integer: '" +
                          std::string(value) + "'");
  }
  return out;
}

bool to_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw InvalidArgument("config key '" + std::string(key) + "': expected true/false, got '" + std::string(value) + "'");
}

const char* bool_text(bool b) { return b ? "true" : "false"; }

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidArgument("invalid config: " + msg); };
  if (!(alpha > 0.0 && alpha <= 1.0)) fail("alpha must lie in (0, 1]");
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma must lie in [0, 1]");
  if (!(eta > 0.0 && eta <= 1.0)) fail("eta must lie in (0, 1]");
  if (!(p > 1.0)) fail("p must be > 1");
  if (!(delta > 0.0)) fail("delta must be positive");
  if (!(lr >= 0.0)) fail("lr must be >= 0");
  if (batch_size < 2) fail("batch_size must be >= 2");
  if (epochs == 0) fail("epochs must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
  if (hidden == 0) fail("hidden must be >= 1");
  if (!(bn_momentum > 0.0 && bn_momentum < 1.0)) fail("bn_momentum must lie in (0, 1)");
  if (!(bn_eps > 0.0)) fail("bn_eps must be positive");
  if (!(lambda_tol > 0.0)) fail("lambda_tol must be positive");
  if (lambda_max_iter < 0) fail("lambda_max_iter must be >= 0");
}

CvarConfig TrainConfig::cvar_config() const {
  CvarConfig c;
  c.alpha = effective_alpha();
  c.search.tol = lambda_tol;
  c.search.max_iter = lambda_max_iter;
  return c;
}

AucConfig TrainConfig::auc_config() const { return AucConfig{eta, p}; }

SamConfig TrainConfig::sam_config() const { return SamConfig{delta, sam_variant}; }

void TrainConfig::set(std::string_view key, std::string_view value) {
  value = detail::trim(value);
  if (key == "alpha") {
    alpha = to_double(key, value);
  } else if (key == "gamma") {
    gamma = to_double(key, value);
  } else if (key == "eta") {
    eta = to_double(key, value);
  } else if (key == "p") {
    p = to_double(key, value);
  } else if (key == "delta") {
    delta = to_double(key, value);
  } else if (key == "lr") {
    lr = to_double(key, value);
  } else if (key == "batch_size") {
    batch_size = to_uint(key, value);
  } else if (key == "epochs" || key == "max_iterations") {
    epochs = to_uint(key, value);
  } else if (key == "seed") {
    seed = to_uint(key, value);
  } else if (key == "use_cvar") {
    ablation.use_cvar = to_bool(key, value);
  } else if (key == "use_auc") {
    ablation.use_auc = to_bool(key, value);
  } else if (key == "use_sam") {
    ablation.use_sam = to_bool(key, value);
  } else if (key == "dropout_rate") {
    dropout_rate = to_double(key, value);
  } else if (key == "sam_variant") {
    if (value == "sign") {
      sam_variant = SamVariant::kSign;
    } else if (value == "l2" || value == "l2_normalized") {
      sam_variant = SamVariant::kL2Normalized;
    } else {
      throw InvalidArgument("config key 'sam_variant': expected sign or l2_normalized");
    }
  } else if (key == "sam_batch_stats") {
    if (value == "recompute") {
      sam_batch_stats = SamBatchStats::kRecompute;
    } else if (value == "freeze") {
      sam_batch_stats = SamBatchStats::kFreeze;
    } else {
      throw InvalidArgument("config key 'sam_batch_stats': expected recompute or freeze");
    }
  } else if (key == "hidden") {
    hidden = to_uint(key, value);
  } else if (key == "schedule") {
    if (value == "cosine") {
      schedule = ScheduleKind::kCosine;
    } else if (value == "constant") {
      schedule = ScheduleKind::kConstant;
    } else {
      throw InvalidArgument("config key 'schedule': expected cosine or constant");
    }
  } else if (key == "bn_momentum") {
    bn_momentum = to_double(key, value);
  } else if (key == "bn_eps") {
    bn_eps = to_double(key, value);
  } else if (key == "lambda_tol") {
    lambda_tol = to_double(key, value);
  } else if (key == "lambda_max_iter") {
    lambda_max_iter = static_cast<int>(to_uint(key, value));
  } else {
    throw InvalidArgument("unknown config key '" + std::string(key) + "'");
  }
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  auto num = [](double v) { return detail::format_double(v); };
  out << "alpha=" << num(alpha) << '\n'
      << "gamma=" << num(gamma) << '\n'
      << "eta=" << num(eta) << '\n'
      << "p=" << num(p) << '\n'
      << "delta=" << num(delta) << '\n'
      << "lr=" << num(lr) << '\n'
      << "batch_size=" << batch_size << '\n'
      << "epochs=" << epochs << '\n'
      << "seed=" << seed << '\n'
      << "use_cvar=" << bool_text(ablation.use_cvar) << '\n'
      << "use_auc=" << bool_text(ablation.use_auc) << '\n'
      << "use_sam=" << bool_text(ablation.use_sam) << '\n'
      << "dropout_rate=" << num(dropout_rate) << '\n'
      << "sam_variant=" << (sam_variant == SamVariant::kSign ? "sign" : "l2_normalized") << '\n'
      << "sam_batch_stats=" << (sam_batch_stats == SamBatchStats::kRecompute ? "recompute" : "freeze") << '\n'
      << "hidden=" << hidden << '\n'
      << "schedule=" << (schedule == ScheduleKind::kCosine ? "cosine" : "constant") << '\n'
      << "bn_momentum=" << num(bn_momentum) << '\n'
      << "bn_eps=" << num(bn_eps) << '\n'
      << "lambda_tol=" << num(lambda_tol) << '\n'
      << "lambda_max_iter=" << lambda_max_iter << '\n';
  return out.str();
}

TrainConfig parse_config(std::string_view text, TrainConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InvalidArgument("config line " + std::to_string(line_no) + ": expected key=value");
    }
    base.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::move(base));
}

void save_config(const TrainConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config: " + path.string());
  out << config.to_text();
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace robustclf
