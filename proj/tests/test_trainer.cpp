#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "robustclf/error.hpp"
#include "robustclf/metrics.hpp"
#include "robustclf/rng.hpp"
#include "robustclf/trainer.hpp"
#include "test_util.hpp"

namespace robustclf {
namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.hidden = 16;
  c.epochs = 3;
  c.seed = 5;
  return c;
}

TEST(EpochBatches, CoverEveryIndexOnce) {
  Rng rng(1);
  for (std::size_t n : {2u, 31u, 32u, 33u, 64u, 65u, 100u}) {
    const auto batches = epoch_batches(n, 32, rng);
    std::vector<std::size_t> seen;
    for (const auto& b : batches) {
      EXPECT_GE(b.size(), 2u);
      seen.insert(seen.end(), b.begin(), b.end());
    }
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> want(n);
    std::iota(want.begin(), want.end(), 0);
    EXPECT_EQ(seen, want);
    const std::size_t ceil = (n + 31) / 32;
    EXPECT_EQ(batches.size(), n % 32 == 1 && n > 1 ? ceil - 1 : ceil) << n;
  }
}

TEST(EpochBatches, RejectsDegenerateSizes) {
  Rng rng(1);
  EXPECT_THROW(epoch_batches(1, 32, rng), InvalidArgument);
  EXPECT_THROW(epoch_batches(10, 1, rng), InvalidArgument);
}

TEST(Train, ZeroLearningRateKeepsInitialParameters) {
  const FeatureBank bank = generate_synthetic(40, 40, 4, 2.0, 1);
  TrainConfig c = small_config();
  c.lr = 0.0;
  const TrainResult r = train(bank, c);
  const MlpModel init = initial_model(4, c);
  EXPECT_TRUE(std::equal(r.model.parameters().begin(), r.model.parameters().end(), init.parameters().begin()));
}

TEST(Train, DeterministicGivenSeed) {
  const FeatureBank bank = generate_synthetic(50, 50, 6, 2.0, 2);
  const TrainConfig c = small_config();
  const TrainResult a = train(bank, c);
  const TrainResult b = train(bank, c);
  EXPECT_TRUE(a.model == b.model);
  TrainConfig other = c;
  other.seed = 6;
  EXPECT_FALSE(train(bank, other).model == a.model);
}

TEST(Train, RecordHasOneEntryPerEpochAndRoundTrips) {
  const FeatureBank bank = generate_synthetic(30, 35, 3, 2.0, 3);
  const TrainConfig c = small_config();
  std::size_t callbacks = 0;
  TrainResult r = train(bank, c, [&](const EpochMetrics&) { ++callbacks; });
  EXPECT_EQ(callbacks, 3u);
  ASSERT_EQ(r.record.epochs.size(), 3u);
  // 65 rows in batches of 32: the trailing single row joins the second batch.
  EXPECT_EQ(r.record.batches_per_epoch, 2u);
  EXPECT_EQ(r.record.total_steps, 6u);
  EXPECT_EQ(r.record.epochs[0].lr, 1e-3);
  EXPECT_LT(r.record.epochs[2].lr, r.record.epochs[1].lr);
  r.record.checkpoint_path = "run/model.ckpt";

  TempDir dir;
  write_run_record(r.record, dir.path() / "rec.txt");
  const TrainRunRecord back = read_run_record(dir.path() / "rec.txt");
  EXPECT_EQ(back.config, c);
  EXPECT_EQ(back.n_pos, 30u);
  EXPECT_EQ(back.n_neg, 35u);
  EXPECT_EQ(back.checkpoint_path, "run/model.ckpt");
  ASSERT_EQ(back.epochs.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(back.epochs[k].epoch, k + 1);
    EXPECT_EQ(back.epochs[k].mean_total, r.record.epochs[k].mean_total);
    EXPECT_EQ(back.epochs[k].mean_lambda, r.record.epochs[k].mean_lambda);
    EXPECT_EQ(back.epochs[k].batches, r.record.epochs[k].batches);
  }
}

TEST(Train, LearnsASeparableProblem) {
  const FeatureBank bank = generate_synthetic(100, 100, 4, 6.0, 4);
  const FeatureBank heldout = generate_synthetic(60, 60, 4, 6.0, 40);
  TrainConfig c = small_config();
  c.epochs = 10;
  c.lr = 1e-2;
  const TrainResult r = train(bank, c);
  EXPECT_EQ(r.model.mode(), Mode::kEval);
  EXPECT_GE(evaluate(r.model, heldout).auc, 0.99);
}

TEST(Train, SingleClassBankPolicy) {
  const FeatureBank bank = generate_synthetic(0, 20, 3, 1.0, 5);
  TrainConfig c = small_config();
  c.gamma = 0.0;
  EXPECT_THROW_MSG(train(bank, c), InvalidArgument, "AUC loss undefined without both classes");
  c.gamma = 0.5;
  const TrainResult r = train(bank, c);
  EXPECT_TRUE(r.record.auc_term_inactive);
  for (const auto& e : r.record.epochs) {
    EXPECT_EQ(e.single_class_batches, e.batches);
    EXPECT_EQ(e.mean_auc, 0.0);
  }
}

TEST(Train, RejectsTinyBanks) {
  EXPECT_THROW(train(FeatureBank(3), small_config()), InvalidArgument);
  EXPECT_THROW(train(generate_synthetic(1, 0, 3, 1.0, 1), small_config()), InvalidArgument);
}

TEST(Train, DivergenceAbortsWithStateDump) {
  const FeatureBank bank = generate_synthetic(20, 20, 3, 1.0, 6);
  TrainConfig c = small_config();
  c.lr = 1e300;
  c.schedule = ScheduleKind::kConstant;
  try {
    (void)train(bank, c);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(e.dump().find("params.count="), std::string::npos);
  }
}

struct StepFixture {
  StepFixture(std::size_t rows, std::uint64_t seed) : model(initial_model(5, config_for())), adam(model.parameter_count()) {
    Rng rng(seed);
    batch.resize(static_cast<Eigen::Index>(rows), 5);
    for (Eigen::Index i = 0; i < batch.size(); ++i) batch.data()[i] = rng.normal();
    for (std::size_t i = 0; i < rows; ++i) labels.push_back(i % 3 == 0 ? Label::kGenerated : Label::kReal);
  }
  static TrainConfig config_for() {
    TrainConfig c;
    c.hidden = 8;
    return c;
  }
  MlpModel model;
  AdamState adam;
  Matrix batch;
  std::vector<Label> labels;
};

TEST(TrainingStep, FittedLambdaWithinBatchLossRange) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    StepFixture f(9, seed);
    const TrainConfig c = StepFixture::config_for();
    Rng rng(seed);
    MlpModel probe = f.model;
    Rng probe_rng = rng;
    const ForwardTrace t = forward(probe, f.batch, probe_rng);
    std::vector<double> bce;
    for (std::size_t i = 0; i < 9; ++i) bce.push_back(bce_from_logit(t.logits(i), f.labels[i]));
    const StepOutcome out = training_step(f.model, f.adam, f.batch, f.labels, c, 1e-3, rng);
    EXPECT_GE(out.clean.fitted_lambda, *std::min_element(bce.begin(), bce.end()));
    EXPECT_LE(out.clean.fitted_lambda, *std::max_element(bce.begin(), bce.end()));
    EXPECT_EQ(out.perturbed.fitted_lambda, out.clean.fitted_lambda);
  }
}

TEST(TrainingStep, SamPerturbsAlongGradientSign) {
  StepFixture f(8, 7);
  const TrainConfig c = StepFixture::config_for();
  Rng rng(7);
  const StepOutcome out = training_step(f.model, f.adam, f.batch, f.labels, c, 1e-3, rng);
  ASSERT_EQ(out.epsilon.size(), out.clean_gradient.size());
  for (std::size_t i = 0; i < out.epsilon.size(); ++i) {
    const double g = out.clean_gradient[i];
    EXPECT_EQ(out.epsilon[i], g > 0 ? 0.05 : (g < 0 ? -0.05 : 0.0));
  }
  EXPECT_NE(out.applied_gradient, out.clean_gradient);
}

TEST(TrainingStep, ReusedWorkspaceMatchesFreshOutcomes) {
  StepFixture a(8, 11);
  StepFixture b(8, 11);
  TrainConfig c = StepFixture::config_for();
  Rng ra(5);
  Rng rb(5);
  StepWorkspace workspace;
  for (int step = 0; step < 4; ++step) {
    // Alternate SAM so the reused epsilon buffer is both filled and cleared.
    c.ablation.use_sam = step % 2 == 0;
    const StepOutcome fresh = training_step(a.model, a.adam, a.batch, a.labels, c, 1e-3, ra);
    const StepOutcome& reused = training_step(b.model, b.adam, b.batch, b.labels, c, 1e-3, rb, workspace);
    EXPECT_EQ(fresh.clean_gradient, reused.clean_gradient);
    EXPECT_EQ(fresh.applied_gradient, reused.applied_gradient);
    EXPECT_EQ(fresh.epsilon, reused.epsilon);
    EXPECT_EQ(fresh.perturbed.total, reused.perturbed.total);
  }
  EXPECT_TRUE(a.model == b.model);
}

TEST(TrainingStep, SamStepEqualsPlainStepWhenGradientIsZero) {
  // All-zero model, balanced batch, pure mean BCE: every gradient vanishes.
  TrainConfig sam;
  sam.hidden = 8;
  sam.ablation.use_cvar = false;
  sam.ablation.use_auc = false;
  TrainConfig plain = sam;
  plain.ablation.use_sam = false;

  MlpModel zero(4, 8, 0.1);
  Matrix batch(6, 4);
  Rng data(3);
  for (Eigen::Index i = 0; i < batch.size(); ++i) batch.data()[i] = data.normal();
  const std::vector<Label> labels{Label::kGenerated, Label::kReal, Label::kGenerated,
                                  Label::kReal,      Label::kGenerated, Label::kReal};

  MlpModel a = zero;
  MlpModel b = zero;
  AdamState adam_a(a.parameter_count());
  AdamState adam_b(b.parameter_count());
  Rng ra(9);
  Rng rb(9);
  const StepOutcome out = training_step(a, adam_a, batch, labels, sam, 1e-3, ra);
  (void)training_step(b, adam_b, batch, labels, plain, 1e-3, rb);
  for (double g : out.clean_gradient) ASSERT_EQ(g, 0.0);
  for (double e : out.epsilon) ASSERT_EQ(e, 0.0);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(adam_a.first_moment, adam_b.first_moment);
  EXPECT_EQ(adam_a.second_moment, adam_b.second_moment);
}

// With CVaR, AUC and SAM all off, training is mean BCE + Adam. A standalone
// loop using only the network and optimizer primitives must produce the same
// trajectory.
TEST(Train, DegeneratesToPlainMeanBceAdam) {
  const FeatureBank bank = generate_synthetic(160, 160, 5, 1.5, 8);
  TrainConfig c;
  c.hidden = 12;
  c.epochs = 10;
  c.seed = 21;
  c.ablation = Ablation{false, false, false};
  const TrainResult trained = train(bank, c);

  MlpModel model = initial_model(5, c);
  AdamState adam(model.parameter_count());
  Rng shuffle_rng = Rng::stream(c.seed, 2);
  Rng dropout_rng = Rng::stream(c.seed, 3);
  const std::uint64_t total = c.epochs * 10;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    for (const auto& rows : epoch_batches(bank.size(), c.batch_size, shuffle_rng)) {
      const Matrix batch = gather_rows(bank.values(), bank.dim(), rows);
      const ForwardTrace t = forward(model, batch, dropout_rng);
      const double w = 1.0 / static_cast<double>(rows.size());
      std::vector<double> dlogit(rows.size());
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const double y = bank.label(rows[k]) == Label::kGenerated ? 1.0 : 0.0;
        dlogit[k] = w * (t.probabilities(static_cast<Eigen::Index>(k)) - y);
      }
      adam_step(adam, model.parameters(), backward_from_logits(model, t, dlogit),
                lr_at(LrSchedule{c.lr, total, c.schedule}, step++));
    }
  }
  ASSERT_EQ(step, 100u);
  model.set_mode(Mode::kEval);
  EXPECT_TRUE(model == trained.model);
}

}  // namespace
}  // namespace robustclf
