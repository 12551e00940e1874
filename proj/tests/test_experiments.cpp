#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <set>

#include "robustclf/error.hpp"
#include "robustclf/experiments.hpp"
#include "robustclf/rng.hpp"
#include "robustclf/trainer.hpp"
#include "test_util.hpp"

namespace robustclf {
namespace {

TrainConfig quick_config() {
  TrainConfig c;
  c.hidden = 16;
  c.epochs = 3;
  c.seed = 3;
  return c;
}

std::size_t count_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

TEST(Split, StratifiedDisjointAndDeterministic) {
  const FeatureBank bank = generate_synthetic(50, 150, 3, 1.0, 1);
  const DataSplit a = split_bank(bank, 0.2, 7);
  const DataSplit b = split_bank(bank, 0.2, 7);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.heldout, b.heldout);
  EXPECT_EQ(class_counts(a.heldout).n_pos, 10u);
  EXPECT_EQ(class_counts(a.heldout).n_neg, 30u);
  EXPECT_EQ(a.train.size() + a.heldout.size(), 200u);
  std::set<double> train_first;
  for (std::size_t i = 0; i < a.train.size(); ++i) train_first.insert(a.train.feature(i)[1]);
  for (std::size_t i = 0; i < a.heldout.size(); ++i) EXPECT_EQ(train_first.count(a.heldout.feature(i)[1]), 0u);
  EXPECT_THROW(split_bank(bank, 1.0, 7), InvalidArgument);
}

TEST(ParallelFor, VisitsEveryIndexAndPropagatesErrors) {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(37, 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 4) throw InvalidArgument("boom");
                            }),
               InvalidArgument);
}

TEST(Ablation, FiveVariantsWithExpectedToggles) {
  const auto rows = ablation_variants(TrainConfig{});
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].name, "V1");
  EXPECT_TRUE(rows[0].use_cvar && !rows[0].use_auc && !rows[0].use_sam);
  EXPECT_EQ(rows[0].gamma, 1.0);
  EXPECT_EQ(rows[1].name, "V2");
  EXPECT_TRUE(!rows[1].use_cvar && rows[1].use_auc && !rows[1].use_sam);
  EXPECT_EQ(rows[1].gamma, 0.0);
  EXPECT_EQ(rows[2].name, "V3");
  EXPECT_TRUE(rows[2].use_cvar && rows[2].use_auc && !rows[2].use_sam);
  EXPECT_EQ(rows[3].name, "V4");
  EXPECT_TRUE(rows[3].use_cvar && !rows[3].use_auc && rows[3].use_sam);
  EXPECT_EQ(rows[4].name, "full");
  EXPECT_TRUE(rows[4].use_cvar && rows[4].use_auc && rows[4].use_sam);
  EXPECT_EQ(rows[4].gamma, 0.5);
}

TEST(Ablation, SeparableBankEveryVariantReachesHighAuc) {
  const FeatureBank bank = generate_synthetic(120, 120, 4, 6.0, 2);
  const DataSplit split = split_bank(bank, 0.25, 2);
  TrainConfig c = quick_config();
  c.epochs = 10;
  c.lr = 1e-2;
  const auto rows = run_ablation(split, c, 2);
  ASSERT_EQ(rows.size(), 5u);
  for (const auto& r : rows) EXPECT_GE(r.auc, 0.99) << r.name;
  TempDir dir;
  write_ablation_csv(rows, dir.path() / "ablation.csv");
  EXPECT_EQ(count_lines(dir.path() / "ablation.csv"), 6u);
}

TEST(Ablation, SingleClassBankIsRejected) {
  const FeatureBank bank = generate_synthetic(0, 40, 3, 1.0, 3);
  const DataSplit split{bank, generate_synthetic(5, 5, 3, 1.0, 4)};
  EXPECT_THROW_MSG(run_ablation(split, quick_config()), InvalidArgument, "AUC loss undefined without both classes");
  TrainConfig v2 = quick_config();
  v2.ablation = {false, true, false};
  v2.gamma = 0.0;
  EXPECT_THROW_MSG(train(bank, v2), InvalidArgument, "AUC loss undefined without both classes");
}

TEST(Sweep, RowCountAndConsistencyWithDirectRun) {
  const FeatureBank bank = generate_synthetic(60, 60, 3, 2.0, 5);
  const DataSplit split = split_bank(bank, 0.25, 5);
  TrainConfig c = quick_config();
  c.epochs = 1;
  const std::vector<double> gammas{0.5};
  const auto one = run_sweep(split, c, SweepParameter::kGamma, gammas);
  ASSERT_EQ(one.size(), 1u);
  TrainConfig direct = c;
  direct.gamma = 0.5;
  EXPECT_EQ(one[0].auc, train_and_evaluate(split, direct));

  const auto alphas = parse_value_list("0.1:0.9:0.1");
  const auto rows = run_sweep(split, c, SweepParameter::kAlpha, alphas, 3);
  ASSERT_EQ(rows.size(), 9u);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(rows[k].value, alphas[k]);
  TempDir dir;
  write_sweep_csv(rows, SweepParameter::kAlpha, dir.path() / "s.csv");
  EXPECT_EQ(count_lines(dir.path() / "s.csv"), 10u);
  std::ifstream in(dir.path() / "s.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "alpha,auc");
}

TEST(Sweep, ParallelAndSerialAgree) {
  const FeatureBank bank = generate_synthetic(40, 40, 3, 2.0, 6);
  const DataSplit split = split_bank(bank, 0.25, 6);
  TrainConfig c = quick_config();
  c.epochs = 1;
  const std::vector<double> values{0.2, 0.6, 1.0};
  const auto serial = run_sweep(split, c, SweepParameter::kAlpha, values, 1);
  const auto parallel = run_sweep(split, c, SweepParameter::kAlpha, values, 3);
  for (std::size_t k = 0; k < values.size(); ++k) EXPECT_EQ(serial[k].auc, parallel[k].auc);
}

TEST(Sweep, RejectsInvalidValuesBeforeTraining) {
  const FeatureBank bank = generate_synthetic(20, 20, 3, 2.0, 7);
  const DataSplit split = split_bank(bank, 0.25, 7);
  const std::vector<double> values{0.5, 1.5};
  EXPECT_THROW(run_sweep(split, quick_config(), SweepParameter::kGamma, values), InvalidArgument);
}

TEST(ValueList, RangesAndLists) {
  EXPECT_EQ(parse_value_list("0.1:0.9:0.1"),
            (std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}));
  EXPECT_EQ(parse_value_list("0.5"), std::vector<double>{0.5});
  EXPECT_EQ(parse_value_list("0.2, 0.4,1"), (std::vector<double>{0.2, 0.4, 1.0}));
  EXPECT_THROW(parse_value_list("0.1:0.9"), InvalidArgument);
  EXPECT_THROW(parse_value_list("a,b"), InvalidArgument);
  EXPECT_THROW(parse_value_list("0.9:0.1:0.1"), InvalidArgument);
}

class LandscapeTest : public ::testing::Test {
 protected:
  void SetUp() override {
    bank_ = std::make_unique<FeatureBank>(generate_synthetic(30, 30, 3, 2.0, 8));
    TrainConfig c = quick_config();
    c.epochs = 2;
    config_ = c;
    model_ = std::make_unique<MlpModel>(train(*bank_, c).model);
  }
  std::unique_ptr<FeatureBank> bank_;
  TrainConfig config_;
  std::unique_ptr<MlpModel> model_;
};

TEST_F(LandscapeTest, CenterEqualsLossAtTheta) {
  const double loss = dataset_loss(*model_, *bank_, config_).total;
  for (std::size_t grid : {3u, 5u, 21u}) {
    const LandscapeSlice s = landscape_slice(*model_, *bank_, config_, grid, 0.5, 11);
    ASSERT_EQ(s.points.size(), grid * grid);
    EXPECT_EQ(s.center_loss, loss);
    const auto& mid = s.points[(grid / 2) * grid + grid / 2];
    EXPECT_EQ(mid.a, 0.0);
    EXPECT_EQ(mid.b, 0.0);
    EXPECT_EQ(mid.loss, loss);
  }
}

TEST_F(LandscapeTest, LatticeIsSymmetricAndDeterministic) {
  const LandscapeSlice s = landscape_slice(*model_, *bank_, config_, 4, 1.0, 12);
  ASSERT_EQ(s.points.size(), 16u);
  std::set<std::pair<double, double>> coords;
  for (const auto& p : s.points) coords.insert({p.a, p.b});
  for (const auto& p : s.points) EXPECT_EQ(coords.count({-p.a, -p.b}), 1u);
  EXPECT_EQ(s.points.front().a, -1.0);
  EXPECT_EQ(s.points.back().b, 1.0);
  const LandscapeSlice again = landscape_slice(*model_, *bank_, config_, 4, 1.0, 12);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(s.points[k].loss, again.points[k].loss);
  TempDir dir;
  write_landscape_csv(s, dir.path() / "l.csv");
  EXPECT_EQ(count_lines(dir.path() / "l.csv"), 17u);
}

TEST_F(LandscapeTest, DirectionsAreFilterNormalized) {
  const auto [d1, d2] = landscape_directions(*model_, 13);
  const ParamLayout& layout = model_->layout();
  const auto theta = model_->parameters();
  for (int l = 0; l < kNumLayers; ++l) {
    const auto& w = layout.weight[l];
    for (std::size_t r = 0; r < w.rows; ++r) {
      double dn = 0.0;
      double tn = 0.0;
      for (std::size_t c = 0; c < w.cols; ++c) {
        dn += d1[w.offset + r * w.cols + c] * d1[w.offset + r * w.cols + c];
        tn += theta[w.offset + r * w.cols + c] * theta[w.offset + r * w.cols + c];
      }
      EXPECT_NEAR(std::sqrt(dn), std::sqrt(tn), 1e-12);
    }
  }
  for (std::size_t i = 0; i < layout.bias[0].size(); ++i) EXPECT_EQ(d2[layout.bias[0].offset + i], 0.0);
}

TEST_F(LandscapeTest, RejectsBadArguments) {
  EXPECT_THROW(landscape_slice(*model_, *bank_, config_, 1, 1.0, 1), InvalidArgument);
  EXPECT_THROW(landscape_slice(*model_, *bank_, config_, 3, 0.0, 1), InvalidArgument);
}

}  // namespace
}  // namespace robustclf
