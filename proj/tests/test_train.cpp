#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "transmil/data.hpp"
#include "transmil/mil.hpp"
#include "transmil/train.hpp"

using namespace transmil;

namespace {

std::vector<Bag> toy_bags(std::size_t count, std::uint64_t seed, double shift) {
  std::mt19937_64 rng(seed);
  std::vector<Bag> bags;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor x = Tensor::randn({4, 3}, rng, 1.0);
    const int label = static_cast<int>(i % 2);
    if (label == 1)
      for (std::size_t r = 0; r < 4; ++r) x.mutable_data()[r * 3] += shift;
    bags.push_back({x, label, "bag" + std::to_string(i), "p" + std::to_string(i)});
  }
  return bags;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_dim = 3;
  cfg.msa = MSAConfig{4, 2, 4, kTrainPinvIters};
  cfg.classes = 2;
  return cfg;
}

}  // namespace

TEST(CrossEntropyTest, KnownValues) {
  EXPECT_NEAR(cross_entropy_loss(Tensor::from_vector({0.3, 0.3}), 0).item(), std::log(2.0), 1e-15);
  EXPECT_LT(cross_entropy_loss(Tensor::from_vector({20.0, -20.0}), 0).item(), 1e-8);
  EXPECT_NEAR(cross_entropy_loss(Tensor::from_vector({1000.0, 0.0}), 1).item(), 1000.0, 1e-9);
  EXPECT_THROW(cross_entropy_loss(Tensor::from_vector({0.0, 0.0}), 2), ParameterError);
}

TEST(CrossEntropyTest, GradientIsSoftmaxMinusOneHot) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = Tensor::randn({4}, rng, 2.0).set_requires_grad(true);
    const std::size_t label = static_cast<std::size_t>(trial % 4);
    GradTape tape;
    tape.backward(cross_entropy_loss(logits, label));
    double z = 0.0;
    for (double v : logits.data()) z += std::exp(v);
    for (std::size_t i = 0; i < 4; ++i)
      EXPECT_NEAR(logits.grad()[i], std::exp(logits[i]) / z - (i == label ? 1.0 : 0.0), 1e-10);
  }
}

TEST(LookaheadTest, AlphaOneSyncLeavesFastWeights) {
  Tensor w = Tensor::from_vector({1.0, -2.0}).set_requires_grad(true);
  TrainConfig cfg;
  cfg.lookahead_k = 3;
  cfg.lookahead_alpha = 1.0;
  LookaheadOptimizer opt({w}, cfg);
  for (int step = 0; step < 3; ++step) {
    w.mutable_grad()[0] = 0.5;
    w.mutable_grad()[1] = -0.25;
    const std::vector<double> before(w.data().begin(), w.data().end());
    opt.step();
    EXPECT_NE(w[0], before[0]);
  }
  EXPECT_EQ(opt.counter(), 0u);
  EXPECT_EQ(opt.slow_weights()[0][0], w[0]);
}

TEST(LookaheadTest, KOneAlphaHalfHalvesDisplacement) {
  TrainConfig cfg;
  cfg.lookahead_k = 1;
  cfg.lookahead_alpha = 0.5;
  cfg.weight_decay = 0.0;
  Tensor a = Tensor::from_vector({0.7}).set_requires_grad(true);
  Tensor b = Tensor::from_vector({0.7}).set_requires_grad(true);
  LookaheadOptimizer with_sync({a}, cfg);
  TrainConfig inner = cfg;
  inner.lookahead_alpha = 1.0;
  LookaheadOptimizer plain({b}, inner);
  a.mutable_grad()[0] = b.mutable_grad()[0] = 0.3;
  with_sync.step();
  plain.step();
  EXPECT_NEAR(a[0] - 0.7, 0.5 * (b[0] - 0.7), 1e-15);
}

TEST(LookaheadTest, ZeroGradientIsFixedPoint) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  Tensor w = Tensor::from_vector({0.25, -3.0}).set_requires_grad(true);
  LookaheadOptimizer opt({w}, cfg);
  for (int i = 0; i < 50; ++i) opt.step();
  EXPECT_EQ(w[0], 0.25);
  EXPECT_EQ(w[1], -3.0);
}

TEST(LookaheadTest, KOneAlphaOneIsTheInnerOptimiser) {
  TrainConfig cfg;
  cfg.lookahead_k = 1;
  cfg.lookahead_alpha = 1.0;
  Tensor w = Tensor::from_vector({0.5, -1.5, 2.0}).set_requires_grad(true);
  LookaheadOptimizer opt({w}, cfg);
  // Reference AdamW with decoupled decay.
  std::vector<double> ref{0.5, -1.5, 2.0}, m(3, 0.0), v(3, 0.0);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int t = 1; t <= 100; ++t) {
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = nd(rng);
      w.mutable_grad()[i] = g;
      m[i] = 0.9 * m[i] + (1.0 - 0.9) * g;
      v[i] = 0.999 * v[i] + (1.0 - 0.999) * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      ref[i] -= cfg.learning_rate * (mh / (std::sqrt(vh) + 1e-8) + cfg.weight_decay * ref[i]);
    }
    opt.step();
    for (std::size_t i = 0; i < 3; ++i) ASSERT_EQ(w[i], ref[i]) << "step " << t;
  }
}

TEST(LookaheadTest, InvalidConfig) {
  TrainConfig cfg;
  cfg.lookahead_alpha = 0.0;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = {};
  cfg.lookahead_k = 0;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = {};
  cfg.learning_rate = -1.0;
  EXPECT_THROW(cfg.validate(), ParameterError);
}

TEST(MetricsTest, BinaryAucExamples) {
  EXPECT_DOUBLE_EQ(auc_binary(std::vector<double>{0.9, 0.8, 0.3, 0.1}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(auc_binary(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(auc_binary(std::vector<double>{0.9, 0.6, 0.4, 0.1}, std::vector<int>{1, 0, 1, 0}), 0.75);
  EXPECT_THROW(auc_binary(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetricError);
}

TEST(MetricsTest, BinaryAucMatchesPairwiseOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coin(0, 1), level(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> scores(10);
    std::vector<int> labels(10);
    for (std::size_t i = 0; i < 10; ++i) {
      scores[i] = 0.25 * level(rng);  // coarse levels force ties
      labels[i] = coin(rng);
    }
    labels[0] = 0;
    labels[1] = 1;
    EXPECT_DOUBLE_EQ(auc_binary(scores, labels), oracle::pairwise_auc(scores, labels));
  }
}

TEST(MetricsTest, AucInvariantUnderMonotoneMaps) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> s(30), e(30), a(30);
  std::vector<int> y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    s[i] = nd(rng);
    e[i] = std::exp(s[i]);
    a[i] = 3.0 * s[i] - 7.0;
    y[i] = static_cast<int>(i % 2);
  }
  EXPECT_EQ(auc_binary(s, y), auc_binary(e, y));
  EXPECT_EQ(auc_binary(s, y), auc_binary(a, y));
}

TEST(MetricsTest, MacroAucMatchesPerClassOracle) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 12, c = 3;
    std::vector<double> scores(n * c);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % c);
    for (auto& v : scores) v = u(rng);
    double ref = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      std::vector<double> col(n);
      std::vector<int> is_k(n);
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = scores[i * c + k];
        is_k[i] = labels[i] == static_cast<int>(k);
      }
      ref += oracle::pairwise_auc(col, is_k) / c;
    }
    EXPECT_NEAR(auc_macro_ovr(scores, labels, c), ref, 1e-15);
  }
}

TEST(MetricsTest, MacroAucEdgeCases) {
  const std::vector<int> labels{0, 1, 2};
  const std::vector<double> perfect{1, 0, 0, 0, 1, 0, 0, 0, 1};
  EXPECT_DOUBLE_EQ(auc_macro_ovr(perfect, labels, 3), 1.0);
  EXPECT_DOUBLE_EQ(auc_macro_ovr(std::vector<double>(9, 1.0 / 3.0), labels, 3), 0.5);
  EXPECT_THROW(auc_macro_ovr(std::vector<double>(6, 0.5), std::vector<int>{0, 1}, 3), UndefinedMetricError);
}

TEST(MetricsTest, AccuracyThresholdAndArgmax) {
  EXPECT_DOUBLE_EQ(accuracy_binary(std::vector<double>{0.6, 0.4}, std::vector<int>{1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(accuracy_binary(std::vector<double>{0.5}, std::vector<int>{0}), 1.0);
  EXPECT_DOUBLE_EQ(accuracy_binary(std::vector<double>{0.5}, std::vector<int>{1}), 0.0);
  const std::vector<double> onehot{5, 0, 0, 0, 5, 0, 0, 0, 5};
  EXPECT_DOUBLE_EQ(accuracy_argmax(onehot, std::vector<int>{0, 1, 2}, 3), 1.0);
  EXPECT_DOUBLE_EQ(accuracy(std::vector<double>{0.5, 0.5, 0.2, 0.8}, std::vector<int>{0, 1}, 2), 1.0);
}

TEST(TrainLoopTest, ZeroEpochsKeepsModel) {
  TransMILModel m = TransMILModel::create(tiny_config(), 1);
  const auto before = detail::snapshot(m.parameters());
  TrainConfig cfg;
  cfg.epochs = 0;
  const EvalReport r = train_loop(toy_bags(8, 1, 2.0), toy_bags(4, 2, 2.0), m, cfg, 2);
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 0u);
  EXPECT_EQ(detail::snapshot(m.parameters()), before);
}

TEST(TrainLoopTest, DimensionMismatchBeforeTraining) {
  TransMILModel m = TransMILModel::create(tiny_config(), 1);
  std::vector<Bag> bad = toy_bags(4, 1, 1.0);
  bad[2].instances = Tensor::ones({3, 5});
  EXPECT_THROW(train_loop(bad, toy_bags(4, 2, 1.0), m, TrainConfig{}, 2), DimensionError);
}

TEST(TrainLoopTest, DeterministicLossCurvesInExactMode) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.mode = AttentionMode::exact;
  cfg.learning_rate = 1e-2;
  auto run = [&] {
    TransMILModel m = TransMILModel::create(tiny_config(), 3);
    const EvalReport r = train_loop(toy_bags(10, 4, 1.5), toy_bags(6, 5, 1.5), m, cfg, 2);
    return std::make_pair(r.loss_curve, encode_checkpoint(m));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(TrainLoopTest, LossFallsOnSeparableToyProblem) {
  std::size_t improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MeanPoolModel m = MeanPoolModel::create(3, 4, 2, seed);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.learning_rate = 1e-2;
    cfg.seed = seed;
    const EvalReport r = train_loop(toy_bags(20, 10 + seed, 3.0), toy_bags(6, 30 + seed, 3.0), m, cfg, 2);
    improved += r.loss_curve.back() < r.loss_curve[1];
  }
  EXPECT_GE(improved, 9u);
}

TEST(TrainLoopTest, RestoresBestValidationWeights) {
  TransMILModel m = TransMILModel::create(tiny_config(), 6);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.learning_rate = 5e-3;
  const auto val = toy_bags(8, 8, 2.0);
  const EvalReport r = train_loop(toy_bags(12, 7, 2.0), val, m, cfg, 2);
  const EvalReport again = evaluate(val, m, ForwardOptions{cfg.mode, PositionEncoding::ppeg}, 2);
  EXPECT_DOUBLE_EQ(again.auc, r.auc);
  EXPECT_DOUBLE_EQ(r.history[r.best_epoch].val_auc, r.auc);
}

TEST(ChanceLevelTest, RandomInitModelScoresNearHalf) {
  SyntheticConfig sc;
  sc.bag_count = 60;
  sc.min_instances = 8;
  sc.max_instances = 16;
  sc.feature_dim = 8;
  const auto bags = generate_synthetic_dataset(sc).bags;
  ModelConfig cfg;
  cfg.input_dim = 8;
  cfg.msa = MSAConfig{8, 2, 4, kTrainPinvIters};
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TransMILModel m = TransMILModel::create(cfg, seed);
    total += evaluate(bags, m, ForwardOptions{}, 2).auc;
  }
  EXPECT_GE(total / 10.0, 0.3);
  EXPECT_LE(total / 10.0, 0.7);
}

TEST(ChanceLevelTest, ZeroSeparationCannotBeLearned) {
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SyntheticConfig sc;
    sc.bag_count = 140;
    sc.min_instances = 10;
    sc.max_instances = 20;
    sc.feature_dim = 4;
    sc.cluster_separation = 0.0;
    sc.seed = seed;
    const auto bags = generate_synthetic_dataset(sc).bags;
    const std::vector<Bag> train(bags.begin(), bags.begin() + 60), val(bags.begin() + 60, bags.begin() + 80),
        test(bags.begin() + 80, bags.end());
    MeanPoolModel m = MeanPoolModel::create(4, 4, 2, seed);
    TrainConfig tc;
    tc.epochs = 5;
    tc.learning_rate = 1e-3;
    train_loop(train, val, m, tc, 2);
    total += evaluate(test, m, ForwardOptions{}, 2).auc;
  }
  EXPECT_NEAR(total / 5.0, 0.5, 0.1);
}

TEST(TrainLoopTest, TrainingLogFormat) {
  const std::string path = (std::filesystem::temp_directory_path() / "transmil_log.csv").string();
  write_training_log({{0, 0.7, 0.5, 0.5, 0.01}, {1, 0.6, 0.75, 0.5, 0.02}}, path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch,train_loss,val_auc,val_acc,seconds");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_EQ(text.find('\r'), std::string::npos);
}
