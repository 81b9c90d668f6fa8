#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "stet/checkpoint.hpp"
#include "stet/config.hpp"
#include "stet/errors.hpp"
#include "stet/harness.hpp"
#include "stet/ops.hpp"
#include "stet/optimizer.hpp"
#include "tiny_config.hpp"

using namespace stet;
namespace fs = std::filesystem;

namespace {

bool same_tensors(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape()) return false;
    if (!std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin())) return false;
  }
  return true;
}

std::vector<NamedTensor> parameters_only(const Checkpoint& c) {
  std::vector<NamedTensor> out;
  for (const auto& e : c.tensors)
    if (e.first.rfind("opt.", 0) != 0 && e.first.rfind("norm.", 0) != 0 && e.first.rfind("target.", 0) != 0)
      out.push_back(e);
  return out;
}

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "stet_harness_tests" / name;
  fs::create_directories(d);
  return d;
}

}  // namespace

// Configuration

TEST(Config, DefaultsMatchDocumentedValues) {
  const RunConfig c;
  EXPECT_EQ(c.optimizer.lr, 1e-4);
  EXPECT_EQ(c.optimizer.weight_decay, 1e-3);
  EXPECT_EQ(c.training.batch_size, 16u);
  EXPECT_EQ(c.training.pretrain_epochs, 20u);
  EXPECT_EQ(c.model.dropout, 0.2);
  EXPECT_EQ(c.mask.ratio, 0.15);
  EXPECT_EQ(c.mask.mean_masked_length, 3.0);
  EXPECT_EQ(c.model.short_windows, (std::vector<std::size_t>{41, 21}));
  EXPECT_EQ(c.data.train_parts, 5u);
  EXPECT_EQ(c.data.test_parts, 2u);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c = tiny_run_config();
  c.model.decoder = DecoderMode::LongOnly;
  c.data.normalization = {"minmax", "mulaw"};
  c.training.asymmetric.gamma_neg = 2.0;
  const RunConfig back = parse_run_config(run_config_to_json(c));
  EXPECT_EQ(run_config_to_json(back), run_config_to_json(c));
  EXPECT_EQ(diff_configs(c.model, back.model), "");
}

TEST(Config, UnknownKeyNamed) {
  try {
    parse_run_config(R"({"schema_version": 1, "optimizer": {"lr": 0.1, "momentum": 0.9}})");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("optimizer.momentum"), std::string::npos) << e.what();
  }
}

TEST(Config, SchemaVersionChecked) {
  EXPECT_THROW(parse_run_config(R"({"schema_version": 99})"), ConfigError);
  EXPECT_THROW(parse_run_config("{not json"), ConfigError);
}

TEST(Config, Overrides) {
  RunConfig c;
  apply_override(c, "optimizer.lr=0");
  apply_override(c, "model.short_windows=[7,5]");
  apply_override(c, "model.decoder=short_only");
  apply_override(c, "seed=9");
  EXPECT_EQ(c.optimizer.lr, 0.0);
  EXPECT_EQ(c.model.short_windows, (std::vector<std::size_t>{7, 5}));
  EXPECT_EQ(c.model.decoder, DecoderMode::ShortOnly);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_THROW(apply_override(c, "optimizer.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "no_equals_sign"), ConfigError);
}

TEST(Config, LossMustMatchTask) {
  RunConfig c;
  c.model.task = Task::Regress;
  EXPECT_THROW(c.validate(), ConfigError);
  c.training.loss = "mse";
  EXPECT_NO_THROW(c.validate());
}

// Optimizer

TEST(Optimizer, ZeroGradZeroDecayLeavesParameters) {
  Tensor w = Tensor::from({3}, {1, -2, 3}, true);
  AdamW opt({{"w", w}}, {0.1, 0.0});
  w.grad();
  opt.step();
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), (std::vector<double>{1, -2, 3}));
}

TEST(Optimizer, DecayAppliedMultiplicativelyBeforeUpdate) {
  Tensor w = Tensor::from({2}, {1, -2}, true);
  AdamW opt({{"w", w}}, {0.1, 0.5});
  w.grad();
  opt.step();
  EXPECT_DOUBLE_EQ(w[0], 1.0 * (1 - 0.05));
  EXPECT_DOUBLE_EQ(w[1], -2.0 * (1 - 0.05));
}

TEST(Optimizer, DescendsOnQuadratic) {
  Tensor x = Tensor::from({1}, {1.0}, true);
  AdamW opt({{"x", x}}, {0.1, 0.0});
  backward(sum(mul(x, x)));
  opt.step();
  // First bias-corrected step moves by lr * g / |g|.
  EXPECT_NEAR(x[0], 0.9, 1e-6);
}

TEST(Optimizer, IdenticalRunsGiveIdenticalState) {
  const auto run = [] {
    Tensor x = Tensor::from({2}, {1.0, -0.5}, true);
    AdamW opt({{"x", x}}, {0.05, 0.01});
    for (int i = 0; i < 5; ++i) {
      backward(sum(mul(mul(x, x), x)));
      opt.step();
      opt.zero_grad();
      Tape::current().reset();
    }
    return opt.state();
  };
  EXPECT_TRUE(same_tensors(run(), run()));
}

TEST(Optimizer, NonFiniteGradientAborts) {
  Tensor x = Tensor::from({1}, {1.0}, true);
  AdamW opt({{"x", x}}, {});
  x.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(opt.step(), NumericError);
}

TEST(Optimizer, StateRoundTrip) {
  Tensor x = Tensor::from({1}, {1.0}, true);
  AdamW a({{"x", x}}, {0.1, 0.0});
  backward(sum(mul(x, x)));
  a.step();
  AdamW b({{"x", x}}, {0.1, 0.0});
  b.load_state(a.state());
  EXPECT_TRUE(same_tensors(a.state(), b.state()));
  EXPECT_EQ(b.steps(), 1u);
}

// Checkpoints

TEST(Checkpoint, SaveLoadIsLossless) {
  const RunConfig cfg = tiny_run_config();
  const StetModel model(cfg.model, 3);
  const Checkpoint c = make_checkpoint(model, {{"phase", "test"}});
  const fs::path p = temp_dir("ckpt") / "a.ckpt";
  save_checkpoint(p, c);
  const Checkpoint back = load_checkpoint(p);
  EXPECT_EQ(diff_configs(c.config, back.config), "");
  EXPECT_EQ(back.metadata, c.metadata);
  EXPECT_TRUE(same_tensors(back.tensors, c.tensors));
}

TEST(Checkpoint, ConfigMismatchNamesFields) {
  RunConfig cfg = tiny_run_config();
  const Checkpoint c = make_checkpoint(StetModel(cfg.model, 3));
  cfg.model.hidden = 16;
  cfg.model.decoder = DecoderMode::LongOnly;
  StetModel other(cfg.model, 3);
  try {
    restore_parameters(other, c);
    FAIL() << "expected ConfigMismatchError";
  } catch (const ConfigMismatchError& e) {
    EXPECT_NE(e.diff().find("hidden"), std::string::npos);
    EXPECT_NE(e.diff().find("decoder"), std::string::npos);
  }
}

TEST(Checkpoint, CorruptFileRejected) {
  const fs::path p = temp_dir("ckpt") / "bad.ckpt";
  { std::ofstream(p, std::ios::binary) << "STETCKPT\x01"; }
  EXPECT_THROW(load_checkpoint(p), Error);
}

// Data preparation

TEST(Split, StratifiedFiveToTwo) {
  SyntheticSpec s;
  s.n_classes = 3;
  s.samples_per_class = 14;
  s.t = 16;
  const auto recs = generate_synthetic_dataset(s);
  const SplitIndices a = stratified_split(recs, 5, 2, 42);
  EXPECT_EQ(a.train.size(), 30u);
  EXPECT_EQ(a.test.size(), 12u);
  std::vector<int> test_per_class(3, 0);
  for (auto i : a.test) ++test_per_class[recs[i].label];
  EXPECT_EQ(test_per_class, (std::vector<int>{4, 4, 4}));
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  all.insert(a.test.begin(), a.test.end());
  EXPECT_EQ(all.size(), recs.size());
  const SplitIndices b = stratified_split(recs, 5, 2, 42);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(stratified_split(recs, 5, 2, 43).test, a.test);
}

TEST(Prepare, NormalizationFittedOnTrainOnly) {
  const RunConfig cfg = tiny_run_config();
  const PreparedData d = prepare_data(cfg);
  ASSERT_EQ(d.norm.min.size(), 4u);
  for (std::size_t c = 0; c < 4; ++c) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& w : d.train)
      for (std::size_t r = 0; r < w.values.rows; ++r) lo = std::min(lo, w.values(r, c)), hi = std::max(hi, w.values(r, c));
    EXPECT_DOUBLE_EQ(lo, -1.0);
    EXPECT_DOUBLE_EQ(hi, 1.0);
    for (const auto& w : d.test)
      for (std::size_t r = 0; r < w.values.rows; ++r) EXPECT_LE(std::abs(w.values(r, c)), 1.0);
  }
  EXPECT_EQ(d.n_classes, 4u);
}

TEST(Prepare, MismatchedShapesAreConfigErrors) {
  RunConfig cfg = tiny_run_config();
  cfg.model.channels = 5;
  EXPECT_THROW(prepare_data(cfg), ConfigError);
  cfg = tiny_run_config();
  cfg.model.steps = 32;
  EXPECT_THROW(prepare_data(cfg), ConfigError);
}

TEST(Prepare, RegressionTargetsAreWindowMeans) {
  RunConfig cfg = tiny_run_config();
  cfg.model.task = Task::Regress;
  cfg.model.outputs = 2;
  cfg.training.loss = "mse";
  const PreparedData d = prepare_data(cfg);
  const auto& w = d.train.front();
  const auto y = window_target(w);
  for (std::size_t k = 0; k < 2; ++k) {
    double m = 0.0;
    for (std::size_t r = 0; r < w.trajectory.rows; ++r) m += w.trajectory(r, k);
    EXPECT_NEAR(y[k], m / w.trajectory.rows, 1e-12);
  }
  EXPECT_EQ(d.target_scale.size(), 2u);
}

// Training

TEST(Pretrain, ZeroLearningRateKeepsParameters) {
  RunConfig cfg = tiny_run_config();
  cfg.optimizer.lr = 0.0;
  const PreparedData d = prepare_data(cfg);
  const PretrainResult r = run_pretrain(cfg, d);
  cfg.training.pretrain_epochs = 0;
  const PretrainResult untouched = run_pretrain(cfg, d);
  EXPECT_TRUE(same_tensors(parameters_only(r.checkpoint), parameters_only(untouched.checkpoint)));
}

TEST(Pretrain, LossDecreases) {
  RunConfig cfg = tiny_run_config();
  cfg.training.pretrain_epochs = 8;
  cfg.optimizer.lr = 3e-3;
  const PretrainResult r = run_pretrain(cfg, prepare_data(cfg));
  std::vector<double> train_loss;
  for (const auto& rec : r.log)
    if (rec.split == "train") train_loss.push_back(rec.loss);
  ASSERT_EQ(train_loss.size(), 8u);
  EXPECT_LT(train_loss.back(), train_loss.front());
}

TEST(Pretrain, ResumeReproducesUninterruptedRun) {
  RunConfig cfg = tiny_run_config();
  cfg.training.pretrain_epochs = 3;
  const PreparedData d = prepare_data(cfg);
  const PretrainResult full = run_pretrain(cfg, d);
  cfg.training.pretrain_epochs = 1;
  const PretrainResult first = run_pretrain(cfg, d);
  const fs::path p = temp_dir("resume") / "p.ckpt";
  save_checkpoint(p, first.checkpoint);
  const Checkpoint loaded = load_checkpoint(p);
  cfg.training.pretrain_epochs = 3;
  const PretrainResult resumed = run_pretrain(cfg, d, &loaded);
  EXPECT_TRUE(same_tensors(resumed.checkpoint.tensors, full.checkpoint.tensors));
  EXPECT_EQ(resumed.checkpoint.metadata.at("epochs_done"), "3");
}

TEST(Finetune, LogEpochsIncreaseAndProvenanceDiffers) {
  RunConfig cfg = tiny_run_config();
  const PreparedData d = prepare_data(cfg);
  const PretrainResult pre = run_pretrain(cfg, d);
  const FinetuneResult a = run_finetune(cfg, d, &pre.checkpoint);
  const FinetuneResult b = run_finetune(cfg, d, nullptr);
  EXPECT_EQ(a.report.header.at("init"), "pretrained");
  EXPECT_EQ(b.report.header.at("init"), "scratch");
  EXPECT_NE(a.report.header.at("optimizer").find("decoupled weight decay"), std::string::npos);
  std::size_t prev = 0;
  for (const auto& r : a.log) {
    EXPECT_GE(r.epoch, prev);
    prev = r.epoch;
  }
  ASSERT_TRUE(a.report.accuracy.has_value());
  EXPECT_EQ(a.report.accuracy->total, d.test.size());
  EXPECT_GE(a.best_epoch, 1u);
}

TEST(Finetune, AblationModesGiveDistinctReports) {
  RunConfig cfg = tiny_run_config();
  cfg.training.finetune_epochs = 1;
  const PreparedData d = prepare_data(cfg);
  std::set<std::string> decoders;
  std::set<std::string> outputs;
  for (DecoderMode m : {DecoderMode::Fused, DecoderMode::LongOnly, DecoderMode::ShortOnly}) {
    cfg.model.decoder = m;
    const FinetuneResult r = run_finetune(cfg, d);
    decoders.insert(r.report.header.at("decoder"));
    outputs.insert(report_to_json(r.report));
  }
  EXPECT_EQ(decoders.size(), 3u);
  EXPECT_EQ(outputs.size(), 3u);
}

TEST(Finetune, FixedSeedIsBitIdentical) {
  RunConfig cfg = tiny_run_config();
  const PreparedData d = prepare_data(cfg);
  const FinetuneResult a = run_finetune(cfg, d), b = run_finetune(cfg, d);
  EXPECT_EQ(report_to_json(a.report), report_to_json(b.report));
  EXPECT_TRUE(same_tensors(a.last.tensors, b.last.tensors));
}

TEST(Finetune, RegressionReportHasTrajectoryMetrics) {
  RunConfig cfg = tiny_run_config();
  cfg.model.task = Task::Regress;
  cfg.model.outputs = 2;
  cfg.training.loss = "mse";
  const PreparedData d = prepare_data(cfg);
  const FinetuneResult r = run_finetune(cfg, d);
  EXPECT_TRUE(r.report.pcc.has_value());
  EXPECT_TRUE(r.report.nrmse.has_value());
  EXPECT_TRUE(r.report.kappa.has_value());
  EXPECT_TRUE(r.report.kappa_truth.has_value());
  EXPECT_FALSE(r.report.accuracy.has_value());
}

TEST(Finetune, DivergenceAbortsWithDiagnostic) {
  RunConfig cfg = tiny_run_config();
  cfg.optimizer.lr = 1e300;
  const PreparedData d = prepare_data(cfg);
  EXPECT_THROW(run_finetune(cfg, d), NumericError);
}

// Evaluation utilities

TEST(NoiseBench, ZeroIntensityEqualsCleanAndDropRateFormula) {
  RunConfig cfg = tiny_run_config();
  const PreparedData d = prepare_data(cfg);
  const FinetuneResult r = run_finetune(cfg, d);
  const StetModel model = model_from_checkpoint(cfg, r.best);
  const MetricsReport nb = run_noise_bench(cfg, d, model);
  ASSERT_TRUE(nb.clean_accuracy.has_value());
  EXPECT_EQ(nb.noise.size(), 5u);
  for (const auto& row : nb.noise) {
    if (row.intensity == 0.0) EXPECT_EQ(row.accuracy, *nb.clean_accuracy);
    EXPECT_DOUBLE_EQ(row.drop_rate, (*nb.clean_accuracy - row.accuracy) / *nb.clean_accuracy);
  }
  EXPECT_EQ(*nb.clean_accuracy, r.report.accuracy->overall);
}

TEST(NoiseBench, CheckpointConfigMismatchIsNamed) {
  RunConfig cfg = tiny_run_config();
  const Checkpoint c = make_checkpoint(StetModel(cfg.model, 1));
  cfg.model.heads = 4;
  EXPECT_THROW(model_from_checkpoint(cfg, c), ConfigMismatchError);
}

TEST(Embeddings, ShapesLabelsAndStreamsDiffer) {
  RunConfig cfg = tiny_run_config();
  const PreparedData d = prepare_data(cfg);
  const FinetuneResult r = run_finetune(cfg, d);
  const StetModel model = model_from_checkpoint(cfg, r.best);
  const Embeddings e = compute_embeddings(model, cfg, d.test);
  const std::size_t n = d.test.size();
  EXPECT_EQ(e.long_term.rows, n);
  EXPECT_EQ(e.long_term.cols, 16u * 8u);
  EXPECT_EQ(e.short_term.cols, 16u * 8u);
  EXPECT_EQ(e.fused.rows, n);
  EXPECT_EQ(e.fused.cols, 16u);
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(e.labels[i], d.test[i].label);
  double frob = 0.0;
  for (std::size_t i = 0; i < e.long_term.values.size(); ++i) {
    const double diff = e.long_term.values[i] - e.short_term.values[i];
    frob += diff * diff;
  }
  EXPECT_GT(frob, 0.0);
  const fs::path dir = temp_dir("emb");
  write_embeddings(dir, e);
  for (const char* f : {"embeddings_long.csv", "embeddings_short.csv", "embeddings_fused.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
}
