#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stet/losses.hpp"
#include "stet/masking.hpp"
#include "stet/model.hpp"
#include "stet/signal.hpp"

namespace stet {

inline constexpr int kConfigSchemaVersion = 1;

struct DataConfig {
  // "synthetic" or a dataset path (csv or raw-f64).
  std::string source = "synthetic";
  std::string format = "auto";  // auto | csv | raw-f64
  SyntheticSpec synthetic;
  SyntheticRegressionSpec regression;
  SegmentOptions segment;
  // Applied in order; each entry is "minmax" or "mulaw".
  std::vector<std::string> normalization{"minmax"};
  double mu = 255.0;
  // Stratified train:test ratio.
  std::size_t train_parts = 5;
  std::size_t test_parts = 2;
  // Category name per class id; empty uses CategoryMap::grouped.
  std::vector<std::string> categories;
};

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainingConfig {
  std::size_t batch_size = 16;
  std::size_t eval_batch_size = 128;
  std::size_t pretrain_epochs = 20;
  std::size_t finetune_epochs = 50;
  // Learning rate for fine-tuning; 0 reuses optimizer.lr.
  double finetune_lr = 0.0;
  std::string loss = "asymmetric";  // asymmetric | cross_entropy | mse
  AsymmetricLossConfig asymmetric;
  std::string init = "pretrained";  // pretrained | scratch
};

struct NoiseConfig {
  std::uint64_t seed = 1000;
  std::vector<double> additive{0.0, 0.05, 0.1, 0.2, 0.4};
  std::vector<double> multiplicative{0.0, 0.05, 0.1, 0.2, 0.4};
  std::vector<double> signal_loss{0.0, 0.1, 0.2, 0.4};
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  MaskParams mask;
  OptimizerConfig optimizer;
  TrainingConfig training;
  NoiseConfig noise;
  std::uint64_t seed = 1;
  std::string output_dir = "runs";

  // Throws ConfigError naming the offending key.
  void validate() const;
  double effective_finetune_lr() const {
    return training.finetune_lr > 0.0 ? training.finetune_lr : optimizer.lr;
  }
};

// JSON document with nested sections; unknown keys are rejected.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_json(const RunConfig& config);

// Applies "section.key=value". The value is parsed as JSON when possible and
// as a bare string otherwise. Unknown keys raise ConfigError.
void apply_override(RunConfig& config, std::string_view assignment);

}  // namespace stet
