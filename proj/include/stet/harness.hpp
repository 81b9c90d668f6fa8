#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stet/checkpoint.hpp"
#include "stet/config.hpp"
#include "stet/metrics.hpp"
#include "stet/model.hpp"
#include "stet/signal.hpp"

namespace stet {

// Windows ready for the model, plus the transforms fitted on the training split.
struct PreparedData {
  Task task = Task::Classify;
  std::vector<SignalSequence> train;
  std::vector<SignalSequence> test;
  MinMaxParams norm;                // empty when the chain has no minmax step
  std::vector<double> target_mean;  // regression: per-joint standardization
  std::vector<double> target_scale;
  std::size_t n_classes = 0;
  CategoryMap categories;
  std::uint64_t split_seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Classification: per class, a seeded shuffle of that class's recordings is cut
// at train_parts / (train_parts + test_parts). Regression recordings have no
// class and are split in order.
SplitIndices stratified_split(const std::vector<Recording>& recordings, std::size_t train_parts,
                              std::size_t test_parts, std::uint64_t seed);

std::vector<Recording> load_recordings(const RunConfig& config);
// With `transforms`, the normalization and target statistics persisted in that
// checkpoint are reused instead of being refitted on the training split.
PreparedData prepare_data(const RunConfig& config, const std::vector<Recording>& recordings,
                          const Checkpoint* transforms = nullptr);
PreparedData prepare_data(const RunConfig& config, const Checkpoint* transforms = nullptr);

// Tensors holding the fitted transforms ("norm.min", "norm.max",
// "target.mean", "target.scale"), stored alongside parameters in checkpoints.
std::vector<NamedTensor> transform_tensors(const PreparedData& data);

// [B, t, c] from the selected windows.
Tensor batch_inputs(const std::vector<SignalSequence>& windows, std::span<const std::size_t> indices);
// Regression target of a window: per-joint mean of its trajectory slice.
std::vector<double> window_target(const SignalSequence& window);

struct TrainLogRecord {
  std::size_t epoch = 0;
  std::string phase;  // pretrain | finetune
  std::string split;  // train | test
  double loss = 0.0;
  double metric = 0.0;  // accuracy (classify), pcc (regress), unused for pretraining
  double seconds = 0.0;
};

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRecord>& records);

struct PretrainResult {
  Checkpoint checkpoint;  // parameters, optimizer state, "epochs_done"
  std::vector<TrainLogRecord> log;
};

// Masked-reconstruction pretraining of the backbone. With `resume`, continues
// from the checkpoint's epoch count up to training.pretrain_epochs; the result
// equals an uninterrupted run.
PretrainResult run_pretrain(const RunConfig& config, const PreparedData& data,
                            const Checkpoint* resume = nullptr);

struct Evaluation {
  double loss = 0.0;
  std::vector<int> predictions;  // classify
  std::vector<int> labels;
  Matrix predicted;  // regress: one row per window, degrees
  Matrix truth;
  std::vector<std::size_t> recordings;  // source recording of each window
};

// Batched inference in eval mode. A NoiseSpec perturbs every window; window i
// uses seed splitmix64(noise.seed + i).
Evaluation evaluate(const StetModel& model, const RunConfig& config, const PreparedData& data,
                    const std::vector<SignalSequence>& windows, const NoiseSpec* noise = nullptr);

// Accuracy and confusion counts (classify), or pcc/rmse/nrmse/kappa computed per
// recording over consecutive windows and averaged over recordings (regress).
MetricsReport make_report(const RunConfig& config, const PreparedData& data, const Evaluation& eval);

struct FinetuneResult {
  Checkpoint best;  // best held-out score over epochs
  Checkpoint last;
  std::size_t best_epoch = 0;
  MetricsReport report;  // for `best`
  std::vector<TrainLogRecord> log;
};

// Trains the full model. `pretrained` supplies the backbone; nullptr trains
// from scratch.
FinetuneResult run_finetune(const RunConfig& config, const PreparedData& data,
                            const Checkpoint* pretrained = nullptr);

// Builds a model from a checkpoint, checking it against config.model.
StetModel model_from_checkpoint(const RunConfig& config, const Checkpoint& checkpoint);

// Clean accuracy plus one row per configured (mode, intensity). The model is
// only evaluated, never retrained.
MetricsReport run_noise_bench(const RunConfig& config, const PreparedData& data,
                              const StetModel& model);

struct Embeddings {
  Matrix long_term;   // N x (t*h), empty in ShortOnly mode
  Matrix short_term;  // N x (t*h), empty in LongOnly mode
  Matrix fused;       // N x (k*h), after pooling
  std::vector<int> labels;
};

Embeddings compute_embeddings(const StetModel& model, const RunConfig& config,
                              const std::vector<SignalSequence>& windows);
// embeddings_{long,short,fused}.csv with a leading label column.
void write_embeddings(const std::filesystem::path& dir, const Embeddings& embeddings);

// Report header entries shared by every run.
std::map<std::string, std::string> provenance(const RunConfig& config);

}  // namespace stet
