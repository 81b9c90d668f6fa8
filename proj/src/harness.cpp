#include "stet/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "stet/dataset_io.hpp"
#include "stet/errors.hpp"
#include "stet/losses.hpp"
#include "stet/ops.hpp"
#include "stet/optimizer.hpp"

namespace stet {

namespace {

// Rng streams keyed off the run seed.
constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kSplitStream = 2;
constexpr std::uint64_t kPretrainEvalStream = 3;
constexpr std::uint64_t kPretrainEpochBase = 1ULL << 32;
constexpr std::uint64_t kFinetuneEpochBase = 2ULL << 32;

constexpr std::size_t kMaxMaskDraws = 1000;

// Activations are reallocated every step; keeping freed blocks on the heap
// instead of returning them to the OS avoids page-fault churn.
void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)once;
#endif
}

std::uint64_t model_seed(const RunConfig& c) { return Rng(c.seed).split(kModelStream).next_u64(); }

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string parameter_norms(const std::vector<NamedTensor>& params) {
  std::vector<std::pair<double, std::string>> norms;
  for (const auto& [name, t] : params) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    norms.emplace_back(std::sqrt(s), name);
  }
  std::sort(norms.rbegin(), norms.rend());
  std::string out;
  for (std::size_t i = 0; i < std::min<std::size_t>(5, norms.size()); ++i) {
    out += "  " + norms[i].second + ": " + format_double(norms[i].first) + "\n";
  }
  return out;
}

void require_finite_loss(const Tensor& loss, std::size_t epoch, std::size_t batch,
                         const std::vector<NamedTensor>& params) {
  if (!std::isfinite(loss.item())) {
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch) + "; largest parameter norms:\n" + parameter_norms(params));
  }
}

Tensor one_hot(const std::vector<SignalSequence>& windows, std::span<const std::size_t> idx,
               std::size_t classes) {
  Tensor y = Tensor::zeros({idx.size(), classes});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const int label = windows[idx[b]].label;
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw MappingError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) +
                         ")");
    }
    y[b * classes + static_cast<std::size_t>(label)] = 1.0;
  }
  return y;
}

Tensor standardized_targets(const PreparedData& data, const std::vector<SignalSequence>& windows,
                            std::span<const std::size_t> idx) {
  const std::size_t j = data.target_mean.size();
  Tensor y = Tensor::zeros({idx.size(), j});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto target = window_target(windows[idx[b]]);
    for (std::size_t k = 0; k < j; ++k) {
      y[b * j + k] = (target[k] - data.target_mean[k]) / data.target_scale[k];
    }
  }
  return y;
}

// Loss of one batch given the model's head output. Classification losses are
// returned as totals over the batch so that evaluation can average per window.
Tensor task_loss(const RunConfig& cfg, const PreparedData& data,
                 const std::vector<SignalSequence>& windows, std::span<const std::size_t> idx,
                 const Tensor& head) {
  if (cfg.model.task == Task::Regress) {
    return mse_regression_loss(standardized_targets(data, windows, idx), head);
  }
  const Tensor y = one_hot(windows, idx, cfg.model.outputs);
  if (cfg.training.loss == "cross_entropy") return cross_entropy_loss(y, head);
  return asymmetric_loss(y, sigmoid(head), cfg.training.asymmetric);
}

// Converts a batch loss to a per-window total for averaging.
double loss_total(const RunConfig& cfg, double loss, std::size_t batch) {
  const bool mean_reduced = cfg.model.task == Task::Regress || cfg.training.loss == "cross_entropy";
  return mean_reduced ? loss * static_cast<double>(batch) : loss;
}

std::vector<NamedTensor> tensors_with_prefix(const Checkpoint& ckpt, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& entry : ckpt.tensors) {
    if (entry.first.rfind(prefix, 0) == 0) out.push_back(entry);
  }
  return out;
}

std::vector<double> tensor_values(const Checkpoint& ckpt, const std::string& name) {
  const Tensor* t = ckpt.find(name);
  if (!t) return {};
  return {t->data().begin(), t->data().end()};
}

Checkpoint snapshot(const StetModel& model, const RunConfig& cfg, const PreparedData& data,
                    std::map<std::string, std::string> meta) {
  for (auto& [k, v] : provenance(cfg)) meta.emplace(k, v);
  Checkpoint ckpt = make_checkpoint(model, std::move(meta));
  for (auto& t : transform_tensors(data)) ckpt.tensors.push_back(std::move(t));
  return ckpt;
}

std::size_t window_steps(const RunConfig& cfg) {
  return cfg.model.steps;
}

}  // namespace

// Data preparation

SplitIndices stratified_split(const std::vector<Recording>& recordings, std::size_t train_parts,
                              std::size_t test_parts, std::uint64_t seed) {
  if (train_parts == 0 || test_parts == 0) throw ConfigError("split: parts must be positive");
  const double frac = static_cast<double>(train_parts) / static_cast<double>(train_parts + test_parts);
  const auto cut = [&](std::size_t n) {
    std::size_t k = static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
    if (n >= 2) k = std::clamp<std::size_t>(k, 1, n - 1);
    return k;
  };
  SplitIndices split;
  const bool regression = !recordings.empty() && recordings.front().is_regression();
  if (regression) {
    const std::size_t k = cut(recordings.size());
    for (std::size_t i = 0; i < recordings.size(); ++i) (i < k ? split.train : split.test).push_back(i);
    return split;
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < recordings.size(); ++i) by_class[recordings[i].label].push_back(i);
  for (auto& [label, idx] : by_class) {
    Rng rng = Rng(seed).split(static_cast<std::uint64_t>(label) + 1);
    rng.shuffle(std::span<std::size_t>(idx));
    const std::size_t k = cut(idx.size());
    split.train.insert(split.train.end(), idx.begin(), idx.begin() + static_cast<long>(k));
    split.test.insert(split.test.end(), idx.begin() + static_cast<long>(k), idx.end());
  }
  return split;
}

std::vector<Recording> load_recordings(const RunConfig& cfg) {
  if (cfg.data.source == "synthetic") {
    return cfg.model.task == Task::Regress ? generate_synthetic_regression(cfg.data.regression)
                                           : generate_synthetic_dataset(cfg.data.synthetic);
  }
  const std::filesystem::path path(cfg.data.source);
  const DatasetFormat fmt =
      cfg.data.format == "auto" ? dataset_format_for(path) : parse_dataset_format(cfg.data.format);
  return load_dataset(path, fmt);
}

std::vector<NamedTensor> transform_tensors(const PreparedData& data) {
  std::vector<NamedTensor> out;
  if (!data.norm.min.empty()) {
    out.emplace_back("norm.min", Tensor::from({data.norm.min.size()}, data.norm.min));
    out.emplace_back("norm.max", Tensor::from({data.norm.max.size()}, data.norm.max));
  }
  if (!data.target_mean.empty()) {
    out.emplace_back("target.mean", Tensor::from({data.target_mean.size()}, data.target_mean));
    out.emplace_back("target.scale", Tensor::from({data.target_scale.size()}, data.target_scale));
  }
  return out;
}

PreparedData prepare_data(const RunConfig& cfg, const std::vector<Recording>& recs,
                          const Checkpoint* transforms) {
  if (recs.empty()) throw DegenerateError("dataset contains no recordings");
  const bool regression = cfg.model.task == Task::Regress;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].channels() != cfg.model.channels) {
      throw ConfigError("recording " + std::to_string(i) + " has " +
                        std::to_string(recs[i].channels()) + " channels, model.channels is " +
                        std::to_string(cfg.model.channels));
    }
    if (recs[i].is_regression() != regression) {
      throw ConfigError("recording " + std::to_string(i) + " does not match task " +
                        std::string(to_string(cfg.model.task)));
    }
  }
  PreparedData d;
  d.task = cfg.model.task;
  d.split_seed = Rng(cfg.seed).split(kSplitStream).next_u64();
  const SplitIndices split =
      stratified_split(recs, cfg.data.train_parts, cfg.data.test_parts, d.split_seed);
  std::vector<Recording> train, test;
  for (std::size_t i : split.train) train.push_back(recs[i]);
  for (std::size_t i : split.test) test.push_back(recs[i]);

  for (const std::string& step : cfg.data.normalization) {
    if (step == "minmax") {
      if (transforms && transforms->find("norm.min")) {
        d.norm.min = tensor_values(*transforms, "norm.min");
        d.norm.max = tensor_values(*transforms, "norm.max");
      } else {
        d.norm = fit_minmax(train);
      }
      for (auto& r : train) r = minmax_normalize(r, d.norm);
      for (auto& r : test) r = minmax_normalize(r, d.norm);
    } else {
      for (auto& r : train) r = mulaw_normalize(r, cfg.data.mu);
      for (auto& r : test) r = mulaw_normalize(r, cfg.data.mu);
    }
  }

  const auto segment = [&](const std::vector<Recording>& part, const std::vector<std::size_t>& ids,
                           std::vector<SignalSequence>& out) {
    for (std::size_t i = 0; i < part.size(); ++i) {
      auto windows = segment_windows(part[i], cfg.data.segment, ids[i]);
      for (auto& w : windows) out.push_back(std::move(w));
    }
  };
  segment(train, split.train, d.train);
  segment(test, split.test, d.test);
  if (d.train.empty() || d.test.empty()) {
    throw DegenerateError("segmentation produced an empty train or test split");
  }
  if (d.train.front().values.rows != window_steps(cfg)) {
    throw ConfigError("windows have " + std::to_string(d.train.front().values.rows) +
                      " samples but model.steps is " + std::to_string(cfg.model.steps));
  }

  if (regression) {
    const std::size_t joints = d.train.front().trajectory.cols;
    if (joints != cfg.model.outputs) {
      throw ConfigError("dataset has " + std::to_string(joints) + " joints, model.outputs is " +
                        std::to_string(cfg.model.outputs));
    }
    if (transforms && transforms->find("target.mean")) {
      d.target_mean = tensor_values(*transforms, "target.mean");
      d.target_scale = tensor_values(*transforms, "target.scale");
    } else {
      d.target_mean.assign(joints, 0.0);
      d.target_scale.assign(joints, 0.0);
      for (const auto& w : d.train) {
        const auto y = window_target(w);
        for (std::size_t k = 0; k < joints; ++k) d.target_mean[k] += y[k];
      }
      for (double& m : d.target_mean) m /= static_cast<double>(d.train.size());
      for (const auto& w : d.train) {
        const auto y = window_target(w);
        for (std::size_t k = 0; k < joints; ++k) {
          d.target_scale[k] += (y[k] - d.target_mean[k]) * (y[k] - d.target_mean[k]);
        }
      }
      for (double& s : d.target_scale) {
        s = std::sqrt(s / static_cast<double>(d.train.size()));
        if (s == 0.0) s = 1.0;
      }
    }
  } else {
    int max_label = 0;
    for (const auto& r : recs) max_label = std::max(max_label, r.label);
    d.n_classes = static_cast<std::size_t>(max_label) + 1;
    if (d.n_classes > cfg.model.outputs) {
      throw ConfigError("dataset has " + std::to_string(d.n_classes) + " classes, model.outputs is " +
                        std::to_string(cfg.model.outputs));
    }
    d.categories = cfg.data.categories.empty() ? CategoryMap::grouped(cfg.model.outputs)
                                               : CategoryMap{cfg.data.categories};
  }
  return d;
}

PreparedData prepare_data(const RunConfig& cfg, const Checkpoint* transforms) {
  return prepare_data(cfg, load_recordings(cfg), transforms);
}

Tensor batch_inputs(const std::vector<SignalSequence>& windows, std::span<const std::size_t> idx) {
  if (idx.empty()) throw DimensionError("batch_inputs: empty batch");
  const std::size_t t = windows[idx[0]].values.rows, c = windows[idx[0]].values.cols;
  Tensor x = Tensor::zeros({idx.size(), t, c});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Matrix& m = windows[idx[b]].values;
    if (m.rows != t || m.cols != c) throw DimensionError("batch_inputs: ragged windows");
    std::copy(m.values.begin(), m.values.end(), x.data().begin() + static_cast<long>(b * t * c));
  }
  return x;
}

std::vector<double> window_target(const SignalSequence& w) {
  if (w.trajectory.empty()) throw DimensionError("window has no trajectory");
  std::vector<double> y(w.trajectory.cols, 0.0);
  for (std::size_t i = 0; i < w.trajectory.rows; ++i) {
    for (std::size_t k = 0; k < y.size(); ++k) y[k] += w.trajectory(i, k);
  }
  for (double& v : y) v /= static_cast<double>(w.trajectory.rows);
  return y;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRecord>& records) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os.precision(17);
  os << "epoch,phase,split,loss,metric,seconds\n";
  for (const auto& r : records) {
    os << r.epoch << ',' << r.phase << ',' << r.split << ',' << r.loss << ',' << r.metric << ','
       << r.seconds << '\n';
  }
}

std::map<std::string, std::string> provenance(const RunConfig& cfg) {
  return {
      {"optimizer",
       "adaptive moments with decoupled weight decay (no variance rectification); lr=" +
           format_double(cfg.optimizer.lr) + " finetune_lr=" + format_double(cfg.effective_finetune_lr()) +
           " weight_decay=" + format_double(cfg.optimizer.weight_decay)},
      {"seed", std::to_string(cfg.seed)},
      {"split_seed", std::to_string(Rng(cfg.seed).split(kSplitStream).next_u64())},
      {"split", std::to_string(cfg.data.train_parts) + ":" + std::to_string(cfg.data.test_parts) +
                    " stratified per class"},
      {"task", std::string(to_string(cfg.model.task))},
      {"decoder", std::string(to_string(cfg.model.decoder))},
      {"rng", std::string(Rng::kAlgorithm)},
  };
}

// Pretraining

PretrainResult run_pretrain(const RunConfig& cfg, const PreparedData& data, const Checkpoint* resume) {
  tune_allocator();
  cfg.validate();
  StetModel model(cfg.model, model_seed(cfg));
  AdamW opt(model.pretrain_parameters(),
            {cfg.optimizer.lr, cfg.optimizer.weight_decay, cfg.optimizer.beta1, cfg.optimizer.beta2,
             cfg.optimizer.eps});
  std::size_t start = 0;
  if (resume) {
    restore_parameters(model, *resume);
    opt.load_state(tensors_with_prefix(*resume, "opt."));
    const auto it = resume->metadata.find("epochs_done");
    if (it == resume->metadata.end()) throw ConfigError("resume checkpoint lacks epochs_done");
    start = std::stoul(it->second);
  }
  const std::size_t t = cfg.model.steps, c = cfg.model.channels, bs = cfg.training.batch_size;
  const auto draw_masks = [&](std::size_t n, Rng& rng) {
    std::vector<MaskMatrix> masks;
    for (std::size_t i = 0; i < n; ++i) {
      MaskMatrix m;
      std::size_t draws = 0;
      do {
        if (++draws > kMaxMaskDraws) throw DegenerateError("pretrain: could not draw a non-empty mask");
        m = generate_mask_matrix(t, c, cfg.mask, rng);
      } while (m.masked_count() == 0);
      masks.push_back(std::move(m));
    }
    return mask_tensor(masks);
  };

  PretrainResult result;
  for (std::size_t epoch = start; epoch < cfg.training.pretrain_epochs; ++epoch) {
    const auto t0 = Clock::now();
    Rng rng = Rng(cfg.seed).split(kPretrainEpochBase + epoch);
    auto order = iota_indices(data.train.size());
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += bs) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(bs, order.size() - s));
      const Tensor x = batch_inputs(data.train, idx);
      const Tensor mask = draw_masks(idx.size(), rng);
      ForwardContext ctx{true, &rng, nullptr};
      const Tensor rec = model.forward_pretrain(mul(x, mask), ctx);
      const Tensor loss = masked_mse_loss(x, rec, mask);
      require_finite_loss(loss, epoch, batches, opt.params());
      backward(loss);
      opt.step();
      opt.zero_grad();
      Tape::current().reset();
      total += loss.item();
      ++batches;
    }
    result.log.push_back({epoch + 1, "pretrain", "train", total / static_cast<double>(batches), 0.0,
                          seconds_since(t0)});

    // Held-out reconstruction with masks fixed across epochs.
    NoGradGuard no_grad;
    Rng eval_rng = Rng(cfg.seed).split(kPretrainEvalStream);
    double test_total = 0.0;
    std::size_t test_batches = 0;
    const auto all = iota_indices(data.test.size());
    for (std::size_t s = 0; s < all.size(); s += cfg.training.eval_batch_size) {
      const std::span<const std::size_t> idx(all.data() + s,
                                             std::min(cfg.training.eval_batch_size, all.size() - s));
      const Tensor x = batch_inputs(data.test, idx);
      const Tensor mask = draw_masks(idx.size(), eval_rng);
      ForwardContext ctx;
      test_total += masked_mse_loss(x, model.forward_pretrain(mul(x, mask), ctx), mask).item() *
                    static_cast<double>(idx.size());
      ++test_batches;
    }
    result.log.push_back({epoch + 1, "pretrain", "test",
                          test_total / static_cast<double>(data.test.size()), 0.0, seconds_since(t0)});
  }

  const std::size_t done = std::max(start, cfg.training.pretrain_epochs);
  result.checkpoint = snapshot(model, cfg, data, {{"phase", "pretrain"}, {"epochs_done", std::to_string(done)}});
  for (auto& s : opt.state()) result.checkpoint.tensors.push_back(std::move(s));
  return result;
}

// Evaluation

Evaluation evaluate(const StetModel& model, const RunConfig& cfg, const PreparedData& data,
                    const std::vector<SignalSequence>& windows, const NoiseSpec* noise) {
  if (windows.empty()) throw DegenerateError("evaluate: no windows");
  NoGradGuard no_grad;
  Evaluation ev;
  const bool regression = cfg.model.task == Task::Regress;
  const std::size_t joints = data.target_mean.size();
  if (regression) {
    ev.predicted = Matrix(windows.size(), joints);
    ev.truth = Matrix(windows.size(), joints);
  }
  std::vector<SignalSequence> noisy;
  const std::vector<SignalSequence>* source = &windows;
  if (noise) {
    noise->validate();
    noisy.reserve(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i) {
      noisy.push_back(inject_noise(windows[i], {noise->mode, noise->intensity, splitmix64(noise->seed + i)}));
    }
    source = &noisy;
  }
  const auto all = iota_indices(windows.size());
  double total = 0.0;
  for (std::size_t s = 0; s < all.size(); s += cfg.training.eval_batch_size) {
    const std::span<const std::size_t> idx(all.data() + s,
                                           std::min(cfg.training.eval_batch_size, all.size() - s));
    ForwardContext ctx;
    const Tensor head = model.forward(batch_inputs(*source, idx), ctx).head;
    total += loss_total(cfg, task_loss(cfg, data, windows, idx, head).item(), idx.size());
    const std::size_t k = head.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const SignalSequence& w = windows[idx[b]];
      ev.recordings.push_back(w.recording);
      if (regression) {
        const auto target = window_target(w);
        for (std::size_t j = 0; j < joints; ++j) {
          ev.predicted(idx[b], j) = head[b * k + j] * data.target_scale[j] + data.target_mean[j];
          ev.truth(idx[b], j) = target[j];
        }
      } else {
        const double* row = head.data().data() + b * k;
        ev.predictions.push_back(static_cast<int>(std::max_element(row, row + k) - row));
        ev.labels.push_back(w.label);
      }
    }
  }
  ev.loss = total / static_cast<double>(windows.size());
  return ev;
}

MetricsReport make_report(const RunConfig& cfg, const PreparedData& data, const Evaluation& ev) {
  MetricsReport r;
  r.task = std::string(to_string(cfg.model.task));
  r.header = provenance(cfg);
  if (cfg.model.task == Task::Classify) {
    r.accuracy = accuracy(ev.predictions, ev.labels, data.categories);
    const std::size_t k = cfg.model.outputs;
    r.confusion.assign(k, std::vector<std::size_t>(k, 0));
    for (std::size_t i = 0; i < ev.labels.size(); ++i) {
      ++r.confusion[static_cast<std::size_t>(ev.labels[i])][static_cast<std::size_t>(ev.predictions[i])];
    }
    return r;
  }
  // Consecutive windows of one recording form a predicted trajectory.
  std::map<std::size_t, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < ev.recordings.size(); ++i) rows[ev.recordings[i]].push_back(i);
  const std::size_t joints = ev.truth.cols;
  double pcc_sum = 0.0, rmse_sum = 0.0, nrmse_sum = 0.0, kp = 0.0, kt = 0.0;
  std::size_t n = 0;
  for (const auto& [rec, idx] : rows) {
    if (idx.size() < 3) continue;
    Matrix p(idx.size(), joints), y(idx.size(), joints);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < joints; ++j) {
        p(i, j) = ev.predicted(idx[i], j);
        y(i, j) = ev.truth(idx[i], j);
      }
    }
    pcc_sum += pcc(y, p);
    rmse_sum += rmse(y, p);
    nrmse_sum += nrmse(y, p);
    kp += avg_curvature(p);
    kt += avg_curvature(y);
    ++n;
  }
  if (n == 0) throw InsufficientDataError("regression report: no recording has 3 or more windows");
  const double dn = static_cast<double>(n);
  r.pcc = pcc_sum / dn;
  r.rmse = rmse_sum / dn;
  r.nrmse = nrmse_sum / dn;
  r.kappa = kp / dn;
  r.kappa_truth = kt / dn;
  return r;
}

// Fine-tuning

StetModel model_from_checkpoint(const RunConfig& cfg, const Checkpoint& ckpt) {
  StetModel model(cfg.model, model_seed(cfg));
  restore_parameters(model, ckpt);
  return model;
}

FinetuneResult run_finetune(const RunConfig& cfg, const PreparedData& data, const Checkpoint* pretrained) {
  tune_allocator();
  cfg.validate();
  StetModel model(cfg.model, model_seed(cfg));
  std::string init = "scratch";
  if (pretrained) {
    ParameterStore store;
    for (const auto& [name, t] : pretrained->tensors) store.add(name, t);
    model.load_backbone(store);
    init = "pretrained";
  }
  const double lr = cfg.effective_finetune_lr();
  AdamW opt(model.finetune_parameters(), {lr, cfg.optimizer.weight_decay, cfg.optimizer.beta1,
                                          cfg.optimizer.beta2, cfg.optimizer.eps});
  const std::size_t bs = cfg.training.batch_size;
  const bool regression = cfg.model.task == Task::Regress;

  FinetuneResult result;
  double best_score = -std::numeric_limits<double>::infinity();
  Evaluation best_eval;
  for (std::size_t epoch = 0; epoch < cfg.training.finetune_epochs; ++epoch) {
    const auto t0 = Clock::now();
    Rng rng = Rng(cfg.seed).split(kFinetuneEpochBase + epoch);
    auto order = iota_indices(data.train.size());
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += bs) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(bs, order.size() - s));
      ForwardContext ctx{true, &rng, nullptr};
      const Tensor head = model.forward(batch_inputs(data.train, idx), ctx).head;
      const Tensor loss = task_loss(cfg, data, data.train, idx, head);
      require_finite_loss(loss, epoch, batches, opt.params());
      backward(loss);
      opt.step();
      opt.zero_grad();
      Tape::current().reset();
      total += loss_total(cfg, loss.item(), idx.size());
      ++batches;
    }
    const double train_seconds = seconds_since(t0);
    const Evaluation ev = evaluate(model, cfg, data, data.test);
    double metric = 0.0, score = 0.0;
    if (regression) {
      metric = make_report(cfg, data, ev).pcc.value_or(0.0);
      score = -ev.loss;
    } else {
      metric = accuracy(ev.predictions, ev.labels, data.categories).overall;
      score = metric;
    }
    result.log.push_back({epoch + 1, "finetune", "train", total / static_cast<double>(data.train.size()),
                          0.0, train_seconds});
    result.log.push_back({epoch + 1, "finetune", "test", ev.loss, metric, seconds_since(t0)});
    if (score > best_score) {
      best_score = score;
      best_eval = ev;
      result.best_epoch = epoch + 1;
      result.best = snapshot(model, cfg, data,
                             {{"phase", "finetune"}, {"init", init}, {"epoch", std::to_string(epoch + 1)}});
    }
  }
  result.last = snapshot(model, cfg, data,
                         {{"phase", "finetune"},
                          {"init", init},
                          {"epoch", std::to_string(cfg.training.finetune_epochs)}});
  if (cfg.training.finetune_epochs == 0) {
    best_eval = evaluate(model, cfg, data, data.test);
    result.best = result.last;
  }
  result.report = make_report(cfg, data, best_eval);
  result.report.header["init"] = init;
  result.report.header["best_epoch"] = std::to_string(result.best_epoch);
  result.report.header["selection"] = "best held-out score over epochs";
  return result;
}

// Robustness

MetricsReport run_noise_bench(const RunConfig& cfg, const PreparedData& data, const StetModel& model) {
  if (cfg.model.task != Task::Classify) throw ConfigError("noise-bench supports classification only");
  MetricsReport report = make_report(cfg, data, evaluate(model, cfg, data, data.test));
  const double clean = report.accuracy->overall;
  report.clean_accuracy = clean;
  const auto sweep = [&](NoiseMode mode, const std::vector<double>& grid) {
    for (double intensity : grid) {
      const NoiseSpec spec{mode, intensity, cfg.noise.seed};
      const Evaluation ev = evaluate(model, cfg, data, data.test, &spec);
      const double acc = accuracy(ev.predictions, ev.labels, data.categories).overall;
      report.noise.push_back({mode, intensity, acc, drop_rate(clean, acc)});
    }
  };
  sweep(NoiseMode::AdditiveGaussian, cfg.noise.additive);
  sweep(NoiseMode::MultiplicativeGaussian, cfg.noise.multiplicative);
  sweep(NoiseMode::SignalLoss, cfg.noise.signal_loss);
  report.header["noise_seed"] = std::to_string(cfg.noise.seed);
  return report;
}

// Embeddings

Embeddings compute_embeddings(const StetModel& model, const RunConfig& cfg,
                              const std::vector<SignalSequence>& windows) {
  NoGradGuard no_grad;
  Embeddings e;
  const std::size_t n = windows.size();
  const std::size_t th = cfg.model.steps * cfg.model.hidden;
  const bool has_long = cfg.model.decoder != DecoderMode::ShortOnly;
  const bool has_short = cfg.model.decoder != DecoderMode::LongOnly;
  if (has_long) e.long_term = Matrix(n, th);
  if (has_short) e.short_term = Matrix(n, th);
  const auto all = iota_indices(n);
  for (std::size_t s = 0; s < n; s += cfg.training.eval_batch_size) {
    const std::span<const std::size_t> idx(all.data() + s, std::min(cfg.training.eval_batch_size, n - s));
    ForwardContext ctx;
    const auto out = model.forward(batch_inputs(windows, idx), ctx);
    const std::size_t fw = out.pooled.dim(1);
    if (e.fused.empty()) e.fused = Matrix(n, fw);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::size_t row = idx[b];
      if (has_long) std::copy_n(out.long_stream.data().begin() + static_cast<long>(b * th), th, e.long_term.row(row).begin());
      if (has_short) std::copy_n(out.short_stream.data().begin() + static_cast<long>(b * th), th, e.short_term.row(row).begin());
      std::copy_n(out.pooled.data().begin() + static_cast<long>(b * fw), fw, e.fused.row(row).begin());
    }
  }
  for (const auto& w : windows) e.labels.push_back(w.label);
  return e;
}

void write_embeddings(const std::filesystem::path& dir, const Embeddings& e) {
  std::filesystem::create_directories(dir);
  const auto write = [&](const char* file, const Matrix& m) {
    if (m.empty()) return;
    std::ofstream os(dir / file);
    if (!os) throw Error("cannot write " + (dir / file).string());
    os.precision(17);
    os << "label";
    for (std::size_t j = 0; j < m.cols; ++j) os << ",f" << j;
    os << '\n';
    for (std::size_t i = 0; i < m.rows; ++i) {
      os << e.labels[i];
      for (double v : m.row(i)) os << ',' << v;
      os << '\n';
    }
  };
  write("embeddings_long.csv", e.long_term);
  write("embeddings_short.csv", e.short_term);
  write("embeddings_fused.csv", e.fused);
}

}  // namespace stet
