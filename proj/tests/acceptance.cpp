// Acceptance checks. Usage: stet_acceptance [criterion ...] (default: all).
// Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//
// Criteria 5 and 6 share one training run. Criterion 5 stores its checkpoints
// under $STET_ACCEPTANCE_DIR (default ./acceptance_runs) and criterion 6 reuses
// them when present, training them itself otherwise.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oracles.hpp"
#include "stet/checkpoint.hpp"
#include "stet/config.hpp"
#include "stet/dataset_io.hpp"
#include "stet/gradcheck_suite.hpp"
#include "stet/harness.hpp"
#include "stet/losses.hpp"
#include "stet/masking.hpp"
#include "stet/ops.hpp"
#include "stet/rng.hpp"

using namespace stet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path run_dir() {
  const char* env = std::getenv("STET_ACCEPTANCE_DIR");
  fs::path d = env ? fs::path(env) : fs::path("acceptance_runs");
  fs::create_directories(d);
  return d;
}

RunConfig load_config(const std::string& name) { return load_run_config(fs::path(STET_SOURCE_DIR) / "configs" / name); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double last_test_metric(const std::vector<TrainLogRecord>& log) {
  for (auto it = log.rbegin(); it != log.rend(); ++it)
    if (it->split == "test") return it->metric;
  return 0.0;
}

// 1. Finite differences over every layer type and the full model loss.
Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  bool all = true;
  for (const auto& c : run_gradcheck_suite(1e-3)) {
    if (c.report.max_rel_error > worst) worst = c.report.max_rel_error, where = c.name + ":" + c.report.worst_entry;
    all = all && c.report.passed;
  }
  const double secs = seconds_since(t0);
  return {all && worst < 1e-3 && secs < 60.0,
          fmt("max relative discrepancy %.2e at %s (< 1e-3), %.1f s (< 60 s)", worst, where.c_str(), secs)};
}

// 2. A window covering the whole sequence reproduces full attention.
Outcome window_equivalence() {
  const auto t0 = Clock::now();
  const std::size_t t = 8, h = 8;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ParameterStore store;
    Rng init(seed);
    const MultiHeadAttention full = make_attention(store, "attn", h, 2, 0, 1.0 / std::sqrt(double(h)), 0.0, init);
    Rng data(seed + 1000);
    Tensor x = Tensor::zeros({1, t, h});
    for (double& v : x.data()) v = data.normal();
    ForwardContext ctx;
    const Tensor ref = full.forward(x, ctx);
    for (std::size_t w : {2 * t - 1, 2 * t + 1}) {
      worst = std::max(worst, max_abs_diff(full.with_window(w).forward(x, ctx), ref));
      worst = std::max(worst, max_abs_diff(full.with_window(w).with_route(WindowRoute::Unfold).forward(x, ctx), ref));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs < 5.0, fmt("max |windowed - full| %.2e over 20 seeds (<= 1e-10), %.2f s (< 5 s)", worst, secs)};
}

// 3. Mask statistics over one long column.
Outcome mask_statistics() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  const auto col = generate_mask_column(1000000, {0.15, 3.0}, rng);
  std::vector<std::size_t> runs;
  std::size_t len = 0, masked = 0;
  for (unsigned char v : col) {
    if (v == 0) {
      ++masked;
      ++len;
    } else if (len) {
      runs.push_back(len);
      len = 0;
    }
  }
  const double frac = static_cast<double>(masked) / static_cast<double>(col.size());
  double mean = 0.0;
  std::map<std::size_t, std::size_t> counts;
  for (auto r : runs) mean += static_cast<double>(r), ++counts[r];
  mean /= static_cast<double>(runs.size());
  double cum = 0.0, ks = 0.0;
  for (std::size_t k = 1; k <= counts.rbegin()->first; ++k) {
    cum += static_cast<double>(counts[k]) / static_cast<double>(runs.size());
    ks = std::max(ks, std::abs(cum - (1.0 - std::pow(2.0 / 3.0, static_cast<double>(k)))));
  }
  const double secs = seconds_since(t0);
  const bool pass = frac >= 0.14 && frac <= 0.16 && mean >= 2.8 && mean <= 3.2 && ks < 0.02 && secs < 10.0;
  return {pass, fmt("masked fraction %.4f, mean run %.3f, KS %.4f over %zu runs, %.2f s", frac, mean, ks, runs.size(), secs)};
}

// 4. Asymmetric loss reductions.
Outcome loss_reductions() {
  Rng rng(77);
  double worst = 0.0, total_asl = 0.0, total_bce = 0.0;
  Tensor y = Tensor::zeros({1000}), p = Tensor::zeros({1000});
  for (std::size_t i = 0; i < 1000; ++i) {
    y[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    p[i] = rng.uniform(1e-6, 1.0 - 1e-6);
    const double bce = -(y[i] * std::log(p[i]) + (1.0 - y[i]) * std::log(1.0 - p[i]));
    const double asl = asymmetric_loss(Tensor::from({1}, {y[i]}), Tensor::from({1}, {p[i]}), {0, 0, 0}).item();
    worst = std::max(worst, std::abs(asl - bce));
    total_bce += bce;
  }
  total_asl = asymmetric_loss(y, p, {0, 0, 0}).item();
  double margin_max = 0.0;
  for (double q : {0.0, 0.01, 0.03, 0.05}) {
    for (double gneg : {0.0, 2.0})
      margin_max = std::max(margin_max, asymmetric_loss(Tensor::from({1}, {0.0}), Tensor::from({1}, {q}), {1.0, gneg, 0.05}).item());
  }
  const bool pass = worst <= 1e-10 && std::abs(total_asl - total_bce) <= 1e-10 && margin_max == 0.0;
  return {pass, fmt("max per-pair |ASL - BCE| %.2e, summed %.2e (<= 1e-10); margin-region loss %g (== 0)", worst,
                    std::abs(total_asl - total_bce), margin_max)};
}

struct EndToEnd {
  RunConfig cfg;
  PreparedData data;
  Checkpoint last;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
};

EndToEnd train_end_to_end() {
  EndToEnd e;
  e.cfg = load_config("synthetic_classify.json");
  const auto t0 = Clock::now();
  e.data = prepare_data(e.cfg);
  const PretrainResult pre = run_pretrain(e.cfg, e.data);
  const FinetuneResult fin = run_finetune(e.cfg, e.data, &pre.checkpoint);
  e.seconds = seconds_since(t0);
  e.last = fin.last;
  e.final_accuracy = last_test_metric(fin.log);
  e.best_accuracy = fin.report.accuracy->overall;
  e.best_epoch = fin.best_epoch;
  const fs::path dir = run_dir() / "end_to_end";
  fs::create_directories(dir);
  save_checkpoint(dir / "pretrain.ckpt", pre.checkpoint);
  save_checkpoint(dir / "last.ckpt", fin.last);
  save_checkpoint(dir / "best.ckpt", fin.best);
  write_report(dir / "report.json", fin.report);
  std::vector<TrainLogRecord> log = pre.log;
  log.insert(log.end(), fin.log.begin(), fin.log.end());
  write_train_log(dir / "train_log.csv", log);
  return e;
}

// 5. Pretrain 20 + finetune 50 epochs on the synthetic 8-class set.
Outcome learnability() {
  const EndToEnd e = train_end_to_end();
  return {e.final_accuracy >= 0.90 && e.seconds < 900.0,
          fmt("final-epoch held-out accuracy %.4f (>= 0.90); best %.4f at epoch %zu; %.0f s (< 900 s)", e.final_accuracy,
              e.best_accuracy, e.best_epoch, e.seconds)};
}

// 6. Twin pair: model vs channel-RMS oracle on the same split.
Outcome twin_discrimination() {
  const RunConfig cfg = load_config("synthetic_classify.json");
  const PreparedData data = prepare_data(cfg);
  const fs::path ck = run_dir() / "end_to_end" / "last.ckpt";
  Checkpoint last;
  std::string source = "reused " + ck.string();
  if (fs::exists(ck)) {
    last = load_checkpoint(ck);
  } else {
    last = train_end_to_end().last;
    source = "trained here";
  }
  const StetModel model = model_from_checkpoint(cfg, last);

  std::vector<std::vector<double>> train_x, test_x;
  std::vector<int> train_y, test_y;
  std::vector<std::size_t> test_idx;
  for (const auto& w : data.train)
    if (w.label == 0 || w.label == 1) train_x.push_back(oracle::channel_rms(w.values)), train_y.push_back(w.label);
  for (std::size_t i = 0; i < data.test.size(); ++i)
    if (data.test[i].label == 0 || data.test[i].label == 1) {
      test_x.push_back(oracle::channel_rms(data.test[i].values));
      test_y.push_back(data.test[i].label);
      test_idx.push_back(i);
    }
  const double rms_acc = oracle::rms_centroid_accuracy(train_x, train_y, test_x, test_y);

  NoGradGuard no_grad;
  ForwardContext ctx;
  const Tensor probs = model.forward_classify(batch_inputs(data.test, test_idx), ctx);
  const std::size_t k = probs.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_idx.size(); ++i) {
    const int pred = probs[i * k + 1] > probs[i * k + 0] ? 1 : 0;
    correct += pred == test_y[i];
  }
  const double model_acc = static_cast<double>(correct) / static_cast<double>(test_idx.size());
  return {model_acc - rms_acc >= 0.15,
          fmt("pairwise accuracy model %.4f vs channel-RMS oracle %.4f, gap %.4f (>= 0.15); %zu test windows; model %s",
              model_acc, rms_acc, model_acc - rms_acc, test_idx.size(), source.c_str())};
}

// 7. Drop rate under additive noise, fused vs long-only, averaged over seeds.
Outcome robustness() {
  const auto t0 = Clock::now();
  RunConfig base = load_config("synthetic_classify.json");
  base.training.init = "scratch";
  base.training.finetune_epochs = std::getenv("STET_ROBUSTNESS_EPOCHS") ? std::stoul(std::getenv("STET_ROBUSTNESS_EPOCHS")) : 20;
  base.noise.additive = {0.2};
  base.noise.multiplicative = {};
  base.noise.signal_loss = {};
  std::map<DecoderMode, double> mean_drop;
  std::string per_seed;
  const fs::path dir = run_dir() / "robustness";
  fs::create_directories(dir);
  for (DecoderMode mode : {DecoderMode::Fused, DecoderMode::LongOnly}) {
    for (std::uint64_t seed : {1, 2, 3}) {
      RunConfig cfg = base;
      cfg.seed = seed;
      cfg.model.decoder = mode;
      const PreparedData data = prepare_data(cfg);
      const FinetuneResult fin = run_finetune(cfg, data);
      const StetModel model = model_from_checkpoint(cfg, fin.last);
      RunConfig full = cfg;
      full.noise = RunConfig{}.noise;
      const MetricsReport table = run_noise_bench(full, data, model);
      write_report(dir / (std::string(to_string(mode)) + "_seed" + std::to_string(seed) + ".json"), table);
      write_noise_csv(dir / (std::string(to_string(mode)) + "_seed" + std::to_string(seed) + ".csv"), table.noise);
      double drop = 0.0;
      for (const auto& row : table.noise)
        if (row.mode == NoiseMode::AdditiveGaussian && row.intensity == 0.2) drop = row.drop_rate;
      mean_drop[mode] += drop / 3.0;
      per_seed += fmt(" %s/%llu acc %.3f drop %.3f;", std::string(to_string(mode)).c_str(),
                      static_cast<unsigned long long>(seed), *table.clean_accuracy, drop);
    }
  }
  const double f = mean_drop[DecoderMode::Fused], l = mean_drop[DecoderMode::LongOnly];
  return {f <= l + 0.02, fmt("mean drop_rate at sigma=0.2: fused %.4f vs long-only %.4f (fused <= long-only + 0.02); %.0f s;%s",
                             f, l, seconds_since(t0), per_seed.c_str())};
}

std::vector<double> log_std_features(const Matrix& x) {
  std::vector<double> f(x.cols + 1, 1.0);
  for (std::size_t ch = 0; ch < x.cols; ++ch) {
    double m = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) m += x(i, ch);
    m /= static_cast<double>(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) ss += (x(i, ch) - m) * (x(i, ch) - m);
    f[ch] = 0.5 * std::log(ss / static_cast<double>(x.rows));
  }
  return f;
}

// Replaces the model's predictions in `eval` with those of a linear fit from
// window log-std features to window targets, fitted on the training split.
Evaluation log_std_oracle(const PreparedData& data, Evaluation eval) {
  const std::size_t d = data.train.front().values.cols + 1, joints = eval.truth.cols;
  Eigen::MatrixXd a(data.train.size(), d), y(data.train.size(), joints);
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    const auto f = log_std_features(data.train[i].values);
    const auto t = window_target(data.train[i]);
    for (std::size_t k = 0; k < d; ++k) a(i, k) = f[k];
    for (std::size_t j = 0; j < joints; ++j) y(i, j) = t[j];
  }
  const Eigen::MatrixXd w = a.colPivHouseholderQr().solve(y);
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    const auto f = log_std_features(data.test[i].values);
    for (std::size_t j = 0; j < joints; ++j) {
      double p = 0.0;
      for (std::size_t k = 0; k < d; ++k) p += f[k] * w(k, j);
      eval.predicted(i, j) = p;
    }
  }
  return eval;
}

// 8. Regression on synthetic joint-angle trajectories.
Outcome regression() {
  const auto t0 = Clock::now();
  const RunConfig cfg = load_config("synthetic_regress.json");
  const PreparedData data = prepare_data(cfg);
  const PretrainResult pre = run_pretrain(cfg, data);
  const FinetuneResult fin = run_finetune(cfg, data, &pre.checkpoint);
  const StetModel model = model_from_checkpoint(cfg, fin.last);
  const MetricsReport r = make_report(cfg, data, evaluate(model, cfg, data, data.test));
  const fs::path dir = run_dir() / "regression";
  fs::create_directories(dir);
  write_report(dir / "report_last.json", r);
  write_report(dir / "report_best.json", fin.report);
  const bool pass = *r.pcc > 0.9 && *r.nrmse < 0.15 && *r.kappa <= 2.0 * *r.kappa_truth;
  // Reference point for kappa: a per-window least-squares fit on channel log-std.
  const MetricsReport o = make_report(cfg, data, log_std_oracle(data, evaluate(model, cfg, data, data.test)));
  return {pass, fmt("final-epoch PCC %.4f (> 0.9), NRMSE %.4f (< 0.15), kappa %.4f vs truth %.4f (<= 2x); "
                    "log-std linear oracle PCC %.4f kappa %.4f; %.0f s",
                    *r.pcc, *r.nrmse, *r.kappa, *r.kappa_truth, *o.pcc, *o.kappa, seconds_since(t0))};
}

bool same_tensors(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.shape() != b[i].second.shape()) return false;
    if (!std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin())) return false;
  }
  return true;
}

// 9. Determinism and lossless round-trips.
Outcome determinism() {
  RunConfig cfg = load_config("synthetic_classify.json");
  cfg.data.synthetic.samples_per_class = 40;
  cfg.training.pretrain_epochs = 2;
  cfg.training.finetune_epochs = 3;
  const auto once = [&] {
    const PreparedData d = prepare_data(cfg);
    const PretrainResult pre = run_pretrain(cfg, d);
    return run_finetune(cfg, d, &pre.checkpoint);
  };
  const FinetuneResult a = once(), b = once();
  const bool metrics_equal = report_to_json(a.report) == report_to_json(b.report);
  const bool params_equal = same_tensors(a.last.tensors, b.last.tensors);

  const fs::path dir = run_dir() / "roundtrip";
  fs::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", a.last);
  const Checkpoint back = load_checkpoint(dir / "model.ckpt");
  const bool ckpt_ok = same_tensors(back.tensors, a.last.tensors) && back.metadata == a.last.metadata &&
                       diff_configs(back.config, a.last.config).empty();

  std::vector<Recording> recs = load_recordings(cfg);
  RunConfig reg = load_config("synthetic_regress.json");
  reg.data.regression.n_recordings = 2;
  for (auto& r : load_recordings(reg)) recs.push_back(std::move(r));
  save_dataset(dir / "data.bin", recs, DatasetFormat::RawF64);
  const auto loaded = load_dataset(dir / "data.bin", DatasetFormat::RawF64);
  bool data_ok = loaded.size() == recs.size();
  for (std::size_t i = 0; data_ok && i < recs.size(); ++i) {
    data_ok = loaded[i].samples == recs[i].samples && loaded[i].trajectory == recs[i].trajectory &&
              loaded[i].label == recs[i].label && loaded[i].sample_rate_hz == recs[i].sample_rate_hz &&
              loaded[i].subject_id == recs[i].subject_id;
  }
  return {metrics_equal && params_equal && ckpt_ok && data_ok,
          fmt("repeat run metrics %s, parameters %s; checkpoint round-trip %s; raw-f64 round-trip %s (%zu recordings)",
              metrics_equal ? "identical" : "DIFFER", params_equal ? "identical" : "DIFFER", ckpt_ok ? "lossless" : "LOSSY",
              data_ok ? "lossless" : "LOSSY", recs.size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"gradient oracle", gradient_oracle}},
      {2, {"window equivalence", window_equivalence}},
      {3, {"mask statistics", mask_statistics}},
      {4, {"loss reductions", loss_reductions}},
      {5, {"end-to-end learnability", learnability}},
      {6, {"short-term discrimination", twin_discrimination}},
      {7, {"robustness direction", robustness}},
      {8, {"regression sanity", regression}},
      {9, {"determinism and round-trips", determinism}},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  if (selected.empty())
    for (const auto& [id, _] : criteria) selected.push_back(id);

  bool all = true;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::printf("criterion %d: unknown\n", id);
      return 2;
    }
    Outcome o;
    try {
      o = it->second.second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %d (%s): %s | %s\n", id, it->second.first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
