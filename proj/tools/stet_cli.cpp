// Command-line entry point: stet <subcommand> [--config file] [--set key=value]... [--out dir]
//
// Exit codes: 0 success, 2 usage or config error, 3 runtime failure.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stet/checkpoint.hpp"
#include "stet/config.hpp"
#include "stet/dataset_io.hpp"
#include "stet/errors.hpp"
#include "stet/gradcheck_suite.hpp"
#include "stet/harness.hpp"
#include "stet/metrics.hpp"

namespace fs = std::filesystem;
using namespace stet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string checkpoint;
  std::string resume;
  std::string init;
  std::string ablation;
  std::string split = "test";
  std::string format = "raw-f64";
  double tolerance = 1e-3;
};

RunConfig build_config(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  for (const auto& s : o.overrides) apply_override(cfg, s);
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.validate();
  return cfg;
}

fs::path output_dir(const RunConfig& cfg) {
  fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  return dir;
}

Checkpoint require_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required for this subcommand");
  return load_checkpoint(o.checkpoint);
}

void print_summary(const MetricsReport& r) {
  if (r.accuracy) std::printf("accuracy %.4f (%zu/%zu)\n", r.accuracy->overall, r.accuracy->correct, r.accuracy->total);
  if (r.pcc) std::printf("pcc %.4f rmse %.4f nrmse %.4f\n", *r.pcc, r.rmse.value_or(0.0), r.nrmse.value_or(0.0));
  if (r.kappa) std::printf("kappa %.4f (truth %.4f)\n", *r.kappa, r.kappa_truth.value_or(0.0));
  for (const auto& row : r.noise)
    std::printf("%-24s %.2f  acc %.4f  drop %.4f\n", std::string(to_string(row.mode)).c_str(), row.intensity,
                row.accuracy, row.drop_rate);
}

int cmd_gen_data(const Options& o) {
  const RunConfig cfg = build_config(o);
  const DatasetFormat fmt = parse_dataset_format(o.format);
  const fs::path path = output_dir(cfg) / (fmt == DatasetFormat::Csv ? "dataset.csv" : "dataset.bin");
  const auto recs = load_recordings(cfg);
  save_dataset(path, recs, fmt);
  std::printf("wrote %zu recordings to %s\n", recs.size(), path.string().c_str());
  return kExitOk;
}

Checkpoint pretrain(const RunConfig& cfg, const PreparedData& data, const Checkpoint* resume,
                    const fs::path& dir) {
  PretrainResult r = run_pretrain(cfg, data, resume);
  save_checkpoint(dir / "pretrain.ckpt", r.checkpoint);
  write_train_log(dir / "pretrain_log.csv", r.log);
  if (!r.log.empty()) std::printf("pretrain final loss %.6f\n", r.log.back().loss);
  return std::move(r.checkpoint);
}

int cmd_pretrain(const Options& o) {
  const RunConfig cfg = build_config(o);
  const fs::path dir = output_dir(cfg);
  std::optional<Checkpoint> resume;
  if (!o.resume.empty()) resume = load_checkpoint(o.resume);
  const PreparedData data = prepare_data(cfg, resume ? &*resume : nullptr);
  pretrain(cfg, data, resume ? &*resume : nullptr, dir);
  return kExitOk;
}

void train_one(const RunConfig& cfg, const Options& o, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string init = o.init.empty() ? cfg.training.init : o.init;
  if (init != "pretrained" && init != "scratch") throw ConfigError("--init must be pretrained or scratch");
  std::optional<Checkpoint> backbone;
  if (init == "pretrained" && !o.checkpoint.empty()) backbone = load_checkpoint(o.checkpoint);
  // Data transforms come from the backbone checkpoint so both phases see identical inputs.
  const PreparedData data = prepare_data(cfg, backbone ? &*backbone : nullptr);
  if (init == "pretrained" && !backbone) backbone = pretrain(cfg, data, nullptr, dir);
  const FinetuneResult r = run_finetune(cfg, data, backbone ? &*backbone : nullptr);
  save_checkpoint(dir / "best.ckpt", r.best);
  save_checkpoint(dir / "last.ckpt", r.last);
  write_train_log(dir / "train_log.csv", r.log);
  write_report(dir / "report.json", r.report);
  std::printf("[%s] best epoch %zu\n", std::string(to_string(cfg.model.decoder)).c_str(), r.best_epoch);
  print_summary(r.report);
}

int cmd_train(const Options& o) {
  RunConfig cfg = build_config(o);
  const fs::path dir = output_dir(cfg);
  if (o.ablation == "all") {
    for (DecoderMode m : {DecoderMode::Fused, DecoderMode::LongOnly, DecoderMode::ShortOnly}) {
      cfg.model.decoder = m;
      train_one(cfg, o, dir / std::string(to_string(m)));
    }
    return kExitOk;
  }
  if (!o.ablation.empty()) cfg.model.decoder = parse_decoder_mode(o.ablation);
  train_one(cfg, o, dir);
  return kExitOk;
}

int cmd_eval(const Options& o) {
  const RunConfig cfg = build_config(o);
  const Checkpoint ckpt = require_checkpoint(o);
  const StetModel model = model_from_checkpoint(cfg, ckpt);
  const PreparedData data = prepare_data(cfg, &ckpt);
  const auto& windows = o.split == "train" ? data.train : data.test;
  MetricsReport report = make_report(cfg, data, evaluate(model, cfg, data, windows));
  report.header["split"] = o.split;
  write_report(output_dir(cfg) / "eval_report.json", report);
  print_summary(report);
  return kExitOk;
}

int cmd_noise_bench(const Options& o) {
  const RunConfig cfg = build_config(o);
  const Checkpoint ckpt = require_checkpoint(o);
  const StetModel model = model_from_checkpoint(cfg, ckpt);
  const PreparedData data = prepare_data(cfg, &ckpt);
  const MetricsReport report = run_noise_bench(cfg, data, model);
  const fs::path dir = output_dir(cfg);
  write_report(dir / "noise_report.json", report);
  write_noise_csv(dir / "noise.csv", report.noise);
  print_summary(report);
  return kExitOk;
}

int cmd_export_embeddings(const Options& o) {
  const RunConfig cfg = build_config(o);
  const Checkpoint ckpt = require_checkpoint(o);
  const StetModel model = model_from_checkpoint(cfg, ckpt);
  const PreparedData data = prepare_data(cfg, &ckpt);
  const auto& windows = o.split == "train" ? data.train : data.test;
  const Embeddings e = compute_embeddings(model, cfg, windows);
  write_embeddings(output_dir(cfg), e);
  std::printf("exported %zu rows\n", e.labels.size());
  return kExitOk;
}

int cmd_grad_check(const Options& o) {
  double worst = 0.0;
  bool ok = true;
  for (const auto& c : run_gradcheck_suite(o.tolerance)) {
    std::printf("%-26s max_rel %.3e  %s (%zu entries)\n", c.name.c_str(), c.report.max_rel_error,
                c.report.worst_entry.c_str(), c.report.entries_checked);
    worst = std::max(worst, c.report.max_rel_error);
    ok = ok && c.report.passed;
  }
  std::printf("max discrepancy %.3e (tolerance %.1e): %s\n", worst, o.tolerance, ok ? "pass" : "FAIL");
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sliding-window transformer for sEMG gesture recognition"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--set", o.overrides, "Override a config key (section.key=value); repeatable");
    sub->add_option("--out", o.out, "Output directory (overrides output_dir)");
  };
  auto* gen = app.add_subcommand("gen-data", "Write the configured synthetic dataset");
  common(gen);
  gen->add_option("--format", o.format, "csv or raw-f64")->check(CLI::IsMember({"csv", "raw-f64"}));
  auto* pre = app.add_subcommand("pretrain", "Masked-reconstruction pretraining");
  common(pre);
  pre->add_option("--resume", o.resume, "Continue from a pretraining checkpoint")->check(CLI::ExistingFile);
  auto* train = app.add_subcommand("train", "Fine-tune the full model");
  common(train);
  train->add_option("--init", o.init, "pretrained or scratch (default: training.init)")
      ->check(CLI::IsMember({"pretrained", "scratch"}));
  train->add_option("--checkpoint", o.checkpoint, "Pretrained backbone; pretrains first when absent")
      ->check(CLI::ExistingFile);
  train->add_option("--ablation", o.ablation, "fused, long_only, short_only or all")
      ->check(CLI::IsMember({"fused", "long_only", "short_only", "all"}));
  auto* ev = app.add_subcommand("eval", "Evaluate a trained checkpoint");
  common(ev);
  auto* noise = app.add_subcommand("noise-bench", "Accuracy under the configured noise sweep");
  common(noise);
  auto* emb = app.add_subcommand("export-embeddings", "Write long, short and fused embeddings as CSV");
  common(emb);
  for (auto* sub : {ev, noise, emb})
    sub->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  for (auto* sub : {ev, emb})
    sub->add_option("--split", o.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  gc->add_option("--tolerance", o.tolerance, "Maximum relative discrepancy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*pre) return cmd_pretrain(o);
    if (*train) return cmd_train(o);
    if (*ev) return cmd_eval(o);
    if (*noise) return cmd_noise_bench(o);
    if (*emb) return cmd_export_embeddings(o);
    if (*gc) return cmd_grad_check(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
