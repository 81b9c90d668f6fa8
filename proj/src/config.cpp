#include "stet/config.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "stet/dataset_io.hpp"
#include "stet/errors.hpp"

namespace stet {

using Json = nlohmann::ordered_json;

namespace {

std::string_view stride_name(StrideMode mode) {
  return mode == StrideMode::WindowMinusOverlap ? "window_minus_overlap" : "overlap";
}

StrideMode parse_stride(const std::string& name) {
  if (name == "window_minus_overlap") return StrideMode::WindowMinusOverlap;
  if (name == "overlap") return StrideMode::OverlapIsStride;
  throw ConfigError("data.segment.stride: expected window_minus_overlap or overlap, got '" + name +
                    "'");
}

Json model_json(const ModelConfig& m) {
  return Json{{"task", std::string(to_string(m.task))},
              {"channels", m.channels},
              {"steps", m.steps},
              {"hidden", m.hidden},
              {"encoder_layers", m.encoder_layers},
              {"heads", m.heads},
              {"long_layers", m.long_layers},
              {"short_layers", m.short_layers},
              {"short_windows", m.short_windows},
              {"outputs", m.outputs},
              {"ffn_multiplier", m.ffn_multiplier},
              {"dropout", m.dropout},
              {"per_head_scale", m.per_head_scale},
              {"decoder", std::string(to_string(m.decoder))}};
}

Json to_json(const RunConfig& c) {
  const auto& s = c.data.synthetic;
  const auto& r = c.data.regression;
  Json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["model"] = model_json(c.model);
  j["data"] = Json{
      {"source", c.data.source},
      {"format", c.data.format},
      {"synthetic",
       Json{{"n_classes", s.n_classes},
            {"n_channels", s.n_channels},
            {"t", s.t},
            {"samples_per_class", s.samples_per_class},
            {"seed", s.seed},
            {"sample_rate_hz", s.sample_rate_hz},
            {"twin_pairs", s.twin_pairs},
            {"disjoint_channels", s.disjoint_channels}}},
      {"regression",
       Json{{"n_channels", r.n_channels},
            {"n_joints", r.n_joints},
            {"n_recordings", r.n_recordings},
            {"n_samples", r.n_samples},
            {"sample_rate_hz", r.sample_rate_hz},
            {"seed", r.seed}}},
      {"segment",
       Json{{"window_ms", c.data.segment.window_ms},
            {"overlap_ms", c.data.segment.overlap_ms},
            {"stride", std::string(stride_name(c.data.segment.stride))}}},
      {"normalization", c.data.normalization},
      {"mu", c.data.mu},
      {"train_parts", c.data.train_parts},
      {"test_parts", c.data.test_parts},
      {"categories", c.data.categories}};
  j["mask"] = Json{{"ratio", c.mask.ratio}, {"mean_masked_length", c.mask.mean_masked_length}};
  j["optimizer"] = Json{{"lr", c.optimizer.lr},
                        {"weight_decay", c.optimizer.weight_decay},
                        {"beta1", c.optimizer.beta1},
                        {"beta2", c.optimizer.beta2},
                        {"eps", c.optimizer.eps}};
  j["training"] = Json{{"batch_size", c.training.batch_size},
                       {"eval_batch_size", c.training.eval_batch_size},
                       {"pretrain_epochs", c.training.pretrain_epochs},
                       {"finetune_epochs", c.training.finetune_epochs},
                       {"finetune_lr", c.training.finetune_lr},
                       {"loss", c.training.loss},
                       {"asymmetric",
                        Json{{"gamma_pos", c.training.asymmetric.gamma_pos},
                             {"gamma_neg", c.training.asymmetric.gamma_neg},
                             {"margin", c.training.asymmetric.margin}}},
                       {"init", c.training.init}};
  j["noise"] = Json{{"seed", c.noise.seed},
                    {"additive", c.noise.additive},
                    {"multiplicative", c.noise.multiplicative},
                    {"signal_loss", c.noise.signal_loss}};
  return j;
}

// Reads keys out of one JSON object and reports anything left unread.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + full(key) + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + "wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }
  void get_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const Json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(where(key) + "expected a non-negative integer");
    }
    out = v.get<std::size_t>();
  }
  void get_double(const char* key, double& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_number()) throw ConfigError(where(key) + "expected a number");
    out = j_.at(key).get<double>();
  }
  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const Json& at(const char* key) const { return j_.at(key); }
  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where(const std::string& key) const { return "config key '" + full(key) + "': "; }
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_model(const Json& j, ModelConfig& m) {
  Section s(j, "model");
  std::string task(to_string(m.task)), decoder(to_string(m.decoder));
  s.get("task", task);
  m.task = parse_task(task);
  s.get_size("channels", m.channels);
  s.get_size("steps", m.steps);
  s.get_size("hidden", m.hidden);
  s.get_size("encoder_layers", m.encoder_layers);
  s.get_size("heads", m.heads);
  s.get_size("long_layers", m.long_layers);
  s.get_size("short_layers", m.short_layers);
  s.get("short_windows", m.short_windows);
  s.get_size("outputs", m.outputs);
  s.get_size("ffn_multiplier", m.ffn_multiplier);
  s.get_double("dropout", m.dropout);
  s.get("per_head_scale", m.per_head_scale);
  s.get("decoder", decoder);
  m.decoder = parse_decoder_mode(decoder);
}

void read_data(const Json& j, DataConfig& d) {
  Section s(j, "data");
  s.get("source", d.source);
  s.get("format", d.format);
  if (s.has("synthetic")) {
    Section y(s.at("synthetic"), "data.synthetic");
    auto& g = d.synthetic;
    y.get_size("n_classes", g.n_classes);
    y.get_size("n_channels", g.n_channels);
    y.get_size("t", g.t);
    y.get_size("samples_per_class", g.samples_per_class);
    y.get("seed", g.seed);
    y.get_double("sample_rate_hz", g.sample_rate_hz);
    y.get_size("twin_pairs", g.twin_pairs);
    y.get("disjoint_channels", g.disjoint_channels);
  }
  if (s.has("regression")) {
    Section y(s.at("regression"), "data.regression");
    auto& g = d.regression;
    y.get_size("n_channels", g.n_channels);
    y.get_size("n_joints", g.n_joints);
    y.get_size("n_recordings", g.n_recordings);
    y.get_size("n_samples", g.n_samples);
    y.get_double("sample_rate_hz", g.sample_rate_hz);
    y.get("seed", g.seed);
  }
  if (s.has("segment")) {
    Section y(s.at("segment"), "data.segment");
    y.get_double("window_ms", d.segment.window_ms);
    y.get_double("overlap_ms", d.segment.overlap_ms);
    std::string stride(stride_name(d.segment.stride));
    y.get("stride", stride);
    d.segment.stride = parse_stride(stride);
  }
  s.get("normalization", d.normalization);
  s.get_double("mu", d.mu);
  s.get_size("train_parts", d.train_parts);
  s.get_size("test_parts", d.test_parts);
  s.get("categories", d.categories);
}

RunConfig from_json(const Json& j) {
  RunConfig c;
  Section top(j, "");
  int version = kConfigSchemaVersion;
  top.get("schema_version", version);
  if (version != kConfigSchemaVersion) {
    throw ConfigError("unsupported config schema_version " + std::to_string(version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  }
  top.get("seed", c.seed);
  top.get("output_dir", c.output_dir);
  if (top.has("model")) read_model(top.at("model"), c.model);
  if (top.has("data")) read_data(top.at("data"), c.data);
  if (top.has("mask")) {
    Section s(top.at("mask"), "mask");
    s.get_double("ratio", c.mask.ratio);
    s.get_double("mean_masked_length", c.mask.mean_masked_length);
  }
  if (top.has("optimizer")) {
    Section s(top.at("optimizer"), "optimizer");
    s.get_double("lr", c.optimizer.lr);
    s.get_double("weight_decay", c.optimizer.weight_decay);
    s.get_double("beta1", c.optimizer.beta1);
    s.get_double("beta2", c.optimizer.beta2);
    s.get_double("eps", c.optimizer.eps);
  }
  if (top.has("training")) {
    Section s(top.at("training"), "training");
    auto& t = c.training;
    s.get_size("batch_size", t.batch_size);
    s.get_size("eval_batch_size", t.eval_batch_size);
    s.get_size("pretrain_epochs", t.pretrain_epochs);
    s.get_size("finetune_epochs", t.finetune_epochs);
    s.get_double("finetune_lr", t.finetune_lr);
    s.get("loss", t.loss);
    if (s.has("asymmetric")) {
      Section a(s.at("asymmetric"), "training.asymmetric");
      a.get_double("gamma_pos", t.asymmetric.gamma_pos);
      a.get_double("gamma_neg", t.asymmetric.gamma_neg);
      a.get_double("margin", t.asymmetric.margin);
    }
    s.get("init", t.init);
  }
  if (top.has("noise")) {
    Section s(top.at("noise"), "noise");
    s.get("seed", c.noise.seed);
    s.get("additive", c.noise.additive);
    s.get("multiplicative", c.noise.multiplicative);
    s.get("signal_loss", c.noise.signal_loss);
  }
  return c;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  mask_transition(mask);
  training.asymmetric.validate();
  if (training.batch_size == 0 || training.eval_batch_size == 0) {
    throw ConfigError("training.batch_size and training.eval_batch_size must be positive");
  }
  if (training.loss != "asymmetric" && training.loss != "cross_entropy" && training.loss != "mse") {
    throw ConfigError("training.loss must be asymmetric, cross_entropy or mse");
  }
  if ((model.task == Task::Regress) != (training.loss == "mse")) {
    throw ConfigError("training.loss: regression uses mse, classification asymmetric or cross_entropy");
  }
  if (training.init != "pretrained" && training.init != "scratch") {
    throw ConfigError("training.init must be pretrained or scratch");
  }
  if (!(optimizer.lr >= 0.0) || !(optimizer.weight_decay >= 0.0) || !(training.finetune_lr >= 0.0)) {
    throw ConfigError("optimizer: lr and weight_decay must be non-negative");
  }
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
      !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0) || !(optimizer.eps > 0.0)) {
    throw ConfigError("optimizer: betas must lie in [0, 1) and eps must be positive");
  }
  if (data.train_parts == 0 || data.test_parts == 0) {
    throw ConfigError("data.train_parts and data.test_parts must be positive");
  }
  for (const auto& n : data.normalization) {
    if (n != "minmax" && n != "mulaw") {
      throw ConfigError("data.normalization: unknown step '" + n + "' (expected minmax or mulaw)");
    }
  }
  if (!(data.mu > 0.0)) throw ConfigError("data.mu must be positive");
  if (!(data.segment.window_ms > data.segment.overlap_ms) || data.segment.overlap_ms < 0.0) {
    throw ConfigError("data.segment: need window_ms > overlap_ms >= 0");
  }
  if (data.format != "auto") parse_dataset_format(data.format);
  for (double s : noise.additive) NoiseSpec{NoiseMode::AdditiveGaussian, s, 0}.validate();
  for (double s : noise.multiplicative) NoiseSpec{NoiseMode::MultiplicativeGaussian, s, 0}.validate();
  for (double p : noise.signal_loss) NoiseSpec{NoiseMode::SignalLoss, p, 0}.validate();
}

RunConfig parse_run_config(std::string_view json_text) {
  Json j;
  try {
    j = Json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c = from_json(j);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& config) { return to_json(config).dump(2); }

void apply_override(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  Json j = to_json(config);
  Json* node = &j;
  std::istringstream parts(key);
  std::string part;
  while (std::getline(parts, part, '.')) {
    if (!node->is_object() || !node->contains(part)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    node = &(*node)[part];
  }
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  *node = value;
  config = from_json(j);
  config.validate();
}

}  // namespace stet
