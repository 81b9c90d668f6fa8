#include "stet/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "stet/errors.hpp"
#include "stet/log.hpp"
#include "stet/ops.hpp"

namespace stet {

std::string_view to_string(Task task) { return task == Task::Classify ? "classify" : "regress"; }

std::string_view to_string(DecoderMode mode) {
  switch (mode) {
    case DecoderMode::Fused: return "fused";
    case DecoderMode::LongOnly: return "long_only";
    case DecoderMode::ShortOnly: return "short_only";
  }
  return "fused";
}

Task parse_task(std::string_view name) {
  if (name == "classify") return Task::Classify;
  if (name == "regress") return Task::Regress;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected classify or regress)");
}

DecoderMode parse_decoder_mode(std::string_view name) {
  if (name == "fused") return DecoderMode::Fused;
  if (name == "long_only") return DecoderMode::LongOnly;
  if (name == "short_only") return DecoderMode::ShortOnly;
  throw ConfigError("unknown decoder mode '" + std::string(name) +
                    "' (expected fused, long_only or short_only)");
}

void ModelConfig::validate() const {
  if (channels == 0 || steps == 0 || hidden == 0 || outputs == 0) {
    throw ConfigError("model: channels, steps, hidden and outputs must be positive");
  }
  if (heads == 0 || hidden % heads != 0) {
    throw ConfigError("model: hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (ffn_multiplier == 0) throw ConfigError("model: ffn_multiplier must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
  if (decoder != DecoderMode::ShortOnly && long_layers == 0) {
    throw ConfigError("model: long_layers must be positive when the long decoder is used");
  }
  if (decoder != DecoderMode::LongOnly) {
    if (short_layers == 0) {
      throw ConfigError("model: short_layers must be positive when the short decoder is used");
    }
    if (short_windows.size() != short_layers) {
      throw ConfigError("model: short_windows needs one entry per short layer (" +
                        std::to_string(short_layers) + "), got " +
                        std::to_string(short_windows.size()));
    }
    for (std::size_t w : short_windows) {
      if (w == 0 || w % 2 == 0) {
        throw ConfigError("model: short window " + std::to_string(w) + " must be odd");
      }
    }
  }
}

std::vector<std::size_t> ModelConfig::effective_windows() const {
  std::vector<std::size_t> out = short_windows;
  const std::size_t cap = steps % 2 == 1 ? steps : steps - 1;
  for (std::size_t& w : out) {
    if (w > steps) w = cap;
  }
  return out;
}

namespace {

std::string join_windows(const std::vector<std::size_t>& ws) {
  std::string s;
  for (std::size_t i = 0; i < ws.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(ws[i]);
  }
  return s;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("model field " + key + ": not an unsigned integer: '" + value + "'");
  }
}

}  // namespace

std::vector<std::pair<std::string, std::string>> ModelConfig::fields() const {
  return {
      {"task", std::string(to_string(task))},
      {"channels", std::to_string(channels)},
      {"steps", std::to_string(steps)},
      {"hidden", std::to_string(hidden)},
      {"encoder_layers", std::to_string(encoder_layers)},
      {"heads", std::to_string(heads)},
      {"long_layers", std::to_string(long_layers)},
      {"short_layers", std::to_string(short_layers)},
      {"short_windows", join_windows(short_windows)},
      {"outputs", std::to_string(outputs)},
      {"ffn_multiplier", std::to_string(ffn_multiplier)},
      {"dropout", format_double(dropout)},
      {"per_head_scale", per_head_scale ? "true" : "false"},
      {"decoder", std::string(to_string(decoder))},
  };
}

ModelConfig ModelConfig::from_fields(const std::vector<std::pair<std::string, std::string>>& fields) {
  ModelConfig c;
  for (const auto& [key, value] : fields) {
    if (key == "task") {
      c.task = parse_task(value);
    } else if (key == "channels") {
      c.channels = parse_size(key, value);
    } else if (key == "steps") {
      c.steps = parse_size(key, value);
    } else if (key == "hidden") {
      c.hidden = parse_size(key, value);
    } else if (key == "encoder_layers") {
      c.encoder_layers = parse_size(key, value);
    } else if (key == "heads") {
      c.heads = parse_size(key, value);
    } else if (key == "long_layers") {
      c.long_layers = parse_size(key, value);
    } else if (key == "short_layers") {
      c.short_layers = parse_size(key, value);
    } else if (key == "short_windows") {
      c.short_windows.clear();
      std::istringstream is(value);
      std::string part;
      while (std::getline(is, part, ',')) c.short_windows.push_back(parse_size(key, part));
    } else if (key == "outputs") {
      c.outputs = parse_size(key, value);
    } else if (key == "ffn_multiplier") {
      c.ffn_multiplier = parse_size(key, value);
    } else if (key == "dropout") {
      c.dropout = std::stod(value);
    } else if (key == "per_head_scale") {
      c.per_head_scale = value == "true";
    } else if (key == "decoder") {
      c.decoder = parse_decoder_mode(value);
    } else {
      throw ConfigError("unknown model field '" + key + "'");
    }
  }
  return c;
}

std::string diff_configs(const ModelConfig& expected, const ModelConfig& actual) {
  const auto a = expected.fields();
  const auto b = actual.fields();
  std::string out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].second != b[i].second) {
      out += a[i].first + ": " + a[i].second + " != " + b[i].second + "\n";
    }
  }
  return out;
}

double attention_scale(const ModelConfig& config) {
  const double width =
      config.per_head_scale ? static_cast<double>(config.hidden / config.heads) : config.hidden;
  return 1.0 / std::sqrt(width);
}

// ParameterStore

Tensor ParameterStore::add(std::string name, Tensor tensor) {
  if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
  tensor.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), tensor);
  return tensor;
}

Tensor ParameterStore::get(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
  return entries_[it->second].second;
}

bool ParameterStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) > 0;
}

std::vector<NamedTensor> ParameterStore::with_prefixes(
    const std::vector<std::string>& prefixes) const {
  std::vector<NamedTensor> out;
  for (const auto& entry : entries_) {
    for (const auto& p : prefixes) {
      if (entry.first.compare(0, p.size(), p) == 0) {
        out.push_back(entry);
        break;
      }
    }
  }
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& entry : entries_) entry.second.zero_grad();
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& entry : entries_) n += entry.second.numel();
  return n;
}

bool ParameterStore::all_finite() const {
  for (const auto& entry : entries_) {
    for (double v : entry.second.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// Layers

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Linear make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                   Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w = Tensor::zeros({in, out});
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  Linear l;
  l.weight = store.add(name + ".weight", w);
  l.bias = store.add(name + ".bias", Tensor::zeros({out}));
  return l;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

LayerNorm make_layer_norm(ParameterStore& store, const std::string& name, std::size_t width) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Tensor::full({width}, 1.0));
  ln.beta = store.add(name + ".beta", Tensor::zeros({width}));
  return ln;
}

MultiHeadAttention::MultiHeadAttention(Linear q, Linear k, Linear v, Linear o, std::size_t heads,
                                       std::size_t window, double scale, double attention_dropout)
    : q_(std::move(q)),
      k_(std::move(k)),
      v_(std::move(v)),
      o_(std::move(o)),
      heads_(heads),
      window_(window),
      scale_(scale),
      attention_dropout_(attention_dropout) {
  if (window_ != 0 && window_ % 2 == 0) {
    throw ConfigError("attention window must be odd, got " + std::to_string(window_));
  }
  const std::size_t h = q_.weight.dim(1);
  if (heads_ == 0 || h % heads_ != 0) {
    throw ConfigError("attention: width " + std::to_string(h) + " not divisible by " +
                      std::to_string(heads_) + " heads");
  }
}

MultiHeadAttention MultiHeadAttention::with_window(std::size_t window) const {
  MultiHeadAttention m(q_, k_, v_, o_, heads_, window, scale_, attention_dropout_);
  m.route_ = route_;
  return m;
}

MultiHeadAttention MultiHeadAttention::with_route(WindowRoute route) const {
  MultiHeadAttention m = *this;
  m.route_ = route;
  return m;
}

Tensor MultiHeadAttention::forward(const Tensor& x, ForwardContext& ctx) const {
  if (x.rank() != 3) throw DimensionError("attention: expected [B, t, h], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), t = x.dim(1), h = x.dim(2);
  const std::size_t d = heads_, hd = h / heads_;
  if (h != q_.weight.dim(0)) {
    throw DimensionError("attention: input width " + std::to_string(h) + " does not match layer width " +
                         std::to_string(q_.weight.dim(0)));
  }
  const auto split = [&](const Tensor& y) { return permute(reshape(y, {B, t, d, hd}), {0, 2, 1, 3}); };
  const Tensor q = split(q_(x));
  const Tensor k = split(k_(x));
  const Tensor v = split(v_(x));
  const bool drop = ctx.training && attention_dropout_ > 0.0;
  if (drop && !ctx.rng) throw ConfigError("attention: training with dropout needs an rng");

  Tensor heads_out;  // [B, d, t, hd]
  if (window_ == 0) {
    Tensor attn = softmax_lastdim(scale(matmul(q, k, true), scale_));  // [B, d, t, t]
    if (ctx.trace) ctx.trace->maps.push_back(attn);
    if (drop) attn = dropout(attn, attention_dropout_, *ctx.rng, true);
    heads_out = matmul(attn, v);
  } else if (route_ == WindowRoute::Banded) {
    Tensor attn = softmax_lastdim(banded_scores(q, k, window_, scale_));  // [B, d, t, w]
    if (ctx.trace) ctx.trace->maps.push_back(attn);
    if (drop) attn = dropout(attn, attention_dropout_, *ctx.rng, true);
    heads_out = banded_mix(attn, v, window_);
  } else {
    const Unfolded kw = unfold_time(k, window_);  // [B, d, t, w, hd]
    const Unfolded vw = unfold_time(v, window_);
    const Tensor q5 = reshape(q, {B, d, t, 1, hd});
    Tensor scores = scale(matmul(q5, kw.values, true), scale_);  // [B, d, t, 1, w]
    scores = add(scores, window_pad_bias(t, window_));
    Tensor attn = softmax_lastdim(scores);
    if (ctx.trace) ctx.trace->maps.push_back(attn);
    if (drop) attn = dropout(attn, attention_dropout_, *ctx.rng, true);
    heads_out = reshape(matmul(attn, vw.values), {B, d, t, hd});
  }
  const Tensor merged = reshape(permute(heads_out, {0, 2, 1, 3}), {B, t, h});
  return o_(merged);
}

MultiHeadAttention make_attention(ParameterStore& store, const std::string& name, std::size_t hidden,
                                  std::size_t heads, std::size_t window, double scale,
                                  double attention_dropout, Rng& rng) {
  Linear q = make_linear(store, name + ".query", hidden, hidden, rng);
  Linear k = make_linear(store, name + ".key", hidden, hidden, rng);
  Linear v = make_linear(store, name + ".value", hidden, hidden, rng);
  Linear o = make_linear(store, name + ".output", hidden, hidden, rng);
  return MultiHeadAttention(q, k, v, o, heads, window, scale, attention_dropout);
}

AttentionBlock::AttentionBlock(ParameterStore& store, const std::string& name, std::size_t hidden,
                               std::size_t heads, std::size_t window, double scale,
                               std::size_t ffn_width, double dropout, Rng& rng)
    : ln_attn_(make_layer_norm(store, name + ".ln_attn", hidden)),
      attn_(make_attention(store, name + ".attn", hidden, heads, window, scale, dropout, rng)),
      ln_ffn_(make_layer_norm(store, name + ".ln_ffn", hidden)),
      ffn_up_(make_linear(store, name + ".ffn_up", hidden, ffn_width, rng)),
      ffn_down_(make_linear(store, name + ".ffn_down", ffn_width, hidden, rng)),
      dropout_(dropout) {}

Tensor AttentionBlock::forward(const Tensor& x, ForwardContext& ctx) const {
  const auto drop = [&](const Tensor& y) {
    if (!ctx.training || dropout_ == 0.0) return y;
    if (!ctx.rng) throw ConfigError("block: training with dropout needs an rng");
    return dropout(y, dropout_, *ctx.rng, true);
  };
  const Tensor y = add(x, drop(attn_.forward(ln_attn_(x), ctx)));
  return add(y, drop(ffn_down_(gelu(ffn_up_(ln_ffn_(y))))));
}

// StetModel

namespace {

ModelConfig checked(ModelConfig c) {
  c.validate();
  const auto eff = c.effective_windows();
  if (c.decoder != DecoderMode::LongOnly) {
    for (std::size_t i = 0; i < eff.size(); ++i) {
      if (eff[i] != c.short_windows[i]) {
        warn("short window " + std::to_string(c.short_windows[i]) + " exceeds t = " +
             std::to_string(c.steps) + "; clamped to " + std::to_string(eff[i]));
      }
    }
  }
  return c;
}

std::size_t stream_count(DecoderMode mode) { return mode == DecoderMode::Fused ? 2 : 1; }

}  // namespace

StetModel::StetModel(ModelConfig config, std::uint64_t seed) : config_(checked(std::move(config))) {
  Rng rng(seed);
  const std::size_t h = config_.hidden, t = config_.steps, c = config_.channels;
  const double s = attention_scale(config_);
  const std::size_t ffn = config_.ffn_multiplier * h;
  const double p = config_.dropout;

  input_proj_ = make_linear(params_, "input_proj", c, h, rng);
  Tensor pos = Tensor::zeros({t, h});
  for (double& v : pos.data()) v = rng.normal(0.0, 0.02);
  positions_ = params_.add("positions", pos);
  for (std::size_t i = 0; i < config_.encoder_layers; ++i) {
    encoder_blocks_.emplace_back(params_, "encoder." + std::to_string(i), h, config_.heads, 0, s, ffn,
                                 p, rng);
  }
  encoder_norm_ = make_layer_norm(params_, "encoder.norm", h);

  if (config_.decoder != DecoderMode::ShortOnly) {
    for (std::size_t i = 0; i < config_.long_layers; ++i) {
      long_blocks_.emplace_back(params_, "long." + std::to_string(i), h, config_.heads, 0, s, ffn, p,
                                rng);
    }
    long_norm_ = make_layer_norm(params_, "long.norm", h);
  }
  if (config_.decoder != DecoderMode::LongOnly) {
    const auto windows = config_.effective_windows();
    for (std::size_t i = 0; i < config_.short_layers; ++i) {
      short_blocks_.emplace_back(params_, "short." + std::to_string(i), h, config_.heads, windows[i], s,
                                 ffn, p, rng);
    }
    short_norm_ = make_layer_norm(params_, "short.norm", h);
  }

  const double ub = 1.0 / std::sqrt(static_cast<double>(t));
  Tensor u = Tensor::zeros({t});
  for (double& v : u.data()) v = rng.uniform(-ub, ub);
  pool_weights_ = params_.add("pool.u", u);
  const std::size_t pooled = stream_count(config_.decoder) * h;
  head_hidden_ = make_linear(params_, "head.hidden", pooled, h, rng);
  head_out_ = make_linear(params_, "head.out", h, config_.outputs, rng);
  reconstruction_ = make_linear(params_, "reconstruction", h, c, rng);
}

Tensor StetModel::encode(const Tensor& x, ForwardContext& ctx) const {
  if (x.rank() != 3 || x.dim(1) != config_.steps || x.dim(2) != config_.channels) {
    throw DimensionError("encode: expected [B, " + std::to_string(config_.steps) + ", " +
                         std::to_string(config_.channels) + "], got " + shape_str(x.shape()));
  }
  Tensor y = add(input_proj_(x), positions_);
  for (const auto& block : encoder_blocks_) y = block.forward(y, ctx);
  return encoder_norm_(y);
}

Tensor StetModel::long_term_decode(const Tensor& encoded, ForwardContext& ctx) const {
  if (long_blocks_.empty()) throw ConfigError("long_term_decode: model built without a long decoder");
  Tensor y = encoded;
  for (const auto& block : long_blocks_) y = block.forward(y, ctx);
  return long_norm_(y);
}

Tensor StetModel::short_term_decode(const Tensor& encoded, ForwardContext& ctx) const {
  if (short_blocks_.empty()) {
    throw ConfigError("short_term_decode: model built without a short decoder");
  }
  Tensor y = encoded;
  for (const auto& block : short_blocks_) y = block.forward(y, ctx);
  return short_norm_(y);
}

Tensor StetModel::fuse_and_pool(const Tensor& long_stream, const Tensor& short_stream) const {
  std::vector<Tensor> parts;
  if (config_.decoder != DecoderMode::ShortOnly) parts.push_back(long_stream);
  if (config_.decoder != DecoderMode::LongOnly) parts.push_back(short_stream);
  for (const Tensor& p : parts) {
    if (!p.defined()) throw DimensionError("fuse_and_pool: missing decoder stream");
    if (p.rank() != 3 || p.dim(1) != config_.steps || p.dim(2) != config_.hidden) {
      throw DimensionError("fuse_and_pool: expected [B, " + std::to_string(config_.steps) + ", " +
                           std::to_string(config_.hidden) + "], got " + shape_str(p.shape()));
    }
  }
  if (parts.size() == 2 && parts[0].dim(0) != parts[1].dim(0)) {
    throw DimensionError("fuse_and_pool: batch sizes differ");
  }
  const Tensor fused = parts.size() == 1 ? parts[0] : concat(parts, -1);  // [B, t, k*h]
  const std::size_t B = fused.dim(0), width = fused.dim(2);
  // sum_t u_t * H[:, t, :]
  const Tensor pooled =
      matmul(permute(fused, {0, 2, 1}), reshape(pool_weights_, {config_.steps, 1}));  // [B, k*h, 1]
  return reshape(pooled, {B, width});
}

StetModel::Outputs StetModel::forward(const Tensor& x, ForwardContext& ctx) const {
  Outputs out;
  const Tensor enc = encode(x, ctx);
  if (config_.decoder != DecoderMode::ShortOnly) out.long_stream = long_term_decode(enc, ctx);
  if (config_.decoder != DecoderMode::LongOnly) out.short_stream = short_term_decode(enc, ctx);
  out.pooled = fuse_and_pool(out.long_stream, out.short_stream);
  out.head = head_out_(gelu(head_hidden_(out.pooled)));
  return out;
}

Tensor StetModel::forward_classify(const Tensor& x, ForwardContext& ctx) const {
  return sigmoid(forward(x, ctx).head);
}

Tensor StetModel::forward_regress(const Tensor& x, ForwardContext& ctx) const {
  return forward(x, ctx).head;
}

Tensor StetModel::forward_pretrain(const Tensor& x_masked, ForwardContext& ctx) const {
  return reconstruction_(encode(x_masked, ctx));
}

const std::vector<std::string>& StetModel::backbone_prefixes() {
  static const std::vector<std::string> prefixes{"input_proj.", "positions", "encoder."};
  return prefixes;
}

std::vector<NamedTensor> StetModel::pretrain_parameters() const {
  auto out = params_.with_prefixes(backbone_prefixes());
  auto rec = params_.with_prefixes({"reconstruction."});
  out.insert(out.end(), rec.begin(), rec.end());
  return out;
}

std::vector<NamedTensor> StetModel::finetune_parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& entry : params_.entries()) {
    if (entry.first.rfind("reconstruction.", 0) != 0) out.push_back(entry);
  }
  return out;
}

std::size_t StetModel::load_backbone(const ParameterStore& pretrained) {
  std::size_t copied = 0;
  for (auto& [name, tensor] : params_.with_prefixes(backbone_prefixes())) {
    if (!pretrained.contains(name)) {
      throw ConfigError("pretrained weights lack backbone tensor '" + name + "'");
    }
    const Tensor src = pretrained.get(name);
    if (src.shape() != tensor.shape()) {
      throw DimensionError("backbone tensor '" + name + "': shape " + shape_str(src.shape()) +
                           " does not match " + shape_str(tensor.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), tensor.data().begin());
    ++copied;
  }
  return copied;
}

}  // namespace stet
