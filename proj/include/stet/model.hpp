#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "stet/gradcheck.hpp"
#include "stet/rng.hpp"
#include "stet/tensor.hpp"

namespace stet {

enum class Task { Classify, Regress };
// Which decoder streams feed the pooled representation.
enum class DecoderMode { Fused, LongOnly, ShortOnly };

std::string_view to_string(Task task);
std::string_view to_string(DecoderMode mode);
Task parse_task(std::string_view name);
DecoderMode parse_decoder_mode(std::string_view name);

struct ModelConfig {
  Task task = Task::Classify;
  std::size_t channels = 8;  // c
  std::size_t steps = 64;    // t
  std::size_t hidden = 64;   // h
  std::size_t encoder_layers = 2;
  std::size_t heads = 4;
  std::size_t long_layers = 2;
  std::size_t short_layers = 2;
  std::vector<std::size_t> short_windows{41, 21};
  std::size_t outputs = 8;  // classes, or joints for regression
  std::size_t ffn_multiplier = 2;
  double dropout = 0.2;
  // Scale attention logits by 1/sqrt(h / heads) instead of 1/sqrt(h).
  bool per_head_scale = false;
  DecoderMode decoder = DecoderMode::Fused;

  void validate() const;
  // Windows actually used: any window wider than t is clamped to the largest
  // odd value <= t.
  std::vector<std::size_t> effective_windows() const;
  // Field name -> printed value, in a fixed order. Used for checkpoint headers
  // and config diffs.
  std::vector<std::pair<std::string, std::string>> fields() const;
  static ModelConfig from_fields(const std::vector<std::pair<std::string, std::string>>& fields);
};

// "" when equal, otherwise one "field: a != b" line per differing field.
std::string diff_configs(const ModelConfig& expected, const ModelConfig& actual);

// Named learnable tensors in registration order.
class ParameterStore {
 public:
  Tensor add(std::string name, Tensor tensor);
  Tensor get(std::string_view name) const;
  bool contains(std::string_view name) const;
  const std::vector<NamedTensor>& entries() const { return entries_; }
  // Entries whose name starts with any of the prefixes.
  std::vector<NamedTensor> with_prefixes(const std::vector<std::string>& prefixes) const;
  void zero_grad();
  std::size_t scalar_count() const;
  bool all_finite() const;

 private:
  std::vector<NamedTensor> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Collects attention probability maps during a forward pass when attached.
struct AttentionTrace {
  std::vector<Tensor> maps;
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
  AttentionTrace* trace = nullptr;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  Tensor operator()(const Tensor& x) const;
};

// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
Linear make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                   Rng& rng);

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  Tensor operator()(const Tensor& x) const;
};

LayerNorm make_layer_norm(ParameterStore& store, const std::string& name, std::size_t width);

// How a windowed layer gathers its neighbourhoods. Both give the same result;
// Unfold materializes the [.., t, w, e] key/value tensors and is kept as a
// reference route.
enum class WindowRoute { Banded, Unfold };

// Multi-head self-attention over x [B, t, h]. window == 0 attends to every
// step; an odd window restricts each query to its w-neighbourhood (keys and
// values unfolded along time, padded slots masked out). The same projections
// serve every query position.
class MultiHeadAttention {
 public:
  MultiHeadAttention(Linear q, Linear k, Linear v, Linear o, std::size_t heads, std::size_t window,
                     double scale, double attention_dropout);

  Tensor forward(const Tensor& x, ForwardContext& ctx) const;
  // Same weights, different window.
  MultiHeadAttention with_window(std::size_t window) const;
  MultiHeadAttention with_route(WindowRoute route) const;

  std::size_t window() const { return window_; }
  const Linear& query() const { return q_; }
  const Linear& key() const { return k_; }
  const Linear& value() const { return v_; }
  const Linear& output() const { return o_; }

 private:
  Linear q_, k_, v_, o_;
  std::size_t heads_;
  std::size_t window_;
  double scale_;
  double attention_dropout_;
  WindowRoute route_ = WindowRoute::Banded;
};

MultiHeadAttention make_attention(ParameterStore& store, const std::string& name, std::size_t hidden,
                                  std::size_t heads, std::size_t window, double scale,
                                  double attention_dropout, Rng& rng);

// Pre-norm transformer block: x + drop(attn(ln(x))), then + drop(ffn(ln(.))).
class AttentionBlock {
 public:
  AttentionBlock(ParameterStore& store, const std::string& name, std::size_t hidden,
                 std::size_t heads, std::size_t window, double scale, std::size_t ffn_width,
                 double dropout, Rng& rng);

  Tensor forward(const Tensor& x, ForwardContext& ctx) const;
  const MultiHeadAttention& attention() const { return attn_; }

 private:
  LayerNorm ln_attn_;
  MultiHeadAttention attn_;
  LayerNorm ln_ffn_;
  Linear ffn_up_;
  Linear ffn_down_;
  double dropout_;
};

// Encoder with positional embeddings, parallel long-term (full attention) and
// short-term (sliding-window attention) decoders, temporal pooling fusion and
// task heads.
class StetModel {
 public:
  StetModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  // x: [B, t, c] -> [B, t, h]
  Tensor encode(const Tensor& x, ForwardContext& ctx) const;
  Tensor long_term_decode(const Tensor& encoded, ForwardContext& ctx) const;
  Tensor short_term_decode(const Tensor& encoded, ForwardContext& ctx) const;
  // Concatenates the available streams on the hidden axis and pools time with
  // the learned weights u: [B, t, k*h] -> [B, k*h]. Pass an undefined tensor
  // for a stream that the decoder mode leaves out.
  Tensor fuse_and_pool(const Tensor& long_stream, const Tensor& short_stream) const;

  struct Outputs {
    Tensor long_stream;   // [B, t, h], undefined in ShortOnly mode
    Tensor short_stream;  // [B, t, h], undefined in LongOnly mode
    Tensor pooled;        // [B, k*h]
    Tensor head;          // [B, outputs]: logits (classify) or angles (regress)
  };
  Outputs forward(const Tensor& x, ForwardContext& ctx) const;
  // Per-class sigmoid probabilities [B, C].
  Tensor forward_classify(const Tensor& x, ForwardContext& ctx) const;
  // Joint angles [B, n_joints].
  Tensor forward_regress(const Tensor& x, ForwardContext& ctx) const;
  // Reconstruction [B, t, c] from an already-masked input.
  Tensor forward_pretrain(const Tensor& x_masked, ForwardContext& ctx) const;

  const AttentionBlock& long_block(std::size_t i) const { return long_blocks_.at(i); }
  const AttentionBlock& short_block(std::size_t i) const { return short_blocks_.at(i); }
  const AttentionBlock& encoder_block(std::size_t i) const { return encoder_blocks_.at(i); }

  // Parameter groups.
  static const std::vector<std::string>& backbone_prefixes();  // transferred after pretraining
  std::vector<NamedTensor> pretrain_parameters() const;        // backbone + reconstruction head
  std::vector<NamedTensor> finetune_parameters() const;        // everything but reconstruction head

  // Copies backbone tensors (input projection, position table, encoder) from a
  // pretrained store. Returns the number of tensors copied.
  std::size_t load_backbone(const ParameterStore& pretrained);

 private:
  ModelConfig config_;
  ParameterStore params_;
  Linear input_proj_;
  Tensor positions_;
  std::vector<AttentionBlock> encoder_blocks_;
  LayerNorm encoder_norm_;
  std::vector<AttentionBlock> long_blocks_;
  LayerNorm long_norm_;
  std::vector<AttentionBlock> short_blocks_;
  LayerNorm short_norm_;
  Tensor pool_weights_;  // u, [t]
  Linear head_hidden_;
  Linear head_out_;
  Linear reconstruction_;
};

double attention_scale(const ModelConfig& config);

}  // namespace stet
