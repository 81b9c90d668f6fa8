#include "stet/gradcheck_suite.hpp"

#include "stet/losses.hpp"
#include "stet/model.hpp"
#include "stet/ops.hpp"
#include "stet/rng.hpp"

namespace stet {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), grad);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// Scalar probe with non-trivial first and second derivatives in every entry.
// Mean reduction keeps the loss O(1), so rounding in the central differences
// stays far below the relative-error floor for exactly-zero gradients.
Tensor probe(const Tensor& y, const Tensor& weights) {
  return add(mean(mul(y, weights)), scale(mean(pow(y, 2.0)), 0.1));
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(double tol, std::uint64_t seed) {
  std::vector<GradCheckCase> out;
  Rng rng(seed);
  const auto check = [&](const std::string& name, const std::function<Tensor()>& f,
                         const std::vector<NamedTensor>& params) {
    out.push_back({name, finite_diff_check(f, params, tol)});
  };

  {
    Tensor x = random_tensor({3, 5}, rng), y = random_tensor({5}, rng), r = random_tensor({3, 5}, rng, 1.0, false);
    check("elementwise", [=] { return probe(add(mul(x, y), sub(exp(scale(x, 0.3)), y)), r); },
          {{"x", x}, {"y", y}});
    Tensor p = Tensor::zeros({3, 5}, true);
    for (double& v : p.data()) v = rng.uniform(0.5, 2.0);
    check("log_pow", [=] { return probe(add(log(p), pow(p, 1.5)), r); }, {{"p", p}});
    check("activations", [=] { return probe(add(gelu(x), sigmoid(x)), r); }, {{"x", x}});
  }
  {
    Tensor x = random_tensor({2, 3, 4}, rng), r = random_tensor({2, 3, 4}, rng, 1.0, false);
    Tensor g = random_tensor({4}, rng), b = random_tensor({4}, rng);
    check("layer_norm", [=] { return probe(layer_norm(x, g, b), r); }, {{"x", x}, {"gamma", g}, {"beta", b}});
    check("softmax", [=] { return probe(softmax_lastdim(x), r); }, {{"x", x}});
    check("permute_reshape",
          [=] { return probe(reshape(permute(x, {1, 0, 2}), {2, 3, 4}), r); }, {{"x", x}});
  }
  {
    Tensor a = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
    Tensor c = random_tensor({2, 5, 4}, rng), r = random_tensor({2, 3, 5}, rng, 1.0, false);
    check("linear", [=] { return probe(linear(a, w, b), r); }, {{"x", a}, {"weight", w}, {"bias", b}});
    check("batched_matmul_t", [=] { return probe(matmul(a, c, true), r); }, {{"a", a}, {"b", c}});
  }
  {
    Tensor x = random_tensor({2, 6, 3}, rng), r = random_tensor({2, 6, 5, 3}, rng, 1.0, false);
    check("unfold_time", [=] { return probe(unfold_time(x, 5).values, r); }, {{"x", x}});
    Tensor q = random_tensor({2, 6, 3}, rng), k = random_tensor({2, 6, 3}, rng);
    Tensor rm = random_tensor({2, 6, 3}, rng, 1.0, false);
    check("banded_attention",
          [=] { return probe(banded_mix(softmax_lastdim(banded_scores(q, k, 3, 0.5)), x, 3), rm); },
          {{"q", q}, {"k", k}, {"v", x}});
  }

  // Attention layers and blocks.
  {
    const std::size_t t = 8, h = 8;
    ParameterStore store;
    Rng init(seed + 1);
    const MultiHeadAttention full = make_attention(store, "attn", h, 2, 0, 1.0 / std::sqrt(8.0), 0.0, init);
    const AttentionBlock block(store, "block", h, 2, 3, 1.0 / std::sqrt(8.0), 16, 0.0, init);
    Tensor x = random_tensor({2, t, h}, rng), r = random_tensor({2, t, h}, rng, 1.0, false);
    std::vector<NamedTensor> attn_params{{"x", x}};
    for (const auto& e : store.with_prefixes({"attn."})) attn_params.push_back(e);
    std::vector<NamedTensor> block_params{{"x", x}};
    for (const auto& e : store.with_prefixes({"block."})) block_params.push_back(e);
    check("full_attention", [=] { ForwardContext ctx; return probe(full.forward(x, ctx), r); }, attn_params);
    const MultiHeadAttention windowed = full.with_window(3);
    check("window_attention", [=] { ForwardContext ctx; return probe(windowed.forward(x, ctx), r); },
          attn_params);
    const MultiHeadAttention unfolded = windowed.with_route(WindowRoute::Unfold);
    check("window_attention_unfold",
          [=] { ForwardContext ctx; return probe(unfolded.forward(x, ctx), r); }, attn_params);
    check("attention_block", [=] { ForwardContext ctx; return probe(block.forward(x, ctx), r); },
          block_params);
  }

  // Losses.
  {
    Tensor logits = random_tensor({4, 5}, rng);
    Tensor y = Tensor::zeros({4, 5});
    for (std::size_t b = 0; b < 4; ++b) y[b * 5 + rng.below(5)] = 1.0;
    const AsymmetricLossConfig asl{1.0, 2.0, 0.05};
    check("asymmetric_loss", [=] { return asymmetric_loss(y, sigmoid(logits), asl); }, {{"logits", logits}});
    check("cross_entropy", [=] { return cross_entropy_loss(y, logits); }, {{"logits", logits}});
    Tensor target = random_tensor({4, 5}, rng, 1.0, false);
    check("mse", [=] { return mse_regression_loss(target, logits); }, {{"pred", logits}});
    Tensor truth = random_tensor({2, 4, 3}, rng, 1.0, false), rec = random_tensor({2, 4, 3}, rng);
    Tensor mask = Tensor::zeros({2, 4, 3});
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = i % 3 == 0 ? 0.0 : 1.0;
    check("masked_mse", [=] { return masked_mse_loss(truth, rec, mask); }, {{"reconstruction", rec}});
  }

  // Full model.
  {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.steps = 16;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.encoder_layers = 2;
    cfg.long_layers = 2;
    cfg.short_layers = 2;
    cfg.short_windows = {5, 3};
    cfg.outputs = 3;
    cfg.dropout = 0.0;
    const StetModel model(cfg, seed + 2);
    Tensor x = random_tensor({2, 16, 4}, rng, 1.0, false);
    Tensor y = Tensor::zeros({2, 3});
    y[0] = 1.0;
    y[5] = 1.0;
    std::vector<NamedTensor> params = model.finetune_parameters();
    check("stet_classification",
          [=] { ForwardContext ctx; return asymmetric_loss(y, model.forward_classify(x, ctx), {}); }, params);

    Tensor mask = Tensor::zeros({2, 16, 4});
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = i % 4 == 1 ? 0.0 : 1.0;
    check("stet_pretrain",
          [=] { ForwardContext ctx; return masked_mse_loss(x, model.forward_pretrain(mul(x, mask), ctx), mask); },
          model.pretrain_parameters());

    cfg.task = Task::Regress;
    cfg.outputs = 2;
    const StetModel reg(cfg, seed + 3);
    Tensor target = random_tensor({2, 2}, rng, 1.0, false);
    check("stet_regression",
          [=] { ForwardContext ctx; return mse_regression_loss(target, reg.forward_regress(x, ctx)); },
          reg.finetune_parameters());
  }
  return out;
}

}  // namespace stet
