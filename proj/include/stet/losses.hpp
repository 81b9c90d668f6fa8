#pragma once

#include <vector>

#include "stet/masking.hpp"
#include "stet/tensor.hpp"

namespace stet {

struct AsymmetricLossConfig {
  double gamma_pos = 1.0;  // focusing exponent on positive terms
  double gamma_neg = 0.0;  // focusing exponent on negative terms
  double margin = 0.05;    // probability shift for negatives

  void validate() const;
};

// Log arguments are floored at this value.
inline constexpr double kLogEpsilon = 1e-12;

// x_true, x_rec, mask: [t, c] or [B, t, c]; mask holds 1 (kept) / 0 (masked).
// Mean squared residual over masked entries of each sample, averaged over the
// batch. Throws DegenerateError if a sample has no masked entry.
Tensor masked_mse_loss(const Tensor& x_true, const Tensor& x_rec, const Tensor& mask);

// Stacks per-sample masks into a [B, t, c] 0/1 tensor.
Tensor mask_tensor(const std::vector<MaskMatrix>& masks);

// y (0/1 targets) and probs: [C] or [B, C]. Summed over classes and batch:
//   -[ y (1-p)^g+ log p + (1-y) q^g- log(1-q) ],  q = max(p - m, 0).
Tensor asymmetric_loss(const Tensor& y, const Tensor& probs, const AsymmetricLossConfig& cfg);

// Softmax cross-entropy of one-hot y against logits [B, C], averaged over the batch.
Tensor cross_entropy_loss(const Tensor& y, const Tensor& logits);

// Mean of squared residuals over all entries.
Tensor mse_regression_loss(const Tensor& target, const Tensor& prediction);

}  // namespace stet
