#pragma once

#include <cstddef>
#include <vector>

#include "stet/rng.hpp"
#include "stet/tensor.hpp"

// Differentiable operations. Every op records its backward rule on the
// current thread's Tape when gradient tracking is on and an input requires it.
namespace stet {

// Binary elementwise ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
// Natural log; inputs must be positive.
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
// tanh approximation of GELU.
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);

// a: [..., m, k], b: [k, n] (shared across the batch) or [..., k, n] with the
// same leading dims as a. With transpose_b, b is read as [..., n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Softmax over the last axis. -inf entries receive exactly zero weight; a
// slice that is entirely -inf raises DegenerateError.
Tensor softmax_lastdim(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Inverted dropout: zeroes entries with probability p, scales survivors by
// 1/(1-p). Identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// x: [..., in] times weight [in, out] plus bias [out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Sliding windows over the second-to-last axis of x: [..., t, h] becomes
// [..., t, w, h]. Slot (i, j) holds row i - w/2 + j, zero-filled where that
// index lies outside [0, t). `valid` is the t x w pad mask (1 = real row).
struct Unfolded {
  Tensor values;
  std::vector<unsigned char> valid;
};
Unfolded unfold_time(const Tensor& x, std::size_t window);

// Additive bias [t, 1, w]: 0 on valid slots, -inf on padded ones.
Tensor window_pad_bias(std::size_t t, std::size_t window);

// Banded attention without materializing the unfolded tensors. For q, k, v of
// shape [..., t, e], slot j of query row i pairs with key row i - w/2 + j.
// banded_scores returns factor * <q_i, k_s> in [..., t, w], with -inf on slots
// outside [0, t). banded_mix returns sum_j p[i, j] v[i - w/2 + j], skipping
// those slots. Together they equal the unfold_time + matmul + pad-bias route.
Tensor banded_scores(const Tensor& q, const Tensor& k, std::size_t window, double factor);
Tensor banded_mix(const Tensor& p, const Tensor& v, std::size_t window);

}  // namespace stet
