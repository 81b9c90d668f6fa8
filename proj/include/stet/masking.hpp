#pragma once

#include <cstddef>
#include <vector>

#include "stet/matrix.hpp"
#include "stet/rng.hpp"

namespace stet {

// Sensor-wise segment mask for pretraining. values is t x c row-major;
// 1 keeps a sample, 0 masks it.
struct MaskMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> values;
  double ratio = 0.0;
  double mean_masked_length = 0.0;

  bool kept(std::size_t r, std::size_t c) const { return values[r * cols + c] != 0; }
  std::size_t masked_count() const;
};

struct MaskParams {
  double ratio = 0.15;              // target masked fraction r
  double mean_masked_length = 3.0;  // l_m
};

// Two-state Markov chain over one sensor column. Masked runs stop with
// probability 1/l_m, kept runs with (1/l_m) * r / (1 - r), so run lengths are
// geometric with means l_m and l_m (1 - r) / r. The first state is kept with
// probability 1 - r.
std::vector<unsigned char> generate_mask_column(std::size_t t, const MaskParams& params, Rng& rng);

// One independent column per sensor, assembled as t x c.
MaskMatrix generate_mask_matrix(std::size_t t, std::size_t c, const MaskParams& params, Rng& rng);

// Elementwise X * M: masked entries become exactly 0.
Matrix apply_mask(const Matrix& x, const MaskMatrix& mask);

// Stopping probabilities derived from the parameters.
struct MaskTransition {
  double stop_masked;  // p_m
  double stop_kept;    // p_u
  double mean_kept_length;  // l_u
};
MaskTransition mask_transition(const MaskParams& params);

}  // namespace stet
