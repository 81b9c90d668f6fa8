#include "stet/masking.hpp"

#include <algorithm>
#include <string>

#include "stet/errors.hpp"

namespace stet {

namespace {

void validate(const MaskParams& params) {
  if (!(params.ratio > 0.0 && params.ratio < 1.0)) {
    throw ConfigError("mask ratio must lie in (0, 1), got " + std::to_string(params.ratio));
  }
  if (!(params.mean_masked_length >= 1.0)) {
    throw ConfigError("mean masked length must be >= 1, got " +
                      std::to_string(params.mean_masked_length));
  }
}

}  // namespace

std::size_t MaskMatrix::masked_count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), 0));
}

MaskTransition mask_transition(const MaskParams& params) {
  validate(params);
  const double p_m = 1.0 / params.mean_masked_length;
  const double p_u = p_m * params.ratio / (1.0 - params.ratio);
  return {p_m, p_u, 1.0 / p_u};
}

std::vector<unsigned char> generate_mask_column(std::size_t t, const MaskParams& params, Rng& rng) {
  const MaskTransition tr = mask_transition(params);
  // Indexed by state: [masked, kept].
  const double stop[2] = {tr.stop_masked, tr.stop_kept};
  std::vector<unsigned char> column(t, 1);
  bool kept = rng.uniform() > params.ratio;
  for (std::size_t j = 0; j < t; ++j) {
    column[j] = kept ? 1 : 0;
    if (rng.uniform() < stop[kept ? 1 : 0]) kept = !kept;
  }
  return column;
}

MaskMatrix generate_mask_matrix(std::size_t t, std::size_t c, const MaskParams& params, Rng& rng) {
  MaskMatrix m;
  m.rows = t;
  m.cols = c;
  m.values.assign(t * c, 1);
  m.ratio = params.ratio;
  m.mean_masked_length = params.mean_masked_length;
  for (std::size_t sensor = 0; sensor < c; ++sensor) {
    const auto column = generate_mask_column(t, params, rng);
    for (std::size_t j = 0; j < t; ++j) m.values[j * c + sensor] = column[j];
  }
  return m;
}

Matrix apply_mask(const Matrix& x, const MaskMatrix& mask) {
  if (x.rows != mask.rows || x.cols != mask.cols) {
    throw DimensionError("apply_mask: signal is " + std::to_string(x.rows) + "x" +
                         std::to_string(x.cols) + " but mask is " + std::to_string(mask.rows) +
                         "x" + std::to_string(mask.cols));
  }
  Matrix out = x;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    if (!mask.values[i]) out.values[i] = 0.0;
  }
  return out;
}

}  // namespace stet
