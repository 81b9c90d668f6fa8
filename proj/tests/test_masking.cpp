#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "stet/errors.hpp"
#include "stet/masking.hpp"
#include "stet/rng.hpp"

using namespace stet;

namespace {

// Lengths of maximal runs of `value`, dropping the final run (it may be cut
// off by the end of the column).
std::vector<std::size_t> run_lengths(const std::vector<unsigned char>& col, unsigned char value) {
  std::vector<std::size_t> runs;
  std::size_t len = 0;
  for (unsigned char v : col) {
    if (v == value) {
      ++len;
    } else if (len) {
      runs.push_back(len);
      len = 0;
    }
  }
  return runs;
}

double mean(const std::vector<std::size_t>& v) {
  double s = 0;
  for (auto x : v) s += static_cast<double>(x);
  return s / static_cast<double>(v.size());
}

// Kolmogorov-Smirnov distance between run lengths and Geometric(p) on {1, 2, ...}.
double ks_geometric(const std::vector<std::size_t>& runs, double p) {
  std::map<std::size_t, std::size_t> counts;
  for (auto r : runs) ++counts[r];
  double cum = 0.0, worst = 0.0;
  const std::size_t max_len = counts.rbegin()->first;
  for (std::size_t k = 1; k <= max_len; ++k) {
    cum += static_cast<double>(counts[k]) / static_cast<double>(runs.size());
    worst = std::max(worst, std::abs(cum - (1.0 - std::pow(1.0 - p, static_cast<double>(k)))));
  }
  return worst;
}

double masked_fraction(const std::vector<unsigned char>& col) {
  return static_cast<double>(std::count(col.begin(), col.end(), 0)) / static_cast<double>(col.size());
}

}  // namespace

TEST(MaskTransition, DerivedFromRatioAndLength) {
  const MaskTransition tr = mask_transition({0.15, 3.0});
  // l_m / l_u = r / (1 - r)  =>  l_u = 3 * 0.85 / 0.15 = 17.
  EXPECT_NEAR(tr.mean_kept_length, 17.0, 1e-12);
  EXPECT_NEAR(tr.stop_masked, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(tr.stop_kept, 1.0 / 17.0, 1e-15);
}

TEST(MaskColumn, LongColumnStatistics) {
  Rng rng(21);
  const auto col = generate_mask_column(1000000, {0.15, 3.0}, rng);
  EXPECT_GE(masked_fraction(col), 0.14);
  EXPECT_LE(masked_fraction(col), 0.16);
  const auto masked = run_lengths(col, 0);
  EXPECT_GE(mean(masked), 2.8);
  EXPECT_LE(mean(masked), 3.2);
  EXPECT_NEAR(mean(run_lengths(col, 1)), 17.0, 0.5);
  EXPECT_LT(ks_geometric(masked, 1.0 / 3.0), 0.02);
}

TEST(MaskColumn, SmallRatio) {
  Rng rng(22);
  const auto col = generate_mask_column(1000000, {0.01, 3.0}, rng);
  EXPECT_GE(masked_fraction(col), 0.005);
  EXPECT_LE(masked_fraction(col), 0.015);
}

TEST(MaskColumn, InvalidParametersRejected) {
  Rng rng(1);
  EXPECT_THROW(generate_mask_column(10, {0.0, 3.0}, rng), ConfigError);
  EXPECT_THROW(generate_mask_column(10, {1.0, 3.0}, rng), ConfigError);
  EXPECT_THROW(generate_mask_column(10, {0.15, 0.5}, rng), ConfigError);
}

TEST(MaskMatrix, SingleColumnMatchesColumnGenerator) {
  Rng a(5), b(5);
  const MaskMatrix m = generate_mask_matrix(200, 1, {0.15, 3.0}, a);
  EXPECT_EQ(m.values, generate_mask_column(200, {0.15, 3.0}, b));
}

TEST(MaskMatrix, SensorsAreIndependent) {
  Rng rng(6);
  const MaskMatrix m = generate_mask_matrix(1000, 2, {0.15, 3.0}, rng);
  bool differ = false;
  for (std::size_t r = 0; r < 1000; ++r) differ |= m.kept(r, 0) != m.kept(r, 1);
  EXPECT_TRUE(differ);
}

TEST(MaskMatrix, FixedSeedIsDeterministic) {
  Rng a(7), b(7);
  EXPECT_EQ(generate_mask_matrix(64, 8, {}, a).values, generate_mask_matrix(64, 8, {}, b).values);
}

TEST(MaskMatrix, KsOverManyRuns) {
  // About 1e5 masked runs across 8 sensors.
  Rng rng(8);
  const MaskMatrix m = generate_mask_matrix(300000, 8, {0.15, 3.0}, rng);
  std::vector<std::size_t> runs;
  for (std::size_t c = 0; c < 8; ++c) {
    std::vector<unsigned char> col(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) col[r] = m.kept(r, c);
    const auto rl = run_lengths(col, 0);
    runs.insert(runs.end(), rl.begin(), rl.end());
  }
  EXPECT_GT(runs.size(), 100000u);
  EXPECT_LT(ks_geometric(runs, 1.0 / 3.0), 0.02);
}

TEST(ApplyMask, OnesZerosAndCheckerboard) {
  Matrix x(2, 2);
  x.values = {1, 2, 3, 4};
  MaskMatrix m{2, 2, {1, 1, 1, 1}};
  EXPECT_EQ(apply_mask(x, m), x);
  m.values = {0, 0, 0, 0};
  EXPECT_EQ(apply_mask(x, m).values, (std::vector<double>{0, 0, 0, 0}));
  m.values = {1, 0, 0, 1};
  EXPECT_EQ(apply_mask(x, m).values, (std::vector<double>{1, 0, 0, 4}));
}

TEST(ApplyMask, ShapeMismatchRejected) {
  EXPECT_THROW(apply_mask(Matrix(2, 3), MaskMatrix{3, 2, std::vector<unsigned char>(6, 1)}), DimensionError);
}
