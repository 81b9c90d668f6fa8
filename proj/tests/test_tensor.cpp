#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "stet/errors.hpp"
#include "stet/gradcheck.hpp"
#include "stet/ops.hpp"
#include "stet/rng.hpp"
#include "stet/tensor.hpp"

using namespace stet;

namespace {

Tensor randn(Shape shape, Rng& rng, bool grad = false) {
  Tensor t = Tensor::zeros(std::move(shape), grad);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, a)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  const Tensor c = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c[0], 11.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Matmul, SumGradientMatchesFiniteDifferences) {
  Rng rng(3);
  Tensor a = randn({3, 4}, rng, true);
  Tensor b = randn({4, 2}, rng, true);
  GradCheckOptions opt;
  opt.step = 1e-3;
  const auto report = finite_diff_check([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}}, 1e-4, opt);
  EXPECT_TRUE(report.passed) << report.worst_entry << " " << report.max_rel_error;
  // d sum(AB) / dA[i][k] = sum_j B[k][j]
  a.zero_grad();
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a.grad()[i * 4 + k], b[k * 2] + b[k * 2 + 1], 1e-12);
}

TEST(Softmax, UniformLogits) {
  for (double v : values(softmax_lastdim(Tensor::zeros({3})))) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const auto p = values(softmax_lastdim(Tensor::from({2}, {1000, 1000})));
  EXPECT_EQ(p, (std::vector<double>{0.5, 0.5}));
}

TEST(Softmax, NegativeInfinityGetsZeroWeight) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(values(softmax_lastdim(Tensor::from({2}, {0, -inf}))), (std::vector<double>{1, 0}));
  EXPECT_THROW(softmax_lastdim(Tensor::from({2}, {-inf, -inf})), DegenerateError);
}

TEST(Softmax, MatchesReferenceOnRandomRows) {
  Rng rng(9);
  const Tensor x = randn({4, 6}, rng);
  oracle::Rows rows(4, std::vector<double>(6));
  for (std::size_t i = 0; i < 24; ++i) rows[i / 6][i % 6] = x[i];
  const auto ref = oracle::softmax_rows(rows);
  const Tensor p = softmax_lastdim(x);
  for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(p[i], ref[i / 6][i % 6], 1e-15);
}

TEST(Unfold, ThreeStepsWindowThree) {
  const Tensor x = Tensor::from({3, 1}, {10, 20, 30});
  const Unfolded u = unfold_time(x, 3);
  EXPECT_EQ(u.values.shape(), (Shape{3, 3, 1}));
  EXPECT_EQ(values(u.values), (std::vector<double>{0, 10, 20, 10, 20, 30, 20, 30, 0}));
  EXPECT_EQ(u.valid, (std::vector<unsigned char>{0, 1, 1, 1, 1, 1, 1, 1, 0}));
}

TEST(Unfold, WindowOneIsIdentity) {
  Rng rng(1);
  const Tensor x = randn({5, 2}, rng);
  const Unfolded u = unfold_time(x, 1);
  EXPECT_EQ(u.values.shape(), (Shape{5, 1, 2}));
  EXPECT_EQ(values(u.values), values(x));
  for (auto v : u.valid) EXPECT_EQ(v, 1);
}

TEST(Unfold, WideWindowCoversEveryRow) {
  // t=5, w=11: slot j of row i holds row i - 5 + j, so each window has the 5
  // real rows and 6 padded slots.
  const Tensor x = Tensor::from({5, 1}, {1, 2, 3, 4, 5});
  const Unfolded u = unfold_time(x, 11);
  for (std::size_t i = 0; i < 5; ++i) {
    std::size_t real = 0;
    double total = 0.0;
    for (std::size_t j = 0; j < 11; ++j) {
      real += u.valid[i * 11 + j];
      total += u.values[i * 11 + j];
    }
    EXPECT_EQ(real, 5u);
    EXPECT_EQ(total, 15.0);
  }
}

TEST(Unfold, EvenWindowIsConfigError) { EXPECT_THROW(unfold_time(Tensor::zeros({4, 2}), 2), ConfigError); }

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tape::current().reset();
  Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    sum(mul(x, x));
  }
  EXPECT_TRUE(Tape::current().empty());
}

TEST(Elementwise, SigmoidAtZero) { EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5); }

TEST(Elementwise, ConcatOnHiddenAxis) {
  EXPECT_EQ(concat({Tensor::zeros({4, 3}), Tensor::zeros({4, 3})}, -1).shape(), (Shape{4, 6}));
}

TEST(Elementwise, DropoutRateZeroIsIdentity) {
  Rng rng(2), noise(5);
  const Tensor x = randn({10}, noise);
  EXPECT_EQ(values(dropout(x, 0.0, rng, true)), values(x));
  EXPECT_EQ(values(dropout(x, 0.5, rng, false)), values(x));
}

TEST(Elementwise, DropoutKeepsExpectation) {
  Rng rng(2);
  const Tensor y = dropout(Tensor::full({200000}, 1.0), 0.25, rng, true);
  double zeros = 0.0;
  for (double v : y.data()) {
    if (v == 0.0) zeros += 1.0;
    else EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
  }
  // Binomial(2e5, 0.25): sd of the fraction is about 1e-3.
  EXPECT_NEAR(zeros / 200000.0, 0.25, 5e-3);
}

TEST(Elementwise, BroadcastAddGradient) {
  Tensor a = Tensor::zeros({2, 3}, true);
  Tensor b = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(add(a, b)));
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), (std::vector<double>{2, 2, 2}));
}

TEST(FiniteDiff, QuadraticBowl) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  const auto r = finite_diff_check([&] { return sum(mul(x, x)); }, {{"x", x}}, 1e-6);
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  // relu's kink at 0 gives a one-sided analytic gradient against a symmetric
  // difference; the check must flag it.
  Tensor x = Tensor::from({2}, {0.0, 1.0}, true);
  const auto r = finite_diff_check([&] { return sum(relu(x)); }, {{"x", x}}, 1e-4);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_entry, "x[0]");
}

TEST(FiniteDiff, EveryOpAgreesOnRandomInputs) {
  Rng rng(11);
  Tensor x = randn({2, 3, 4}, rng, true);
  Tensor w = randn({4, 4}, rng, true);
  Tensor g = randn({4}, rng, true);
  Tensor b = randn({4}, rng, true);
  const Tensor r = randn({2, 3, 4}, rng);
  const auto f = [&] {
    Tensor h = layer_norm(linear(x, w, b), g, b);
    h = add(gelu(h), mul(sigmoid(h), softmax_lastdim(h)));
    h = concat({slice(h, 1, 0, 2), slice(h, 1, 2, 1)}, 1);
    h = permute(reshape(h, {2, 12}), {1, 0});
    return add(mean(mul(h, reshape(permute(r, {2, 1, 0}), {12, 2}))), mean(exp(scale(h, 0.1))));
  };
  const auto rep = finite_diff_check(f, {{"x", x}, {"w", w}, {"gamma", g}, {"beta", b}}, 1e-4);
  EXPECT_TRUE(rep.passed) << rep.worst_entry << " " << rep.max_rel_error;
}

TEST(Banded, MatchesUnfoldRouteAndReference) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const std::size_t t = 9, e = 3;
    const Tensor q = randn({t, e}, rng), k = randn({t, e}, rng), v = randn({t, e}, rng);
    for (std::size_t w : {1u, 3u, 5u, 17u}) {
      const Tensor banded = banded_mix(softmax_lastdim(banded_scores(q, k, w, 0.7)), v, w);
      // Unfold route: scores against unfolded keys plus the pad bias.
      const Tensor kw = unfold_time(k, w).values, vw = unfold_time(v, w).values;
      const Tensor s = add(scale(reshape(matmul(reshape(q, {t, 1, e}), kw, true), {t, 1, w}), 0.7),
                           window_pad_bias(t, w));
      const Tensor unfolded = reshape(matmul(softmax_lastdim(s), vw), {t, e});
      oracle::Rows qr(t), kr(t), vr(t);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < e; ++c) {
          qr[i].push_back(q[i * e + c]);
          kr[i].push_back(k[i * e + c]);
          vr[i].push_back(v[i * e + c]);
        }
      const auto ref = oracle::attention(qr, kr, vr, 0.7, w);
      for (std::size_t i = 0; i < t * e; ++i) {
        EXPECT_NEAR(banded[i], unfolded[i], 1e-12);
        EXPECT_NEAR(banded[i], ref[i / e][i % e], 1e-12);
      }
    }
  }
}

TEST(Softmax, NanPropagatesInsteadOfThrowing) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const Tensor y = softmax_lastdim(Tensor::from({3}, {0, nan, 1}));
  for (double v : y.data()) EXPECT_TRUE(std::isnan(v));
}
