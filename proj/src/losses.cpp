#include "stet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "stet/errors.hpp"

namespace stet {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

void require_finite(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
  }
}

double safe_log(double v) { return std::log(std::max(v, kLogEpsilon)); }
// Derivative of safe_log; zero where the floor is active.
double safe_log_grad(double v) { return v > kLogEpsilon ? 1.0 / v : 0.0; }

// x^g with 0^0 = 1, and its derivative with the g = 0 case short-circuited.
double focus(double x, double g) { return g == 0.0 ? 1.0 : std::pow(x, g); }
double focus_grad(double x, double g) {
  if (g == 0.0) return 0.0;
  if (g == 1.0) return 1.0;
  return x > 0.0 ? g * std::pow(x, g - 1.0) : 0.0;
}

}  // namespace

void AsymmetricLossConfig::validate() const {
  if (!(gamma_pos >= 0.0) || !(gamma_neg >= 0.0)) {
    throw ConfigError("asymmetric loss: focusing exponents must be >= 0");
  }
  if (!(margin >= 0.0 && margin < 1.0)) {
    throw ConfigError("asymmetric loss: margin must lie in [0, 1)");
  }
}

Tensor masked_mse_loss(const Tensor& x_true, const Tensor& x_rec, const Tensor& mask) {
  require_same_shape(x_true, x_rec, "masked_mse_loss");
  require_same_shape(x_true, mask, "masked_mse_loss");
  if (x_true.rank() < 2) throw DimensionError("masked_mse_loss: expected [t, c] or [B, t, c]");
  const std::size_t per = x_true.dim(-1) * x_true.dim(-2);
  const std::size_t batch = x_true.numel() / per;
  auto weights = std::make_shared<std::vector<double>>(batch);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t masked = 0;
    double s = 0.0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      if (mask[i] == 0.0) {
        ++masked;
        const double d = x_rec[i] - x_true[i];
        s += d * d;
      }
    }
    if (masked == 0) {
      throw DegenerateError("masked_mse_loss: sample " + std::to_string(b) + " has no masked entry");
    }
    (*weights)[b] = 1.0 / (static_cast<double>(masked) * static_cast<double>(batch));
    total += s * (*weights)[b];
  }
  const bool track = needs_grad({&x_true, &x_rec});
  Tensor out = make_result({}, track);
  out[0] = total;
  if (track) {
    auto ti = x_true.impl(), ri = x_rec.impl(), mi = mask.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("masked_mse", out.impl(), [ti, ri, mi, o, weights, per]() {
      const double g = o->grad[0];
      if (ri->requires_grad) ri->ensure_grad();
      if (ti->requires_grad) ti->ensure_grad();
      for (std::size_t i = 0; i < ri->data.size(); ++i) {
        if (mi->data[i] != 0.0) continue;
        const double d = 2.0 * (ri->data[i] - ti->data[i]) * (*weights)[i / per] * g;
        if (ri->requires_grad) ri->grad[i] += d;
        if (ti->requires_grad) ti->grad[i] -= d;
      }
    });
  }
  return out;
}

Tensor mask_tensor(const std::vector<MaskMatrix>& masks) {
  if (masks.empty()) throw DimensionError("mask_tensor: no masks");
  const std::size_t t = masks.front().rows, c = masks.front().cols;
  Tensor out = Tensor::zeros({masks.size(), t, c});
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].rows != t || masks[b].cols != c) throw DimensionError("mask_tensor: ragged masks");
    for (std::size_t i = 0; i < t * c; ++i) out[b * t * c + i] = masks[b].values[i] ? 1.0 : 0.0;
  }
  return out;
}

Tensor asymmetric_loss(const Tensor& y, const Tensor& probs, const AsymmetricLossConfig& cfg) {
  cfg.validate();
  require_same_shape(y, probs, "asymmetric_loss");
  require_finite(y, "asymmetric_loss");
  require_finite(probs, "asymmetric_loss");
  const double gp = cfg.gamma_pos, gn = cfg.gamma_neg, m = cfg.margin;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    const double p = probs[i];
    const double yi = y[i];
    double term = 0.0;
    if (yi != 0.0) term += yi * focus(1.0 - p, gp) * safe_log(p);
    if (yi != 1.0) {
      const double q = std::max(p - m, 0.0);
      // q == 0 gives log(1) = 0 regardless of the focusing weight.
      if (q > 0.0) term += (1.0 - yi) * focus(q, gn) * safe_log(1.0 - q);
    }
    total -= term;
  }
  const bool track = needs_grad({&probs});
  Tensor out = make_result({}, track);
  out[0] = total;
  if (track) {
    auto yi_impl = y.impl(), pi = probs.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("asymmetric_loss", out.impl(), [yi_impl, pi, o, gp, gn, m]() {
      pi->ensure_grad();
      const double g = o->grad[0];
      for (std::size_t i = 0; i < pi->data.size(); ++i) {
        const double p = pi->data[i];
        const double yv = yi_impl->data[i];
        double d = 0.0;
        if (yv != 0.0) {
          // d/dp [(1-p)^g+ log p]
          d += yv * (-focus_grad(1.0 - p, gp) * safe_log(p) + focus(1.0 - p, gp) * safe_log_grad(p));
        }
        if (yv != 1.0) {
          const double q = p - m;
          if (q > 0.0) {
            // d/dq [q^g- log(1-q)]
            d += (1.0 - yv) *
                 (focus_grad(q, gn) * safe_log(1.0 - q) - focus(q, gn) * safe_log_grad(1.0 - q));
          }
        }
        pi->grad[i] -= g * d;
      }
    });
  }
  return out;
}

Tensor cross_entropy_loss(const Tensor& y, const Tensor& logits) {
  require_same_shape(y, logits, "cross_entropy_loss");
  const std::size_t c = logits.dim(-1);
  const std::size_t batch = logits.numel() / c;
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  auto ysum = std::make_shared<std::vector<double>>(batch, 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data().data() + b * c;
    for (std::size_t j = 0; j < c; ++j) (*ysum)[b] += y[b * c + j];
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const double log_norm = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      (*probs)[b * c + j] = std::exp(z[j] - log_norm);
      total -= y[b * c + j] * (z[j] - log_norm);
    }
  }
  const double inv_batch = 1.0 / static_cast<double>(batch);
  const bool track = needs_grad({&logits});
  Tensor out = make_result({}, track);
  out[0] = total * inv_batch;
  if (track) {
    auto yi = y.impl(), li = logits.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("cross_entropy", out.impl(), [yi, li, o, probs, ysum, c, inv_batch]() {
      li->ensure_grad();
      const double g = o->grad[0] * inv_batch;
      for (std::size_t i = 0; i < probs->size(); ++i) {
        li->grad[i] += g * ((*probs)[i] * (*ysum)[i / c] - yi->data[i]);
      }
    });
  }
  return out;
}

Tensor mse_regression_loss(const Tensor& target, const Tensor& prediction) {
  require_same_shape(target, prediction, "mse_regression_loss");
  if (target.numel() == 0) throw DimensionError("mse_regression_loss: empty input");
  const double inv_n = 1.0 / static_cast<double>(target.numel());
  double total = 0.0;
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const double d = prediction[i] - target[i];
    total += d * d;
  }
  const bool track = needs_grad({&target, &prediction});
  Tensor out = make_result({}, track);
  out[0] = total * inv_n;
  if (track) {
    auto ti = target.impl(), pi = prediction.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("mse", out.impl(), [ti, pi, o, inv_n]() {
      const double g = o->grad[0] * 2.0 * inv_n;
      if (pi->requires_grad) pi->ensure_grad();
      if (ti->requires_grad) ti->ensure_grad();
      for (std::size_t i = 0; i < pi->data.size(); ++i) {
        const double d = (pi->data[i] - ti->data[i]) * g;
        if (pi->requires_grad) pi->grad[i] += d;
        if (ti->requires_grad) ti->grad[i] -= d;
      }
    });
  }
  return out;
}

}  // namespace stet
