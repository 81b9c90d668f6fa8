#include "stet/optimizer.hpp"

#include <cmath>
#include <span>
#include <string>
#include <utility>

#include "stet/errors.hpp"

namespace stet {

AdamW::AdamW(std::vector<NamedTensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void AdamW::step() {
  for (const auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient in '" + name + "'");
    }
  }
  ++steps_;
  const double lr = config_.lr, b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double decay = 1.0 - lr * config_.weight_decay;
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor t = params_[p].second;
    auto w = t.data();
    const bool has_grad = t.has_grad();
    const std::span<const double> grad = has_grad ? std::as_const(t).grad() : std::span<const double>{};
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      m_[p][i] = b1 * m_[p][i] + (1.0 - b1) * g;
      v_[p][i] = b2 * v_[p][i] + (1.0 - b2) * g * g;
      w[i] *= decay;
      w[i] -= lr * (m_[p][i] / c1) / (std::sqrt(v_[p][i] / c2) + config_.eps);
      if (!std::isfinite(w[i])) {
        throw NumericError("optimizer: parameter '" + params_[p].first + "' became non-finite");
      }
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

std::vector<NamedTensor> AdamW::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t p = 0; p < params_.size(); ++p) {
    const Shape& shape = params_[p].second.shape();
    out.emplace_back("opt.m/" + params_[p].first, Tensor::from(shape, m_[p]));
    out.emplace_back("opt.v/" + params_[p].first, Tensor::from(shape, v_[p]));
  }
  out.emplace_back("opt.step", Tensor::scalar(static_cast<double>(steps_)));
  return out;
}

void AdamW::load_state(const std::vector<NamedTensor>& tensors) {
  const auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw ConfigError("optimizer state lacks '" + name + "'");
  };
  for (std::size_t p = 0; p < params_.size(); ++p) {
    const Tensor& m = find("opt.m/" + params_[p].first);
    const Tensor& v = find("opt.v/" + params_[p].first);
    if (m.numel() != m_[p].size() || v.numel() != v_[p].size()) {
      throw DimensionError("optimizer state for '" + params_[p].first + "' has the wrong size");
    }
    m_[p].assign(m.data().begin(), m.data().end());
    v_[p].assign(v.data().begin(), v.data().end());
  }
  steps_ = static_cast<std::size_t>(find("opt.step").item());
}

}  // namespace stet
