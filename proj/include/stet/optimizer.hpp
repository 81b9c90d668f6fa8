#pragma once

#include <cstddef>
#include <vector>

#include "stet/gradcheck.hpp"

namespace stet {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer with decoupled weight decay. Each step first
// shrinks every parameter by (1 - lr * weight_decay), then applies the
// bias-corrected moment update. There is no variance rectification term.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWConfig config);

  // Reads the parameters' accumulated gradients. Throws NumericError naming
  // the tensor if a gradient is non-finite, or if a parameter becomes
  // non-finite after the update.
  void step();
  void zero_grad();

  std::size_t steps() const { return steps_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<NamedTensor>& params() const { return params_; }

  // First/second moments as "opt.m/<name>", "opt.v/<name>" and the step count
  // as "opt.step".
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors);

 private:
  std::vector<NamedTensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

}  // namespace stet
