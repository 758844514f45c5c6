#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "kpd/common.hpp"

namespace kpd {

struct AdamWConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled-weight-decay adaptive moment estimation with bias-corrected
// first and second moments.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  void step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size()) throw UsageError("AdamW: size mismatch");
    if (m_.empty()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!std::isfinite(grads[i])) {
        throw UsageError("AdamW: non-finite gradient at index " + std::to_string(i));
      }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i] * grads[i];
      double mhat = m_[i] / bc1;
      double vhat = v_[i] / bc2;
      params[i] -= config_.lr * (mhat / (std::sqrt(vhat) + config_.eps) +
                                 config_.weight_decay * params[i]);
    }
  }

 private:
  AdamWConfig config_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace kpd
