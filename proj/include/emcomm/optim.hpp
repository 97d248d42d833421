#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "emcomm/params.hpp"
#include "emcomm/tensor.hpp"

namespace emcomm {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of `param` in place.
inline void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state,
                      const AdamConfig& cfg) {
  if (grad.size() != param.size()) {
    throw DimensionError("adam_step: " + std::to_string(grad.size()) + " grads for " +
                         std::to_string(param.size()) + " parameters");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
  }
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  } else if (state.m.size() != param.size()) {
    throw DimensionError("adam_step: optimizer state does not match parameter size");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// Adam over every tensor of a ParamStore, using each tensor's grad buffer.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// All-or-nothing: a non-finite gradient anywhere aborts before any update.
  void step(ParamStore& store) {
    for (auto& [name, t] : store) {
      for (double g : t.grad) {
        if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in '" + name + "'");
      }
    }
    for (auto& [name, t] : store) adam_step(t.data, t.grad, states_[name], cfg_);
  }

  const AdamConfig& config() const { return cfg_; }
  const AdamState& state(const std::string& name) const { return states_.at(name); }

 private:
  AdamConfig cfg_;
  std::map<std::string, AdamState> states_;
};

}  // namespace emcomm
