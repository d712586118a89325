#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "transferattn/layers.hpp"

namespace transferattn {

struct AdamConfig {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  bool decoupled_weight_decay = false;  // AdamW-style when true, L2 in the gradient otherwise
};

struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;  // name -> (m, v)
};

/// One Adam update over every trainable parameter that received a gradient.
/// Frozen parameters never get moment buffers.
inline void adam_step(ParameterSet& params, AdamState& state, const AdamConfig& cfg) {
  for (auto& p : params.all()) {
    if (p.frozen || !p.value.has_grad()) continue;
    for (double g : p.value.grad())
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " + p.name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& p : params.all()) {
    if (p.frozen || !p.value.has_grad()) continue;
    auto theta = p.value.mutable_data();
    auto grad = p.value.grad();
    auto [it, fresh] = state.moments.try_emplace(p.name);
    auto& [m, v] = it->second;
    if (fresh) {
      m.assign(theta.size(), 0.0);
      v.assign(theta.size(), 0.0);
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = grad[i];
      if (!cfg.decoupled_weight_decay) g += cfg.weight_decay * theta[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
      theta[i] -= cfg.lr * update;
      if (cfg.decoupled_weight_decay) theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
    }
  }
}

}  // namespace transferattn
