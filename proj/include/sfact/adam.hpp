#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sfact/error.hpp"

namespace sfact {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates for one flat parameter array.
struct AdamState {
  AdamState() = default;
  AdamState(std::size_t size, AdamHyper h) : first(size, 0.0), second(size, 0.0), hyper(h) {}

  std::vector<double> first;
  std::vector<double> second;
  std::uint64_t t = 0;
  AdamHyper hyper;
};

/// One bias-corrected Adam update in place; increments state.t.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first.size() ||
      params.size() != state.second.size()) {
    throw DimensionMismatch("adam_step: parameter, gradient and moment sizes differ");
  }
  const auto& h = state.hyper;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grads[k];
    state.first[k] = h.beta1 * state.first[k] + (1.0 - h.beta1) * g;
    state.second[k] = h.beta2 * state.second[k] + (1.0 - h.beta2) * g * g;
    const double mhat = state.first[k] / bc1;
    const double vhat = state.second[k] / bc2;
    params[k] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

}  // namespace sfact
