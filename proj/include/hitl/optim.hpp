#pragma once

#include <cmath>
#include <vector>

#include "hitl/autograd.hpp"

namespace hitl {

/// Plain SGD with L2 weight decay: p -= lr * (grad + weight_decay * p).
/// Parameters that received no gradient are only decayed. lr == 0 is a no-op.
template <class T>
void sgd_step(std::vector<Var<T>>& params, T lr, T weight_decay) {
  if (lr == T(0)) return;
  for (auto& p : params) {
    auto& v = p.mutable_value();
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < v.numel(); ++i) {
      const T g = (has ? p.grad()[i] : T(0)) + weight_decay * v[i];
      v[i] -= lr * g;
    }
  }
}

/// Euclidean norm of all accumulated gradients taken together.
template <class T>
double grad_norm(const std::vector<Var<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (std::size_t i = 0; i < p.grad().numel(); ++i) sq += static_cast<double>(p.grad()[i]) * p.grad()[i];
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint norm is at most max_norm. Returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(std::vector<Var<T>>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const T k = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      if (p.has_grad())
        for (auto& g : p.mutable_grad().data()) g *= k;
  }
  return norm;
}

template <class T>
void zero_grads(std::vector<Var<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace hitl
