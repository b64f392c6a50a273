#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "dvsm/tensor.hpp"

namespace dvsm {

struct LrSchedule {
  double peak_lr = 4e-4;
  std::int64_t warmup_steps = 2500;
  std::int64_t total_steps = 100000;
  double min_lr = 0.0;
};

// Linear ramp 0 -> peak over warmup, then cosine peak -> min_lr.
inline double lr_at(std::int64_t step, const LrSchedule& s) {
  if (step < 0 || step > s.total_steps)
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(s.total_steps) + "]");
  if (step < s.warmup_steps) return s.peak_lr * double(step) / double(s.warmup_steps);
  const double span = double(std::max<std::int64_t>(s.total_steps - s.warmup_steps, 1));
  const double t = double(step - s.warmup_steps) / span;
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Decoupled AdamW. Moments live beside the parameters, keyed by name, so the
// whole optimizer state serializes as plain tensors.
template <class T>
struct AdamWState {
  std::map<std::string, std::vector<T>> m, v;
  std::int64_t step = 0;
  T beta1 = T(0.9);
  T beta2 = T(0.95);
  T weight_decay = T(0.05);
  T eps = T(1e-8);
};

template <class T>
void adamw_step(std::map<std::string, Tensor<T>>& params, AdamWState<T>& st, T lr) {
  st.step += 1;
  const T bc1 = T(1) - std::pow(st.beta1, T(st.step));
  const T bc2 = T(1) - std::pow(st.beta2, T(st.step));
  for (auto& [name, p] : params) {
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.empty()) m.assign(p.size(), T(0));
    if (v.empty()) v.assign(p.size(), T(0));
    if (m.size() != p.size() || v.size() != p.size())
      throw std::invalid_argument("adamw_step: state shape mismatch for " + name);
    const T* g = p.grad_if_any();
    T* w = p.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T gi = g ? g[i] : T(0);
      m[i] = st.beta1 * m[i] + (T(1) - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (T(1) - st.beta2) * gi * gi;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + st.eps) + st.weight_decay * w[i]);
    }
  }
}

// Global-norm gradient clipping; returns the pre-clip norm.
template <class T>
double clip_grad_norm(std::map<std::string, Tensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params) {
    (void)name;
    if (const T* g = p.grad_if_any())
      for (std::size_t i = 0; i < p.size(); ++i) sq += double(g[i]) * double(g[i]);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = T(max_norm / norm);
    for (auto& [name, p] : params) {
      (void)name;
      if (p.grad_if_any()) {
        T* g = p.grad();
        for (std::size_t i = 0; i < p.size(); ++i) g[i] *= s;
      }
    }
  }
  return norm;
}

}  // namespace dvsm
