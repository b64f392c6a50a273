#pragma once

#include <functional>
#include <vector>

#include "dvsm/tensor.hpp"

namespace dvsm {

// Central-difference check of a scalar-valued forward function against the
// tape gradient. `f` must be re-runnable and read `inputs` by reference
// (shared buffers), so in-place nudges are visible to it. Returns the worst
// relative error over all elements of all inputs.
inline double grad_check(const std::function<Tensor<double>()>& f,
                         std::vector<Tensor<double>> inputs, double eps = 1e-4) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> grads;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = f();
    tape.backward(loss);
  }
  grads.reserve(inputs.size());
  for (auto& t : inputs) grads.push_back(t.grad_copy());
  // Detach so the finite-difference evaluations skip recording.
  for (auto& t : inputs) t.set_requires_grad(false);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double* x = inputs[i].data();
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double saved = x[j];
      x[j] = saved + eps;
      const double fp = f().item();
      x[j] = saved - eps;
      const double fm = f().item();
      x[j] = saved;
      const double fd = (fp - fm) / (2.0 * eps);
      const double g = grads[i][j];
      const double denom = std::max({std::abs(g), std::abs(fd), 1e-3});
      worst = std::max(worst, std::abs(g - fd) / denom);
    }
  }
  for (auto& t : inputs) t.set_requires_grad(true);
  return worst;
}

}  // namespace dvsm
