#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cmsf/matrix.hpp"

namespace cmsf {

// SGD with heavy-ball momentum. Weight decay is folded into the gradient
// before the momentum accumulation:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
struct OptimizerState {
  double lr0 = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<Matrix> velocity;  // shaped on first step
};

void sgd_step(OptimizerState& state, std::span<Matrix* const> params,
              std::span<const Matrix> grads, double lr);

// lr0 * 0.5 * (1 + cos(pi * t / total)); requires 0 <= t <= total, total > 0.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

// lr0 multiplied by `factor` once for every milestone <= epoch.
double step_lr(std::size_t epoch, std::span<const std::size_t> milestones, double lr0,
               double factor = 0.1);

}  // namespace cmsf
