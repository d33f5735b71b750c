#include "cmsf/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace cmsf {

void sgd_step(OptimizerState& state, std::span<Matrix* const> params,
              std::span<const Matrix> grads, double lr) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("sgd_step: " + std::to_string(params.size()) + " params but " +
                                std::to_string(grads.size()) + " gradients");
  }
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Matrix* p : params) state.velocity.emplace_back(p->rows(), p->cols());
  }
  if (state.velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_step: optimizer tracks " +
                                std::to_string(state.velocity.size()) + " params, got " +
                                std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], grads[i], "sgd_step(param, grad)");
    require_same_shape(*params[i], state.velocity[i], "sgd_step(param, velocity)");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->values();
    auto v = state.velocity[i].values();
    const auto g = grads[i].values();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j] + state.weight_decay * p[j];
      p[j] -= lr * v[j];
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total steps must be > 0");
  if (step > total_steps) {
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " exceeds total " +
                                std::to_string(total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double step_lr(std::size_t epoch, std::span<const std::size_t> milestones, double lr0,
               double factor) {
  double lr = lr0;
  for (std::size_t m : milestones) {
    if (epoch >= m) lr *= factor;
  }
  return lr;
}

}  // namespace cmsf
