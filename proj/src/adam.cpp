#include "coiba/adam.hpp"

#include <cmath>
#include <string>

#include "coiba/errors.hpp"

namespace coiba {

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad) {
  if (params.size() != grad.size()) {
    fail(ErrorKind::Dimension, "adam_step: " + std::to_string(params.size()) +
                                   " parameters but " + std::to_string(grad.size()) +
                                   " gradient entries");
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      fail(ErrorKind::Optimization,
           "non-finite gradient at entry " + std::to_string(i) + " (step " +
               std::to_string(state.step + 1) + ")");
    }
  }
  if (state.first_moment.size() != params.size()) {
    if (state.step != 0) fail(ErrorKind::Dimension, "adam_step: parameter count changed");
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grad[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    if (state.weight_decay != 0.0) {
      params[i] -= state.learning_rate * state.weight_decay * params[i];
    }
    params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

}  // namespace coiba
