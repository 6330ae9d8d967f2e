#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace coiba {

struct AdamState {
  double learning_rate = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW); 0 gives plain Adam
  std::size_t step = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
};

// One bias-corrected Adam update of `params` in place. Moments are sized on
// first use. Throws an optimization error on a non-finite gradient.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad);

}  // namespace coiba
