#pragma once

#include <cstddef>
#include <vector>

#include "mimdit/parameters.hpp"

namespace mimdit {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias-corrected moments:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// Parameters without a gradient are treated as having zero gradient.
class Adam {
 public:
  Adam(ParameterList params, AdamOptions options);

  void step();
  std::size_t step_count() const noexcept { return t_; }
  const AdamOptions& options() const noexcept { return options_; }

 private:
  ParameterList params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mimdit
