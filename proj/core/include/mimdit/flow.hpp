#pragma once

#include <cstddef>
#include <functional>

#include "mimdit/backbone.hpp"

namespace mimdit {

struct FlowState {
  Tensor x_t;
  double t = 0.0;
};

struct SamplerConfig {
  std::size_t steps = 40;

  void validate() const;
  bool operator==(const SamplerConfig&) const = default;
};

/// x_t = t x + (1 - t) z; t = 1 is data, t = 0 is noise.
FlowState interpolate(const Tensor& x, const Tensor& z, double t);

/// Regression target d x_t / dt = x - z.
Tensor velocity_target(const Tensor& x, const Tensor& z);

/// Mean squared error between a predicted velocity and x - z.
Var flow_loss_from_prediction(Var prediction, const Tensor& x, const Tensor& z);

/// Velocity regression loss of `model` at time t on one (clean, degraded, noise) triple.
Var flow_loss(Graph& g, MiMDiT& model, const Tensor& x, const Tensor& z_lq, const Tensor& z,
              double t, RoutingObserver* observer = nullptr);

/// v(z_lq, x_t, t) -> velocity, shaped like x_t.
using VelocityField = std::function<Tensor(const Tensor& z_lq, const Tensor& x_t, double t)>;

/// Explicit Euler from t = 0 to t = 1 in `cfg.steps` uniform steps; returns the
/// t = 1 state. Throws NumericalError carrying the step index on non-finite values.
Tensor euler_sample(const VelocityField& field, const Tensor& z_lq, const Tensor& z,
                    const SamplerConfig& cfg);

VelocityField model_velocity(MiMDiT& model);

}  // namespace mimdit
