#include "mimdit/flow.hpp"

#include "mimdit/errors.hpp"

namespace mimdit {

void SamplerConfig::validate() const {
  if (steps < 1) throw ParameterError("sampler needs at least one step");
}

FlowState interpolate(const Tensor& x, const Tensor& z, double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ParameterError("interpolation time " + std::to_string(t) + " outside [0, 1]");
  }
  if (x.shape() != z.shape()) {
    throw DimensionError("interpolate: " + shape_to_string(x.shape()) + " vs " +
                         shape_to_string(z.shape()));
  }
  FlowState s{Tensor(x.shape()), t};
  for (std::size_t i = 0; i < x.numel(); ++i) s.x_t[i] = t * x[i] + (1.0 - t) * z[i];
  return s;
}

Tensor velocity_target(const Tensor& x, const Tensor& z) { return sub(x, z); }

Var flow_loss_from_prediction(Var prediction, const Tensor& x, const Tensor& z) {
  if (prediction.shape() != x.shape()) {
    throw DimensionError("flow loss: prediction " + shape_to_string(prediction.shape()) +
                         " vs target " + shape_to_string(x.shape()));
  }
  Graph& g = *prediction.graph();
  Var diff = sub(prediction, g.constant(velocity_target(x, z)));
  return mean_all(mul(diff, diff));
}

Var flow_loss(Graph& g, MiMDiT& model, const Tensor& x, const Tensor& z_lq, const Tensor& z,
              double t, RoutingObserver* observer) {
  const FlowState state = interpolate(x, z, t);
  Var v = model.forward(g, z_lq, state.x_t, t, observer);
  return flow_loss_from_prediction(v, x, z);
}

Tensor euler_sample(const VelocityField& field, const Tensor& z_lq, const Tensor& z,
                    const SamplerConfig& cfg) {
  cfg.validate();
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  Tensor x = z;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double t = static_cast<double>(step) * dt;
    const Tensor v = field(z_lq, x, t);
    if (v.shape() != x.shape()) {
      throw DimensionError("velocity field returned " + shape_to_string(v.shape()) + " for " +
                           shape_to_string(x.shape()));
    }
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] += dt * v[i];
    if (!all_finite(x)) throw NumericalError(step, "non-finite sampler state");
  }
  return x;
}

VelocityField model_velocity(MiMDiT& model) {
  return [&model](const Tensor& z_lq, const Tensor& x_t, double t) {
    return model.velocity(z_lq, x_t, t);
  };
}

}  // namespace mimdit
