#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mimdit/autograd.hpp"
#include "mimdit/parameters.hpp"

namespace mimdit {

struct GradCheckOptions {
  double step = 1e-5;       // central-difference step
  double tolerance = 1e-4;  // max relative error
  /// Denominator floor: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-5;
  std::size_t instances = 20;
  std::uint64_t seed = 0;
  /// Coordinates probed per tensor; 0 probes every element.
  std::size_t coordinates_per_tensor = 0;
};

struct GradCheckResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// Builds a scalar loss on `g` from the tensors it was constructed over.
using LossBuilder = std::function<Var(Graph& g)>;

/// Compares reverse-mode gradients of `loss` with respect to `inputs` against
/// central finite differences. `inputs` must be the tensors `loss` binds as
/// parameters.
GradCheckResult check_gradients(const std::string& name, const LossBuilder& loss,
                                const ParameterList& inputs, const GradCheckOptions& options,
                                std::uint64_t instance_seed);

/// One named case; `run` draws a random instance for the given seed.
struct GradCheckCase {
  std::string name;
  /// Coordinates probed per tensor for this case; 0 probes all.
  std::size_t coordinates_per_tensor = 0;
  std::function<GradCheckResult(const GradCheckOptions&, std::uint64_t seed)> run;
};

/// Every differentiable primitive, each attention expert, the MiM module and
/// the flow loss of a 2-block width-8 backbone.
std::vector<GradCheckCase> grad_check_cases();

/// Runs every case over `options.instances` seeds.
std::vector<GradCheckResult> run_grad_check(const GradCheckOptions& options,
                                            const std::function<void(const GradCheckResult&)>&
                                                on_result = {});

}  // namespace mimdit
