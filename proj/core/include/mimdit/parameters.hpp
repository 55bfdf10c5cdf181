#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mimdit/tensor.hpp"

namespace mimdit {

using ParameterVisitor = std::function<void(const std::string& name, Tensor& tensor)>;

/// Named pointers into a model's parameter tensors, in a stable order.
/// Valid while the owning model is alive and not moved.
using ParameterList = std::vector<std::pair<std::string, Tensor*>>;

std::size_t parameter_count(const ParameterList& params);
void zero_gradients(const ParameterList& params);

}  // namespace mimdit
