#include "mimdit/parameters.hpp"

namespace mimdit {

std::size_t parameter_count(const ParameterList& params) {
  std::size_t total = 0;
  for (const auto& [name, t] : params) total += t->numel();
  return total;
}

void zero_gradients(const ParameterList& params) {
  for (const auto& [name, t] : params) t->zero_grad();
}

}  // namespace mimdit
