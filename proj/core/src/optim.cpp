#include "mimdit/optim.hpp"

#include <cmath>

namespace mimdit {

Adam::Adam(ParameterList params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& [name, tensor] : params_) {
    m_.emplace_back(tensor->numel(), 0.0);
    v_.emplace_back(tensor->numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i].second;
    const bool has_grad = p.has_grad();
    const auto grad = p.grad();
    auto value = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = has_grad ? grad[j] : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * g;
      v[j] = b2 * v[j] + (1.0 - b2) * g * g;
      value[j] -= options_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.epsilon);
    }
  }
}

}  // namespace mimdit
