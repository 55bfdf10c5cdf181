#pragma once

// Loop-level reference implementations shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mimdit/moe.hpp"

namespace mimdit::testing {

inline std::vector<double> softmax_of_router(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t l = x.extent(0), d = x.extent(1), e = w.extent(1);
  std::vector<double> logits(e);
  for (std::size_t j = 0; j < e; ++j) {
    double s = b[j];
    for (std::size_t c = 0; c < d; ++c) {
      double m = 0.0;
      for (std::size_t i = 0; i < l; ++i) m += x.at(i, c);
      s += (m / static_cast<double>(l)) * w.at(c, j);
    }
    logits[j] = s;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double& v : logits) total += (v = std::exp(v - mx));
  for (double& v : logits) v /= total;
  return logits;
}

inline Tensor expert_output(const Tensor& x, const Grid& grid, ExpertParams& p, std::size_t block) {
  Graph g(false);
  const ExpertContext ctx{2, swin_shift_for_use(block, 2)};
  return apply_expert({g.constant(x), grid}, p, ctx).tokens.value();
}

/// out = x + sum_i g_i sum_{j in topk_i} (p_ij / sum_topk p) E_ij(x), written out term by term.
inline Tensor unrolled_mim_oracle(const Tensor& x, const Grid& grid, MiMModule& m, std::size_t block) {
  const auto& cfg = m.config();
  const auto gates = softmax_of_router(x, m.dense_router().weight, m.dense_router().bias);
  Tensor out = x;
  for (std::size_t i = 0; i < MiMConfig::group_count; ++i) {
    auto& group = m.groups()[i];
    const auto p = softmax_of_router(x, group.router->weight, group.router->bias);
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] > p[b]; });
    double mass = 0.0;
    for (std::size_t s = 0; s < cfg.top_k; ++s) mass += p[order[s]];
    for (std::size_t s = 0; s < cfg.top_k; ++s) {
      const std::size_t j = order[s];
      const Tensor e = expert_output(x, grid, group.experts[j], block);
      for (std::size_t q = 0; q < out.numel(); ++q) out[q] += gates[i] * (p[j] / mass) * e[q];
    }
  }
  return out;
}

}  // namespace mimdit::testing
