#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mimdit/autograd.hpp"
#include "mimdit/parameters.hpp"
#include "mimdit/random.hpp"

namespace mimdit {

struct Grid {
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const noexcept { return height * width; }
  bool operator==(const Grid&) const = default;
};

/// Tokens [L, D] laid out row-major over a height x width spatial grid.
struct TokenSequence {
  Var tokens;
  Grid grid;

  std::size_t length() const { return tokens.shape()[0]; }
  std::size_t dim() const { return tokens.shape()[1]; }
};

/// Throws DimensionError unless tokens are [grid.size(), dim].
void check_token_sequence(const TokenSequence& x, std::size_t dim);

/// The four attention families of the outer expert level, in canonical order.
enum class Mechanism { spatial, channel, swin, se };

std::string_view mechanism_name(Mechanism m);
Mechanism parse_mechanism(std::string_view name);

/// Parameters of one attention sub-expert. The query/key/value/output
/// projections are D x D (spatial, channel and swin); `temperature` holds one
/// learned scale per head for channel attention; the squeeze-excitation
/// bottleneck is w1: D x D/r, w2: D/r x D.
struct ExpertParams {
  Mechanism mechanism = Mechanism::spatial;
  std::size_t heads = 1;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor temperature;
  Tensor w1, b1, w2, b2;

  static ExpertParams init(Mechanism mechanism, std::size_t dim, std::size_t heads,
                           std::size_t se_reduction, Rng& rng);
  std::size_t dim() const;
  void for_each_parameter(const std::string& prefix, const ParameterVisitor& visit);
};

/// Scaled dot-product attention across the token axis with 1/sqrt(head dim)
/// scaling and an output projection. No residual.
TokenSequence spatial_self_attention(const TokenSequence& x, ExpertParams& p);

/// Transposed attention: affinities are computed between channels (D x D per
/// head) from L2-normalized channel descriptors, scaled by a learned
/// temperature.
TokenSequence channel_self_attention(const TokenSequence& x, ExpertParams& p);

/// Cyclic shift by `shift`, window x window partition, per-window spatial
/// attention, then the inverse permutation.
TokenSequence swin_attention(const TokenSequence& x, ExpertParams& p, std::size_t window,
                             std::size_t shift);

/// x scaled per channel by sigmoid(W2 gelu(W1 mean_L(x))).
TokenSequence se_attention(const TokenSequence& x, ExpertParams& p);

/// Settings that vary per use rather than per expert.
struct ExpertContext {
  std::size_t window = 2;
  std::size_t shift = 0;
};

TokenSequence apply_expert(const TokenSequence& x, ExpertParams& p, const ExpertContext& ctx);

/// Shift for the n-th consecutive use of shifted-window attention: 0, w/2, 0, ...
std::size_t swin_shift_for_use(std::size_t use_index, std::size_t window);

void check_window(const Grid& grid, std::size_t window, std::size_t shift);

/// Row order that gathers the cyclically shifted grid window by window: entry
/// r is the source token of row r in the partitioned layout.
std::vector<std::size_t> window_partition_order(const Grid& grid, std::size_t window,
                                                std::size_t shift);
Tensor window_partition(const Tensor& tokens, const Grid& grid, std::size_t window,
                        std::size_t shift);
Tensor window_reverse(const Tensor& windows, const Grid& grid, std::size_t window,
                      std::size_t shift);

}  // namespace mimdit
