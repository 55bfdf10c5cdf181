#include "mimdit/attention.hpp"

#include <cmath>

#include "mimdit/errors.hpp"

namespace mimdit {

namespace {

Var param(Graph& g, Tensor& t) { return g.parameter(t); }

void require_projections(const ExpertParams& p, const TokenSequence& x) {
  check_token_sequence(x, p.dim());
  if (p.heads == 0 || p.dim() % p.heads != 0) {
    throw ConfigurationError("head count " + std::to_string(p.heads) + " does not divide width " +
                             std::to_string(p.dim()));
  }
}

// Single-head attention over the rows of q/k/v.
Var attend(Var q, Var k, Var v) {
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  Var scores = scale(matmul(q, transpose(k)), inv_scale);
  return matmul(softmax(scores, 1), v);
}

Var attend_heads(Var q, Var k, Var v, std::size_t heads) {
  if (heads == 1) return attend(q, k, v);
  const std::size_t dh = q.shape()[1] / heads;
  std::vector<std::size_t> widths(heads, dh);
  auto qs = split(q, widths, 1);
  auto ks = split(k, widths, 1);
  auto vs = split(v, widths, 1);
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) outs.push_back(attend(qs[h], ks[h], vs[h]));
  return concat(outs, 1);
}

Var spatial_core(Var tokens, ExpertParams& p) {
  Graph& g = *tokens.graph();
  Var q = linear(tokens, param(g, p.wq), param(g, p.bq));
  Var k = linear(tokens, param(g, p.wk), param(g, p.bk));
  Var v = linear(tokens, param(g, p.wv), param(g, p.bv));
  Var o = attend_heads(q, k, v, p.heads);
  return linear(o, param(g, p.wo), param(g, p.bo));
}

}  // namespace

void check_token_sequence(const TokenSequence& x, std::size_t dim) {
  const auto& s = x.tokens.shape();
  if (s.size() != 2 || s[0] != x.grid.size() || s[1] != dim) {
    throw DimensionError("token sequence " + shape_to_string(s) + " inconsistent with grid " +
                         std::to_string(x.grid.height) + "x" + std::to_string(x.grid.width) +
                         " and width " + std::to_string(dim));
  }
}

std::string_view mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::spatial: return "spatial";
    case Mechanism::channel: return "channel";
    case Mechanism::swin: return "swin";
    case Mechanism::se: return "se";
  }
  return "unknown";
}

Mechanism parse_mechanism(std::string_view name) {
  for (auto m : {Mechanism::spatial, Mechanism::channel, Mechanism::swin, Mechanism::se}) {
    if (mechanism_name(m) == name) return m;
  }
  throw ConfigurationError("unknown attention mechanism '" + std::string(name) + "'");
}

ExpertParams ExpertParams::init(Mechanism mechanism, std::size_t dim, std::size_t heads,
                                std::size_t se_reduction, Rng& rng) {
  if (dim == 0) throw ConfigurationError("expert width must be positive");
  ExpertParams p;
  p.mechanism = mechanism;
  p.heads = heads;
  const double std = 1.0 / std::sqrt(static_cast<double>(dim));
  if (mechanism == Mechanism::se) {
    if (se_reduction == 0 || dim % se_reduction != 0) {
      throw ConfigurationError("SE reduction " + std::to_string(se_reduction) +
                               " does not divide width " + std::to_string(dim));
    }
    const std::size_t hidden = dim / se_reduction;
    p.w1 = normal_tensor({dim, hidden}, std, rng);
    p.b1 = Tensor({hidden});
    p.w2 = normal_tensor({hidden, dim}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    p.b2 = Tensor({dim});
  } else {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigurationError("head count " + std::to_string(heads) + " does not divide width " +
                               std::to_string(dim));
    }
    p.wq = normal_tensor({dim, dim}, std, rng);
    p.bq = Tensor({dim});
    p.wk = normal_tensor({dim, dim}, std, rng);
    p.bk = Tensor({dim});
    p.wv = normal_tensor({dim, dim}, std, rng);
    p.bv = Tensor({dim});
    p.wo = normal_tensor({dim, dim}, std, rng);
    p.bo = Tensor({dim});
    if (mechanism == Mechanism::channel) p.temperature = Tensor({heads}, 1.0);
  }
  return p;
}

std::size_t ExpertParams::dim() const {
  return mechanism == Mechanism::se ? w1.extent(0) : wq.extent(0);
}

void ExpertParams::for_each_parameter(const std::string& prefix, const ParameterVisitor& visit) {
  if (mechanism == Mechanism::se) {
    visit(prefix + "w1", w1);
    visit(prefix + "b1", b1);
    visit(prefix + "w2", w2);
    visit(prefix + "b2", b2);
    return;
  }
  visit(prefix + "wq", wq);
  visit(prefix + "bq", bq);
  visit(prefix + "wk", wk);
  visit(prefix + "bk", bk);
  visit(prefix + "wv", wv);
  visit(prefix + "bv", bv);
  visit(prefix + "wo", wo);
  visit(prefix + "bo", bo);
  if (mechanism == Mechanism::channel) visit(prefix + "temperature", temperature);
}

TokenSequence spatial_self_attention(const TokenSequence& x, ExpertParams& p) {
  require_projections(p, x);
  return {spatial_core(x.tokens, p), x.grid};
}

TokenSequence channel_self_attention(const TokenSequence& x, ExpertParams& p) {
  require_projections(p, x);
  Graph& g = *x.tokens.graph();
  Var q = linear(x.tokens, param(g, p.wq), param(g, p.bq));
  Var k = linear(x.tokens, param(g, p.wk), param(g, p.bk));
  Var v = linear(x.tokens, param(g, p.wv), param(g, p.bv));
  Var temperature = param(g, p.temperature);

  const std::size_t dh = p.dim() / p.heads;
  std::vector<std::size_t> widths(p.heads, dh);
  auto qs = p.heads == 1 ? std::vector<Var>{q} : split(q, widths, 1);
  auto ks = p.heads == 1 ? std::vector<Var>{k} : split(k, widths, 1);
  auto vs = p.heads == 1 ? std::vector<Var>{v} : split(v, widths, 1);
  std::vector<Var> outs;
  for (std::size_t h = 0; h < p.heads; ++h) {
    // Channel descriptors are rows of the transposed projections: [dh, L].
    Var qn = l2_normalize(transpose(qs[h]));
    Var kn = l2_normalize(transpose(ks[h]));
    const std::size_t head = h;
    Var temp = gather(temperature, std::span<const std::size_t>(&head, 1));
    Var affinity = softmax(mul(matmul(qn, transpose(kn)), temp), 1);
    outs.push_back(transpose(matmul(affinity, transpose(vs[h]))));
  }
  Var o = p.heads == 1 ? outs.front() : concat(outs, 1);
  return {linear(o, param(g, p.wo), param(g, p.bo)), x.grid};
}

TokenSequence swin_attention(const TokenSequence& x, ExpertParams& p, std::size_t window,
                             std::size_t shift) {
  require_projections(p, x);
  check_window(x.grid, window, shift);
  const auto order = window_partition_order(x.grid, window, shift);
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) inverse[order[r]] = r;

  Var partitioned = take_rows(x.tokens, order);
  const std::size_t per_window = window * window;
  const std::size_t windows = order.size() / per_window;
  Var attended;
  if (windows == 1) {
    attended = spatial_core(partitioned, p);
  } else {
    std::vector<std::size_t> extents(windows, per_window);
    auto parts = split(partitioned, extents, 0);
    std::vector<Var> outs;
    outs.reserve(windows);
    for (auto& part : parts) outs.push_back(spatial_core(part, p));
    attended = concat(outs, 0);
  }
  return {take_rows(attended, inverse), x.grid};
}

TokenSequence se_attention(const TokenSequence& x, ExpertParams& p) {
  check_token_sequence(x, p.dim());
  Graph& g = *x.tokens.graph();
  const std::size_t d = p.dim();
  Var squeeze = reshape(mean(x.tokens, 0), {1, d});
  Var hidden = gelu(linear(squeeze, param(g, p.w1), param(g, p.b1)));
  Var excitation = sigmoid(linear(hidden, param(g, p.w2), param(g, p.b2)));
  return {mul(x.tokens, excitation), x.grid};
}

TokenSequence apply_expert(const TokenSequence& x, ExpertParams& p, const ExpertContext& ctx) {
  switch (p.mechanism) {
    case Mechanism::spatial: return spatial_self_attention(x, p);
    case Mechanism::channel: return channel_self_attention(x, p);
    case Mechanism::swin: return swin_attention(x, p, ctx.window, ctx.shift);
    case Mechanism::se: return se_attention(x, p);
  }
  throw ConfigurationError("unknown mechanism");
}

std::size_t swin_shift_for_use(std::size_t use_index, std::size_t window) {
  return use_index % 2 == 0 ? 0 : window / 2;
}

void check_window(const Grid& grid, std::size_t window, std::size_t shift) {
  if (window == 0 || grid.height % window != 0 || grid.width % window != 0) {
    throw ConfigurationError("grid " + std::to_string(grid.height) + "x" +
                             std::to_string(grid.width) + " is not divisible by window " +
                             std::to_string(window));
  }
  if (shift >= window) {
    throw ConfigurationError("shift " + std::to_string(shift) + " must be below window " +
                             std::to_string(window));
  }
}

std::vector<std::size_t> window_partition_order(const Grid& grid, std::size_t window,
                                                std::size_t shift) {
  check_window(grid, window, shift);
  std::vector<std::size_t> order;
  order.reserve(grid.size());
  for (std::size_t wy = 0; wy < grid.height / window; ++wy) {
    for (std::size_t wx = 0; wx < grid.width / window; ++wx) {
      for (std::size_t iy = 0; iy < window; ++iy) {
        for (std::size_t ix = 0; ix < window; ++ix) {
          const std::size_t y = (wy * window + iy + shift) % grid.height;
          const std::size_t x = (wx * window + ix + shift) % grid.width;
          order.push_back(y * grid.width + x);
        }
      }
    }
  }
  return order;
}

Tensor window_partition(const Tensor& tokens, const Grid& grid, std::size_t window,
                        std::size_t shift) {
  if (tokens.rank() != 2 || tokens.extent(0) != grid.size()) {
    throw DimensionError("window_partition: tokens " + shape_to_string(tokens.shape()) +
                         " do not match grid");
  }
  return take_rows(tokens, window_partition_order(grid, window, shift));
}

Tensor window_reverse(const Tensor& windows, const Grid& grid, std::size_t window,
                      std::size_t shift) {
  if (windows.rank() != 2 || windows.extent(0) != grid.size()) {
    throw DimensionError("window_reverse: windows " + shape_to_string(windows.shape()) +
                         " do not match grid");
  }
  const auto order = window_partition_order(grid, window, shift);
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) inverse[order[r]] = r;
  return take_rows(windows, inverse);
}

}  // namespace mimdit
