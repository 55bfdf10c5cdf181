#include "mimdit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mimdit/errors.hpp"

namespace mimdit {

namespace {

Graph& graph_of(Var v) {
  if (v.graph() == nullptr) throw ContractError("operation on an unbound Var");
  return *v.graph();
}

Graph& common_graph(Var a, Var b) {
  if (a.graph() != b.graph()) throw ContractError("operands belong to different graphs");
  return graph_of(a);
}

// Sums `g` (shaped like the broadcast target) down to an operand of `shape`.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
  const std::size_t m = shape_numel(shape);
  if (m == g.numel()) return g.reshaped(shape);
  Tensor out(shape);
  auto o = out.data();
  auto in = g.data();
  for (std::size_t i = 0; i < in.size(); i += m) {
    for (std::size_t j = 0; j < m; ++j) o[j] += in[i + j];
  }
  return out;
}

}  // namespace

std::string_view op_name(OpTag tag) {
  switch (tag) {
    case OpTag::constant: return "constant";
    case OpTag::parameter: return "parameter";
    case OpTag::matmul: return "matmul";
    case OpTag::transpose: return "transpose";
    case OpTag::reshape: return "reshape";
    case OpTag::add: return "add";
    case OpTag::sub: return "sub";
    case OpTag::mul: return "mul";
    case OpTag::scale: return "scale";
    case OpTag::gelu: return "gelu";
    case OpTag::sigmoid: return "sigmoid";
    case OpTag::softmax: return "softmax";
    case OpTag::mean: return "mean";
    case OpTag::sum_all: return "sum_all";
    case OpTag::mean_all: return "mean_all";
    case OpTag::layernorm: return "layernorm";
    case OpTag::concat: return "concat";
    case OpTag::slice: return "slice";
    case OpTag::take_rows: return "take_rows";
    case OpTag::gather: return "gather";
    case OpTag::normalize_sum: return "normalize_sum";
    case OpTag::l2_normalize: return "l2_normalize";
    case OpTag::conv2d: return "conv2d";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (graph_ == nullptr) throw ContractError("value() on an unbound Var");
  return graph_->value(id_);
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  Node n;
  n.tag = OpTag::constant;
  value.clear_grad();
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::parameter(Tensor& p) {
  if (auto it = parameter_nodes_.find(&p); it != parameter_nodes_.end()) {
    return Var(this, it->second);
  }
  Node n;
  n.tag = OpTag::parameter;
  n.value = Tensor(p.shape(), p.values());
  n.needs_grad = record_ && p.requires_grad();
  n.parameter = &p;
  Var v = push(std::move(n));
  parameter_nodes_.emplace(&p, v.id());
  return v;
}

Var Graph::record(OpTag tag, std::initializer_list<Var> inputs, Tensor value,
                  BackwardFn backward) {
  return record(tag, std::span<const Var>(inputs.begin(), inputs.size()), std::move(value),
                std::move(backward));
}

Var Graph::record(OpTag tag, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  Node n;
  n.tag = tag;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.graph() != this) throw ContractError("input from a different graph");
    n.inputs.push_back(in.id());
    n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
  }
  n.needs_grad = n.needs_grad && record_;
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Graph::accumulate(NodeId id, const Tensor& delta) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), delta.values());
    n.has_grad = true;
    return;
  }
  auto g = n.grad.data();
  auto d = delta.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
}

void Graph::accumulate(NodeId id, Tensor&& delta) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = delta.shape() == n.value.shape() ? std::move(delta)
                                              : Tensor(n.value.shape(), delta.values());
    n.has_grad = true;
    return;
  }
  accumulate(id, static_cast<const Tensor&>(delta));
}

void Graph::backward(Var loss) {
  if (loss.graph() != this) throw ContractError("backward: loss belongs to a different graph");
  const Node& root = nodes_[loss.id()];
  if (root.value.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_to_string(root.value.shape()));
  }
  if (!root.needs_grad) return;
  accumulate(loss.id(), Tensor(root.value.shape(), 1.0));
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad) continue;
    if (n.parameter != nullptr) {
      auto dst = n.parameter->mutable_grad();
      auto src = n.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    if (n.backward) n.backward(*this, n.grad);
  }
}

Tensor Graph::gradient(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.has_grad ? n.grad : Tensor(n.value.shape());
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = common_graph(a, b);
  const NodeId ia = a.id(), ib = b.id();
  return g.record(OpTag::matmul, {a, b}, matmul(a.value(), b.value()),
                  [ia, ib](Graph& gr, const Tensor& og) {
                    if (gr.needs_grad(ia)) gr.accumulate(ia, matmul(og, transpose(gr.value(ib))));
                    if (gr.needs_grad(ib)) gr.accumulate(ib, matmul(transpose(gr.value(ia)), og));
                  });
}

Var transpose(Var a) {
  Graph& g = graph_of(a);
  const NodeId ia = a.id();
  return g.record(OpTag::transpose, {a}, transpose(a.value()),
                  [ia](Graph& gr, const Tensor& og) { gr.accumulate(ia, transpose(og)); });
}

Var reshape(Var a, Shape shape) {
  Graph& g = graph_of(a);
  const NodeId ia = a.id();
  return g.record(OpTag::reshape, {a}, a.value().reshaped(std::move(shape)),
                  [ia](Graph& gr, const Tensor& og) {
                    gr.accumulate(ia, og.reshaped(gr.value(ia).shape()));
                  });
}

Var add(Var a, Var b) {
  Graph& g = common_graph(a, b);
  const NodeId ia = a.id(), ib = b.id();
  return g.record(OpTag::add, {a, b}, add(a.value(), b.value()),
                  [ia, ib](Graph& gr, const Tensor& og) {
                    gr.accumulate(ia, og);
                    if (gr.needs_grad(ib)) gr.accumulate(ib, reduce_to(og, gr.value(ib).shape()));
                  });
}

Var sub(Var a, Var b) {
  Graph& g = common_graph(a, b);
  const NodeId ia = a.id(), ib = b.id();
  return g.record(OpTag::sub, {a, b}, sub(a.value(), b.value()),
                  [ia, ib](Graph& gr, const Tensor& og) {
                    gr.accumulate(ia, og);
                    if (gr.needs_grad(ib)) {
                      gr.accumulate(ib, scale(reduce_to(og, gr.value(ib).shape()), -1.0));
                    }
                  });
}

Var mul(Var a, Var b) {
  Graph& g = common_graph(a, b);
  const NodeId ia = a.id(), ib = b.id();
  return g.record(OpTag::mul, {a, b}, mul(a.value(), b.value()),
                  [ia, ib](Graph& gr, const Tensor& og) {
                    if (gr.needs_grad(ia)) gr.accumulate(ia, mul(og, gr.value(ib)));
                    if (gr.needs_grad(ib)) {
                      gr.accumulate(ib, reduce_to(mul(og, gr.value(ia)), gr.value(ib).shape()));
                    }
                  });
}

Var scale(Var a, double factor) {
  Graph& g = graph_of(a);
  const NodeId ia = a.id();
  return g.record(OpTag::scale, {a}, scale(a.value(), factor),
                  [ia, factor](Graph& gr, const Tensor& og) {
                    gr.accumulate(ia, scale(og, factor));
                  });
}

Var gelu(Var x) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  return g.record(OpTag::gelu, {x}, gelu(x.value()), [ix](Graph& gr, const Tensor& og) {
    const Tensor& in = gr.value(ix);
    Tensor d(in.shape());
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double v = in[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      d[i] = og[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
    }
    gr.accumulate(ix, std::move(d));
  });
}

Var sigmoid(Var x) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  Tensor y = sigmoid(x.value());
  Tensor saved = y;
  return g.record(OpTag::sigmoid, {x}, std::move(y),
                  [ix, s = std::move(saved)](Graph& gr, const Tensor& og) {
                    Tensor d(s.shape());
                    for (std::size_t i = 0; i < s.numel(); ++i) d[i] = og[i] * s[i] * (1.0 - s[i]);
                    gr.accumulate(ix, std::move(d));
                  });
}

Var softmax(Var x, std::size_t axis) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  Tensor y = softmax(x.value(), axis);
  Tensor saved = y;
  return g.record(
      OpTag::softmax, {x}, std::move(y),
      [ix, axis, s = std::move(saved)](Graph& gr, const Tensor& og) {
        const auto& shape = s.shape();
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
        for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
        const std::size_t n = shape[axis];
        Tensor d(shape);
        for (std::size_t a = 0; a < outer; ++a) {
          for (std::size_t c = 0; c < inner; ++c) {
            const std::size_t base = a * n * inner + c;
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) dot += og[base + i * inner] * s[base + i * inner];
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t k = base + i * inner;
              d[k] = s[k] * (og[k] - dot);
            }
          }
        }
        gr.accumulate(ix, std::move(d));
      });
}

Var mean(Var x, std::size_t axis) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  return g.record(OpTag::mean, {x}, mean(x.value(), axis), [ix, axis](Graph& gr, const Tensor& og) {
    const auto& shape = gr.value(ix).shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t n = shape[axis];
    const double inv = 1.0 / static_cast<double>(n);
    Tensor d(shape);
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < inner; ++c) d[(a * n + i) * inner + c] = og[a * inner + c] * inv;
    gr.accumulate(ix, std::move(d));
  });
}

Var sum_all(Var x) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  return g.record(OpTag::sum_all, {x}, sum_all(x.value()), [ix](Graph& gr, const Tensor& og) {
    gr.accumulate(ix, Tensor(gr.value(ix).shape(), og[0]));
  });
}

Var mean_all(Var x) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  return g.record(OpTag::mean_all, {x}, mean_all(x.value()), [ix](Graph& gr, const Tensor& og) {
    const Tensor& in = gr.value(ix);
    gr.accumulate(ix, Tensor(in.shape(), og[0] / static_cast<double>(in.numel())));
  });
}

Var layernorm(Var x, Var gain, Var bias) {
  Graph& g = common_graph(x, gain);
  common_graph(x, bias);
  const NodeId ix = x.id(), ig = gain.id(), ib = bias.id();
  Tensor y = layernorm(x.value(), gain.value(), bias.value());
  return g.record(OpTag::layernorm, {x, gain, bias}, std::move(y),
                  [ix, ig, ib](Graph& gr, const Tensor& og) {
                    const Tensor& in = gr.value(ix);
                    const Tensor& gn = gr.value(ig);
                    const std::size_t d = in.shape().back();
                    const std::size_t rows = in.numel() / d;
                    Tensor dx(in.shape());
                    Tensor dg(gn.shape());
                    Tensor db(gr.value(ib).shape());
                    std::vector<double> xhat(d), dxhat(d);
                    const double dd = static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* row = in.data().data() + r * d;
                      double mu = 0.0;
                      for (std::size_t j = 0; j < d; ++j) mu += row[j];
                      mu /= dd;
                      double var = 0.0;
                      for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
                      var /= dd;
                      const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        xhat[j] = (row[j] - mu) * inv;
                        const double gj = og[r * d + j];
                        dg[j] += gj * xhat[j];
                        db[j] += gj;
                        dxhat[j] = gj * gn[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                      }
                      for (std::size_t j = 0; j < d; ++j) {
                        dx[r * d + j] = inv / dd * (dd * dxhat[j] - s1 - xhat[j] * s2);
                      }
                    }
                    gr.accumulate(ix, std::move(dx));
                    gr.accumulate(ig, std::move(dg));
                    gr.accumulate(ib, std::move(db));
                  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Graph& g = graph_of(parts[0]);
  std::vector<Tensor> values;
  std::vector<std::size_t> extents;
  std::vector<NodeId> ids;
  values.reserve(parts.size());
  for (const auto& p : parts) {
    values.push_back(p.value());
    extents.push_back(p.shape().at(axis));
    ids.push_back(p.id());
  }
  return g.record(OpTag::concat, parts, concat(values, axis),
                  [ids = std::move(ids), extents = std::move(extents), axis](Graph& gr,
                                                                            const Tensor& og) {
                    auto pieces = split(og, extents, axis);
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      gr.accumulate(ids[i], std::move(pieces[i]));
                    }
                  });
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

std::vector<Var> split(Var x, std::span<const std::size_t> extents, std::size_t axis) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  auto pieces = split(x.value(), extents, axis);
  std::vector<Var> out;
  out.reserve(pieces.size());
  std::size_t offset = 0;
  for (std::size_t p = 0; p < pieces.size(); ++p) {
    const std::size_t start = offset;
    const std::size_t len = extents[p];
    offset += len;
    out.push_back(g.record(
        OpTag::slice, {x}, std::move(pieces[p]), [ix, axis, start, len](Graph& gr, const Tensor& og) {
          const auto& shape = gr.value(ix).shape();
          std::size_t outer = 1, inner = 1;
          for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
          for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
          const std::size_t n = shape[axis];
          Tensor d(shape);
          for (std::size_t a = 0; a < outer; ++a) {
            std::copy_n(og.data().data() + a * len * inner, len * inner,
                        d.data().data() + (a * n + start) * inner);
          }
          gr.accumulate(ix, std::move(d));
        }));
  }
  return out;
}

std::vector<Var> split(Var x, std::initializer_list<std::size_t> extents, std::size_t axis) {
  return split(x, std::span<const std::size_t>(extents.begin(), extents.size()), axis);
}

Var take_rows(Var x, std::span<const std::size_t> rows) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  std::vector<std::size_t> order(rows.begin(), rows.end());
  Tensor y = take_rows(x.value(), order);
  return g.record(OpTag::take_rows, {x}, std::move(y),
                  [ix, order = std::move(order)](Graph& gr, const Tensor& og) {
                    const Tensor& in = gr.value(ix);
                    const std::size_t width = in.numel() / in.extent(0);
                    Tensor d(in.shape());
                    for (std::size_t r = 0; r < order.size(); ++r) {
                      for (std::size_t j = 0; j < width; ++j) {
                        d[order[r] * width + j] += og[r * width + j];
                      }
                    }
                    gr.accumulate(ix, std::move(d));
                  });
}

Var gather(Var x, std::span<const std::size_t> indices) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  if (indices.empty()) throw DimensionError("gather: no indices");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor y({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.value().numel()) {
      throw DimensionError("gather: index " + std::to_string(idx[i]) + " out of range for " +
                           shape_to_string(x.shape()));
    }
    y[i] = x.value()[idx[i]];
  }
  return g.record(OpTag::gather, {x}, std::move(y),
                  [ix, idx = std::move(idx)](Graph& gr, const Tensor& og) {
                    Tensor d(gr.value(ix).shape());
                    for (std::size_t i = 0; i < idx.size(); ++i) d[idx[i]] += og[i];
                    gr.accumulate(ix, std::move(d));
                  });
}

Var normalize_sum(Var x) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  const double total = sum_all(x.value())[0];
  Tensor y = scale(x.value(), 1.0 / total);
  Tensor saved = y;
  return g.record(OpTag::normalize_sum, {x}, std::move(y),
                  [ix, total, s = std::move(saved)](Graph& gr, const Tensor& og) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < s.numel(); ++i) dot += og[i] * s[i];
                    Tensor d(s.shape());
                    for (std::size_t i = 0; i < s.numel(); ++i) d[i] = (og[i] - dot) / total;
                    gr.accumulate(ix, std::move(d));
                  });
}

Var l2_normalize(Var x) {
  Graph& g = graph_of(x);
  const NodeId ix = x.id();
  const Tensor& in = x.value();
  const std::size_t d = in.shape().back();
  const std::size_t rows = in.numel() / d;
  Tensor y(in.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += in[r * d + j] * in[r * d + j];
    norms[r] = std::sqrt(ss + kL2NormalizeEpsilon);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = in[r * d + j] / norms[r];
  }
  Tensor saved = y;
  return g.record(OpTag::l2_normalize, {x}, std::move(y),
                  [ix, d, norms = std::move(norms), s = std::move(saved)](Graph& gr,
                                                                         const Tensor& og) {
                    Tensor dx(s.shape());
                    for (std::size_t r = 0; r < norms.size(); ++r) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < d; ++j) dot += og[r * d + j] * s[r * d + j];
                      for (std::size_t j = 0; j < d; ++j) {
                        dx[r * d + j] = (og[r * d + j] - s[r * d + j] * dot) / norms[r];
                      }
                    }
                    gr.accumulate(ix, std::move(dx));
                  });
}

Var conv2d(Var image, Var kernel) {
  Graph& g = common_graph(image, kernel);
  const NodeId ii = image.id(), ik = kernel.id();
  return g.record(
      OpTag::conv2d, {image, kernel}, conv2d(image.value(), kernel.value()),
      [ii, ik](Graph& gr, const Tensor& og) {
        const Tensor& img = gr.value(ii);
        const Tensor& ker = gr.value(ik);
        const std::size_t c = img.extent(0), h = img.extent(1), w = img.extent(2);
        const auto kh = static_cast<std::ptrdiff_t>(ker.extent(0));
        const auto kw = static_cast<std::ptrdiff_t>(ker.extent(1));
        const std::ptrdiff_t ry = kh / 2, rx = kw / 2;
        const auto hi = static_cast<std::ptrdiff_t>(h), wi = static_cast<std::ptrdiff_t>(w);
        Tensor di(img.shape());
        Tensor dk(ker.shape());
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::ptrdiff_t y = 0; y < hi; ++y) {
            for (std::ptrdiff_t x = 0; x < wi; ++x) {
              const double gv =
                  og[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
              for (std::ptrdiff_t dy = -ry; dy <= ry; ++dy) {
                const std::ptrdiff_t sy = std::clamp<std::ptrdiff_t>(y + dy, 0, hi - 1);
                for (std::ptrdiff_t dx = -rx; dx <= rx; ++dx) {
                  const std::ptrdiff_t sx = std::clamp<std::ptrdiff_t>(x + dx, 0, wi - 1);
                  const auto kidx = static_cast<std::size_t>((dy + ry) * kw + dx + rx);
                  const auto pidx =
                      (ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx);
                  di[pidx] += gv * ker[kidx];
                  dk[kidx] += gv * img[pidx];
                }
              }
            }
          }
        }
        gr.accumulate(ii, std::move(di));
        gr.accumulate(ik, std::move(dk));
      });
}

Var linear(Var x, Var weight, Var bias) { return add(matmul(x, weight), bias); }

}  // namespace mimdit
