#include "mimdit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mimdit/errors.hpp"
#include "mimdit/flow.hpp"
#include "mimdit/random.hpp"

namespace mimdit {

namespace {

constexpr std::uint64_t kCoordinateStream = 0x636f6f7264ULL;

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

std::vector<std::size_t> probe_coordinates(std::size_t numel, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> all(numel);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (limit == 0 || limit >= numel) return all;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(limit);
  std::sort(all.begin(), all.end());
  return all;
}

/// Fixed random projection turning any output into a scalar loss of order 1.
struct Projection {
  std::vector<Tensor> weights;

  Var apply(Graph& g, Var out, std::size_t slot) const {
    return sum_all(mul(out, g.constant(weights.at(slot))));
  }
};

Projection make_projection(std::initializer_list<Shape> shapes, Rng& rng) {
  Projection p;
  for (const auto& s : shapes) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    p.weights.push_back(normal_tensor(s, 1.0 / std::sqrt(static_cast<double>(n)), rng));
  }
  return p;
}

ParameterList as_list(std::initializer_list<std::pair<const char*, Tensor*>> items) {
  ParameterList list;
  for (const auto& [n, t] : items) list.emplace_back(n, t);
  return list;
}

/// Primitive inputs are drawn from U[-2, 2].
Tensor primitive_input(Shape shape, Rng& rng) { return uniform_tensor(std::move(shape), -2.0, 2.0, rng); }

using CaseBody = std::function<GradCheckResult(const GradCheckOptions&, std::uint64_t, Rng&)>;

GradCheckCase make_case(std::string name, std::size_t coords, std::uint64_t stream,
                        CaseBody body) {
  GradCheckCase c;
  c.name = name;
  c.coordinates_per_tensor = coords;
  c.run = [name, coords, stream, body](const GradCheckOptions& options, std::uint64_t seed) {
    GradCheckOptions o = options;
    o.coordinates_per_tensor = coords;
    Rng rng = make_rng(seed, stream);
    return body(o, seed, rng);
  };
  return c;
}

/// Case over a single elementwise-or-shape op applied to one [3,4] input.
GradCheckCase unary_case(std::string name, std::uint64_t stream, Shape out_shape,
                         std::function<Var(Var)> op) {
  return make_case(name, 0, stream,
                   [name, out_shape, op](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
                     Tensor a = primitive_input({3, 4}, rng);
                     const Projection proj = make_projection({out_shape}, rng);
                     auto loss = [&](Graph& g) { return proj.apply(g, op(g.parameter(a)), 0); };
                     return check_gradients(name, loss, as_list({{"a", &a}}), o, seed);
                   });
}

GradCheckCase binary_case(std::string name, std::uint64_t stream, Shape b_shape,
                          std::function<Var(Var, Var)> op) {
  return make_case(name, 0, stream,
                   [name, b_shape, op](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
                     Tensor a = primitive_input({3, 4}, rng);
                     Tensor b = primitive_input(b_shape, rng);
                     Graph probe(false);
                     const Shape out = op(probe.constant(a), probe.constant(b)).shape();
                     const Projection proj = make_projection({out}, rng);
                     auto loss = [&](Graph& g) {
                       return proj.apply(g, op(g.parameter(a), g.parameter(b)), 0);
                     };
                     return check_gradients(name, loss, as_list({{"a", &a}, {"b", &b}}), o, seed);
                   });
}

void randomize(const ParameterList& params, double stddev, Rng& rng) {
  for (const auto& [name, t] : params) {
    for (auto& v : t->data()) v = std::normal_distribution<double>(0.0, stddev)(rng);
  }
}

ParameterList collect(const std::function<void(const ParameterVisitor&)>& walk) {
  ParameterList list;
  walk([&](const std::string& name, Tensor& t) { list.emplace_back(name, &t); });
  return list;
}

GradCheckCase expert_case(std::string name, std::uint64_t stream, Mechanism mech, Grid grid,
                          std::size_t shift) {
  return make_case(name, 0, stream, [=](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
    const std::size_t dim = 8;
    ExpertParams p = ExpertParams::init(mech, dim, 2, 4, rng);
    ParameterList params = collect([&](const ParameterVisitor& v) { p.for_each_parameter("", v); });
    randomize(params, 0.5, rng);
    Tensor x = normal_tensor({grid.size(), dim}, 1.0, rng);
    params.emplace_back("x", &x);
    const Projection proj = make_projection({{grid.size(), dim}}, rng);
    const ExpertContext ctx{2, shift};
    auto loss = [&](Graph& g) {
      const TokenSequence seq{g.parameter(x), grid};
      return proj.apply(g, apply_expert(seq, p, ctx).tokens, 0);
    };
    return check_gradients(name, loss, params, o, seed);
  });
}

std::vector<GradCheckCase> build_cases() {
  std::vector<GradCheckCase> cases;
  std::uint64_t stream = 1;
  auto next = [&] { return stream++; };

  cases.push_back(binary_case("matmul", next(), {4, 2}, [](Var a, Var b) { return matmul(a, b); }));
  cases.push_back(unary_case("transpose", next(), {4, 3}, [](Var a) { return transpose(a); }));
  cases.push_back(unary_case("reshape", next(), {2, 6}, [](Var a) { return reshape(a, {2, 6}); }));
  cases.push_back(binary_case("add", next(), {3, 4}, [](Var a, Var b) { return add(a, b); }));
  cases.push_back(binary_case("add_broadcast", next(), {4}, [](Var a, Var b) { return add(a, b); }));
  cases.push_back(binary_case("sub", next(), {3, 4}, [](Var a, Var b) { return sub(a, b); }));
  cases.push_back(binary_case("sub_broadcast", next(), {4}, [](Var a, Var b) { return sub(a, b); }));
  cases.push_back(binary_case("mul", next(), {3, 4}, [](Var a, Var b) { return mul(a, b); }));
  cases.push_back(binary_case("mul_broadcast", next(), {4}, [](Var a, Var b) { return mul(a, b); }));
  cases.push_back(binary_case("mul_scalar", next(), {1}, [](Var a, Var b) { return mul(a, b); }));
  cases.push_back(unary_case("scale", next(), {3, 4}, [](Var a) { return scale(a, -1.7); }));
  cases.push_back(unary_case("gelu", next(), {3, 4}, [](Var a) { return gelu(a); }));
  cases.push_back(unary_case("sigmoid", next(), {3, 4}, [](Var a) { return sigmoid(a); }));
  cases.push_back(unary_case("softmax_rows", next(), {3, 4}, [](Var a) { return softmax(a, 1); }));
  cases.push_back(unary_case("softmax_cols", next(), {3, 4}, [](Var a) { return softmax(a, 0); }));
  cases.push_back(unary_case("mean_rows", next(), {3}, [](Var a) { return mean(a, 1); }));
  cases.push_back(unary_case("mean_cols", next(), {4}, [](Var a) { return mean(a, 0); }));
  cases.push_back(unary_case("sum_all", next(), {1}, [](Var a) { return sum_all(a); }));
  cases.push_back(unary_case("mean_all", next(), {1}, [](Var a) { return mean_all(a); }));
  cases.push_back(unary_case("l2_normalize", next(), {3, 4}, [](Var a) { return l2_normalize(a); }));
  cases.push_back(unary_case("take_rows", next(), {4, 4}, [](Var a) {
    const std::size_t rows[] = {2, 0, 2, 1};
    return take_rows(a, rows);
  }));
  cases.push_back(unary_case("gather", next(), {4}, [](Var a) {
    const std::size_t idx[] = {5, 1, 5, 11};
    return gather(a, idx);
  }));
  cases.push_back(binary_case("concat_rows", next(), {2, 4},
                              [](Var a, Var b) { return concat({a, b}, 0); }));
  cases.push_back(binary_case("concat_cols", next(), {3, 2},
                              [](Var a, Var b) { return concat({a, b}, 1); }));
  cases.push_back(unary_case("split_rows", next(), {2, 4}, [](Var a) {
    return split(a, {1, 2}, 0)[1];
  }));
  cases.push_back(unary_case("split_cols", next(), {3, 3}, [](Var a) {
    return split(a, {1, 3}, 1)[1];
  }));

  cases.push_back(make_case("normalize_sum", 0, next(),
                            [](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
                              Tensor a = uniform_tensor({5}, 0.5, 2.0, rng);
                              const Projection proj = make_projection({{5}}, rng);
                              auto loss = [&](Graph& g) {
                                return proj.apply(g, normalize_sum(g.parameter(a)), 0);
                              };
                              return check_gradients("normalize_sum", loss,
                                                     as_list({{"a", &a}}), o, seed);
                            }));
  cases.push_back(make_case("layernorm", 0, next(),
                            [](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
                              Tensor x = primitive_input({3, 4}, rng);
                              Tensor gain = primitive_input({4}, rng);
                              Tensor bias = primitive_input({4}, rng);
                              const Projection proj = make_projection({{3, 4}}, rng);
                              auto loss = [&](Graph& g) {
                                return proj.apply(g,
                                                  layernorm(g.parameter(x), g.parameter(gain),
                                                            g.parameter(bias)),
                                                  0);
                              };
                              return check_gradients(
                                  "layernorm", loss,
                                  as_list({{"x", &x}, {"gain", &gain}, {"bias", &bias}}), o, seed);
                            }));
  cases.push_back(make_case("linear", 0, next(),
                            [](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
                              Tensor x = primitive_input({3, 4}, rng);
                              Tensor w = primitive_input({4, 5}, rng);
                              Tensor b = primitive_input({5}, rng);
                              const Projection proj = make_projection({{3, 5}}, rng);
                              auto loss = [&](Graph& g) {
                                return proj.apply(
                                    g, linear(g.parameter(x), g.parameter(w), g.parameter(b)), 0);
                              };
                              return check_gradients("linear", loss,
                                                     as_list({{"x", &x}, {"w", &w}, {"b", &b}}), o,
                                                     seed);
                            }));
  cases.push_back(make_case("conv2d", 0, next(),
                            [](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
                              Tensor image = primitive_input({2, 5, 5}, rng);
                              Tensor kernel = primitive_input({3, 3}, rng);
                              const Projection proj = make_projection({{2, 5, 5}}, rng);
                              auto loss = [&](Graph& g) {
                                return proj.apply(
                                    g, conv2d(g.parameter(image), g.parameter(kernel)), 0);
                              };
                              return check_gradients(
                                  "conv2d", loss, as_list({{"image", &image}, {"kernel", &kernel}}),
                                  o, seed);
                            }));

  cases.push_back(expert_case("spatial_attention", next(), Mechanism::spatial, {2, 2}, 0));
  cases.push_back(expert_case("channel_attention", next(), Mechanism::channel, {2, 2}, 0));
  cases.push_back(expert_case("swin_attention", next(), Mechanism::swin, {4, 4}, 0));
  cases.push_back(expert_case("swin_attention_shifted", next(), Mechanism::swin, {4, 4}, 1));
  cases.push_back(expert_case("se_attention", next(), Mechanism::se, {2, 2}, 0));

  cases.push_back(make_case(
      "mim_forward", 4, next(), [](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
        MiMConfig cfg;
        cfg.model_dim = 8;
        cfg.sub_expert_count = 3;
        cfg.top_k = 2;
        cfg.heads = 2;
        cfg.window = 2;
        cfg.balance_coefficient = 0.5;
        MiMModule module = MiMModule::init(cfg, rng);
        ParameterList params =
            collect([&](const ParameterVisitor& v) { module.for_each_parameter("mim", v); });
        randomize(params, 0.5, rng);
        const Grid grid{2, 2};
        Tensor x = normal_tensor({grid.size(), cfg.model_dim}, 1.0, rng);
        params.emplace_back("x", &x);
        const Projection proj = make_projection({{grid.size(), cfg.model_dim}}, rng);
        auto loss = [&](Graph& g) {
          std::vector<std::vector<Var>> probs;
          RoutingObserver observer;
          observer.router_probabilities = &probs;
          const TokenSequence seq{g.parameter(x), grid};
          Var out = proj.apply(g, mim_forward(seq, module, 1, &observer).tokens, 0);
          if (auto penalty = balance_penalty(probs)) {
            out = add(out, scale(*penalty, cfg.balance_coefficient));
          }
          return out;
        };
        return check_gradients("mim_forward", loss, params, o, seed);
      }));

  cases.push_back(make_case(
      "mimdit_flow_loss", 2, next(), [](const GradCheckOptions& o, std::uint64_t seed, Rng& rng) {
        ModelConfig cfg;
        cfg.mim.model_dim = 8;
        cfg.mim.block_count = 2;
        cfg.mim.sub_expert_count = 3;
        cfg.mim.top_k = 2;
        cfg.mim.heads = 2;
        cfg.mim.window = 2;
        cfg.image_height = 8;
        cfg.image_width = 8;
        cfg.patch = 4;
        MiMDiT model = MiMDiT::init(cfg, seed);
        ParameterList params = model.parameters();
        randomize(params, 0.5, rng);
        const Shape latent{cfg.tokens(), cfg.latent_dim()};
        Tensor x = normal_tensor(latent, 1.0, rng);
        Tensor z_lq = normal_tensor(latent, 1.0, rng);
        Tensor z = normal_tensor(latent, 1.0, rng);
        const double t = uniform(rng);
        auto loss = [&](Graph& g) { return flow_loss(g, model, x, z_lq, z, t); };
        return check_gradients("mimdit_flow_loss", loss, params, o, seed);
      }));
  return cases;
}

}  // namespace

GradCheckResult check_gradients(const std::string& name, const LossBuilder& loss,
                                const ParameterList& inputs, const GradCheckOptions& options,
                                std::uint64_t instance_seed) {
  for (const auto& [pname, tensor] : inputs) tensor->set_requires_grad(true);
  zero_gradients(inputs);
  {
    Graph g;
    Var l = loss(g);
    g.backward(l);
  }
  GradCheckResult result;
  result.name = name;
  result.instances = 1;
  Rng rng = make_rng(instance_seed, kCoordinateStream);
  auto evaluate = [&] {
    Graph g(false);
    return loss(g).value()[0];
  };
  for (const auto& [pname, tensor] : inputs) {
    const std::vector<double> analytic(tensor->mutable_grad().begin(), tensor->mutable_grad().end());
    for (std::size_t i : probe_coordinates(tensor->numel(), options.coordinates_per_tensor, rng)) {
      const double saved = (*tensor)[i];
      (*tensor)[i] = saved + options.step;
      const double plus = evaluate();
      (*tensor)[i] = saved - options.step;
      const double minus = evaluate();
      (*tensor)[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double err = relative_error(analytic[i], numeric, options.floor);
      if (!std::isfinite(err)) {
        throw NumericalError(0, "non-finite gradient in " + name + " at " + pname);
      }
      result.max_relative_error = std::max(result.max_relative_error, err);
      ++result.coordinates;
    }
  }
  zero_gradients(inputs);
  result.passed = result.max_relative_error <= options.tolerance;
  return result;
}

std::vector<GradCheckCase> grad_check_cases() { return build_cases(); }

std::vector<GradCheckResult> run_grad_check(
    const GradCheckOptions& options, const std::function<void(const GradCheckResult&)>& on_result) {
  std::vector<GradCheckResult> results;
  for (const auto& c : grad_check_cases()) {
    GradCheckResult total;
    total.name = c.name;
    for (std::size_t i = 0; i < options.instances; ++i) {
      const GradCheckResult r = c.run(options, options.seed * 1000003ULL + i);
      total.instances += r.instances;
      total.coordinates += r.coordinates;
      total.max_relative_error = std::max(total.max_relative_error, r.max_relative_error);
    }
    total.passed = total.max_relative_error <= options.tolerance;
    if (on_result) on_result(total);
    results.push_back(total);
  }
  return results;
}

}  // namespace mimdit
