#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mimdit/errors.hpp"
#include "mimdit/moe.hpp"
#include "mimdit/random.hpp"
#include "oracles.hpp"

using namespace mimdit;
using namespace mimdit::testing;

namespace {

MiMConfig small_config(std::size_t n, std::size_t k) {
  MiMConfig c;
  c.model_dim = 8;
  c.sub_expert_count = n;
  c.top_k = k;
  c.heads = 2;
  c.window = 2;
  return c;
}

void randomize(MiMModule& m, Rng& rng, double stddev = 0.5) {
  m.for_each_parameter("", [&](const std::string&, Tensor& t) {
    for (auto& v : t.data()) v = std::normal_distribution<double>(0.0, stddev)(rng);
  });
}

}  // namespace

TEST(DenseRouting, GatesLieOnTheSimplex) {
  Rng rng = make_rng(1);
  DenseRouter r = DenseRouter::init(8, 4);
  r.weight = normal_tensor({8, 4}, 2.0, rng);
  r.bias = normal_tensor({4}, 2.0, rng);
  for (int trial = 0; trial < 1000; ++trial) {
    Graph g(false);
    Tensor x = normal_tensor({4, 8}, 3.0, rng);
    const Tensor gates = dense_route({g.constant(x), {2, 2}}, r).value();
    double sum = 0.0;
    for (double v : gates.data()) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(DenseRouting, ZeroInitialRouterIsUniform) {
  Rng rng = make_rng(2);
  DenseRouter r = DenseRouter::init(8, 4);
  Graph g(false);
  const Tensor gates = dense_route({g.constant(normal_tensor({4, 8}, 1.0, rng)), {2, 2}}, r).value();
  for (double v : gates.data()) EXPECT_EQ(v, 0.25);
}

TEST(SparseRouting, SelectsExactlyKWithRenormalizedGates) {
  Rng rng = make_rng(3);
  for (std::size_t k = 1; k <= 4; ++k) {
    SparseRouter r = SparseRouter::init(8, 4, rng);
    r.weight = normal_tensor({8, 4}, 1.0, rng);
    Graph g(false);
    auto route = sparse_route({g.constant(normal_tensor({4, 8}, 1.0, rng)), {2, 2}}, r, k);
    EXPECT_EQ(route.indices.size(), k);
    const Tensor& gates = route.gates.value();
    EXPECT_NEAR(std::accumulate(gates.data().begin(), gates.data().end(), 0.0), 1.0, 1e-12);
    for (std::size_t s = 1; s < k; ++s) EXPECT_GE(gates[s - 1], gates[s]);
  }
}

TEST(SparseRouting, KOutOfRangeIsParameterError) {
  Rng rng = make_rng(4);
  SparseRouter r = SparseRouter::init(8, 3, rng);
  Graph g(false);
  const TokenSequence x{g.constant(Tensor({4, 8}, 1.0)), {2, 2}};
  EXPECT_THROW(sparse_route(x, r, 0), ParameterError);
  EXPECT_THROW(sparse_route(x, r, 4), ParameterError);
}

TEST(SparseRouting, UnselectedSubExpertsGetExactlyZeroGradient) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed);
    ExpertGroup group;
    group.mechanism = Mechanism::spatial;
    for (int j = 0; j < 4; ++j) {
      group.experts.push_back(ExpertParams::init(Mechanism::spatial, 8, 2, 4, rng));
      group.experts.back().for_each_parameter("", [](const std::string&, Tensor& t) {
        t.set_requires_grad(true);
      });
    }
    group.router = SparseRouter::init(8, 4, rng);
    group.router->weight = normal_tensor({8, 4}, 1.0, rng);
    Graph g;
    GroupSelection sel;
    Tensor x = normal_tensor({4, 8}, 1.0, rng);
    auto out = intra_moe_forward({g.constant(x), {2, 2}}, group, 2, IntraRouting::sparse, {}, &sel);
    g.backward(sum_all(mul(out.tokens, g.constant(normal_tensor({4, 8}, 1.0, rng)))));
    for (std::size_t j = 0; j < 4; ++j) {
      const bool chosen = std::find(sel.indices.begin(), sel.indices.end(), j) != sel.indices.end();
      double mag = 0.0;
      group.experts[j].for_each_parameter("", [&](const std::string&, Tensor& t) {
        for (double v : t.grad()) mag += std::abs(v);
      });
      if (chosen) {
        EXPECT_GT(mag, 0.0);
      } else {
        EXPECT_EQ(mag, 0.0);
      }
    }
  }
}

TEST(SparseRouting, FullSelectionEqualsDenseSoftmaxMixture) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed);
    ExpertGroup group;
    for (int j = 0; j < 3; ++j) group.experts.push_back(ExpertParams::init(Mechanism::se, 8, 1, 4, rng));
    group.router = SparseRouter::init(8, 3, rng);
    group.router->weight = normal_tensor({8, 3}, 1.0, rng);
    group.router->bias = normal_tensor({3}, 1.0, rng);
    Tensor x = normal_tensor({4, 8}, 1.0, rng);
    Graph g(false);
    const Tensor sparse =
        intra_moe_forward({g.constant(x), {2, 2}}, group, 3, IntraRouting::sparse, {}).tokens.value();
    const auto p = softmax_of_router(x, group.router->weight, group.router->bias);
    Tensor dense({4, 8});
    for (std::size_t j = 0; j < 3; ++j) {
      const Tensor e = expert_output(x, {2, 2}, group.experts[j], 0);
      for (std::size_t q = 0; q < dense.numel(); ++q) dense[q] += p[j] * e[q];
    }
    EXPECT_LE(max_abs_difference(sparse, dense), 1e-12);
  }
}

TEST(MiMForward, MatchesUnrolledOracle) {
  const Grid grid{2, 2};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng = make_rng(seed);
    MiMModule m = MiMModule::init(small_config(3, 2), rng);
    randomize(m, rng);
    Tensor x = normal_tensor({grid.size(), 8}, 1.0, rng);
    for (std::size_t block : {0u, 1u}) {
      Graph g(false);
      const Tensor y = mim_forward({g.constant(x), grid}, m, block).tokens.value();
      EXPECT_LE(max_abs_difference(y, unrolled_mim_oracle(x, grid, m, block)), 1e-10) << seed;
    }
  }
}

TEST(MiMForward, SingleSubExpertSparseEqualsNoRouter) {
  const Grid grid{2, 2};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed);
    MiMModule sparse = MiMModule::init(small_config(1, 1), rng);
    randomize(sparse, rng);
    MiMConfig single_cfg = small_config(1, 1);
    single_cfg.intra = IntraRouting::single;
    MiMModule single = MiMModule::init(single_cfg, rng);
    single.dense_router() = sparse.dense_router();
    for (std::size_t i = 0; i < MiMConfig::group_count; ++i) {
      single.groups()[i].experts = sparse.groups()[i].experts;
    }
    Tensor x = normal_tensor({grid.size(), 8}, 1.0, rng);
    Graph g(false);
    EXPECT_EQ(mim_forward({g.constant(x), grid}, sparse, 0).tokens.value(),
              mim_forward({g.constant(x), grid}, single, 0).tokens.value());
  }
}

TEST(MiMForward, ResidualToggleAddsInput) {
  MiMConfig cfg = small_config(2, 1);
  auto build = [&](bool residual) {
    Rng rng = make_rng(5);
    cfg.residual = residual;
    MiMModule m = MiMModule::init(cfg, rng);
    randomize(m, rng);
    return m;
  };
  MiMModule with = build(true), without = build(false);
  Rng rng = make_rng(55);
  Tensor x = normal_tensor({4, 8}, 1.0, rng);
  Graph g(false);
  const Tensor a = mim_forward({g.constant(x), {2, 2}}, with, 0).tokens.value();
  const Tensor b = mim_forward({g.constant(x), {2, 2}}, without, 0).tokens.value();
  EXPECT_LE(max_abs_difference(a, add(b, x)), 1e-14);
}

TEST(MiMForward, TraceRecordsDenseGatesAndSelections) {
  Rng rng = make_rng(6);
  MiMModule m = MiMModule::init(small_config(4, 2), rng);
  std::vector<RoutingTrace> traces;
  RoutingObserver obs;
  obs.traces = &traces;
  obs.label = "haze";
  Graph g(false);
  mim_forward({g.constant(normal_tensor({4, 8}, 1.0, rng)), {2, 2}}, m, 1, &obs);
  ASSERT_EQ(traces.size(), 1u);
  EXPECT_EQ(traces[0].label, "haze");
  EXPECT_EQ(traces[0].block, 1u);
  for (double v : traces[0].dense) EXPECT_EQ(v, 0.25);
  for (const auto& s : traces[0].groups) EXPECT_EQ(s.indices.size(), 2u);
}

TEST(MiMForward, SparseInterRunsOnlyTheChosenGroup) {
  Rng rng = make_rng(7);
  MiMConfig cfg = small_config(2, 1);
  cfg.inter = InterRouting::sparse_top1;
  MiMModule m = MiMModule::init(cfg, rng);
  randomize(m, rng);
  m.for_each_parameter("", [](const std::string&, Tensor& t) { t.set_requires_grad(true); });
  Graph g;
  Tensor x = normal_tensor({4, 8}, 1.0, rng);
  g.backward(sum_all(mim_forward({g.constant(x), {2, 2}}, m, 0).tokens));
  std::size_t groups_with_grad = 0;
  for (auto& group : m.groups()) {
    double mag = 0.0;
    for (auto& e : group.experts)
      e.for_each_parameter("", [&](const std::string&, Tensor& t) {
        for (double v : t.grad()) mag += std::abs(v);
      });
    groups_with_grad += mag > 0.0;
  }
  EXPECT_EQ(groups_with_grad, 1u);
  double router_grad = 0.0;
  for (double v : m.dense_router().weight.grad()) router_grad += std::abs(v);
  EXPECT_GT(router_grad, 0.0);
}

TEST(MoELayer, GateCountMismatchIsConfigurationError) {
  Graph g(false);
  Var x = g.constant(Tensor({2, 2}, 1.0));
  std::vector<ExpertFn> experts{[](Var v) { return v; }, [](Var v) { return v; }};
  EXPECT_THROW(moe_layer(x, experts, g.constant(Tensor({3}, 0.3))), ConfigurationError);
  EXPECT_THROW(moe_layer(x, experts, g.constant(Tensor({2}, {-0.5, 1.5}))), ConfigurationError);
}

TEST(MoELayer, OneHotGateSelectsThatExpert) {
  Graph g(false);
  Var x = g.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  std::vector<ExpertFn> experts{[](Var v) { return scale(v, 2.0); }, [](Var v) { return scale(v, 3.0); }};
  EXPECT_EQ(moe_layer(x, experts, g.constant(Tensor({2}, {0.0, 1.0}))).value(),
            Tensor({2, 2}, {3, 6, 9, 12}));
}

TEST(Trace, FormatRoundTrips) {
  RoutingTrace t;
  t.label = "blur";
  t.block = 0;
  t.dense = {0.1, 0.2, 0.3, 0.4};
  for (std::size_t i = 0; i < 4; ++i) t.groups[i] = {{i % 2, 2}, {0.6, 0.4}};
  const std::string line = format_trace(t);
  EXPECT_EQ(line.substr(0, 5), "blur,");
  const RoutingTrace back = parse_trace(line);
  EXPECT_EQ(back.label, t.label);
  EXPECT_EQ(back.dense, t.dense);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(back.groups[i].indices, t.groups[i].indices);
}

TEST(BalancePenalty, EqualsOneAtPerfectBalance) {
  Graph g(false);
  std::vector<std::vector<Var>> probs{{g.constant(Tensor({4}, 0.25)), g.constant(Tensor({4}, 0.25))}};
  auto p = balance_penalty(probs);
  ASSERT_TRUE(p.has_value());
  EXPECT_NEAR(p->value()[0], 1.0, 1e-15);
  EXPECT_FALSE(balance_penalty({}).has_value());
}
