#include <benchmark/benchmark.h>

#include "mimdit/flow.hpp"
#include "mimdit/moe.hpp"
#include "mimdit/random.hpp"

using namespace mimdit;

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng = make_rng(1);
  const Tensor a = normal_tensor({n, n}, 1.0, rng), b = normal_tensor({n, n}, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(32)->Arg(64);

static void BM_MiMForward(benchmark::State& state) {
  MiMConfig c;
  c.model_dim = static_cast<std::size_t>(state.range(0));
  c.heads = 2;
  Rng rng = make_rng(2);
  MiMModule m = MiMModule::init(c, rng);
  const Grid grid{4, 4};
  const Tensor x = normal_tensor({grid.size(), c.model_dim}, 1.0, rng);
  for (auto _ : state) {
    Graph g(false);
    benchmark::DoNotOptimize(mim_forward({g.constant(x), grid}, m, 1).tokens.value());
  }
}
BENCHMARK(BM_MiMForward)->Arg(16)->Arg(32);

static ModelConfig bench_model(std::size_t dim) {
  ModelConfig c;
  c.mim.model_dim = dim;
  c.mim.heads = 2;
  return c;
}

static void BM_VelocityForward(benchmark::State& state) {
  MiMDiT model = MiMDiT::init(bench_model(static_cast<std::size_t>(state.range(0))), 3);
  const auto& cfg = model.config();
  Rng rng = make_rng(4);
  const Tensor z_lq = normal_tensor({cfg.tokens(), cfg.latent_dim()}, 1.0, rng);
  const Tensor x_t = normal_tensor({cfg.tokens(), cfg.latent_dim()}, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(model.velocity(z_lq, x_t, 0.3));
}
BENCHMARK(BM_VelocityForward)->Arg(16)->Arg(32);

static void BM_FlowLossForwardBackward(benchmark::State& state) {
  MiMDiT model = MiMDiT::init(bench_model(static_cast<std::size_t>(state.range(0))), 5);
  for (auto& [name, t] : model.parameters()) t->set_requires_grad(true);
  const auto& cfg = model.config();
  Rng rng = make_rng(6);
  const Tensor x = normal_tensor({cfg.tokens(), cfg.latent_dim()}, 1.0, rng);
  const Tensor z_lq = normal_tensor({cfg.tokens(), cfg.latent_dim()}, 1.0, rng);
  const Tensor z = normal_tensor({cfg.tokens(), cfg.latent_dim()}, 1.0, rng);
  for (auto _ : state) {
    Graph g;
    g.backward(flow_loss(g, model, x, z_lq, z, 0.4));
  }
}
BENCHMARK(BM_FlowLossForwardBackward)->Arg(16)->Arg(32);

BENCHMARK_MAIN();
