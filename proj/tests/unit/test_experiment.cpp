#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mimdit/checkpoint.hpp"
#include "mimdit/errors.hpp"
#include "mimdit/experiment.hpp"

using namespace mimdit;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mimdit_unit";
  fs::create_directories(dir);
  return dir / name;
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.model.image_height = c.model.image_width = 8;
  c.model.mim.model_dim = 8;
  c.train.steps = 20;
  c.train.log_every = 5;
  c.data.count = 8;
  c.data.heldout_count = 3;
  c.sampler.steps = 4;
  c.seed = 11;
  return c;
}

Dataset small_data(const ExperimentConfig& c, bool heldout) {
  DatasetOptions o = c.dataset_options(heldout);
  o.height = c.model.image_height;
  o.width = c.model.image_width;
  return generate_dataset(o);
}

}  // namespace

TEST(Metrics, PsnrMatchesDefinition) {
  EXPECT_NEAR(psnr_from_mse(0.01), 20.0, 1e-12);
  EXPECT_NEAR(psnr_from_mse(1.0), 0.0, 1e-12);
  EXPECT_EQ(psnr_from_mse(0.0), kPsnrCap);
  EXPECT_EQ(psnr_from_mse(1e-30), kPsnrCap);
  Tensor a({2, 2}, {0, 0, 0, 0}), b({2, 2}, {1, 0, 0, 1});
  EXPECT_DOUBLE_EQ(mean_squared_error(a, b), 0.5);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  ExperimentConfig c = small_config();
  MiMDiT model = MiMDiT::init(c.model, 21);
  const auto p1 = scratch("a.mimd"), p2 = scratch("b.mimd");
  save_checkpoint(p1.string(), model);
  MiMDiT loaded = load_checkpoint(p1.string());
  save_checkpoint(p2.string(), loaded);
  EXPECT_EQ(slurp(p1), slurp(p2));
  EXPECT_EQ(loaded.config(), c.model);
  EXPECT_EQ(read_checkpoint_config(p1.string()), c.model);
}

TEST(Checkpoint, MismatchedConfigIsAContractError) {
  ExperimentConfig c = small_config();
  MiMDiT model = MiMDiT::init(c.model, 1);
  const auto path = scratch("m.mimd");
  save_checkpoint(path.string(), model);
  ModelConfig other = c.model;
  other.mim.top_k = 1;
  try {
    load_checkpoint(path.string(), other);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("model.top_k"), std::string::npos);
  }
}

TEST(Checkpoint, CorruptFilesArePersistenceErrors) {
  EXPECT_THROW(load_checkpoint(scratch("missing.mimd").string()), PersistenceError);
  ExperimentConfig c = small_config();
  MiMDiT model = MiMDiT::init(c.model, 1);
  const auto path = scratch("t.mimd");
  save_checkpoint(path.string(), model);
  const std::string bytes = slurp(path);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes.substr(0, bytes.size() / 2);
  }
  EXPECT_THROW(load_checkpoint(path.string()), PersistenceError);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes << 'x';
  }
  EXPECT_THROW(load_checkpoint(path.string()), PersistenceError);
}

TEST(Train, ZeroStepsReturnsInitialization) {
  ExperimentConfig c = small_config();
  c.train.steps = 0;
  TrainResult r = train_model(c, small_data(c, false));
  MiMDiT fresh = MiMDiT::init(c.model, c.seed);
  auto a = r.model.parameters(), b = fresh.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second) << a[i].first;
  EXPECT_TRUE(r.curve.empty());
}

TEST(Train, IsDeterministic) {
  ExperimentConfig c = small_config();
  const Dataset d = small_data(c, false);
  TrainResult a = train_model(c, d), b = train_model(c, d);
  auto pa = a.model.parameters(), pb = b.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].second, *pb[i].second);
  ASSERT_EQ(a.curve.size(), 4u);
  for (std::size_t i = 0; i < a.curve.size(); ++i) EXPECT_EQ(a.curve[i].loss, b.curve[i].loss);
}

TEST(Train, LossDecreasesOnASingleKindTask) {
  ExperimentConfig c;
  c.seed = 2;
  c.train.steps = 500;
  c.train.log_every = 100;
  c.train.learning_rate = 3e-3;
  c.data.count = 64;
  c.data.kinds = {DegradationKind::blur};
  TrainResult r = train_model(c, generate_dataset(c.dataset_options(false)));
  EXPECT_LT(r.final_loss, r.initial_loss);
  for (const LossPoint& p : r.curve) EXPECT_TRUE(std::isfinite(p.loss));
}

TEST(Train, MismatchedImagesAreContractErrors) {
  ExperimentConfig c = small_config();
  DatasetOptions o = c.dataset_options(false);
  o.height = o.width = 16;  // against an 8x8 model
  EXPECT_THROW(train_model(c, generate_dataset(o)), ContractError);
}

TEST(Restore, OracleFieldIsExact) {
  ExperimentConfig c = small_config();
  const Dataset d = small_data(c, true);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const Tensor target = image_to_latent(d.samples[i].clean, c.model.patch);
    const Tensor z = sampling_noise(c.seed, i, c.model);
    const VelocityField oracle = [&](const Tensor&, const Tensor&, double) {
      return velocity_target(target, z);
    };
    const Tensor out = restore_image(oracle, d.samples[i].degraded, c.model, c.sampler, z);
    EXPECT_LE(max_abs_difference(out, d.samples[i].clean), 1e-9);
    EXPECT_EQ(psnr_from_mse(mean_squared_error(out, d.samples[i].clean)) >= 150.0, true);
  }
}

TEST(Restore, MetricsAreConsistent) {
  ExperimentConfig c = small_config();
  MiMDiT model = MiMDiT::init(c.model, 4);
  const Dataset d = small_data(c, true);
  RestoreResult r = restore_dataset(model, d, c.sampler, c.seed);
  ASSERT_EQ(r.restored.size(), d.samples.size());
  double total = 0.0;
  for (const KindMetrics& k : r.metrics.per_kind) {
    EXPECT_NEAR(k.psnr, psnr_from_mse(k.mse), 1e-12);
    total += k.mse * static_cast<double>(k.count);
  }
  EXPECT_EQ(r.metrics.overall.count, d.samples.size());
  EXPECT_NEAR(r.metrics.overall.mse, total / static_cast<double>(d.samples.size()), 1e-12);
  for (std::size_t i = 0; i < d.samples.size(); ++i)
    EXPECT_EQ(r.restored[i].shape(), d.samples[i].clean.shape());
  // Same seed, same outputs.
  RestoreResult again = restore_dataset(model, d, c.sampler, c.seed);
  for (std::size_t i = 0; i < d.samples.size(); ++i) EXPECT_EQ(r.restored[i], again.restored[i]);
}

TEST(RouteReport, UntrainedRowsAreExactlyUniform) {
  ExperimentConfig c = small_config();
  MiMDiT model = MiMDiT::init(c.model, 8);
  const Dataset d = small_data(c, true);
  for (bool all : {false, true}) {
    RoutingReport rep = route_report(model, d, c.seed, all);
    ASSERT_EQ(rep.labels.size(), 3u);
    for (const auto& row : rep.rows)
      for (double g : row) EXPECT_EQ(g, 0.25);
    EXPECT_EQ(max_pairwise_l1(rep), 0.0);
  }
}

TEST(RouteReport, MissingLabelsAreContractErrors) {
  ExperimentConfig c = small_config();
  MiMDiT model = MiMDiT::init(c.model, 8);
  const Dataset d = small_data(c, true);
  std::vector<Tensor> images;
  for (const auto& s : d.samples) images.push_back(s.degraded);
  EXPECT_THROW(route_report(model, images, {"blur"}, 0, false), ContractError);
  EXPECT_THROW(route_report(model, images, {"blur", "", "haze"}, 0, false), ContractError);
}

TEST(RouteReport, FormatListsEveryGroup) {
  ExperimentConfig c = small_config();
  MiMDiT model = MiMDiT::init(c.model, 8);
  const std::string text = format_routing_report(route_report(model, small_data(c, true), 0, false));
  EXPECT_EQ(text.rfind("label g1:spatial g2:channel g3:swin g4:se row_sum count", 0), 0u);
}

TEST(Ablate, TableHasOneRowPerVariant) {
  ExperimentConfig c = small_config();
  c.train.steps = 4;
  c.train.log_every = 2;
  const Dataset train = small_data(c, false), heldout = small_data(c, true);
  std::size_t seen = 0;
  auto rows = ablate(c, {Variant::full, Variant::no_intra, Variant::se_only}, train, heldout, nullptr,
                     [&](Variant, TrainResult&) { ++seen; });
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(seen, 3u);
  EXPECT_EQ(rows[0].variant, Variant::full);
  EXPECT_LT(rows[1].parameters, rows[0].parameters);
  for (const auto& r : rows) EXPECT_NEAR(r.psnr, psnr_from_mse(r.mse), 1e-12);
  std::istringstream table(format_ablation_table(rows));
  std::string line;
  std::getline(table, line);
  EXPECT_EQ(line, "variant params final_loss mse psnr");
  std::size_t n = 0;
  while (std::getline(table, line)) ++n;
  EXPECT_EQ(n, 3u);
}

TEST(TensorList, RoundTrip) {
  const auto path = scratch("list.tensors");
  std::vector<Tensor> ts{Tensor({2, 3}, 1.5), Tensor({1}, -2.0)};
  write_tensor_list(path.string(), ts);
  EXPECT_EQ(read_tensor_list(path.string()), ts);
}
