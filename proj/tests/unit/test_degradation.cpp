#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mimdit/degradation.hpp"
#include "mimdit/errors.hpp"

using namespace mimdit;

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mimdit_test_" + name)).string();
}

const DegradationKind kAllKinds[] = {DegradationKind::blur, DegradationKind::noise,
                                     DegradationKind::haze, DegradationKind::lowlight,
                                     DegradationKind::rain};

}  // namespace

TEST(SynthesizeClean, DeterministicPerSeed) {
  EXPECT_EQ(synthesize_clean(5, 16, 16, 1), synthesize_clean(5, 16, 16, 1));
}

TEST(SynthesizeClean, SpansUnitRangeForManySeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Tensor img = synthesize_clean(seed, 8, 8, 1);
    const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
    EXPECT_GE(*lo, 0.0);
    EXPECT_LE(*hi, 1.0);
    EXPECT_EQ(*lo, 0.0);
    EXPECT_EQ(*hi, 1.0);
  }
}

TEST(SynthesizeClean, DistinctSeedsDifferInManyPixels) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor a = synthesize_clean(seed, 16, 16, 1), b = synthesize_clean(seed + 1, 16, 16, 1);
    std::size_t differing = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) differing += std::abs(a[i] - b[i]) > 1e-9;
    EXPECT_GE(differing * 10, a.numel()) << seed;
  }
}

TEST(SynthesizeClean, DegenerateExtentsAreParameterErrors) {
  EXPECT_THROW(synthesize_clean(0, 3, 16, 1), ParameterError);
  EXPECT_THROW(synthesize_clean(0, 16, 2, 1), ParameterError);
  EXPECT_THROW(synthesize_clean(0, 16, 16, 0), ParameterError);
}

TEST(Degradation, SeverityZeroIsIdentity) {
  const Tensor clean = synthesize_clean(3, 16, 16, 3);
  for (DegradationKind k : kAllKinds) {
    const auto spec = DegradationSpec::from_severity(k, 0.0, 11);
    EXPECT_LE(max_abs_difference(apply_degradation(clean, spec), clean), 1e-12)
        << degradation_name(k);
  }
}

TEST(Degradation, HazeEndpoints) {
  const Tensor clean = synthesize_clean(4, 8, 8, 1);
  DegradationSpec spec = DegradationSpec::from_severity(DegradationKind::haze, 0.5, 2);
  spec.transmission = 0.0;
  const Tensor fog = apply_degradation(clean, spec);
  for (double v : fog.data()) EXPECT_EQ(v, spec.airlight);
  spec.transmission = 1.0;
  EXPECT_EQ(apply_degradation(clean, spec), clean);
}

TEST(Degradation, HazeFollowsScatteringModel) {
  const Tensor clean = synthesize_clean(4, 8, 8, 1);
  const auto spec = DegradationSpec::from_severity(DegradationKind::haze, 0.5, 2);
  EXPECT_DOUBLE_EQ(spec.transmission, 0.6);
  const Tensor out = apply_degradation(clean, spec);
  for (std::size_t i = 0; i < clean.numel(); ++i)
    EXPECT_NEAR(out[i], clean[i] * 0.6 + spec.airlight * 0.4, 1e-15);
}

TEST(Degradation, NoiseWithZeroSigmaIsIdentity) {
  const Tensor clean = synthesize_clean(6, 8, 8, 1);
  DegradationSpec spec = DegradationSpec::from_severity(DegradationKind::noise, 0.7, 3);
  spec.noise_sigma = 0.0;
  EXPECT_EQ(apply_degradation(clean, spec), clean);
}

TEST(Degradation, LowlightDarkens) {
  const Tensor clean = synthesize_clean(6, 8, 8, 1);
  const auto spec = DegradationSpec::from_severity(DegradationKind::lowlight, 0.8, 3);
  EXPECT_LT(spec.gain, 1.0);
  const Tensor out = apply_degradation(clean, spec);
  for (std::size_t i = 0; i < clean.numel(); ++i) EXPECT_LE(out[i], clean[i] + 1e-15);
}

TEST(Degradation, RainOnlyBrightens) {
  const Tensor clean = synthesize_clean(7, 16, 16, 1);
  const auto spec = DegradationSpec::from_severity(DegradationKind::rain, 1.0, 3);
  EXPECT_EQ(spec.streak_count, 12u);
  const Tensor out = apply_degradation(clean, spec);
  std::size_t brighter = 0;
  for (std::size_t i = 0; i < clean.numel(); ++i) {
    EXPECT_GE(out[i], clean[i]);
    brighter += out[i] > clean[i];
  }
  EXPECT_GT(brighter, 0u);
}

TEST(Degradation, OutputsStayInUnitRangeAndAreDeterministic) {
  const Tensor clean = synthesize_clean(8, 16, 16, 1);
  for (DegradationKind k : kAllKinds) {
    for (double s : {0.3, 1.0}) {
      const auto spec = DegradationSpec::from_severity(k, s, 99);
      const Tensor a = apply_degradation(clean, spec);
      EXPECT_EQ(a, apply_degradation(clean, spec));
      for (double v : a.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(GaussianKernel, SumsToOne) {
  for (double sigma : {0.3, 0.7, 1.5, 3.0}) {
    for (std::size_t r : {1u, 2u, 3u, 4u}) {
      const Tensor k = gaussian_kernel(sigma, r);
      EXPECT_NEAR(std::accumulate(k.data().begin(), k.data().end(), 0.0), 1.0, 1e-12);
    }
  }
  const Tensor delta = gaussian_kernel(0.0, 2);
  EXPECT_EQ(delta.at(2, 2), 1.0);
}

TEST(DegradationSpec, InvalidParametersAreParameterErrors) {
  const Tensor clean = synthesize_clean(1, 8, 8, 1);
  DegradationSpec spec;
  spec.severity = 1.5;
  EXPECT_THROW(apply_degradation(clean, spec), ParameterError);
  spec = {};
  spec.gain = 0.0;
  EXPECT_THROW(apply_degradation(clean, spec), ParameterError);
  spec = {};
  spec.transmission = -0.1;
  EXPECT_THROW(apply_degradation(clean, spec), ParameterError);
  EXPECT_THROW(DegradationSpec::from_severity(DegradationKind::blur, -0.2, 0), ParameterError);
  EXPECT_THROW(parse_degradation("fog"), ParameterError);
}

TEST(DegradationSpec, TextRoundTrip) {
  for (DegradationKind k : kAllKinds) {
    const auto spec = DegradationSpec::from_severity(k, 0.37, 123456789);
    EXPECT_EQ(DegradationSpec::from_text(spec.to_text()), spec);
  }
}

TEST(Dataset, SingleKindLabelsEverySample) {
  DatasetOptions o;
  o.count = 5;
  o.kinds = {DegradationKind::haze};
  const Dataset d = generate_dataset(o);
  ASSERT_EQ(d.samples.size(), 5u);
  for (const auto& s : d.samples) EXPECT_EQ(s.spec.kind, DegradationKind::haze);
}

TEST(Dataset, KindsAreCycled) {
  DatasetOptions o;
  o.count = 10;
  o.kinds = {DegradationKind::blur, DegradationKind::haze};
  const Dataset d = generate_dataset(o);
  std::size_t blur = 0;
  for (const auto& s : d.samples) blur += s.spec.kind == DegradationKind::blur;
  EXPECT_EQ(blur, 5u);
}

TEST(Dataset, SamplesAreIndependentOfCount) {
  DatasetOptions small, large;
  small.count = 3;
  large.count = 8;
  const Dataset a = generate_dataset(small), b = generate_dataset(large);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.samples[i].degraded, b.samples[i].degraded);
  EXPECT_EQ(generate_sample(large, 6).clean, b.samples[6].clean);
}

TEST(Dataset, RegenerateReadRewriteIsByteIdentical) {
  DatasetOptions o;
  o.count = 6;
  o.kinds = {DegradationKind::blur, DegradationKind::noise, DegradationKind::rain};
  o.seed = 77;
  const std::string a = temp_path("ds_a.mimp"), b = temp_path("ds_b.mimp"), c = temp_path("ds_c.mimp");
  build_dataset(o, a);
  build_dataset(o, b);
  write_dataset(c, read_dataset(a));
  EXPECT_EQ(read_bytes(a), read_bytes(b));
  EXPECT_EQ(read_bytes(a), read_bytes(c));
  EXPECT_EQ(read_bytes(a).substr(0, 4), "MIMP");
  for (const auto& p : {a, b, c}) std::filesystem::remove(p);
}

TEST(Dataset, PersistenceErrorsCarryThePath) {
  const std::string missing = temp_path("does_not_exist.mimp");
  try {
    read_dataset(missing);
    FAIL() << "expected PersistenceError";
  } catch (const PersistenceError& e) {
    EXPECT_EQ(e.path(), missing);
  }
  const std::string bad = temp_path("bad.mimp");
  std::ofstream(bad) << "MIMX";
  EXPECT_THROW(read_dataset(bad), PersistenceError);
  std::filesystem::remove(bad);
  EXPECT_THROW(write_dataset("/nonexistent_dir/x.mimp", {}), PersistenceError);
}

TEST(Dataset, OptionsValidation) {
  DatasetOptions o;
  o.count = 0;
  EXPECT_THROW(generate_dataset(o), ParameterError);
  o.count = 2;
  o.kinds.clear();
  EXPECT_THROW(generate_dataset(o), ParameterError);
}

TEST(Netpbm, WritesGraymapHeader) {
  const std::string path = temp_path("img.pgm");
  write_netpbm(path, Tensor({1, 2, 3}, 1.0));
  EXPECT_EQ(read_bytes(path), "P2\n3 2\n255\n255 255 255\n255 255 255\n");
  std::filesystem::remove(path);
}
