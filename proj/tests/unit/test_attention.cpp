#include <gtest/gtest.h>

#include <cmath>

#include "mimdit/attention.hpp"
#include "mimdit/errors.hpp"
#include "mimdit/random.hpp"

using namespace mimdit;

namespace {

using Matrix = std::vector<std::vector<double>>;

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.extent(0), std::vector<double>(t.extent(1)));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) m[i][j] = t.at(i, j);
  return m;
}

Matrix affine(const Matrix& x, const Tensor& w, const Tensor& b) {
  Matrix out(x.size(), std::vector<double>(w.extent(1)));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w.extent(1); ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < w.extent(0); ++k) s += x[i][k] * w.at(k, j);
      out[i][j] = s;
    }
  return out;
}

std::vector<double> softmax_row(std::vector<double> v) {
  double mx = v[0];
  for (double e : v) mx = std::max(mx, e);
  double total = 0.0;
  for (double& e : v) total += (e = std::exp(e - mx));
  for (double& e : v) e /= total;
  return v;
}

/// Multi-head attention restricted to tokens sharing a group id.
Matrix grouped_attention_oracle(const Matrix& x, const ExpertParams& p,
                                const std::vector<std::size_t>& group) {
  const Matrix q = affine(x, p.wq, p.bq), k = affine(x, p.wk, p.bk), v = affine(x, p.wv, p.bv);
  const std::size_t n = x.size(), d = x[0].size(), dh = d / p.heads;
  Matrix o(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < p.heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> peers;
      std::vector<double> scores;
      for (std::size_t j = 0; j < n; ++j) {
        if (group[j] != group[i]) continue;
        double s = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q[i][c] * k[j][c];
        peers.push_back(j);
        scores.push_back(s / std::sqrt(static_cast<double>(dh)));
      }
      const auto a = softmax_row(scores);
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c)
        for (std::size_t m = 0; m < peers.size(); ++m) o[i][c] += a[m] * v[peers[m]][c];
    }
  }
  return affine(o, p.wo, p.bo);
}

Matrix channel_oracle(const Matrix& x, const ExpertParams& p) {
  const Matrix q = affine(x, p.wq, p.bq), k = affine(x, p.wk, p.bk), v = affine(x, p.wv, p.bv);
  const std::size_t n = x.size(), d = x[0].size(), dh = d / p.heads;
  auto column_norm = [&](const Matrix& m, std::size_t c) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += m[i][c] * m[i][c];
    return std::sqrt(s);
  };
  Matrix o(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < p.heads; ++h) {
    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
      std::vector<double> scores;
      for (std::size_t c2 = h * dh; c2 < (h + 1) * dh; ++c2) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += q[i][c] * k[i][c2];
        scores.push_back(p.temperature[h] * s / (column_norm(q, c) * column_norm(k, c2)));
      }
      const auto a = softmax_row(scores);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < dh; ++m) o[i][c] += a[m] * v[i][h * dh + m];
    }
  }
  return affine(o, p.wo, p.bo);
}

double max_diff(const Tensor& t, const Matrix& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) worst = std::max(worst, std::abs(t.at(i, j) - m[i][j]));
  return worst;
}

ExpertParams random_expert(Mechanism mech, std::size_t dim, std::size_t heads, Rng& rng) {
  ExpertParams p = ExpertParams::init(mech, dim, heads, 4, rng);
  p.for_each_parameter("", [&](const std::string&, Tensor& t) {
    for (auto& v : t.data()) v = std::normal_distribution<double>(0.0, 0.5)(rng);
  });
  return p;
}

Tensor run(Mechanism, ExpertParams& p, const Tensor& x, Grid grid, ExpertContext ctx = {}) {
  Graph g(false);
  return apply_expert({g.constant(x), grid}, p, ctx).tokens.value();
}

}  // namespace

TEST(SpatialAttention, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed);
    const Grid grid{2, 3};
    ExpertParams p = random_expert(Mechanism::spatial, 8, 2, rng);
    Tensor x = normal_tensor({grid.size(), 8}, 1.0, rng);
    const std::vector<std::size_t> one_group(grid.size(), 0);
    EXPECT_LE(max_diff(run(Mechanism::spatial, p, x, grid), grouped_attention_oracle(to_matrix(x), p, one_group)),
              1e-12);
  }
}

TEST(ChannelAttention, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_rng(seed);
    const Grid grid{2, 2};
    ExpertParams p = random_expert(Mechanism::channel, 8, 2, rng);
    Tensor x = normal_tensor({grid.size(), 8}, 1.0, rng);
    EXPECT_LE(max_diff(run(Mechanism::channel, p, x, grid), channel_oracle(to_matrix(x), p)), 1e-12);
  }
}

TEST(ChannelAttention, TemperatureStartsAtOnePerHead) {
  Rng rng = make_rng(0);
  ExpertParams p = ExpertParams::init(Mechanism::channel, 8, 2, 4, rng);
  ASSERT_EQ(p.temperature.numel(), 2u);
  EXPECT_EQ(p.temperature[0], 1.0);
  EXPECT_EQ(p.temperature[1], 1.0);
}

TEST(SwinAttention, MatchesShiftedWindowOracle) {
  const Grid grid{4, 4};
  const std::size_t w = 2;
  for (std::size_t shift : {0u, 1u}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng = make_rng(seed, shift);
      ExpertParams p = random_expert(Mechanism::swin, 8, 2, rng);
      Tensor x = normal_tensor({grid.size(), 8}, 1.0, rng);
      // A token at (r, c) belongs to the window containing its shifted coordinates.
      std::vector<std::size_t> group(grid.size());
      for (std::size_t r = 0; r < grid.height; ++r)
        for (std::size_t c = 0; c < grid.width; ++c) {
          const std::size_t sr = (r + grid.height - shift) % grid.height;
          const std::size_t sc = (c + grid.width - shift) % grid.width;
          group[r * grid.width + c] = (sr / w) * (grid.width / w) + sc / w;
        }
      const Tensor y = run(Mechanism::swin, p, x, grid, {w, shift});
      EXPECT_LE(max_diff(y, grouped_attention_oracle(to_matrix(x), p, group)), 1e-12) << shift;
    }
  }
}

TEST(SwinAttention, WholeGridWindowEqualsSpatialAttention) {
  Rng rng = make_rng(4);
  const Grid grid{2, 2};
  ExpertParams p = random_expert(Mechanism::swin, 8, 1, rng);
  Tensor x = normal_tensor({grid.size(), 8}, 1.0, rng);
  const Tensor a = run(Mechanism::swin, p, x, grid, {2, 0});
  p.mechanism = Mechanism::spatial;
  EXPECT_LE(max_abs_difference(a, run(Mechanism::spatial, p, x, grid)), 1e-14);
}

TEST(SwinAttention, ShiftScheduleAlternates) {
  EXPECT_EQ(swin_shift_for_use(0, 4), 0u);
  EXPECT_EQ(swin_shift_for_use(1, 4), 2u);
  EXPECT_EQ(swin_shift_for_use(2, 4), 0u);
}

TEST(WindowPartition, RoundTripIsBitExact) {
  Rng rng = make_rng(8);
  for (const Grid grid : {Grid{4, 4}, Grid{4, 6}, Grid{6, 2}}) {
    for (std::size_t shift : {0u, 1u}) {
      Tensor x = normal_tensor({grid.size(), 5}, 1.0, rng);
      const Tensor w = window_partition(x, grid, 2, shift);
      EXPECT_EQ(window_reverse(w, grid, 2, shift), x);
    }
  }
}

TEST(WindowPartition, GathersWindowsInRowMajorOrder) {
  const Grid grid{4, 4};
  Tensor x({16, 1});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  const Tensor w = window_partition(x, grid, 2, 0);
  const std::vector<double> expected{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  EXPECT_EQ(w.values(), expected);
  const Tensor s = window_partition(x, grid, 2, 1);
  EXPECT_EQ(s[0], 5.0);  // the shifted grid starts at (1, 1)
}

TEST(WindowPartition, InvalidWindowIsConfigurationError) {
  EXPECT_THROW(check_window({4, 4}, 3, 0), ConfigurationError);
  EXPECT_THROW(check_window({4, 4}, 2, 2), ConfigurationError);
  EXPECT_THROW(check_window({4, 4}, 0, 0), ConfigurationError);
}

TEST(SqueezeExcitation, MatchesLoopOracle) {
  Rng rng = make_rng(6);
  const Grid grid{2, 2};
  ExpertParams p = random_expert(Mechanism::se, 8, 1, rng);
  Tensor x = normal_tensor({grid.size(), 8}, 1.0, rng);
  const Tensor y = run(Mechanism::se, p, x, grid);
  std::vector<double> s(8, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 8; ++c) s[c] += x.at(i, c) / 4.0;
  const Matrix hidden = affine({s}, p.w1, p.b1);
  Matrix hg = hidden;
  for (double& v : hg[0]) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  const Matrix e = affine(hg, p.w2, p.b2);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 8; ++c) {
      const double gate = 1.0 / (1.0 + std::exp(-e[0][c]));
      EXPECT_NEAR(y.at(i, c), x.at(i, c) * gate, 1e-12);
    }
}

TEST(Experts, PreserveShapeAndRejectWrongWidth) {
  Rng rng = make_rng(1);
  const Grid grid{2, 2};
  for (Mechanism m : {Mechanism::spatial, Mechanism::channel, Mechanism::swin, Mechanism::se}) {
    ExpertParams p = ExpertParams::init(m, 8, 2, 4, rng);
    Tensor x = normal_tensor({4, 8}, 1.0, rng);
    EXPECT_EQ(run(m, p, x, grid).shape(), x.shape()) << mechanism_name(m);
    EXPECT_THROW(run(m, p, Tensor({4, 6}), grid), DimensionError) << mechanism_name(m);
  }
}

TEST(Experts, MechanismNamesRoundTrip) {
  for (Mechanism m : {Mechanism::spatial, Mechanism::channel, Mechanism::swin, Mechanism::se})
    EXPECT_EQ(parse_mechanism(mechanism_name(m)), m);
}
