#include <gtest/gtest.h>

#include "fieldprobe/analysis.hpp"

using namespace fieldprobe;

namespace {

ParameterSpace space(std::size_t d) {
  ParameterSpace s;
  for (std::size_t j = 0; j < d; ++j) {
    s.lower.push_back(-1.0 - static_cast<double>(j));
    s.upper.push_back(3.0 + static_cast<double>(j));
    s.names.push_back("p" + std::to_string(j));
  }
  return s;
}

std::vector<Vec> uniform_samples(const ParameterSpace& s, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec> out;
  for (std::size_t i = 0; i < n; ++i) {
    Vec z(s.dim());
    for (std::size_t j = 0; j < s.dim(); ++j) z[j] = s.lower[j] + u(rng) * (s.upper[j] - s.lower[j]);
    out.push_back(z);
  }
  return out;
}

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

}  // namespace

TEST(BinSamples, CentreSampleHitsCentreBin) {
  const auto s = space(2);
  // box [-1,3] x [-2,4]; 33 bins so the centre lies inside bin 16
  const auto g = bin_samples({vec2(1.0, 1.0)}, s, {0, 1}, 33);
  EXPECT_EQ(g.total(), 1);
  EXPECT_EQ(g.at(16, 16), 1);
}

TEST(BinSamples, UpperBoundaryGoesToLastBin) {
  const auto s = space(2);
  const auto g = bin_samples({vec2(3.0, 4.0), vec2(-1.0, -2.0)}, s, {0, 1}, 8);
  EXPECT_EQ(g.at(7, 7), 1);
  EXPECT_EQ(g.at(0, 0), 1);
}

TEST(BinSamples, OutOfBoxSamplesAreNotCounted) {
  const auto s = space(2);
  const auto g = bin_samples({vec2(3.5, 0.0), vec2(0.0, 0.0), vec2(0.0, -2.5)}, s, {0, 1}, 8);
  EXPECT_EQ(g.total(), 1);
}

TEST(BinSamples, UniformConcentration) {
  const auto s = space(2);
  const auto g = bin_samples(uniform_samples(s, 32000, 1), s, {0, 1}, 32);
  EXPECT_EQ(g.total(), 32000);
  const auto [lo, hi] = std::minmax_element(g.counts.begin(), g.counts.end());
  ASSERT_GT(*lo, 0);
  // multinomial(32000, 1/1024): simulated 99.9% quantile of max/min is ~6.1
  EXPECT_LT(static_cast<double>(*hi) / static_cast<double>(*lo), 6.5);
  double chi2 = 0;
  for (auto c : g.counts) chi2 += (c - 31.25) * (c - 31.25) / 31.25;
  EXPECT_LT(chi2, 1131.2);  // chi-square(1023) at 0.01
}

TEST(BinSamples, ShiftByOneBinShiftsCounts) {
  const auto s = space(2);
  auto samples = uniform_samples(s, 2000, 2);
  for (auto& z : samples) z = vec2(0.5 + 0.5 * (z[0] - 1.0) / 2.0, 1.0 + 0.5 * (z[1] - 1.0) / 3.0);
  const auto a = bin_samples(samples, s, {0, 1}, 16);
  const double w0 = 4.0 / 16, w1 = 6.0 / 16;
  for (auto& z : samples) z += vec2(w0, w1);
  const auto b = bin_samples(samples, s, {0, 1}, 16);
  for (std::size_t i = 1; i + 1 < 16; ++i)
    for (std::size_t j = 1; j + 1 < 16; ++j) EXPECT_EQ(b.at(i, j), a.at(i - 1, j - 1));
}

TEST(BinSamples, RejectsBadArguments) {
  const auto s = space(2);
  EXPECT_THROW(bin_samples({}, s, {0, 1}, 1), ConfigError);
  EXPECT_THROW(bin_samples({}, s, {0, 2}, 8), ConfigError);
  EXPECT_THROW(bin_samples({}, s, {1, 1}, 8), ConfigError);
}

TEST(MarginalMatrix, PairCountsAndOrder) {
  for (std::size_t d : {2u, 3u, 4u}) {
    const auto s = space(d);
    const auto samples = uniform_samples(s, 500, d);
    const auto m = marginal_matrix(samples, s, 16);
    ASSERT_EQ(m.grids.size(), d * (d - 1) / 2);
    std::size_t idx = 0;
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = j + 1; k < d; ++k, ++idx) {
        EXPECT_EQ(m.grids[idx].pair, (std::array<std::size_t, 2>{j, k}));
        EXPECT_EQ(m.grids[idx].counts, bin_samples(samples, s, {j, k}, 16).counts);
      }
  }
}

TEST(MarginalMatrix, OneDimensionalGivesHistogram) {
  const auto s = space(1);
  const auto m = marginal_matrix(uniform_samples(s, 300, 3), s, 10);
  EXPECT_TRUE(m.grids.empty());
  ASSERT_EQ(m.histograms.size(), 1u);
  std::int64_t total = 0;
  for (auto c : m.histograms[0].counts) total += c;
  EXPECT_EQ(total, 300);
}

TEST(MarginalMatrix, ProgressiveConsistency) {
  const auto s = space(3);
  const auto all = uniform_samples(s, 1000, 4);
  auto acc = marginal_matrix({}, s, 8);
  for (std::size_t start = 0; start < all.size(); start += 100) {
    const std::vector<Vec> batch(all.begin() + static_cast<long>(start), all.begin() + static_cast<long>(start + 100));
    const auto part = marginal_matrix(batch, s, 8);
    for (std::size_t g = 0; g < acc.grids.size(); ++g)
      for (std::size_t i = 0; i < acc.grids[g].counts.size(); ++i) acc.grids[g].counts[i] += part.grids[g].counts[i];
  }
  const auto whole = marginal_matrix(all, s, 8);
  for (std::size_t g = 0; g < whole.grids.size(); ++g) EXPECT_EQ(acc.grids[g].counts, whole.grids[g].counts);
}

TEST(CompareDensities, IdenticalAndDisjoint) {
  const auto s = space(2);
  const auto a = uniform_samples(s, 400, 5);
  const auto [x, y] = compare_densities(a, a, s, {0, 1}, 8);
  EXPECT_EQ(x, y);
  EXPECT_EQ(*std::max_element(x.begin(), x.end()), 1.0);

  std::vector<Vec> left, right;
  for (const auto& z : a) (z[0] < 1.0 ? left : right).push_back(z);
  const auto [l, r] = compare_densities(left, right, s, {0, 1}, 8);
  EXPECT_EQ(*std::max_element(l.begin(), l.end()), 1.0);
  EXPECT_EQ(*std::max_element(r.begin(), r.end()), 1.0);
  for (std::size_t i = 0; i < l.size(); ++i) EXPECT_FALSE(l[i] > 0 && r[i] > 0);
  EXPECT_THROW(compare_densities({}, a, s, {0, 1}, 8), StateError);
}

TEST(HeatmapJson, WireSchema) {
  const auto s = space(2);
  const auto j = to_json(bin_samples({vec2(0, 0)}, s, {0, 1}, 4));
  EXPECT_EQ(j["pair"], nlohmann::json({0, 1}));
  EXPECT_EQ(j["resolution"], 4);
  EXPECT_EQ(j["extent"][1][1], 4.0);
  EXPECT_EQ(j["counts"].size(), 16u);
}

TEST(TotalVariation, Basics) {
  EXPECT_EQ(total_variation({1, 2, 3}, {2, 4, 6}), 0.0);
  EXPECT_DOUBLE_EQ(total_variation({1, 0}, {0, 1}), 1.0);
  EXPECT_THROW(total_variation({1}, {1, 2}), ShapeError);
}
