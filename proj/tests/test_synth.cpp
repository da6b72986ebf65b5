#include <cmath>

#include <gtest/gtest.h>

#include "fieldprobe/synth.hpp"
#include "test_util.hpp"

using namespace fieldprobe;
using fieldprobe::testing::TempDir;

namespace {

Vec random_in(const ParameterSpace& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec z(s.dim());
  for (std::size_t j = 0; j < s.dim(); ++j) z[j] = s.lower[j] + u(rng) * (s.upper[j] - s.lower[j]);
  return z;
}

Vec random_point(const DomainSpec& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec p(d.coord_dim());
  for (std::size_t a = 0; a < d.coord_dim(); ++a) p[a] = u(rng);
  return d.denormalize_point(p);
}

}  // namespace

TEST(Synth, ViscosityAtZeroDecayIsPlainTaylorGreen) {
  const auto cfg = default_family_config(Family::viscosity_decay);
  Vec z(1);
  z << 0.0;
  Vec x(3);
  x << 0.3, -0.2, 0.9;
  const Vec f = eval_analytic_field(cfg, x, z);
  EXPECT_DOUBLE_EQ(f[0], std::sin(synth::kPi * 0.3) * std::cos(synth::kPi * -0.2));
  EXPECT_DOUBLE_EQ(f[1], -std::cos(synth::kPi * 0.3) * std::sin(synth::kPi * -0.2));
}

TEST(Synth, VortexFarFieldIsBackgroundFlow) {
  const auto cfg = default_family_config(Family::vortex_street);
  Vec z(2);
  z << -0.5, -0.5;
  Vec x(3);
  x << 0.9, 0.9, 0.0;
  const Vec f = eval_analytic_field(cfg, x, z);
  EXPECT_NEAR(f[0], 1.0, 1e-3);
  EXPECT_NEAR(f[1], 0.0, 1e-3);
}

TEST(Synth, OutOfBoxInputIsRangeError) {
  const auto cfg = default_family_config(Family::vortex_street);
  Vec z(2);
  z << 5.0, 0.0;
  Vec x(3);
  x << 0.0, 0.0, 0.5;
  EXPECT_THROW(eval_analytic_field(cfg, x, z), RangeError);
  z << 0.0, 0.0;
  x << 0.0, 0.0, 1.5;
  EXPECT_THROW(eval_analytic_field(cfg, x, z), RangeError);
}

TEST(Synth, ParameterGradientMatchesCentralDifferences) {
  std::mt19937_64 rng(11);
  for (Family fam : {Family::vortex_street, Family::viscosity_decay, Family::vortex_pair}) {
    const auto cfg = default_family_config(fam);
    for (int trial = 0; trial < 10; ++trial) {
      const Vec x = random_point(cfg.domain, rng);
      // keep the stencil inside the box
      Vec z = cfg.space.denormalize(0.9 * cfg.space.normalize(random_in(cfg.space, rng)));
      Eigen::MatrixXd jac;
      eval_analytic_field(cfg, x, z, &jac);
      for (std::size_t j = 0; j < cfg.space.dim(); ++j) {
        const double h = 1e-5;
        Vec zp = z, zm = z;
        zp[j] += h;
        zm[j] -= h;
        const Vec fd = (eval_analytic_field(cfg, x, zp) - eval_analytic_field(cfg, x, zm)) / (2 * h);
        for (int c = 0; c < 2; ++c) {
          const double scale = std::max(1.0, jac.col(j).cwiseAbs().maxCoeff());
          EXPECT_LT(std::abs(fd[c] - jac(c, j)) / scale, 1e-6)
              << family_name(fam) << " trial " << trial << " dim " << j;
        }
      }
    }
  }
}

TEST(Synth, FieldMagnitudeIsOrderOne) {
  const auto cfg = default_family_config(Family::vortex_street);
  std::mt19937_64 rng(2);
  double total = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i)
    total += eval_analytic_field(cfg, random_point(cfg.domain, rng), random_in(cfg.space, rng)).norm();
  EXPECT_NEAR(total / n, 1.0, 0.1);
}

TEST(Synth, GenerateIsDeterministicAndInBox) {
  TempDir a, b;
  auto cfg = default_family_config(Family::vortex_street, 99);
  cfg.domain.resolution = {3, 8, 8};
  const auto ga = generate_ensemble(cfg, 60, 40, a.path());
  const auto gb = generate_ensemble(cfg, 60, 40, b.path());
  EXPECT_EQ(ga.train.count(), 60u);
  EXPECT_EQ(ga.test.count(), 40u);
  for (std::size_t i = 0; i < 60; ++i) {
    EXPECT_TRUE(cfg.space.contains(ga.train.members()[i].z));
    EXPECT_EQ(ga.train.members()[i].z, gb.train.members()[i].z);
    EXPECT_EQ(ga.train.load_member(i), gb.train.load_member(i));
  }
  for (const auto& m : ga.test.members()) EXPECT_TRUE(cfg.space.contains(m.z));
  // train and test are distinct draws
  EXPECT_NE(ga.train.members()[0].z, ga.test.members()[0].z);
}

TEST(Synth, FullScaleSplitAccepted) {
  TempDir tmp;
  auto cfg = default_family_config(Family::vortex_street, 1);
  cfg.domain.resolution = {1, 2, 2};
  const auto g = generate_ensemble(cfg, 100, 900, tmp.path());
  EXPECT_EQ(g.train.count(), 100u);
  EXPECT_EQ(g.test.count(), 900u);
}

TEST(Synth, RejectsEmptySplits) {
  TempDir tmp;
  const auto cfg = default_family_config(Family::viscosity_decay);
  EXPECT_THROW(generate_ensemble(cfg, 0, 1, tmp.path()), ConfigError);
}
