#ifndef FIELDPROBE_SYNTH_HPP
#define FIELDPROBE_SYNTH_HPP

// Closed-form parameterized flow fields used as desk-scale ensembles and as
// ground truth for every accuracy check downstream.
//
//   vortex-street-toy    d=2  uniform flow (1, 0) plus one vortex centred at
//                             (z1 + U t, z2), core radius r_c = 0.15
//   viscosity-decay-toy  d=1  Taylor-Green vortex damped by exp(-z t)
//   vortex-pair-toy      d=4  product construction: two independent vortices

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>

#include "fieldprobe/ensemble.hpp"

namespace fieldprobe {

enum class Family { vortex_street, viscosity_decay, vortex_pair };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::vortex_street: return "vortex-street-toy";
    case Family::viscosity_decay: return "viscosity-decay-toy";
    case Family::vortex_pair: return "vortex-pair-toy";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "vortex-street-toy") return Family::vortex_street;
  if (s == "viscosity-decay-toy") return Family::viscosity_decay;
  if (s == "vortex-pair-toy") return Family::vortex_pair;
  throw ConfigError("unknown family '" + s + "'");
}

struct AnalyticFamilyConfig {
  Family family = Family::vortex_street;
  ParameterSpace space;
  DomainSpec domain;
  std::uint64_t seed = 0;
};

namespace synth {

inline constexpr double kCoreRadius = 0.15;
inline constexpr double kAdvection = 0.8;
inline constexpr double kPi = 3.14159265358979323846;

/// Adds one vortex centred at (cx, cy) into (u, v); optionally accumulates
/// the derivatives with respect to the centre into jac (2 x 2 block).
inline void add_vortex(double x, double y, double cx, double cy, double& u, double& v,
                       double* du_dc = nullptr, double* dv_dc = nullptr) {
  const double rc2 = kCoreRadius * kCoreRadius;
  const double dx = x - cx, dy = y - cy;
  const double g = std::exp(1.0 - (dx * dx + dy * dy) / rc2) / kCoreRadius;
  u += -g * dy;
  v += g * dx;
  if (du_dc != nullptr) {
    const double dg_dcx = g * 2.0 * dx / rc2;
    const double dg_dcy = g * 2.0 * dy / rc2;
    du_dc[0] = -dy * dg_dcx;
    du_dc[1] = -dy * dg_dcy + g;
    dv_dc[0] = dx * dg_dcx - g;
    dv_dc[1] = dx * dg_dcy;
  }
}

}  // namespace synth

/// Default parameter box and sampling grid for a family.
inline AnalyticFamilyConfig default_family_config(Family family, std::uint64_t seed = 0) {
  AnalyticFamilyConfig cfg;
  cfg.family = family;
  cfg.seed = seed;
  cfg.domain.spatial_dims = 2;
  cfg.domain.has_time = true;
  cfg.domain.output_dim = 2;
  cfg.domain.bounds = {{0.0, 1.0}, {-1.0, 1.0}, {-1.0, 1.0}};
  switch (family) {
    case Family::vortex_street:
      cfg.space = {{-0.6, -0.6}, {0.2, 0.6}, {"center_x", "center_y"}};
      cfg.domain.resolution = {9, 48, 48};
      break;
    case Family::viscosity_decay:
      cfg.space = {{0.0}, {2.0}, {"decay"}};
      cfg.domain.resolution = {9, 32, 32};
      break;
    case Family::vortex_pair:
      cfg.space = {{-0.6, 0.1, -0.6, -0.7},
                   {0.2, 0.7, 0.2, -0.1},
                   {"center1_x", "center1_y", "center2_x", "center2_y"}};
      cfg.domain.resolution = {9, 48, 48};
      break;
  }
  return cfg;
}

namespace detail {

inline void check_inside(const AnalyticFamilyConfig& cfg, const Vec& x, const Vec& z) {
  constexpr double tol = 1e-9;
  const auto& d = cfg.domain;
  if (static_cast<std::size_t>(x.size()) != d.coord_dim() ||
      static_cast<std::size_t>(z.size()) != cfg.space.dim())
    throw RangeError("analytic field: wrong input dimension");
  auto outside = [&](double v, const std::array<double, 2>& b) {
    const double pad = tol * (b[1] - b[0]);
    return !(v >= b[0] - pad && v <= b[1] + pad);
  };
  if (outside(x[0], d.x_bounds()) || outside(x[1], d.y_bounds()) ||
      (d.has_time && outside(x[2], d.t_bounds())))
    throw RangeError("analytic field: domain point outside the domain box");
  for (std::size_t j = 0; j < cfg.space.dim(); ++j)
    if (outside(z[j], {cfg.space.lower[j], cfg.space.upper[j]}))
      throw RangeError("analytic field: parameter outside the parameter box");
}

}  // namespace detail

/// Field value at physical point x = (x, y, t) and physical parameters z.
/// When jac is given it receives d(output)/dz as an n x d matrix.
inline Vec eval_analytic_field(const AnalyticFamilyConfig& cfg, const Vec& x, const Vec& z,
                               Eigen::MatrixXd* jac = nullptr) {
  detail::check_inside(cfg, x, z);
  const double px = x[0], py = x[1];
  const double t = cfg.domain.has_time ? x[2] : 0.0;
  Vec out(2);
  if (jac != nullptr) jac->setZero(2, static_cast<Eigen::Index>(cfg.space.dim()));
  switch (cfg.family) {
    case Family::vortex_street:
    case Family::vortex_pair: {
      double u = 1.0, v = 0.0;
      const std::size_t n_vortex = cfg.family == Family::vortex_pair ? 2 : 1;
      for (std::size_t k = 0; k < n_vortex; ++k) {
        double du[2], dv[2];
        const double cx = z[2 * k] + synth::kAdvection * t;
        const double cy = z[2 * k + 1];
        synth::add_vortex(px, py, cx, cy, u, v, du, dv);
        if (jac != nullptr) {
          (*jac)(0, 2 * k) = du[0];
          (*jac)(0, 2 * k + 1) = du[1];
          (*jac)(1, 2 * k) = dv[0];
          (*jac)(1, 2 * k + 1) = dv[1];
        }
      }
      out << u, v;
      break;
    }
    case Family::viscosity_decay: {
      const double decay = std::exp(-z[0] * t);
      const double u = std::sin(synth::kPi * px) * std::cos(synth::kPi * py);
      const double v = -std::cos(synth::kPi * px) * std::sin(synth::kPi * py);
      out << u * decay, v * decay;
      if (jac != nullptr) {
        (*jac)(0, 0) = -t * u * decay;
        (*jac)(1, 0) = -t * v * decay;
      }
      break;
    }
  }
  return out;
}

/// Jacobian of the analytic field with respect to normalized parameters at
/// normalized coordinates (m x B), laid out like jacobian_wrt_params:
/// row k*n + c, one column per parameter.
inline Mat analytic_jacobian_normalized(const AnalyticFamilyConfig& cfg, const Mat& coords,
                                        const Vec& z_normalized) {
  const Vec z = cfg.space.denormalize(z_normalized);
  const auto d = static_cast<Eigen::Index>(cfg.space.dim());
  Vec half(d);
  for (Eigen::Index j = 0; j < d; ++j) half[j] = 0.5 * (cfg.space.upper[j] - cfg.space.lower[j]);
  Mat out(2 * coords.cols(), d);
  Mat jac;
  for (Eigen::Index k = 0; k < coords.cols(); ++k) {
    eval_analytic_field(cfg, cfg.domain.denormalize_point(coords.col(k)), z, &jac);
    out.middleRows(2 * k, 2) = jac * half.asDiagonal();
  }
  return out;
}

/// Samples the field on the full (t, y, x, component) grid.
inline std::vector<float> sample_analytic_grid(const AnalyticFamilyConfig& cfg, const Vec& z) {
  const auto& d = cfg.domain;
  std::vector<float> field(d.values_per_member());
  for (std::size_t p = 0; p < d.points_per_member(); ++p) {
    const Vec y = eval_analytic_field(cfg, d.grid_point(p), z);
    for (std::size_t c = 0; c < d.output_dim; ++c)
      field[p * d.output_dim + c] = static_cast<float>(y[static_cast<Eigen::Index>(c)]);
  }
  return field;
}

struct GeneratedEnsemble {
  EnsembleDataset train;
  EnsembleDataset test;
};

/// Writes <out>/train and <out>/test with parameters drawn uniformly from the
/// box. Train draws come first from the seeded stream, then test draws.
inline GeneratedEnsemble generate_ensemble(const AnalyticFamilyConfig& cfg, std::size_t n_train,
                                           std::size_t n_test, const fs::path& out) {
  if (n_train < 1 || n_test < 1) throw ConfigError("n_train and n_test must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&] {
    Vec z(cfg.space.dim());
    for (std::size_t j = 0; j < cfg.space.dim(); ++j)
      z[j] = cfg.space.lower[j] + unit(rng) * (cfg.space.upper[j] - cfg.space.lower[j]);
    return z;
  };
  auto fill = [&](const fs::path& dir, std::size_t n) {
    std::error_code ec;
    fs::remove_all(dir, ec);
    auto ds = EnsembleDataset::create(dir, cfg.space, cfg.domain);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec z = draw();
      ds.write_member(z, sample_analytic_grid(cfg, z));
    }
    return ds;
  };
  auto train = fill(out / "train", n_train);
  auto test = fill(out / "test", n_test);
  return {std::move(train), std::move(test)};
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_SYNTH_HPP
