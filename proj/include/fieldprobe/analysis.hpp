#ifndef FIELDPROBE_ANALYSIS_HPP
#define FIELDPROBE_ANALYSIS_HPP

// Binned views of sample sets: 2-D marginal heatmaps over parameter pairs,
// 1-D histograms for single-parameter spaces, and paired normalized grids for
// comparing two feature posteriors.

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fieldprobe/ensemble.hpp"
#include "fieldprobe/hmc.hpp"

namespace fieldprobe {

/// counts[a * resolution + b] holds bin a along pair[0] and bin b along pair[1].
struct HeatmapGrid {
  std::array<std::size_t, 2> pair{0, 1};
  std::size_t resolution = 32;
  std::array<std::array<double, 2>, 2> extent{};
  std::vector<std::int64_t> counts;

  std::int64_t at(std::size_t a, std::size_t b) const { return counts[a * resolution + b]; }
  std::int64_t total() const {
    std::int64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

struct Histogram1D {
  std::size_t dim = 0;
  std::size_t resolution = 32;
  std::array<double, 2> extent{};
  std::vector<std::int64_t> counts;
};

/// Bin index of v in [lo, hi] with res bins; the upper edge goes to the last
/// bin; -1 outside.
inline long bin_index(double v, double lo, double hi, std::size_t res) {
  if (!(v >= lo && v <= hi)) return -1;
  const auto b = static_cast<long>(std::floor((v - lo) / (hi - lo) * static_cast<double>(res)));
  return std::min(b, static_cast<long>(res) - 1);
}

/// Bins physical z values over the box; samples outside the box are skipped.
inline HeatmapGrid bin_samples(const std::vector<Vec>& samples, const ParameterSpace& space,
                               std::array<std::size_t, 2> pair, std::size_t resolution = 32) {
  if (resolution < 2) throw ConfigError("heatmap resolution must be >= 2");
  if (pair[0] >= space.dim() || pair[1] >= space.dim() || pair[0] == pair[1])
    throw ConfigError("invalid parameter pair");
  HeatmapGrid g;
  g.pair = pair;
  g.resolution = resolution;
  for (int a = 0; a < 2; ++a) g.extent[a] = {space.lower[pair[a]], space.upper[pair[a]]};
  g.counts.assign(resolution * resolution, 0);
  for (const auto& z : samples) {
    if (!space.contains(z)) continue;
    const long a = bin_index(z[static_cast<Eigen::Index>(pair[0])], g.extent[0][0], g.extent[0][1], resolution);
    const long b = bin_index(z[static_cast<Eigen::Index>(pair[1])], g.extent[1][0], g.extent[1][1], resolution);
    ++g.counts[static_cast<std::size_t>(a) * resolution + static_cast<std::size_t>(b)];
  }
  return g;
}

inline Histogram1D histogram_1d(const std::vector<Vec>& samples, const ParameterSpace& space,
                                std::size_t dim, std::size_t resolution = 32) {
  if (resolution < 2) throw ConfigError("histogram resolution must be >= 2");
  if (dim >= space.dim()) throw ConfigError("invalid parameter index");
  Histogram1D h;
  h.dim = dim;
  h.resolution = resolution;
  h.extent = {space.lower[dim], space.upper[dim]};
  h.counts.assign(resolution, 0);
  for (const auto& z : samples) {
    if (!space.contains(z)) continue;
    ++h.counts[static_cast<std::size_t>(
        bin_index(z[static_cast<Eigen::Index>(dim)], h.extent[0], h.extent[1], resolution))];
  }
  return h;
}

inline std::vector<Vec> sample_values(const std::vector<Sample>& samples) {
  std::vector<Vec> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.z);
  return out;
}

struct Marginals {
  std::vector<HeatmapGrid> grids;      // d >= 2: pairs (j < k) in lexicographic order
  std::vector<Histogram1D> histograms; // d == 1: one histogram
};

inline Marginals marginal_matrix(const std::vector<Vec>& samples, const ParameterSpace& space,
                                 std::size_t resolution = 32) {
  Marginals m;
  const std::size_t d = space.dim();
  if (d == 1) {
    m.histograms.push_back(histogram_1d(samples, space, 0, resolution));
    return m;
  }
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = j + 1; k < d; ++k) m.grids.push_back(bin_samples(samples, space, {j, k}, resolution));
  return m;
}

/// Each grid scaled by its own maximum count (all-zero grids stay zero).
inline std::pair<std::vector<double>, std::vector<double>> compare_densities(
    const std::vector<Vec>& a, const std::vector<Vec>& b, const ParameterSpace& space,
    std::array<std::size_t, 2> pair, std::size_t resolution = 32) {
  if (a.empty() || b.empty()) throw StateError("comparison needs two nonempty sample sets");
  auto normalized = [&](const std::vector<Vec>& s) {
    const auto g = bin_samples(s, space, pair, resolution);
    std::int64_t top = 0;
    for (auto c : g.counts) top = std::max(top, c);
    std::vector<double> out(g.counts.size(), 0.0);
    if (top > 0)
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<double>(g.counts[i]) / static_cast<double>(top);
    return out;
  };
  return {normalized(a), normalized(b)};
}

/// Total variation distance between two count (or weight) vectors after
/// normalizing each to unit mass.
inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw ShapeError("total variation needs equal-length histograms");
  double sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) sp += p[i], sq += q[i];
  if (!(sp > 0) || !(sq > 0)) throw StateError("total variation of an empty histogram");
  double tv = 0;
  for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] / sp - q[i] / sq);
  return 0.5 * tv;
}

inline nlohmann::json to_json(const HeatmapGrid& g) {
  return {{"pair", {g.pair[0], g.pair[1]}},
          {"resolution", g.resolution},
          {"extent", {{g.extent[0][0], g.extent[0][1]}, {g.extent[1][0], g.extent[1][1]}}},
          {"counts", g.counts}};
}

inline nlohmann::json to_json(const Histogram1D& h) {
  return {{"dim", h.dim},
          {"resolution", h.resolution},
          {"extent", {h.extent[0], h.extent[1]}},
          {"counts", h.counts}};
}

inline nlohmann::json to_json(const Marginals& m) {
  nlohmann::json grids = nlohmann::json::array(), hists = nlohmann::json::array();
  for (const auto& g : m.grids) grids.push_back(to_json(g));
  for (const auto& h : m.histograms) hists.push_back(to_json(h));
  return {{"grids", grids}, {"histograms", hists}};
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_ANALYSIS_HPP
