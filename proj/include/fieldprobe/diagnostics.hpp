#ifndef FIELDPROBE_DIAGNOSTICS_HPP
#define FIELDPROBE_DIAGNOSTICS_HPP

// Evaluation: PSNR, sparsification curves with pluggable scorers, split-R̂,
// MMD between sample sets, and normalized feature-distance (NLL) histograms.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fieldprobe/analysis.hpp"
#include "fieldprobe/hmc.hpp"

namespace fieldprobe {

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::int64_t> counts;
  std::size_t skipped = 0;    // non-finite values
};

/// Equal-width histogram on [lo, hi]; values outside are clamped into the end
/// bins. With lo == hi everything lands in the first bin.
inline Histogram make_histogram(const std::vector<double>& values, std::size_t bins, double lo,
                                double hi) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(lo + width * static_cast<double>(i));
  for (double v : values) {
    if (!std::isfinite(v)) {
      ++h.skipped;
      continue;
    }
    auto b = static_cast<long>(std::floor((v - lo) / width));
    b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

/// Histogram spanning the finite range of the values.
inline Histogram auto_histogram(const std::vector<double>& values, std::size_t bins) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : values)
    if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  if (!std::isfinite(lo)) lo = hi = 0;
  return make_histogram(values, bins, lo, hi);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw StateError("median of an empty set");
  const auto mid = v.begin() + static_cast<long>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw StateError("quantile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double f = pos - static_cast<double>(i);
  return i + 1 < v.size() ? v[i] * (1 - f) + v[i + 1] * f : v[i];
}

inline nlohmann::json to_json(const Histogram& h) {
  return {{"edges", h.edges}, {"counts", h.counts}, {"skipped", h.skipped}};
}

inline std::string to_csv(const Histogram& h) {
  std::ostringstream out;
  out.precision(17);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    out << h.edges[i] << ',' << h.edges[i + 1] << ',' << h.counts[i] << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// PSNR

template <typename A, typename B>
double rmse(std::span<const A> pred, std::span<const B> truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ShapeError("rmse needs equal nonempty arrays");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

/// 20 log10(extent / RMSE); +infinity when the arrays agree exactly.
template <typename A, typename B>
double psnr(std::span<const A> pred, std::span<const B> truth, double extent) {
  if (!(extent > 0)) throw ConfigError("psnr extent must be > 0");
  const double e = rmse(pred, truth);
  if (e == 0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(extent / e);
}

inline double psnr(const std::vector<float>& pred, const std::vector<float>& truth, double extent) {
  return psnr(std::span<const float>(pred), std::span<const float>(truth), extent);
}

/// max - min over every stored field value of the dataset.
inline double dataset_extent(const EnsembleDataset& ds) {
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const auto f = ds.load_member(i);
    const auto [a, b] = std::minmax_element(f.begin(), f.end());
    lo = std::min(lo, *a);
    hi = std::max(hi, *b);
  }
  if (!(hi > lo)) throw StateError("dataset has no value range");
  return static_cast<double>(hi) - static_cast<double>(lo);
}

/// Mean Euclidean norm of the stored output vectors.
inline double ensemble_mean_norm(const EnsembleDataset& ds) {
  const std::size_t n = ds.domain().output_dim;
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const auto f = ds.load_member(i);
    for (std::size_t p = 0; p + n <= f.size(); p += n) {
      double s = 0;
      for (std::size_t c = 0; c < n; ++c) s += static_cast<double>(f[p + c]) * f[p + c];
      sum += std::sqrt(s);
      ++count;
    }
  }
  if (count == 0) throw StateError("empty dataset");
  return sum / static_cast<double>(count);
}

struct MemberErrors {
  std::vector<Vec> z;  // normalized
  std::vector<double> psnr;
  std::vector<double> rmse;
};

/// Surrogate vs stored field for every member.
inline MemberErrors member_errors(const SurrogateModel& model, const EnsembleDataset& ds, double extent) {
  MemberErrors e;
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const Vec z = ds.space().normalize(ds.member(i).z);
    const auto pred = predict_grid(model, z);
    const auto truth = ds.load_member(i);
    e.z.push_back(z);
    e.rmse.push_back(rmse(std::span<const float>(pred), std::span<const float>(truth)));
    e.psnr.push_back(psnr(pred, truth, extent));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Sparsification

/// Uncertainty scorer: normalized z -> score (higher = more trusted).
using Scorer = std::function<double(const Vec&)>;

inline Scorer fim_kde_scorer(const PriorModel& prior) {
  return [&prior](const Vec& z) { return prior.log_prior(z); };
}

inline Scorer kde_scorer(const std::vector<FimEntry>& entries, double sigma) {
  return [&entries, sigma](const Vec& z) { return log_kde(entries, sigma, z); };
}

/// Test-only scorer returning each member's actual PSNR.
inline Scorer oracle_scorer(const MemberErrors& errors) {
  return [&errors](const Vec& z) {
    for (std::size_t i = 0; i < errors.z.size(); ++i)
      if (errors.z[i] == z) return errors.psnr[i];
    throw StateError("oracle scorer: unknown parameter");
  };
}

struct SparsificationCurve {
  std::string scorer_name;
  std::vector<double> fractions;
  std::vector<double> mean_psnr;
  std::vector<double> mean_rmse;
  double scorer_seconds = 0;
};

/// For each fraction φ drops the floor(φ N) lowest-scoring members (ties broken
/// by member index) and averages PSNR/RMSE over the rest. Fractions that
/// would remove every member are skipped.
inline SparsificationCurve sparsification(const Scorer& scorer, const MemberErrors& errors,
                                          const std::vector<double>& fractions,
                                          std::string name = "scorer") {
  const std::size_t n = errors.z.size();
  if (n == 0) throw StateError("sparsification needs a nonempty test set");
  for (std::size_t i = 0; i < fractions.size(); ++i)
    if (!(fractions[i] >= 0 && fractions[i] < 1) || (i > 0 && !(fractions[i] > fractions[i - 1])))
      throw ConfigError("fractions must be strictly increasing in [0, 1)");
  SparsificationCurve curve;
  curve.scorer_name = std::move(name);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = scorer(errors.z[i]);
  curve.scorer_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  for (double phi : fractions) {
    const auto drop = static_cast<std::size_t>(std::floor(phi * static_cast<double>(n)));
    if (drop >= n) continue;
    double ps = 0, rm = 0;
    for (std::size_t i = drop; i < n; ++i) {
      ps += errors.psnr[order[i]];
      rm += errors.rmse[order[i]];
    }
    const double kept = static_cast<double>(n - drop);
    curve.fractions.push_back(phi);
    curve.mean_psnr.push_back(ps / kept);
    curve.mean_rmse.push_back(rm / kept);
  }
  return curve;
}

inline SparsificationCurve sparsification(const Scorer& scorer, const EnsembleDataset& test,
                                          const SurrogateModel& model, const std::vector<double>& fractions,
                                          double extent, std::string name = "scorer") {
  return sparsification(scorer, member_errors(model, test, extent), fractions, std::move(name));
}

inline std::vector<double> default_fractions() {
  std::vector<double> f;
  for (int i = 0; i < 10; ++i) f.push_back(0.1 * i);
  return f;
}

inline nlohmann::json to_json(const SparsificationCurve& c) {
  return {{"scorer", c.scorer_name},
          {"fractions", c.fractions},
          {"mean_psnr", c.mean_psnr},
          {"mean_rmse", c.mean_rmse},
          {"scorer_seconds", c.scorer_seconds}};
}

inline std::string to_csv(const SparsificationCurve& c) {
  std::ostringstream out;
  out.precision(17);
  out << "scorer,fraction,mean_psnr,mean_rmse\n";
  for (std::size_t i = 0; i < c.fractions.size(); ++i)
    out << c.scorer_name << ',' << c.fractions[i] << ',' << c.mean_psnr[i] << ',' << c.mean_rmse[i] << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Split R-hat

/// chains: one row per chain, one column per draw. Each chain is split into
/// halves (a middle draw is dropped for odd lengths). NaN when the pooled
/// within-half variance is zero.
inline double split_rhat(const Mat& chains) {
  if (chains.rows() < 2 || chains.cols() < 4) throw ConfigError("split R-hat needs >= 2 chains of >= 4 draws");
  const Eigen::Index n = chains.cols() / 2;
  const Eigen::Index halves = 2 * chains.rows();
  Vec means(halves), vars(halves);
  for (Eigen::Index c = 0; c < chains.rows(); ++c)
    for (int h = 0; h < 2; ++h) {
      const Vec x = chains.row(c).segment(h == 0 ? 0 : chains.cols() - n, n).transpose();
      const double m = x.mean();
      means[2 * c + h] = m;
      vars[2 * c + h] = (x.array() - m).square().sum() / static_cast<double>(n - 1);
    }
  const double w = vars.mean();
  if (!(w > 0)) return std::numeric_limits<double>::quiet_NaN();
  const double grand = means.mean();
  const double b = static_cast<double>(n) * (means.array() - grand).square().sum() / static_cast<double>(halves - 1);
  const double var_plus = (static_cast<double>(n - 1) * w + b) / static_cast<double>(n);
  return std::sqrt(var_plus / w);
}

/// A random feature: reference from the given parameters, disc centre in
/// [-0.8, 0.8]^2, radius in [0.1, 0.3], time uniform.
template <typename Rng>
FeatureSpec random_feature(const std::vector<Vec>& references, Rng& rng, std::size_t coord_dim) {
  if (references.empty()) throw StateError("random feature needs reference parameters");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, references.size() - 1);
  FeatureSpec s;
  s.z_ref = references[pick(rng)];
  s.center = {0.8 * u(rng), 0.8 * u(rng)};
  s.radius = 0.2 + 0.1 * u(rng);
  s.time = coord_dim > 2 ? u(rng) : 0.0;
  return s;
}

struct RhatReport {
  std::vector<double> values;  // one per (feature, utility)
  Histogram histogram;
  double fraction_below(double t) const {
    std::size_t k = 0, n = 0;
    for (double v : values)
      if (std::isfinite(v)) ++n, k += v < t ? 1 : 0;
    return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0;
  }
};

/// Runs one sampler per random feature and computes split-R̂ of each
/// utility: utility u is output component (u mod n) of the surrogate at a
/// fixed random domain position, traced over the post-burn-in steps of every
/// live chain.
inline RhatReport rhat_report(const HmcConfig& cfg, const PriorModel& prior, const SurrogateModel& model,
                              const std::vector<Vec>& references, std::size_t n_utilities,
                              std::size_t n_features, std::uint64_t seed, std::size_t bins = 50) {
  if (cfg.n_chains < 2) throw ConfigError("R-hat needs at least two chains");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto cd = static_cast<Eigen::Index>(model.coord_dim());
  const auto n_out = static_cast<std::size_t>(model.output_dim());
  RhatReport report;
  for (std::size_t f = 0; f < n_features; ++f) {
    const FeatureSpec spec = random_feature(references, rng, model.coord_dim());
    Mat positions(cd, static_cast<Eigen::Index>(n_utilities));
    for (Eigen::Index i = 0; i < positions.size(); ++i) positions.data()[i] = u(rng);
    // traces[u] is chains x steps
    std::vector<Mat> traces(n_utilities, Mat(cfg.n_chains, cfg.post_steps));
    std::vector<char> alive_final;
    Eigen::Index t = 0;
    SampleSink sink;
    const auto nu = static_cast<Eigen::Index>(n_utilities);
    const Eigen::Index batch = static_cast<Eigen::Index>(cfg.n_chains);
    const Mat coords = positions.replicate(1, batch);
    Mat params(model.param_dim(), nu * batch);
    sink.on_state = [&](std::size_t, const Mat& z, const std::vector<char>& alive) {
      for (Eigen::Index b = 0; b < batch; ++b) params.middleCols(b * nu, nu) = z.col(b).replicate(1, nu);
      const Mat out = forward(model, coords, params);
      for (Eigen::Index b = 0; b < batch; ++b)
        for (Eigen::Index k = 0; k < nu; ++k)
          traces[static_cast<std::size_t>(k)](b, t) = out(k % static_cast<Eigen::Index>(n_out), b * nu + k);
      alive_final = alive;
      ++t;
    };
    HmcConfig run = cfg;
    run.seed = cfg.seed + 7919 * f;
    run_chains(run, prior, model, spec, sink);
    std::vector<Eigen::Index> live;
    for (std::size_t b = 0; b < alive_final.size(); ++b)
      if (alive_final[b]) live.push_back(static_cast<Eigen::Index>(b));
    for (std::size_t k = 0; k < n_utilities; ++k)
      report.values.push_back(live.size() >= 2 ? split_rhat(traces[k](live, Eigen::all))
                                               : std::numeric_limits<double>::quiet_NaN());
  }
  report.histogram = auto_histogram(report.values, bins);
  return report;
}

// ---------------------------------------------------------------------------
// MMD

/// Evenly strided subset of at most cap elements.
template <typename T>
std::vector<T> subsample(const std::vector<T>& v, std::size_t cap) {
  if (v.size() <= cap) return v;
  std::vector<T> out;
  out.reserve(cap);
  for (std::size_t i = 0; i < cap; ++i) out.push_back(v[i * v.size() / cap]);
  return out;
}

/// Median pairwise distance of the pooled set (pooled set strided down to at
/// most 2000 points).
inline double median_heuristic(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  std::vector<Vec> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  pooled = subsample(pooled, 2000);
  std::vector<double> d;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j) d.push_back((pooled[i] - pooled[j]).norm());
  if (d.empty()) return 1.0;
  const double m = median(d);
  return m > 0 ? m : 1.0;
}

namespace detail {

inline double mean_kernel(const std::vector<Vec>& a, const std::vector<Vec>& b, double inv2h2) {
  double s = 0;
  for (const auto& x : a)
    for (const auto& y : b) s += std::exp(-(x - y).squaredNorm() * inv2h2);
  return s / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

inline bool lex_less(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Eigen::Index j = 0; j < a[i].size(); ++j)
      if (a[i][j] != b[i][j]) return a[i][j] < b[i][j];
  return false;
}

}  // namespace detail

/// Biased MMD with a Gaussian kernel; bandwidth <= 0 selects the median
/// heuristic. Symmetric in its arguments bit for bit.
inline double mmd(const std::vector<Vec>& a, const std::vector<Vec>& b, double bandwidth = 0) {
  if (a.empty() || b.empty()) throw StateError("mmd needs two nonempty sets");
  const bool swap = detail::lex_less(b, a);
  const auto& x = swap ? b : a;
  const auto& y = swap ? a : b;
  const double h = bandwidth > 0 ? bandwidth : median_heuristic(x, y);
  const double inv = 1.0 / (2 * h * h);
  const double m2 = detail::mean_kernel(x, x, inv) + detail::mean_kernel(y, y, inv) - 2 * detail::mean_kernel(x, y, inv);
  return std::sqrt(std::max(0.0, m2));
}

// ---------------------------------------------------------------------------
// Feature-match NLL

struct NllReport {
  std::vector<double> values;  // d_X / mean vector norm, per sample
  Histogram histogram;
  double median = 0;
};

/// Normalized feature distance of each (physical) sample on a fixed disc
/// quadrature of quad_points points.
inline NllReport nll_distribution(const std::vector<Vec>& samples, const SurrogateModel& model,
                                  const FeatureSpec& spec, double mean_norm, std::size_t bins = 50,
                                  std::size_t quad_points = 1000) {
  if (samples.empty()) throw StateError("nll distribution needs samples");
  if (!(mean_norm > 0)) throw ConfigError("mean norm must be > 0");
  FeatureSpec s = spec;
  s.tolerance = 1.0;
  const FeatureLikelihood lik(model, s);
  const Mat pts = disc_quadrature(spec, model.coord_dim(), quad_points);
  Mat z(static_cast<Eigen::Index>(model.param_dim()), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) z.col(static_cast<Eigen::Index>(i)) = model.space.normalize(samples[i]);
  Vec v;
  Mat g;
  lik.evaluate(pts, z, v, g);
  NllReport r;
  for (Eigen::Index i = 0; i < v.size(); ++i) r.values.push_back(-v[i] / mean_norm);
  const double hi = *std::max_element(r.values.begin(), r.values.end());
  r.histogram = make_histogram(r.values, bins, 0.0, hi > 0 ? hi : 1.0);
  r.median = median(r.values);
  return r;
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_DIAGNOSTICS_HPP
