#ifndef FIELDPROBE_PRIOR_HPP
#define FIELDPROBE_PRIOR_HPP

// Error-aware prior over normalized parameters:
//
//   log p(z) = logsumexp_i( -|z - z_i|^2 / s_s^2 - (z - z_i)^T F_i (z - z_i) / s_f^2 )
//
// with F_i = (1/M) J(z_i)^T J(z_i) the Fisher information of the surrogate at
// training parameter z_i, estimated from M uniformly drawn domain points.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fieldprobe/errors.hpp"
#include "fieldprobe/surrogate.hpp"

namespace fieldprobe {

struct FimEntry {
  Vec z;  // normalized
  Mat fim;
  std::size_t m_samples = 0;
};

/// Estimates F(z) = (1/M) sum_k J_k^T J_k for any Jacobian provider
/// jac(coords m x B, z) -> (B*n) x d. Points are drawn uniformly in [-1,1]^m.
template <typename JacobianFn>
FimEntry compute_fim(JacobianFn&& jac, std::size_t coord_dim, const Vec& z,
                     std::size_t m_samples, std::uint64_t seed, std::size_t chunk = 8192) {
  const auto d = z.size();
  if (m_samples < static_cast<std::size_t>(d))
    throw ConfigError("compute_fim needs m_samples >= d");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Mat acc = Mat::Zero(d, d);
  for (std::size_t done = 0; done < m_samples; done += chunk) {
    const std::size_t len = std::min(chunk, m_samples - done);
    Mat coords(coord_dim, len);
    for (Eigen::Index i = 0; i < coords.size(); ++i) coords.data()[i] = unit(rng);
    const Mat j = jac(coords, z);
    if (!j.allFinite()) throw NumericalError("non-finite Jacobian while estimating the FIM");
    acc.noalias() += j.transpose() * j;
  }
  acc /= static_cast<double>(m_samples);
  FimEntry e;
  e.z = z;
  e.fim = 0.5 * (acc + acc.transpose());
  e.m_samples = m_samples;
  return e;
}

inline FimEntry compute_fim(const SurrogateModel& model, const Vec& z, std::size_t m_samples,
                            std::uint64_t seed) {
  return compute_fim([&](const Mat& c, const Vec& zz) { return jacobian_wrt_params(model, c, zz); },
                     model.coord_dim(), z, m_samples, seed);
}

/// FIM entries for every member of a dataset (parameters normalized).
inline std::vector<FimEntry> compute_fims(const SurrogateModel& model, const EnsembleDataset& ds,
                                          std::size_t m_samples, std::uint64_t seed) {
  std::vector<FimEntry> out;
  std::uint64_t s = seed;
  for (const auto& m : ds.members()) out.push_back(compute_fim(model, ds.space().normalize(m.z), m_samples, s++));
  return out;
}

/// Squared Mahalanobis distance (z - z_i)^T F_i (z - z_i).
inline double fim_distance(const Vec& z, const FimEntry& e) {
  const Vec r = z - e.z;
  return std::max(0.0, r.dot(e.fim * r));
}

struct Bandwidths {
  double sigma_s = 0;
  double sigma_f = 0;
};

/// sigma_s = 6 * mean nearest-neighbour Euclidean distance;
/// sigma_f^2 = mean nearest-neighbour squared FIM distance (F of the anchor).
inline Bandwidths select_bandwidths(const std::vector<FimEntry>& entries) {
  const std::size_t n = entries.size();
  if (n < 2) throw ConfigError("bandwidth selection needs at least 2 training parameters");
  double sum_e = 0, sum_f = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double best_e = std::numeric_limits<double>::infinity();
    double best_f = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      best_e = std::min(best_e, (entries[j].z - entries[i].z).norm());
      best_f = std::min(best_f, fim_distance(entries[j].z, entries[i]));
    }
    sum_e += best_e;
    sum_f += best_f;
  }
  return {6.0 * sum_e / static_cast<double>(n), std::sqrt(sum_f / static_cast<double>(n))};
}

class PriorModel {
 public:
  PriorModel() = default;

  PriorModel(std::vector<FimEntry> entries, Bandwidths bw)
      : entries_(std::move(entries)), bw_(bw) {
    if (entries_.empty()) throw ConfigError("prior needs at least one entry");
    if (!(bw_.sigma_s > 0) || !(bw_.sigma_f > 0))
      throw ConfigError("prior bandwidths must be positive");
    const auto d = entries_.front().z.size();
    const double inv_s = 1.0 / (bw_.sigma_s * bw_.sigma_s);
    const double inv_f = 1.0 / (bw_.sigma_f * bw_.sigma_f);
    for (const auto& e : entries_) {
      if (e.z.size() != d || e.fim.rows() != d || e.fim.cols() != d)
        throw ConfigError("prior entries disagree on dimension");
      metrics_.push_back(inv_s * Mat::Identity(d, d) + inv_f * e.fim);
    }
  }

  /// Selects bandwidths from the entries themselves (needs N >= 2).
  static PriorModel from_entries(std::vector<FimEntry> entries) {
    const auto bw = select_bandwidths(entries);
    return PriorModel(std::move(entries), bw);
  }

  const std::vector<FimEntry>& entries() const { return entries_; }
  const Bandwidths& bandwidths() const { return bw_; }
  std::size_t dim() const { return static_cast<std::size_t>(entries_.front().z.size()); }

  /// Unnormalized log density and its gradient at one normalized z.
  double log_prior_and_grad(const Eigen::Ref<const Vec>& z, Eigen::Ref<Vec> grad) const {
    const std::size_t n = entries_.size();
    const auto d = static_cast<std::size_t>(z.size());
    thread_local std::vector<double> terms, pulls, diff;
    terms.resize(n);
    pulls.resize(n * d);
    diff.resize(d);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      const double* zi = entries_[i].z.data();
      const double* g = metrics_[i].data();  // column-major, symmetric
      double* pull = pulls.data() + i * d;
      for (std::size_t a = 0; a < d; ++a) diff[a] = z[static_cast<Eigen::Index>(a)] - zi[a];
      double t = 0;
      for (std::size_t a = 0; a < d; ++a) {
        double acc = 0;
        for (std::size_t k = 0; k < d; ++k) acc += g[k * d + a] * diff[k];
        pull[a] = acc;
        t -= diff[a] * acc;
      }
      terms[i] = t;
      top = std::max(top, t);
    }
    double total = 0;
    grad.setZero();
    for (std::size_t i = 0; i < n; ++i) {
      const double w = std::exp(terms[i] - top);
      total += w;
      const double* pull = pulls.data() + i * d;
      for (std::size_t a = 0; a < d; ++a) grad[static_cast<Eigen::Index>(a)] -= 2.0 * w * pull[a];
    }
    grad /= total;
    return top + std::log(total);
  }

  std::pair<double, Vec> log_prior_and_grad(const Vec& z) const {
    Vec g(z.size());
    const double v = log_prior_and_grad(z, g);
    return {v, g};
  }

  double log_prior(const Vec& z) const { return log_prior_and_grad(z).first; }

  /// Row-wise batch entry point: z is d x B, values B, grads d x B.
  void log_prior_and_grad(const Mat& z, Vec& values, Mat& grads) const {
    values.resize(z.cols());
    grads.resize(z.rows(), z.cols());
    for (Eigen::Index b = 0; b < z.cols(); ++b)
      values[b] = log_prior_and_grad(z.col(b), grads.col(b));
  }

 private:
  std::vector<FimEntry> entries_;
  Bandwidths bw_;
  std::vector<Mat> metrics_;  // I/s_s^2 + F_i/s_f^2
};

/// Gaussian KDE over parameters only: logsumexp_i(-|z - z_i|^2 / sigma^2).
inline double log_kde(const std::vector<FimEntry>& entries, double sigma, const Vec& z) {
  double top = -std::numeric_limits<double>::infinity();
  std::vector<double> t(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    t[i] = -(z - entries[i].z).squaredNorm() / (sigma * sigma);
    top = std::max(top, t[i]);
  }
  double s = 0;
  for (double v : t) s += std::exp(v - top);
  return top + std::log(s);
}

// ---------------------------------------------------------------------------
// FIM artifact: "FPFIM\0\0\0", u32 version, u32 d, u64 N, u64 m_samples,
// f64 sigma_s, f64 sigma_f, then N records of z (f64[d]) and F (f64[d*d], row-major).

namespace detail {
inline constexpr char kFimMagic[8] = {'F', 'P', 'F', 'I', 'M', '\0', '\0', '\0'};
inline constexpr std::uint32_t kFimVersion = 1;
}  // namespace detail

inline void save_prior(const PriorModel& prior, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::uint32_t version = detail::kFimVersion;
  const auto d = static_cast<std::uint32_t>(prior.dim());
  const std::uint64_t n = prior.entries().size();
  const std::uint64_t m = prior.entries().front().m_samples;
  out.write(detail::kFimMagic, 8);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&d), 4);
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(&m), 8);
  out.write(reinterpret_cast<const char*>(&prior.bandwidths().sigma_s), 8);
  out.write(reinterpret_cast<const char*>(&prior.bandwidths().sigma_f), 8);
  for (const auto& e : prior.entries()) {
    out.write(reinterpret_cast<const char*>(e.z.data()), 8 * d);
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = e.fim;
    out.write(reinterpret_cast<const char*>(f.data()), 8 * d * d);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline PriorModel load_prior(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open FIM file " + path.string());
  char magic[8];
  std::uint32_t version = 0, d = 0;
  std::uint64_t n = 0, m = 0;
  Bandwidths bw;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&d), 4);
  in.read(reinterpret_cast<char*>(&n), 8);
  in.read(reinterpret_cast<char*>(&m), 8);
  in.read(reinterpret_cast<char*>(&bw.sigma_s), 8);
  in.read(reinterpret_cast<char*>(&bw.sigma_f), 8);
  if (!in || std::memcmp(magic, detail::kFimMagic, 8) != 0)
    throw FormatError("not a FIM file: " + path.string());
  if (version != detail::kFimVersion) throw FormatError("unsupported FIM file version");
  if (d == 0 || d > 64 || n == 0 || n > (std::uint64_t{1} << 24))
    throw FormatError("corrupt FIM header");
  std::vector<FimEntry> entries(n);
  for (auto& e : entries) {
    e.z.resize(d);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(d, d);
    in.read(reinterpret_cast<char*>(e.z.data()), 8 * d);
    in.read(reinterpret_cast<char*>(f.data()), 8 * d * d);
    e.fim = f;
    e.m_samples = m;
  }
  if (!in) throw FormatError("truncated FIM file " + path.string());
  try {
    return PriorModel(std::move(entries), bw);
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_PRIOR_HPP
