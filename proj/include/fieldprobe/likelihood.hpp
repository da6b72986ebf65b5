#ifndef FIELDPROBE_LIKELIHOOD_HPP
#define FIELDPROBE_LIKELIHOOD_HPP

// Feature likelihood: a disc X at a fixed time slice plus a reference
// parameter z_ref. With K points x_k drawn uniformly in X,
//
//   d_X(z) = (1/K) sum_k |f(x_k, z) - f(x_k, z_ref)|,   log p(X|z) = -d_X(z) / C.

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fieldprobe/errors.hpp"
#include "fieldprobe/surrogate.hpp"

namespace fieldprobe {

struct FeatureSpec {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();  // normalized (x, y)
  double radius = 0.1;
  double time = 0.0;  // normalized
  Vec z_ref;          // normalized
  double tolerance = 1.0 / 15.0;
  std::size_t k_samples = 30;
  int label = 0;

  /// Throws ValidationError listing every offending field.
  void validate(std::size_t param_dim) const {
    ValidationError::FieldMessages errs;
    if (!center.allFinite()) errs.emplace_back("center", "must be finite");
    if (!(radius >= 0) || !std::isfinite(radius)) errs.emplace_back("radius", "must be >= 0");
    if (center.allFinite() && radius >= 0) {
      // nearest point of the spatial box to the centre
      const Eigen::Vector2d nearest = center.cwiseMax(-1.0).cwiseMin(1.0);
      if ((nearest - center).norm() > radius)
        errs.emplace_back("radius", "disc does not intersect the spatial domain");
    }
    if (!(time >= -1.0 && time <= 1.0)) errs.emplace_back("time", "must lie in [-1, 1]");
    if (static_cast<std::size_t>(z_ref.size()) != param_dim)
      errs.emplace_back("z_ref", "must have " + std::to_string(param_dim) + " entries");
    else if (!z_ref.allFinite())
      errs.emplace_back("z_ref", "must be finite");
    if (!(tolerance > 0)) errs.emplace_back("C", "must be > 0");
    if (k_samples < 1) errs.emplace_back("K", "must be >= 1");
    if (!errs.empty()) throw ValidationError(std::move(errs));
  }
};

inline nlohmann::json to_json(const FeatureSpec& s) {
  return {{"center", {s.center.x(), s.center.y()}},
          {"radius", s.radius},
          {"time", s.time},
          {"z_ref", std::vector<double>(s.z_ref.data(), s.z_ref.data() + s.z_ref.size())},
          {"C", s.tolerance},
          {"K", s.k_samples},
          {"label", s.label}};
}

inline FeatureSpec feature_from_json(const nlohmann::json& j) {
  FeatureSpec s;
  ValidationError::FieldMessages errs;
  auto field = [&](const char* key, auto&& assign) {
    if (!j.contains(key)) return;
    try {
      assign(j.at(key));
    } catch (const nlohmann::json::exception&) {
      errs.emplace_back(key, "has the wrong type");
    }
  };
  if (!j.is_object()) throw ValidationError(ValidationError::FieldMessages{{"feature", "must be a JSON object"}});
  for (const char* required : {"center", "radius", "z_ref"})
    if (!j.contains(required)) errs.emplace_back(required, "is required");
  field("center", [&](const nlohmann::json& v) {
    const auto c = v.get<std::vector<double>>();
    if (c.size() != 2) throw nlohmann::json::type_error::create(302, "center", nullptr);
    s.center = {c[0], c[1]};
  });
  field("radius", [&](const nlohmann::json& v) { s.radius = v.get<double>(); });
  field("time", [&](const nlohmann::json& v) { s.time = v.get<double>(); });
  field("z_ref", [&](const nlohmann::json& v) {
    const auto z = v.get<std::vector<double>>();
    s.z_ref = Eigen::Map<const Vec>(z.data(), static_cast<Eigen::Index>(z.size()));
  });
  field("C", [&](const nlohmann::json& v) { s.tolerance = v.get<double>(); });
  field("K", [&](const nlohmann::json& v) { s.k_samples = v.get<std::size_t>(); });
  field("label", [&](const nlohmann::json& v) { s.label = v.get<int>(); });
  if (!errs.empty()) throw ValidationError(std::move(errs));
  return s;
}

/// K points uniform on (disc intersected with the spatial box), as an
/// m x K matrix of normalized coordinates with the feature time appended.
template <typename Rng>
Mat sample_region(const FeatureSpec& spec, std::size_t coord_dim, Rng& rng,
                  std::size_t count = 0) {
  const std::size_t k = count == 0 ? spec.k_samples : count;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Mat pts(coord_dim, k);
  for (std::size_t i = 0; i < k; ++i) {
    Eigen::Vector2d p = spec.center;
    if (spec.radius > 0) {
      for (;;) {
        const Eigen::Vector2d off(unit(rng), unit(rng));
        if (off.squaredNorm() > 1.0) continue;
        p = spec.center + spec.radius * off;
        if (std::abs(p.x()) <= 1.0 && std::abs(p.y()) <= 1.0) break;
      }
    }
    const auto col = static_cast<Eigen::Index>(i);
    pts(0, col) = p.x();
    pts(1, col) = p.y();
    if (coord_dim > 2) pts(2, col) = spec.time;
  }
  return pts;
}

/// Deterministic quadrature points filling the disc (intersected with the
/// box): a sunflower lattice, used where a fixed dense sampling is needed.
inline Mat disc_quadrature(const FeatureSpec& spec, std::size_t coord_dim, std::size_t count) {
  const double golden = 3.14159265358979323846 * (3.0 - std::sqrt(5.0));
  std::vector<Eigen::Vector2d> kept;
  // oversample so the clipped lattice still has ~count points
  for (std::size_t n = count; kept.size() < count && n < 64 * count + 64; n *= 2) {
    kept.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const double r = spec.radius * std::sqrt((static_cast<double>(i) + 0.5) / static_cast<double>(n));
      const double a = golden * static_cast<double>(i);
      const Eigen::Vector2d p = spec.center + r * Eigen::Vector2d(std::cos(a), std::sin(a));
      if (std::abs(p.x()) <= 1.0 && std::abs(p.y()) <= 1.0) kept.push_back(p);
    }
  }
  Mat pts(coord_dim, static_cast<Eigen::Index>(kept.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    pts(0, col) = kept[i].x();
    pts(1, col) = kept[i].y();
    if (coord_dim > 2) pts(2, col) = spec.time;
  }
  return pts;
}

/// d_X(z, z_ref) at the given points.
inline double feature_distance(const SurrogateModel& model, const Vec& z, const FeatureSpec& spec,
                               const Mat& points) {
  if (points.cols() == 0) throw ConfigError("feature_distance needs at least one point");
  const Mat a = forward_at(model, points, z);
  const Mat b = forward_at(model, points, spec.z_ref);
  return (a - b).colwise().norm().mean();
}

/// Batched feature log-likelihood with shared points. The reference side
/// f(x_k, z_ref) is evaluated once per point set; the parameter side uses a
/// product-structured first layer (points x chains) so each chain costs one
/// K-column network pass forward and back.
class FeatureLikelihood {
 public:
  FeatureLikelihood(const SurrogateModel& model, FeatureSpec spec)
      : model_(&model), spec_(std::move(spec)) {
    spec_.validate(model.param_dim());
  }

  const FeatureSpec& spec() const { return spec_; }
  const SurrogateModel& model() const { return *model_; }

  template <typename Rng>
  Mat sample_points(Rng& rng) const {
    return sample_region(spec_, model_->coord_dim(), rng);
  }

  /// values[b] = -d_X(z_b)/C and grads.col(b) its gradient, for z (d x B).
  void evaluate(const Mat& points, const Mat& z, Vec& values, Mat& grads,
                Eigen::Index chunk_chains = 8) const {
    const SurrogateModel& m = *model_;
    const Eigen::Index k = points.cols();
    const Eigen::Index batch = z.cols();
    const auto cd = static_cast<Eigen::Index>(m.coord_dim());
    const auto pd = static_cast<Eigen::Index>(m.param_dim());
    values.resize(batch);
    grads.resize(pd, batch);

    const auto& w1 = m.net.weights[0];
    const Mat point_pre = (m.coord_scale * w1.leftCols(cd)) * points;  // h x K
    const Mat w_param = m.param_scale * w1.rightCols(pd);                // h x d
    const double scale = 1.0 / (static_cast<double>(k) * spec_.tolerance);
    const Eigen::Index h = w1.rows();

    SirenCache<double> cache;
    Mat pre1, out, d_out, d_pre1, ref;
    // pre1 = point part + chain part + bias, one K-column block per chain
    auto assemble = [&](const Mat& zs) {
      const Mat chain_pre = w_param * zs;
      pre1.resize(h, k * zs.cols());
      for (Eigen::Index c = 0; c < zs.cols(); ++c) {
        auto blk = pre1.middleCols(c * k, k);
        blk = point_pre;
        blk.colwise() += chain_pre.col(c) + m.net.biases[0];
      }
    };
    assemble(spec_.z_ref);
    siren_forward_from_preact(m.net, pre1, ref, cache);  // n x K

    for (Eigen::Index start = 0; start < batch; start += chunk_chains) {
      const Eigen::Index len = std::min(chunk_chains, batch - start);
      assemble(z.middleCols(start, len));
      siren_forward_from_preact(m.net, pre1, out, cache);
      d_out.resize(out.rows(), out.cols());
      const Eigen::Index n = out.rows();
      for (Eigen::Index c = 0; c < len; ++c) {
        double dist = 0;
        for (Eigen::Index p = 0; p < k; ++p) {
          const double* o = out.data() + (c * k + p) * n;
          const double* r = ref.data() + p * n;
          double* g = d_out.data() + (c * k + p) * n;
          double nrm = 0;
          for (Eigen::Index i = 0; i < n; ++i) nrm += (o[i] - r[i]) * (o[i] - r[i]);
          nrm = std::sqrt(nrm);
          dist += nrm;
          const double w = nrm > 0 ? -scale / nrm : 0.0;
          for (Eigen::Index i = 0; i < n; ++i) g[i] = w * (o[i] - r[i]);
        }
        values[start + c] = -scale * dist;
      }
      siren_backward_to_preact(m.net, cache, d_out, d_pre1);
      Mat summed(h, len);
      for (Eigen::Index c = 0; c < len; ++c) summed.col(c) = d_pre1.middleCols(c * k, k).rowwise().sum();
      grads.middleCols(start, len).noalias() = w_param.transpose() * summed;
    }
  }

 private:
  const SurrogateModel* model_;
  FeatureSpec spec_;
};

struct LikelihoodResult {
  double value;
  Vec grad;
  Mat points;
};

/// Draws a fresh point set and returns -d_X/C, its gradient and the points.
template <typename Rng>
LikelihoodResult log_likelihood_and_grad(const SurrogateModel& model, const Vec& z,
                                         const FeatureSpec& spec, Rng& rng) {
  const FeatureLikelihood lik(model, spec);
  LikelihoodResult r;
  r.points = lik.sample_points(rng);
  Vec values;
  Mat grads;
  lik.evaluate(r.points, z, values, grads);
  r.value = values[0];
  r.grad = grads.col(0);
  return r;
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_LIKELIHOOD_HPP
