#ifndef FIELDPROBE_HMC_HPP
#define FIELDPROBE_HMC_HPP

// Batched Hamiltonian Monte Carlo over log p(z|X) = log p(X|z) + log p(z) in
// normalized parameter coordinates. All chains advance in lockstep and share
// one feature point set per HMC step.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fieldprobe/errors.hpp"
#include "fieldprobe/likelihood.hpp"
#include "fieldprobe/prior.hpp"

namespace fieldprobe {

struct HmcConfig {
  std::size_t n_chains = 1000;
  std::size_t leapfrog_steps = 10;
  std::size_t burn_in = 50;
  std::size_t post_steps = 100;
  std::size_t emit_every = 5;
  double step_size = 0.01;
  double target_accept = 0.5;
  std::size_t tune_every = 10;
  // Double/halve the step size at the start of burn-in until the batch
  // acceptance crosses target_accept, then hand over to the windowed rule.
  bool coarse_search = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_chains < 1 || leapfrog_steps < 1 || burn_in < 1 || post_steps < 1 || emit_every < 1 ||
        tune_every < 1)
      throw ConfigError("HMC counts must all be >= 1");
    if (!(step_size > 0)) throw ConfigError("HMC step size must be > 0");
    if (!(target_accept > 0 && target_accept < 1))
      throw ConfigError("target acceptance must lie in (0, 1)");
  }
};

enum class Phase { burn_in, sampling, done, cancelled };

inline std::string phase_name(Phase p) {
  switch (p) {
    case Phase::burn_in: return "burn_in";
    case Phase::sampling: return "sampling";
    case Phase::done: return "done";
    case Phase::cancelled: return "cancelled";
  }
  return "?";
}

struct Sample {
  Vec z;  // physical units
  std::size_t chain = 0;
  std::size_t step = 0;
  double log_posterior = 0;
};

struct SampleBatch {
  Phase phase = Phase::sampling;
  std::size_t step = 0;
  double accept_rate = 0;
  int label = 0;
  std::vector<Sample> samples;
};

inline nlohmann::json to_json(const SampleBatch& b) {
  nlohmann::json zs = nlohmann::json::array();
  for (const auto& s : b.samples) zs.push_back(std::vector<double>(s.z.data(), s.z.data() + s.z.size()));
  return {{"phase", phase_name(b.phase)},
          {"step", b.step},
          {"accept_rate", b.accept_rate},
          {"label", b.label},
          {"samples", std::move(zs)}};
}

struct SampleSet {
  std::vector<Sample> samples;
  double accept_rate = 0;  // over post-burn-in steps
  double burn_in_accept_rate = 0;
  Phase phase = Phase::burn_in;
  double step_size = 0;             // frozen value after burn-in
  double path_length_ratio = 0;     // mean trajectory length / box diameter
  std::size_t dead_chains = 0;
  std::size_t emissions = 0;
};

/// Receives progress from run_chains. All members are optional.
struct SampleSink {
  std::function<void(std::size_t step, double accept_rate, double step_size)> on_burnin;
  std::function<void(const SampleBatch&)> on_batch;
  std::function<bool()> cancelled;
  // every post-burn-in step: all chain states (normalized, d x B) and liveness
  std::function<void(std::size_t step, const Mat& z, const std::vector<char>& alive)> on_state;
};

// ---------------------------------------------------------------------------
// Integrator and acceptance rule

/// Batched leapfrog with identity mass. eval(z, logp, grad) fills the log
/// density and its gradient per column. On entry logp/grad hold the values at
/// z; on exit they hold the values at the end point. Momentum is negated at
/// the end. If path is given it receives each column's trajectory length.
template <typename EvalFn>
void leapfrog_batch(Mat& z, Mat& p, double eps, std::size_t steps, EvalFn&& eval, Vec& logp,
                    Mat& grad, Vec* path = nullptr) {
  if (path != nullptr) path->setZero(z.cols());
  p.noalias() += (0.5 * eps) * grad;
  for (std::size_t l = 1; l <= steps; ++l) {
    z.noalias() += eps * p;
    if (path != nullptr) *path += eps * p.colwise().norm().transpose();
    eval(static_cast<const Mat&>(z), logp, grad);
    p.noalias() += (l < steps ? eps : 0.5 * eps) * grad;
  }
  p = -p;
}

/// Single-state leapfrog; grad_fn(z) returns the gradient of the log density.
template <typename GradFn>
std::pair<Vec, Vec> leapfrog(const Vec& z, const Vec& p, double eps, std::size_t steps,
                             GradFn&& grad_fn) {
  if (!(eps > 0) || steps < 1) throw ConfigError("leapfrog needs eps > 0 and L >= 1");
  Mat zz = z, pp = p;
  Vec logp = Vec::Zero(1);
  Mat g = grad_fn(Vec(zz.col(0)));
  leapfrog_batch(
      zz, pp, eps, steps,
      [&](const Mat& at, Vec& lp, Mat& gr) {
        lp.setZero(1);
        gr = grad_fn(Vec(at.col(0)));
      },
      logp, g);
  return {Vec(zz.col(0)), Vec(pp.col(0))};
}

/// Metropolis rule: accept with probability min(1, exp(-dH)); a non-finite
/// proposal energy (NaN or +inf) is always rejected. Always draws one uniform.
template <typename Rng>
bool mh_accept(double delta_h, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (std::isnan(delta_h) || delta_h == std::numeric_limits<double>::infinity()) return false;
  return u < std::exp(-delta_h);
}

template <typename State, typename Rng>
std::pair<bool, State> mh_step(const State& state, const State& proposal, double delta_h, Rng& rng) {
  const bool ok = mh_accept(delta_h, rng);
  return {ok, ok ? proposal : state};
}

/// Windowed step-size rule, applied once per tuning window.
inline double tune_step_size(double window_accept, double eps) {
  if (window_accept > 0.6) return eps * 1.1;
  if (window_accept < 0.4) return eps * 0.9;
  return eps;
}

// ---------------------------------------------------------------------------
// Targets. A target exposes resample(rng) (new per-step randomness) and
// evaluate(z d x B, values, grads).

/// Prior plus optional feature likelihood. Without a likelihood this is the
/// C -> infinity limit and equals the prior exactly.
class PosteriorTarget {
 public:
  PosteriorTarget(const PriorModel& prior, std::optional<FeatureLikelihood> likelihood)
      : prior_(&prior), likelihood_(std::move(likelihood)) {
    if (likelihood_ && likelihood_->model().param_dim() != prior.dim())
      throw ConfigError("prior and model disagree on parameter dimension");
  }

  template <typename Rng>
  void resample(Rng& rng) {
    if (likelihood_) points_ = likelihood_->sample_points(rng);
  }

  void set_points(Mat points) { points_ = std::move(points); }
  const Mat& points() const { return points_; }
  bool has_likelihood() const { return likelihood_.has_value(); }

  void evaluate(const Mat& z, Vec& values, Mat& grads) const {
    prior_->log_prior_and_grad(z, values, grads);
    if (!likelihood_) return;
    likelihood_->evaluate(points_, z, lik_values_, lik_grads_);
    values += lik_values_;
    grads += lik_grads_;
  }

 private:
  const PriorModel* prior_;
  std::optional<FeatureLikelihood> likelihood_;
  Mat points_;
  mutable Vec lik_values_;
  mutable Mat lik_grads_;
};

/// Test hook: an analytic log density fn(z, grad) -> log p in place of
/// prior and likelihood.
class AnalyticTarget {
 public:
  using Fn = std::function<double(const Eigen::Ref<const Vec>&, Eigen::Ref<Vec>)>;
  explicit AnalyticTarget(Fn fn) : fn_(std::move(fn)) {}

  static AnalyticTarget standard_normal(double scale = 1.0) {
    return AnalyticTarget([scale](const Eigen::Ref<const Vec>& z, Eigen::Ref<Vec> g) {
      const double s2 = scale * scale;
      g = -s2 * z;
      return -0.5 * s2 * z.squaredNorm();
    });
  }

  template <typename Rng>
  void resample(Rng&) {}

  void evaluate(const Mat& z, Vec& values, Mat& grads) const {
    values.resize(z.cols());
    grads.resize(z.rows(), z.cols());
    for (Eigen::Index b = 0; b < z.cols(); ++b) values[b] = fn_(z.col(b), grads.col(b));
  }

 private:
  Fn fn_;
};

/// One batched posterior evaluation with a fresh point set.
/// Throws NumericalError naming the first chain with a non-finite result.
template <typename Rng>
std::pair<Vec, Mat> log_posterior_and_grad(const PriorModel& prior, const SurrogateModel& model,
                                           const FeatureSpec& spec, const Mat& z, Rng& rng) {
  PosteriorTarget target(prior, FeatureLikelihood(model, spec));
  target.resample(rng);
  std::pair<Vec, Mat> out;
  target.evaluate(z, out.first, out.second);
  for (Eigen::Index b = 0; b < z.cols(); ++b)
    if (!std::isfinite(out.first[b]) || !out.second.col(b).allFinite())
      throw NumericalError("non-finite log posterior", static_cast<long>(b));
  return out;
}

/// B chain starts: a uniformly chosen training parameter plus Gaussian jitter
/// of 1% of the box side (0.02 in normalized units).
template <typename Rng>
Mat init_from_training(const std::vector<FimEntry>& entries, std::size_t chains, Rng& rng) {
  if (entries.empty()) throw ConfigError("chain initialization needs training parameters");
  const auto d = entries.front().z.size();
  std::uniform_int_distribution<std::size_t> pick(0, entries.size() - 1);
  std::normal_distribution<double> jitter(0.0, 0.02);
  Mat z(d, static_cast<Eigen::Index>(chains));
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    z.col(b) = entries[pick(rng)].z;
    for (Eigen::Index j = 0; j < d; ++j) z(j, b) += jitter(rng);
  }
  return z;
}

namespace detail {

inline bool column_ok(const Vec& v, const Mat& g, Eigen::Index b) {
  return std::isfinite(v[b]) && g.col(b).allFinite();
}

}  // namespace detail

/// Runs B chains from init (normalized, d x B). Emitted samples are converted
/// to physical units with space and restricted to the box.
template <typename Target>
SampleSet run_chains(const HmcConfig& cfg, Target& target, const ParameterSpace& space, Mat init,
                     const SampleSink& sink = {}, int label = 0) {
  cfg.validate();
  if (static_cast<std::size_t>(init.rows()) != space.dim())
    throw ShapeError("chain states do not match the parameter dimension");
  const Eigen::Index d = init.rows();
  const Eigen::Index batch = init.cols();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal;

  Mat z = std::move(init);
  std::vector<char> alive(static_cast<std::size_t>(batch), 1);
  std::size_t n_alive = static_cast<std::size_t>(batch);
  double eps = cfg.step_size;

  SampleSet result;
  Vec logp, logp_new, path;
  Mat grad, grad_new, p, z_new, p_new;
  auto eval = [&](const Mat& at, Vec& v, Mat& g) { target.evaluate(at, v, g); };

  // coarse search state: 0 undecided, +1 growing, -1 shrinking, 2 finished
  int search = cfg.coarse_search ? 0 : 2;
  std::size_t window_steps = 0, window_accepts = 0, window_trials = 0;
  std::size_t burn_accepts = 0, burn_trials = 0, post_accepts = 0, post_trials = 0;
  double path_sum = 0;
  std::size_t path_count = 0;
  const double diameter = 2.0 * std::sqrt(static_cast<double>(d));

  const std::size_t total = cfg.burn_in + cfg.post_steps;
  for (std::size_t step = 1; step <= total; ++step) {
    if (sink.cancelled && sink.cancelled()) {
      result.phase = Phase::cancelled;
      return result;
    }
    const bool burning = step <= cfg.burn_in;

    target.resample(rng);
    eval(z, logp, grad);
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (alive[static_cast<std::size_t>(b)] && !detail::column_ok(logp, grad, b)) {
        alive[static_cast<std::size_t>(b)] = 0;
        --n_alive;
      }
    }
    if (n_alive == 0) throw NumericalError("every chain produced a non-finite log posterior");

    p.resize(d, batch);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = normal(rng);
    z_new = z;
    p_new = p;
    logp_new = logp;
    grad_new = grad;
    leapfrog_batch(z_new, p_new, eps, cfg.leapfrog_steps, eval, logp_new, grad_new, &path);

    std::size_t accepts = 0;
    for (Eigen::Index b = 0; b < batch; ++b) {
      const bool live = alive[static_cast<std::size_t>(b)] != 0;
      const double h0 = -logp[b] + 0.5 * p.col(b).squaredNorm();
      const double h1 = -logp_new[b] + 0.5 * p_new.col(b).squaredNorm();
      const bool proposal_ok = detail::column_ok(logp_new, grad_new, b);
      const bool ok = mh_accept(proposal_ok ? h1 - h0 : std::numeric_limits<double>::infinity(), rng);
      if (!live) continue;
      if (ok) {
        z.col(b) = z_new.col(b);
        logp[b] = logp_new[b];
        ++accepts;
      }
      if (!burning && std::isfinite(path[b])) {
        path_sum += path[b];
        ++path_count;
      }
    }
    const double rate = static_cast<double>(accepts) / static_cast<double>(n_alive);

    if (burning) {
      burn_accepts += accepts;
      burn_trials += n_alive;
      if (search != 2) {
        if (search == 0) search = rate > cfg.target_accept ? 1 : -1;
        if (search == 1) {
          if (rate > cfg.target_accept) {
            eps *= 2.0;
          } else {
            eps /= std::sqrt(2.0);
            search = 2;
          }
        } else {
          if (rate < cfg.target_accept) {
            eps *= 0.5;
          } else {
            eps *= std::sqrt(2.0);
            search = 2;
          }
        }
      } else {
        window_accepts += accepts;
        window_trials += n_alive;
        if (++window_steps == cfg.tune_every) {
          eps = tune_step_size(static_cast<double>(window_accepts) / static_cast<double>(window_trials), eps);
          window_steps = window_accepts = window_trials = 0;
        }
      }
      if (sink.on_burnin) sink.on_burnin(step, rate, eps);
      continue;
    }

    result.phase = Phase::sampling;
    post_accepts += accepts;
    post_trials += n_alive;
    if (sink.on_state) sink.on_state(step, z, alive);
    const std::size_t post_step = step - cfg.burn_in;
    if (post_step % cfg.emit_every != 0) continue;

    SampleBatch out;
    out.phase = Phase::sampling;
    out.step = step;
    out.accept_rate = static_cast<double>(post_accepts) / static_cast<double>(post_trials);
    out.label = label;
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (!alive[static_cast<std::size_t>(b)] || !ParameterSpace::contains_normalized(z.col(b))) continue;
      out.samples.push_back({space.denormalize(z.col(b)), static_cast<std::size_t>(b), step, logp[b]});
    }
    ++result.emissions;
    if (sink.on_batch) sink.on_batch(out);
    result.samples.insert(result.samples.end(), out.samples.begin(), out.samples.end());
  }

  result.phase = Phase::done;
  result.step_size = eps;
  result.accept_rate = post_trials ? static_cast<double>(post_accepts) / static_cast<double>(post_trials) : 0;
  result.burn_in_accept_rate = burn_trials ? static_cast<double>(burn_accepts) / static_cast<double>(burn_trials) : 0;
  result.path_length_ratio = path_count ? path_sum / static_cast<double>(path_count) / diameter : 0;
  result.dead_chains = static_cast<std::size_t>(batch) - n_alive;
  return result;
}

/// Feature posterior run: prior plus likelihood (or the prior alone when spec
/// is empty), chains started from the training parameters.
inline SampleSet run_chains(const HmcConfig& cfg, const PriorModel& prior, const SurrogateModel& model,
                            const std::optional<FeatureSpec>& spec, const SampleSink& sink = {}) {
  cfg.validate();
  std::optional<FeatureLikelihood> lik;
  if (spec) lik.emplace(model, *spec);
  PosteriorTarget target(prior, std::move(lik));
  std::mt19937_64 init_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  Mat init = init_from_training(prior.entries(), cfg.n_chains, init_rng);
  return run_chains(cfg, target, model.space, std::move(init), sink, spec ? spec->label : 0);
}

// ---------------------------------------------------------------------------

/// Standard deviation of the surrogate over (up to cap, evenly strided)
/// samples on an ny x nx grid at normalized time: sqrt(sum of per-component
/// population variances). Returns ny x nx, row index = y.
inline Mat variance_map(const SurrogateModel& model, const std::vector<Sample>& samples,
                        std::size_t nx, std::size_t ny, double time, std::size_t cap = 1000) {
  if (samples.empty()) throw StateError("variance map needs at least one sample");
  if (nx < 1 || ny < 1) throw ConfigError("variance map grid must be nonempty");
  const std::size_t cd = model.coord_dim();
  Mat coords(cd, static_cast<Eigen::Index>(nx * ny));
  for (std::size_t iy = 0; iy < ny; ++iy)
    for (std::size_t ix = 0; ix < nx; ++ix) {
      const auto col = static_cast<Eigen::Index>(iy * nx + ix);
      coords(0, col) = DomainSpec::node(ix, nx, {-1.0, 1.0});
      coords(1, col) = DomainSpec::node(iy, ny, {-1.0, 1.0});
      if (cd > 2) coords(2, col) = time;
    }
  const std::size_t used = std::min(cap == 0 ? samples.size() : cap, samples.size());
  const Eigen::Index n = model.net.output_dim();
  Mat mean = Mat::Zero(n, coords.cols()), m2 = Mat::Zero(n, coords.cols());
  for (std::size_t i = 0; i < used; ++i) {
    const auto& s = samples[i * samples.size() / used];
    const Mat f = forward_at(model, coords, model.space.normalize(s.z));
    const Mat delta = f - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta.cwiseProduct(f - mean);
  }
  const Mat var = m2 / static_cast<double>(used);
  const Vec sd = var.colwise().sum().cwiseSqrt().transpose();
  Mat out(static_cast<Eigen::Index>(ny), static_cast<Eigen::Index>(nx));
  for (std::size_t iy = 0; iy < ny; ++iy)
    for (std::size_t ix = 0; ix < nx; ++ix)
      out(static_cast<Eigen::Index>(iy), static_cast<Eigen::Index>(ix)) =
          sd[static_cast<Eigen::Index>(iy * nx + ix)];
  return out;
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_HMC_HPP
