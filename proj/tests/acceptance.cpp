// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments
// select criteria by number (e.g. `acceptance 3 9`); default runs all.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "fieldprobe/diagnostics.hpp"
#include "fieldprobe/synth.hpp"
#include "test_util.hpp"

using namespace fieldprobe;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Desk {
  AnalyticFamilyConfig cfg;
  std::unique_ptr<EnsembleDataset> train, test;
  SurrogateModel model;
  std::unique_ptr<PriorModel> prior;
  double train_seconds = 0;
  double fim_seconds = 0;
};

constexpr std::size_t kFimSamples = std::size_t{1} << 16;

/// Desk-scale pipeline: generate, train a 3x32 SIREN, precompute FIMs.
Desk build_desk(Family family, std::size_t n_train, std::size_t n_test, const fs::path& dir) {
  Desk d;
  d.cfg = default_family_config(family, 7);
  auto ens = generate_ensemble(d.cfg, n_train, n_test, dir);
  d.train = std::make_unique<EnsembleDataset>(std::move(ens.train));
  d.test = std::make_unique<EnsembleDataset>(std::move(ens.test));
  d.model = init_model(d.cfg.space, d.cfg.domain, {32, 32, 32}, 1);
  TrainConfig tc;
  tc.steps = 6000;
  tc.batch_size = 4096;
  tc.base_lr = 1e-3;
  tc.seed = 1;
  auto t0 = Clock::now();
  train(d.model, *d.train, tc);
  d.train_seconds = seconds_since(t0);
  t0 = Clock::now();
  d.prior = std::make_unique<PriorModel>(PriorModel::from_entries(compute_fims(d.model, *d.train, kFimSamples, 3)));
  d.fim_seconds = seconds_since(t0);
  return d;
}

std::vector<Vec> normalized_members(const EnsembleDataset& ds) {
  std::vector<Vec> out;
  for (const auto& m : ds.members()) out.push_back(ds.space().normalize(m.z));
  return out;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

double rel(const Mat& a, const Mat& b) { return (a - b).norm() / std::max(a.norm(), 1e-8); }

// ---------------------------------------------------------------------------

Outcome gradients(const Desk& street) {
  const auto& model = street.model;
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  double worst_jac = 0, worst_prior = 0, worst_lik = 0;
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const Vec z{{u(rng), u(rng)}};
    Mat coords(3, 8);
    for (Eigen::Index i = 0; i < coords.size(); ++i) coords.data()[i] = u(rng);
    worst_jac = std::max(worst_jac, rel(jacobian_wrt_params(model, coords, z),
                                        finite_difference_jacobian(model, coords, z, h)));

    const auto [lp, g] = street.prior->log_prior_and_grad(z);
    Vec fd(2);
    for (Eigen::Index j = 0; j < 2; ++j) {
      Vec zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      fd[j] = (street.prior->log_prior(zp) - street.prior->log_prior(zm)) / (2 * h);
    }
    worst_prior = std::max(worst_prior, rel(g, fd));

    FeatureSpec spec;
    spec.center = {u(rng), u(rng)};
    spec.radius = 0.2;
    spec.time = u(rng);
    spec.z_ref = Vec{{u(rng), u(rng)}};
    const FeatureLikelihood lik(model, spec);
    const Mat pts = lik.sample_points(rng);
    Vec v;
    Mat grad;
    lik.evaluate(pts, z, v, grad);
    Vec lfd(2);
    for (Eigen::Index j = 0; j < 2; ++j) {
      Vec zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      Vec vp, vm;
      Mat gp;
      lik.evaluate(pts, zp, vp, gp);
      lik.evaluate(pts, zm, vm, gp);
      lfd[j] = (vp[0] - vm[0]) / (2 * h);
    }
    worst_lik = std::max(worst_lik, rel(grad, lfd));
  }
  const double worst = std::max({worst_jac, worst_prior, worst_lik});
  return {worst < 1e-4, "20 configs; max rel err jacobian " + fmt(worst_jac, 3) + ", prior " + fmt(worst_prior, 3) +
                            ", likelihood " + fmt(worst_lik, 3)};
}

Outcome fim_exactness() {
  // f(x, z) = (A0 + (x1 + x2 + x3) A1) z; the Jacobian is exactly A(x)
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  Mat a0(2, 3), a1(2, 3);
  for (Eigen::Index i = 0; i < 6; ++i) a0.data()[i] = g(rng), a1.data()[i] = g(rng);
  auto a_at = [&](const Eigen::Ref<const Vec>& x) -> Mat { return a0 + x.sum() * a1; };
  std::vector<Mat> seen;
  auto jac = [&](const Mat& coords, const Vec&) {
    seen.push_back(coords);
    Mat j(2 * coords.cols(), 3);
    for (Eigen::Index k = 0; k < coords.cols(); ++k) j.middleRows(2 * k, 2) = a_at(coords.col(k));
    return j;
  };
  const Vec zi{{0.2, -0.1, 0.4}};
  const std::size_t m = 4096;
  const auto entry = compute_fim(jac, 3, zi, m, 17, 512);
  std::uniform_real_distribution<double> u(-1, 1);
  double worst = 0;
  for (int trial = 0; trial < 25; ++trial) {
    const Vec z{{u(rng), u(rng), u(rng)}};
    double brute = 0;
    for (const Mat& pts : seen)
      for (Eigen::Index k = 0; k < pts.cols(); ++k) brute += (a_at(pts.col(k)) * (z - zi)).squaredNorm();
    brute /= static_cast<double>(m);
    worst = std::max(worst, std::abs(fim_distance(z, entry) - brute) / std::max(1.0, brute));
  }
  return {worst < 1e-8, "25 queries, max |D2_FIM - D2| (rel, floor 1) = " + fmt(worst, 3)};
}

Outcome hmc_standard_normal() {
  ParameterSpace box{{-6.0, -6.0}, {6.0, 6.0}, {"a", "b"}};
  auto target = AnalyticTarget::standard_normal(6.0);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 0.02);
  Mat init(2, 1000);
  for (Eigen::Index i = 0; i < init.size(); ++i) init.data()[i] = g(rng);
  HmcConfig cfg;
  cfg.seed = 2024;
  const auto out = run_chains(cfg, target, box, init);
  Vec mean = Vec::Zero(2), sq = Vec::Zero(2);
  for (const auto& s : out.samples) {
    mean += s.z;
    sq += s.z.cwiseProduct(s.z);
  }
  mean /= static_cast<double>(out.samples.size());
  const Vec var = sq / static_cast<double>(out.samples.size()) - mean.cwiseProduct(mean);
  const double mean_err = mean.cwiseAbs().maxCoeff();
  const double var_err = (var.array() - 1.0).abs().maxCoeff();
  const bool ok = mean_err < 0.05 && var_err < 0.1 && out.accept_rate >= 0.4 && out.accept_rate <= 0.7;
  return {ok, "mean " + fmt(mean[0], 3) + "," + fmt(mean[1], 3) + " var " + fmt(var[0], 3) + "," + fmt(var[1], 3) +
                  " acceptance " + fmt(out.accept_rate, 3) + " (" + std::to_string(out.samples.size()) + " samples)"};
}

Outcome posterior_density(const Desk& decay) {
  const auto& model = decay.model;
  FeatureSpec spec;
  spec.center = {0.3, 0.2};
  spec.radius = 0.3;
  spec.time = 0.5;
  spec.z_ref = decay.test->space().normalize(decay.test->member(0).z);
  HmcConfig cfg;
  cfg.seed = 77;
  const auto out = run_chains(cfg, *decay.prior, model, spec);

  // dense-grid oracle on the 200 bin centres
  const std::size_t bins = 200;
  const Mat quad = disc_quadrature(spec, model.coord_dim(), 1000);
  std::vector<double> logp(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    const Vec u = Vec::Constant(1, -1.0 + (static_cast<double>(i) + 0.5) * 2.0 / static_cast<double>(bins));
    logp[i] = decay.prior->log_prior(u) - feature_distance(model, u, spec, quad) / spec.tolerance;
  }
  const double top = *std::max_element(logp.begin(), logp.end());
  std::vector<double> grid(bins), hist(bins, 0.0);
  for (std::size_t i = 0; i < bins; ++i) grid[i] = std::exp(logp[i] - top);
  for (const auto& s : out.samples) {
    const long b = bin_index(model.space.normalize(s.z)[0], -1.0, 1.0, bins);
    if (b >= 0) hist[static_cast<std::size_t>(b)] += 1.0;
  }
  const double tv = total_variation(hist, grid);
  return {tv < 0.1, "TV(samples, dense grid) = " + fmt(tv, 3) + " over 200 bins, " +
                        std::to_string(out.samples.size()) + " samples; training " +
                        fmt(decay.train_seconds, 3) + " s"};
}

Outcome mixing(const Desk& street) {
  const auto refs = normalized_members(*street.test);
  HmcConfig cfg;
  cfg.seed = 5;
  const auto r10 = rhat_report(cfg, *street.prior, street.model, refs, 16, 10, 99);
  cfg.leapfrog_steps = 1;
  const auto r1 = rhat_report(cfg, *street.prior, street.model, refs, 16, 10, 99);
  auto above = [](const RhatReport& r, double t) {
    std::size_t k = 0;
    for (double v : r.values) k += (!std::isfinite(v) || v > t) ? 1 : 0;
    return static_cast<double>(k) / static_cast<double>(r.values.size());
  };
  const double frac10 = r10.fraction_below(1.1);
  bool dominates = true, strict = false;
  std::string tail;
  for (double t : {1.01, 1.02, 1.05, 1.1, 1.2}) {
    const double a1 = above(r1, t), a10 = above(r10, t);
    dominates &= a1 >= a10;
    strict |= a1 > a10;
    tail += " P(>" + fmt(t, 3) + ") " + fmt(a1, 3) + "/" + fmt(a10, 3);
  }
  return {frac10 >= 0.9 && dominates && strict,
          "L=10: " + fmt(100 * frac10, 3) + "% of " + std::to_string(r10.values.size()) +
              " R-hat < 1.1; tail L=1/L=10:" + tail};
}

Outcome convergence(const Desk& street) {
  const auto refs = normalized_members(*street.test);
  std::mt19937_64 rng(606);
  std::size_t wins = 0;
  std::string values;
  for (int f = 0; f < 10; ++f) {
    const FeatureSpec spec = random_feature(refs, rng, street.model.coord_dim());
    auto run = [&](std::size_t post, std::uint64_t seed) {
      HmcConfig cfg;
      cfg.n_chains = 250;
      cfg.post_steps = post;
      cfg.seed = seed;
      return subsample(sample_values(run_chains(cfg, *street.prior, street.model, spec).samples), 2000);
    };
    const auto ref = run(400, 1000 + f);
    const auto s100 = run(100, 2000 + f);
    const auto s25 = run(25, 3000 + f);
    const double m100 = mmd(s100, ref), m25 = mmd(s25, ref);
    wins += m100 < m25 ? 1 : 0;
    values += " " + fmt(m100, 2) + "<" + fmt(m25, 2) + (m100 < m25 ? "" : "(x)");
  }
  return {wins >= 8, std::to_string(wins) + "/10 features with MMD(100,400) < MMD(25,400):" + values};
}

Outcome prior_effectiveness(const Desk& street) {
  const double extent = dataset_extent(*street.train);
  const auto errors = member_errors(street.model, *street.test, extent);
  const auto fractions = default_fractions();
  const auto fk = sparsification(fim_kde_scorer(*street.prior), errors, fractions, "fim-kde");
  const auto kd = sparsification(kde_scorer(street.prior->entries(), street.prior->bandwidths().sigma_s), errors,
                                 fractions, "kde");
  const std::size_t i8 = 8;  // fraction 0.8
  const bool rising = fk.mean_psnr[i8] >= fk.mean_psnr[0] - 0.5;
  const bool dominates = fk.mean_psnr[i8] >= kd.mean_psnr[i8];
  return {rising && dominates, "FIM-KDE PSNR " + fmt(fk.mean_psnr[0], 4) + " -> " + fmt(fk.mean_psnr[i8], 4) +
                                   " dB at 0.8; KDE at 0.8 " + fmt(kd.mean_psnr[i8], 4) + " dB; scorer time " +
                                   fmt(fk.scorer_seconds, 2) + " s vs " + fmt(kd.scorer_seconds, 2) + " s"};
}

Outcome generalization(const Desk& street, const Desk& decay) {
  std::string detail;
  bool ok = true;
  for (const Desk* d : {&street, &decay}) {
    const auto errors = member_errors(d->model, *d->test, dataset_extent(*d->train));
    double mean = 0;
    for (double p : errors.psnr) mean += p;
    mean /= static_cast<double>(errors.psnr.size());
    ok &= mean >= 35.0 && d->train_seconds < 600;
    detail += family_name(d->cfg.family) + " held-out PSNR " + fmt(mean, 4) + " dB (train " +
              fmt(d->train_seconds, 3) + " s); ";
  }
  return {ok, detail};
}

struct LatencyRun {
  double burn_in_seconds = 0;
  double max_emission_seconds = 0;
  std::vector<Vec> samples;
  FeatureSpec spec;
};

LatencyRun timed_run(const Desk& street) {
  LatencyRun r;
  r.spec.center = {0.2, 0.0};
  r.spec.radius = 0.25;
  r.spec.time = 0.0;
  r.spec.z_ref = street.test->space().normalize(street.test->member(0).z);
  HmcConfig cfg;
  cfg.seed = 909;
  SampleSink sink;
  const auto t0 = Clock::now();
  auto last = t0;
  sink.on_burnin = [&](std::size_t step, double, double) {
    if (step == cfg.burn_in) {
      r.burn_in_seconds = seconds_since(t0);
      last = Clock::now();
    }
  };
  sink.on_batch = [&](const SampleBatch&) {
    r.max_emission_seconds = std::max(r.max_emission_seconds, seconds_since(last));
    last = Clock::now();
  };
  r.samples = sample_values(run_chains(cfg, *street.prior, street.model, r.spec, sink).samples);
  return r;
}

Outcome latency(const LatencyRun& r) {
  return {r.burn_in_seconds <= 10.0 && r.max_emission_seconds <= 1.0,
          "burn-in (50 steps, B=1000, L=10, d=2) " + fmt(r.burn_in_seconds, 3) + " s; slowest emission " +
              fmt(r.max_emission_seconds, 3) + " s"};
}

Outcome feature_match(const Desk& street, const LatencyRun& r) {
  const double norm = ensemble_mean_norm(*street.train);
  const auto hmc = nll_distribution(subsample(r.samples, 2000), street.model, r.spec, norm);
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Vec> uniform;
  const auto& space = street.model.space;
  for (int i = 0; i < 2000; ++i) {
    Vec z(space.dim());
    for (std::size_t j = 0; j < space.dim(); ++j) z[j] = space.lower[j] + u(rng) * (space.upper[j] - space.lower[j]);
    uniform.push_back(z);
  }
  const auto base = nll_distribution(uniform, street.model, r.spec, norm);
  return {hmc.median < 0.2 && hmc.median < base.median,
          "median normalized NLL: HMC " + fmt(hmc.median, 3) + ", uniform baseline " + fmt(base.median, 3)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  auto wanted = [&](int c) { return only.empty() || only.count(c) > 0; };

  fieldprobe::testing::TempDir dir("fp_acceptance");
  std::cout.setf(std::ios::unitbuf);
  auto t0 = Clock::now();
  const bool need_street = wanted(1) || wanted(5) || wanted(6) || wanted(7) || wanted(8) || wanted(9) || wanted(10);
  const bool need_decay = wanted(4) || wanted(8);
  std::optional<Desk> street, decay;
  if (need_street) street = build_desk(Family::vortex_street, 60, 100, dir.path() / "street");
  if (need_decay) decay = build_desk(Family::viscosity_decay, 60, 40, dir.path() / "decay");
  std::cout << "setup: desk ensembles, 3x32 surrogates and FIMs (M=" << kFimSamples << ") in "
            << fmt(seconds_since(t0), 3) << " s\n";

  int failures = 0;
  auto report = [&](int n, const char* name, double budget, const std::function<Outcome()>& fn) {
    if (!wanted(n)) return;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = seconds_since(start);
    const bool pass = o.pass && sec <= budget;
    failures += pass ? 0 : 1;
    std::cout << "CRITERION " << n << " [" << name << "]: " << (pass ? "PASS" : "FAIL") << " (" << o.detail
              << "; " << fmt(sec, 3) << " s, budget " << budget << " s)\n";
  };

  report(1, "gradient correctness", 30, [&] { return gradients(*street); });
  report(2, "FIM exactness", 5, [&] { return fim_exactness(); });
  report(3, "HMC statistical correctness", 60, [&] { return hmc_standard_normal(); });
  report(4, "posterior-density equivalence", 300 - (decay ? decay->train_seconds + decay->fim_seconds : 0),
         [&] { return posterior_density(*decay); });
  report(5, "mixing", 600, [&] { return mixing(*street); });
  report(6, "convergence vs reference", 900, [&] { return convergence(*street); });
  report(7, "prior effectiveness", 600, [&] { return prior_effectiveness(*street); });
  report(8, "surrogate generalization", 600, [&] { return generalization(*street, *decay); });
  std::optional<LatencyRun> run;
  if (wanted(9) || wanted(10)) run = timed_run(*street);
  report(9, "interactive latency", 1e9, [&] { return latency(*run); });
  report(10, "feature-match quality", 300, [&] { return feature_match(*street, *run); });
  std::cout << "total " << fmt(seconds_since(t0), 4) << " s, " << failures << " failing\n";
  return failures == 0 ? 0 : 1;
}
