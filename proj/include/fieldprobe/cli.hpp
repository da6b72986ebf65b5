#ifndef FIELDPROBE_CLI_HPP
#define FIELDPROBE_CLI_HPP

// Command-line driver. run_cli() parses arguments, dispatches to the library
// and maps errors to exit codes: 0 success, 1 usage/validation, 2 runtime.

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fieldprobe/diagnostics.hpp"
#include "fieldprobe/synth.hpp"
#include "fieldprobe/server.hpp"

namespace fieldprobe {

// ---------------------------------------------------------------------------
// Sample CSV

inline void write_samples_csv(const std::vector<Sample>& samples, std::size_t dim, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "chain,step";
  for (std::size_t j = 0; j < dim; ++j) out << ",z" << j;
  out << ",log_post\n";
  for (const auto& s : samples) {
    out << s.chain << ',' << s.step;
    for (Eigen::Index j = 0; j < s.z.size(); ++j) out << ',' << s.z[j];
    out << ',' << s.log_posterior << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<Sample> read_samples_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open samples file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty samples file");
  std::size_t columns = 1;
  for (char c : line) columns += c == ',' ? 1 : 0;
  if (line.rfind("chain,step,z0", 0) != 0 || columns < 4)
    throw FormatError(path.string() + ": expected header chain,step,z0,...,log_post");
  const std::size_t dim = columns - 3;
  std::vector<Sample> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    try {
      while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad number on row " + std::to_string(row));
    }
    if (v.size() != columns) throw FormatError(path.string() + ": wrong column count on row " + std::to_string(row));
    Sample s;
    s.chain = static_cast<std::size_t>(v[0]);
    s.step = static_cast<std::size_t>(v[1]);
    s.z = Eigen::Map<const Vec>(v.data() + 2, static_cast<Eigen::Index>(dim));
    s.log_posterior = v.back();
    out.push_back(std::move(s));
  }
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline FeatureSpec load_feature(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open feature file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(ValidationError::FieldMessages{{"feature", std::string("invalid JSON: ") + e.what()}});
  }
  return feature_from_json(j);
}

// ---------------------------------------------------------------------------
// --config expansion

namespace detail {

inline std::string config_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string out;
    for (const auto& e : v) out += (out.empty() ? "" : ",") + config_value(e);
    return out;
  }
  return v.dump();
}

/// Inserts "--key value" pairs from the JSON object named by --config in
/// front of the command-line options, so explicit flags take precedence.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  std::vector<std::string> extra;
  for (const auto& [key, value] : j.items()) {
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back("--" + key);
      continue;
    }
    extra.push_back("--" + key);
    extra.push_back(config_value(value));
  }
  std::size_t at = 1;
  while (at < args.size() && args[at].rfind("-", 0) != 0) ++at;
  args.insert(args.begin() + static_cast<long>(at), extra.begin(), extra.end());
  return args;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      const long v = std::stol(cell);
      if (v <= 0) throw std::invalid_argument("non-positive");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": expected comma-separated positive integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + " must not be empty");
  return out;
}

inline FieldProbeServer* g_serving = nullptr;

inline void stop_serving(int) {
  if (g_serving) std::thread([s = g_serving] { s->stop(); }).detach();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dispatch

struct HmcFlags {
  HmcConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--chains", cfg.n_chains, "number of HMC chains")->capture_default_str();
    app->add_option("--leapfrog", cfg.leapfrog_steps, "leapfrog steps per HMC step")->capture_default_str();
    app->add_option("--burn-in", cfg.burn_in, "burn-in steps")->capture_default_str();
    app->add_option("--post-steps", cfg.post_steps, "post burn-in steps")->capture_default_str();
    app->add_option("--emit-every", cfg.emit_every, "emit samples every k post steps")->capture_default_str();
    app->add_option("--step-size", cfg.step_size, "initial leapfrog step size (normalized units)")->capture_default_str();
  }
};

inline int run_cli(const std::vector<std::string>& raw_args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  try {
    args = detail::expand_config(raw_args);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  CLI::App app{"Feature-driven parameter-space exploration for ensemble surrogates", "fieldprobe"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  std::string config_path;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "random seed")->capture_default_str();
    sub->add_option("--config", config_path, "JSON file of option values (flags override)");
  };

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic ensemble (train/ and test/)");
  std::string family, out_dir, resolution;
  std::size_t n_train = 60, n_test = 40;
  gen->add_option("--family", family, "vortex-street-toy | viscosity-decay-toy | vortex-pair-toy")->required();
  gen->add_option("--train", n_train, "training members")->capture_default_str();
  gen->add_option("--test", n_test, "test members")->capture_default_str();
  gen->add_option("--resolution", resolution, "grid as t,y,x");
  gen->add_option("--out", out_dir, "output directory")->required();
  common(gen);

  // train
  auto* trn = app.add_subcommand("train", "train a SIREN surrogate on an ensemble");
  std::string data_dir, model_path, hidden = "128,128,128,128", loss_out;
  TrainConfig tc;
  double coord_scale = 30.0, param_scale = 10.0;
  trn->add_option("--data", data_dir, "ensemble directory")->required();
  trn->add_option("--out", model_path, "model file to write")->required();
  trn->add_option("--hidden", hidden, "hidden layer widths")->capture_default_str();
  trn->add_option("--steps", tc.steps, "optimization steps")->capture_default_str();
  trn->add_option("--batch", tc.batch_size, "minibatch size")->capture_default_str();
  trn->add_option("--lr", tc.base_lr, "base learning rate")->capture_default_str();
  trn->add_option("--coord-scale", coord_scale, "coordinate input scale")->capture_default_str();
  trn->add_option("--param-scale", param_scale, "parameter input scale")->capture_default_str();
  trn->add_option("--loss-out", loss_out, "CSV loss trace");
  common(trn);

  // fim
  auto* fim = app.add_subcommand("fim", "precompute per-member Fisher information and prior bandwidths");
  std::string fim_path;
  std::size_t fim_samples = std::size_t{1} << 20;
  fim->add_option("--model", model_path, "model file")->required();
  fim->add_option("--data", data_dir, "training ensemble directory")->required();
  fim->add_option("--samples", fim_samples, "domain samples per member")->capture_default_str();
  fim->add_option("--out", fim_path, "FIM file to write")->required();
  common(fim);

  // sample
  auto* smp = app.add_subcommand("sample", "run the HMC sampler for one feature");
  std::string feature_path;
  std::size_t heat_res = 32;
  HmcFlags hmc_flags;
  smp->add_option("--model", model_path, "model file")->required();
  smp->add_option("--fim", fim_path, "FIM file")->required();
  smp->add_option("--feature", feature_path, "FeatureSpec JSON file");
  smp->add_option("--out", out_dir, "output directory")->required();
  smp->add_option("--res", heat_res, "heatmap resolution")->capture_default_str();
  hmc_flags.add(smp);
  common(smp);

  // diagnose
  auto* dia = app.add_subcommand("diagnose", "evaluation reports");
  dia->require_subcommand(1);
  std::size_t bins = 50;
  std::string scorer = "fim-kde", samples_a, samples_b;
  std::size_t n_features = 10, n_utilities = 16;
  double bandwidth = 0;
  auto* d_psnr = dia->add_subcommand("psnr-hist", "PSNR histogram of model vs test members");
  auto* d_sparse = dia->add_subcommand("sparsify", "sparsification curve for an uncertainty scorer");
  auto* d_rhat = dia->add_subcommand("rhat", "split-Rhat histogram over random features");
  auto* d_mmd = dia->add_subcommand("mmd", "MMD between two sample files");
  auto* d_nll = dia->add_subcommand("nll", "normalized feature-distance histogram of samples");
  for (auto* d : {d_psnr, d_sparse, d_rhat, d_nll}) d->add_option("--model", model_path, "model file")->required();
  for (auto* d : {d_psnr, d_sparse, d_rhat, d_nll}) d->add_option("--data", data_dir, "ensemble directory")->required();
  for (auto* d : {d_sparse, d_rhat}) d->add_option("--fim", fim_path, "FIM file")->required();
  for (auto* d : {d_psnr, d_sparse, d_rhat, d_mmd, d_nll}) {
    d->add_option("--out", out_dir, "output directory")->required();
    common(d);
  }
  for (auto* d : {d_psnr, d_rhat, d_nll}) d->add_option("--bins", bins, "histogram bins")->capture_default_str();
  d_sparse->add_option("--scorer", scorer, "fim-kde | kde | oracle")->capture_default_str();
  d_rhat->add_option("--features", n_features, "random features")->capture_default_str();
  d_rhat->add_option("--utilities", n_utilities, "utility positions per feature")->capture_default_str();
  hmc_flags.add(d_rhat);
  d_mmd->add_option("--a", samples_a, "samples CSV")->required();
  d_mmd->add_option("--b", samples_b, "samples CSV")->required();
  d_mmd->add_option("--bandwidth", bandwidth, "kernel bandwidth (0: median heuristic)")->capture_default_str();
  d_nll->add_option("--samples", samples_a, "samples CSV")->required();
  d_nll->add_option("--feature", feature_path, "FeatureSpec JSON file")->required();

  // serve
  auto* srv = app.add_subcommand("serve", "start the HTTP session server");
  std::string host = "127.0.0.1";
  int port = 8080;
  srv->add_option("--model", model_path, "model file")->required();
  srv->add_option("--fim", fim_path, "FIM file")->required();
  srv->add_option("--host", host, "bind address")->capture_default_str();
  srv->add_option("--port", port, "port")->capture_default_str();
  hmc_flags.add(srv);
  common(srv);

  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) {
      auto cfg = default_family_config(parse_family(family), seed);
      if (!resolution.empty()) cfg.domain.resolution = detail::parse_sizes(resolution, "--resolution");
      cfg.domain.validate();
      const auto ens = generate_ensemble(cfg, n_train, n_test, out_dir);
      out << "wrote " << ens.train.count() << " train and " << ens.test.count() << " test members to " << out_dir
          << "\n";
    } else if (trn->parsed()) {
      const auto ds = EnsembleDataset::load_manifest(data_dir);
      tc.seed = seed;
      tc.validate();
      auto model = init_model(ds.space(), ds.domain(), detail::parse_sizes(hidden, "--hidden"), seed, coord_scale,
                              param_scale);
      const auto trace = train(model, ds, tc);
      save_model(model, model_path);
      if (!loss_out.empty()) {
        std::ostringstream csv;
        csv << "step,loss\n";
        for (const auto& r : trace) csv << r.step << ',' << r.loss << '\n';
        write_text(loss_out, csv.str());
      }
      out << "trained " << model.parameter_count() << " parameters; final loss "
          << (trace.empty() ? 0.0 : trace.back().loss) << "\n";
    } else if (fim->parsed()) {
      const auto model = load_model(model_path);
      const auto ds = EnsembleDataset::load_manifest(data_dir);
      const auto prior = PriorModel::from_entries(compute_fims(model, ds, fim_samples, seed));
      save_prior(prior, fim_path);
      out << "sigma_s " << prior.bandwidths().sigma_s << " sigma_f " << prior.bandwidths().sigma_f << "\n";
    } else if (smp->parsed()) {
      const auto model = load_model(model_path);
      const auto prior = load_prior(fim_path);
      std::optional<FeatureSpec> spec;
      if (!feature_path.empty()) {
        spec = load_feature(feature_path);
        spec->validate(model.param_dim());
      }
      HmcConfig cfg = hmc_flags.cfg;
      cfg.seed = seed;
      const auto result = run_chains(cfg, prior, model, spec);
      fs::create_directories(out_dir);
      write_samples_csv(result.samples, model.param_dim(), fs::path(out_dir) / "samples.csv");
      write_json(fs::path(out_dir) / "heatmaps.json",
                 to_json(marginal_matrix(sample_values(result.samples), model.space, heat_res)));
      write_json(fs::path(out_dir) / "summary.json", {{"samples", result.samples.size()},
                                                      {"emissions", result.emissions},
                                                      {"accept_rate", result.accept_rate},
                                                      {"burn_in_accept_rate", result.burn_in_accept_rate},
                                                      {"step_size", result.step_size},
                                                      {"dead_chains", result.dead_chains}});
      out << result.samples.size() << " samples, acceptance " << result.accept_rate << "\n";
    } else if (dia->parsed()) {
      fs::create_directories(out_dir);
      const fs::path dir(out_dir);
      if (d_psnr->parsed()) {
        const auto model = load_model(model_path);
        const auto ds = EnsembleDataset::load_manifest(data_dir);
        const double extent = dataset_extent(ds);
        const auto errors = member_errors(model, ds, extent);
        const auto h = auto_histogram(errors.psnr, bins);
        double mean = 0;
        for (double p : errors.psnr) mean += p;
        mean /= static_cast<double>(errors.psnr.size());
        write_json(dir / "psnr.json", {{"extent", extent}, {"mean", mean}, {"values", errors.psnr}, {"histogram", to_json(h)}});
        write_text(dir / "psnr.csv", to_csv(h));
        out << "mean PSNR " << mean << " dB over " << errors.psnr.size() << " members\n";
      } else if (d_sparse->parsed()) {
        const auto model = load_model(model_path);
        const auto prior = load_prior(fim_path);
        const auto ds = EnsembleDataset::load_manifest(data_dir);
        const auto errors = member_errors(model, ds, dataset_extent(ds));
        Scorer s;
        if (scorer == "fim-kde") s = fim_kde_scorer(prior);
        else if (scorer == "kde") s = kde_scorer(prior.entries(), prior.bandwidths().sigma_s);
        else if (scorer == "oracle") s = oracle_scorer(errors);
        else throw ConfigError("unknown scorer '" + scorer + "'");
        const auto curve = sparsification(s, errors, default_fractions(), scorer);
        write_json(dir / ("sparsify_" + scorer + ".json"), to_json(curve));
        write_text(dir / ("sparsify_" + scorer + ".csv"), to_csv(curve));
        for (std::size_t i = 0; i < curve.fractions.size(); ++i)
          out << curve.fractions[i] << ' ' << curve.mean_psnr[i] << "\n";
      } else if (d_rhat->parsed()) {
        const auto model = load_model(model_path);
        const auto prior = load_prior(fim_path);
        const auto ds = EnsembleDataset::load_manifest(data_dir);
        std::vector<Vec> refs;
        for (const auto& m : ds.members()) refs.push_back(ds.space().normalize(m.z));
        HmcConfig cfg = hmc_flags.cfg;
        cfg.seed = seed;
        const auto r = rhat_report(cfg, prior, model, refs, n_utilities, n_features, seed, bins);
        write_json(dir / "rhat.json", {{"values", r.values},
                                       {"fraction_below_1.1", r.fraction_below(1.1)},
                                       {"histogram", to_json(r.histogram)}});
        write_text(dir / "rhat.csv", to_csv(r.histogram));
        out << "fraction of R-hat < 1.1: " << r.fraction_below(1.1) << "\n";
      } else if (d_mmd->parsed()) {
        const auto a = sample_values(read_samples_csv(samples_a));
        const auto b = sample_values(read_samples_csv(samples_b));
        const double v = mmd(subsample(a, 4000), subsample(b, 4000), bandwidth);
        write_json(dir / "mmd.json", {{"mmd", v}, {"bandwidth", bandwidth}, {"n_a", a.size()}, {"n_b", b.size()}});
        write_text(dir / "mmd.csv", "mmd\n" + std::to_string(v) + "\n");
        out << "mmd " << v << "\n";
      } else if (d_nll->parsed()) {
        const auto model = load_model(model_path);
        const auto ds = EnsembleDataset::load_manifest(data_dir);
        const auto spec = load_feature(feature_path);
        spec.validate(model.param_dim());
        const auto r = nll_distribution(sample_values(read_samples_csv(samples_a)), model, spec,
                                        ensemble_mean_norm(ds), bins);
        write_json(dir / "nll.json", {{"median", r.median}, {"values", r.values}, {"histogram", to_json(r.histogram)}});
        write_text(dir / "nll.csv", to_csv(r.histogram));
        out << "median normalized NLL " << r.median << "\n";
      }
    } else if (srv->parsed()) {
      auto model = std::make_shared<const SurrogateModel>(load_model(model_path));
      auto prior = std::make_shared<const PriorModel>(load_prior(fim_path));
      ServerConfig sc;
      sc.hmc = hmc_flags.cfg;
      sc.seed = seed;
      FieldProbeServer server(model, prior, sc);
      detail::g_serving = &server;
      std::signal(SIGINT, detail::stop_serving);
      std::signal(SIGTERM, detail::stop_serving);
      out << "serving on " << host << ":" << port << std::endl;
      server.listen(host, port);
      detail::g_serving = nullptr;
    }
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

inline int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv, argv + argc));
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_CLI_HPP
