#ifndef FIELDPROBE_SERVER_HPP
#define FIELDPROBE_SERVER_HPP

// Session service over HTTP. Request/response endpoints return JSON; the
// per-session event stream is a chunked response of newline-delimited JSON.
//
//   POST   /session                       -> {"id"}
//   GET    /session/{id}                  -> run states per label
//   DELETE /session/{id}
//   POST   /session/{id}/field            {"z", "time", "res"} -> glyph grid
//   POST   /session/{id}/feature          FeatureSpec -> {"run", "label"}
//   GET    /session/{id}/marginals?label=&res=
//   GET    /session/{id}/variance?label=&res=&time=
//   GET    /session/{id}/compare?res=&pair=j,k
//   GET    /session/{id}/stream?from=&until_idle=

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fieldprobe/analysis.hpp"
#include "fieldprobe/hmc.hpp"

// after Eigen: <resolv.h> (pulled in by httplib) defines a _res macro that
// collides with Eigen parameter names
#include "httplib.h"

namespace fieldprobe {

using json = nlohmann::json;

enum class RunState { idle, burn_in, streaming, done, cancelled, failed };

inline std::string run_state_name(RunState s) {
  switch (s) {
    case RunState::idle: return "idle";
    case RunState::burn_in: return "burn_in";
    case RunState::streaming: return "streaming";
    case RunState::done: return "done";
    case RunState::cancelled: return "cancelled";
    case RunState::failed: return "failed";
  }
  return "?";
}

struct ServerConfig {
  HmcConfig hmc;
  std::uint64_t seed = 0;
  std::size_t variance_resolution = 32;
  std::size_t max_labels = 2;
};

/// Glyph grid: res x res points over the spatial box at normalized time,
/// row-major with y slowest. z is in physical units and may lie outside the box.
inline json eval_field(const SurrogateModel& model, const Vec& z_physical, double time, std::size_t res) {
  if (res < 1 || res > 512) throw ConfigError("glyph resolution must lie in [1, 512]");
  if (static_cast<std::size_t>(z_physical.size()) != model.param_dim())
    throw ValidationError(ValidationError::FieldMessages{
        {"z", "must have " + std::to_string(model.param_dim()) + " entries"}});
  const std::size_t cd = model.coord_dim();
  Mat coords(cd, static_cast<Eigen::Index>(res * res));
  for (std::size_t iy = 0; iy < res; ++iy)
    for (std::size_t ix = 0; ix < res; ++ix) {
      const auto col = static_cast<Eigen::Index>(iy * res + ix);
      coords(0, col) = DomainSpec::node(ix, res, {-1.0, 1.0});
      coords(1, col) = DomainSpec::node(iy, res, {-1.0, 1.0});
      if (cd > 2) coords(2, col) = time;
    }
  const Mat out = forward_at(model, coords, model.space.normalize(z_physical));
  json vectors = json::array();
  for (Eigen::Index c = 0; c < out.cols(); ++c)
    vectors.push_back(std::vector<double>(out.col(c).data(), out.col(c).data() + out.rows()));
  return {{"resolution", res},
          {"time", time},
          {"z", std::vector<double>(z_physical.data(), z_physical.data() + z_physical.size())},
          {"extent", {{-1.0, 1.0}, {-1.0, 1.0}}},
          {"vectors", std::move(vectors)}};
}

namespace detail {

struct FeatureRun {
  FeatureSpec spec;
  RunState state = RunState::idle;
  std::uint64_t run_id = 0;
  std::vector<Sample> samples;
  std::size_t batches = 0;
  std::shared_ptr<std::atomic<bool>> cancel;
  std::thread worker;
};

}  // namespace detail

class Session {
 public:
  Session(std::string id, std::uint64_t seed) : id_(std::move(id)), seed_(seed) {}
  ~Session() { shutdown(); }
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const std::string& id() const { return id_; }

  /// Cancels any run with the same label (waiting for it to stop), then
  /// starts a new one on a background thread.
  std::uint64_t submit(const FeatureSpec& spec, const SurrogateModel& model, const PriorModel& prior,
                       const ServerConfig& cfg) {
    std::lock_guard submitting(submit_mu_);
    std::unique_lock lock(mu_);
    if (closed_) throw StateError("session is closed");
    auto& run = runs_[spec.label];
    stop_run(run, lock);
    run.spec = spec;
    run.state = RunState::burn_in;
    run.samples.clear();
    run.batches = 0;
    run.run_id = ++run_counter_;
    run.cancel = std::make_shared<std::atomic<bool>>(false);
    HmcConfig hc = cfg.hmc;
    hc.seed = seed_ ^ (0x9e3779b97f4a7c15ULL * run.run_id);
    const auto cancel = run.cancel;
    const int label = spec.label;
    const std::size_t var_res = cfg.variance_resolution;
    run.worker = std::thread([this, hc, spec, cancel, label, var_res, &model, &prior] {
      execute(hc, spec, cancel, label, var_res, model, prior);
    });
    return run.run_id;
  }

  json status() const {
    std::lock_guard lock(mu_);
    json runs = json::object();
    for (const auto& [label, r] : runs_)
      runs[std::to_string(label)] = {{"state", run_state_name(r.state)},
                                     {"run", r.run_id},
                                     {"batches", r.batches},
                                     {"samples", r.samples.size()},
                                     {"feature", to_json(r.spec)}};
    return {{"id", id_}, {"runs", std::move(runs)}, {"events", events_.size()}};
  }

  /// Copy of the samples accumulated so far for a label.
  std::vector<Sample> snapshot(int label, std::size_t* batches = nullptr, FeatureSpec* spec = nullptr) const {
    std::lock_guard lock(mu_);
    const auto it = runs_.find(label);
    if (it == runs_.end() || it->second.batches == 0)
      throw StateError("no samples accumulated for label " + std::to_string(label));
    if (batches) *batches = it->second.batches;
    if (spec) *spec = it->second.spec;
    return it->second.samples;
  }

  /// Blocks until an event past `from` exists, the session is idle or the
  /// timeout passes; returns the events from `from` on.
  std::vector<std::string> events_since(std::size_t from, std::chrono::milliseconds wait, bool& idle) {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, wait, [&] { return events_.size() > from || closed_; });
    idle = closed_ || (!active_locked() && events_.size() <= from);
    if (from >= events_.size()) return {};
    return {events_.begin() + static_cast<long>(from), events_.end()};
  }

  bool active() const {
    std::lock_guard lock(mu_);
    return active_locked();
  }

  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }

  void shutdown() {
    std::unique_lock lock(mu_);
    closed_ = true;
    for (auto& [label, run] : runs_) stop_run(run, lock);
    cv_.notify_all();
  }

 private:
  bool active_locked() const {
    for (const auto& [label, r] : runs_)
      if (r.state == RunState::burn_in || r.state == RunState::streaming) return true;
    return false;
  }

  void push_locked(const json& j) {
    events_.push_back(j.dump());
    cv_.notify_all();
  }

  void stop_run(detail::FeatureRun& run, std::unique_lock<std::mutex>& lock) {
    if (!run.worker.joinable()) return;
    run.cancel->store(true);
    std::thread t = std::move(run.worker);
    lock.unlock();
    t.join();
    lock.lock();
  }

  void execute(const HmcConfig& hc, const FeatureSpec& spec, const std::shared_ptr<std::atomic<bool>>& cancel,
               int label, std::size_t var_res, const SurrogateModel& model, const PriorModel& prior) {
    auto current = [&](detail::FeatureRun& r) { return r.cancel == cancel; };
    SampleSink sink;
    sink.cancelled = [&] { return cancel->load(); };
    sink.on_burnin = [&](std::size_t step, double rate, double eps) {
      std::lock_guard lock(mu_);
      push_locked({{"event", "burnin"}, {"label", label}, {"step", step}, {"accept_rate", rate}, {"step_size", eps}});
    };
    sink.on_batch = [&](const SampleBatch& b) {
      json j = to_json(b);
      j["feature"] = to_json(spec);
      std::lock_guard lock(mu_);
      auto& r = runs_[label];
      if (!current(r)) return;
      r.state = RunState::streaming;
      r.samples.insert(r.samples.end(), b.samples.begin(), b.samples.end());
      ++r.batches;
      push_locked(j);
    };
    try {
      const SampleSet out = run_chains(hc, prior, model, spec, sink);
      if (out.phase == Phase::cancelled) {
        std::lock_guard lock(mu_);
        runs_[label].state = RunState::cancelled;
        push_locked({{"event", "cancelled"}, {"label", label}});
        return;
      }
      json variance;
      if (!out.samples.empty()) {
        const Mat v = variance_map(model, out.samples, var_res, var_res, spec.time);
        variance = {{"event", "variance"},
                    {"label", label},
                    {"resolution", var_res},
                    {"time", spec.time},
                    {"values", std::vector<double>(v.transpose().data(), v.transpose().data() + v.size())}};
      }
      std::lock_guard lock(mu_);
      runs_[label].state = RunState::done;
      if (!variance.is_null()) push_locked(variance);
      push_locked({{"event", "done"}, {"label", label}, {"accept_rate", out.accept_rate},
                   {"samples", out.samples.size()}});
    } catch (const std::exception& e) {
      std::lock_guard lock(mu_);
      runs_[label].state = RunState::failed;
      push_locked({{"event", "error"}, {"label", label}, {"message", e.what()}});
    }
  }

  std::string id_;
  std::uint64_t seed_;
  std::mutex submit_mu_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<int, detail::FeatureRun> runs_;
  std::vector<std::string> events_;
  std::uint64_t run_counter_ = 0;
  bool closed_ = false;
};

/// HTTP front end for one model + prior pair.
class FieldProbeServer {
 public:
  FieldProbeServer(std::shared_ptr<const SurrogateModel> model, std::shared_ptr<const PriorModel> prior,
                   ServerConfig cfg = {})
      : model_(std::move(model)), prior_(std::move(prior)), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.hmc.validate();
    routes();
  }

  ~FieldProbeServer() { stop(); }

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    listener_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
    return port_;
  }

  /// Serves on the calling thread until stop() is called.
  void listen(const std::string& host, int port) {
    if (!http_.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    stopping_ = true;
    {
      std::lock_guard lock(mu_);
      for (auto& [id, s] : sessions_) s->shutdown();
    }
    http_.stop();
    if (listener_.joinable()) listener_.join();
    std::lock_guard lock(mu_);
    sessions_.clear();
  }

  int port() const { return port_; }
  std::size_t session_count() const {
    std::lock_guard lock(mu_);
    return sessions_.size();
  }

 private:
  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFound("unknown session '" + id + "'");
    return it->second;
  }

  const SurrogateModel& model() const {
    if (!model_) throw StateError("no model loaded");
    return *model_;
  }

  const PriorModel& prior() const {
    if (!prior_) throw StateError("no prior loaded");
    return *prior_;
  }

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename Fn>
  static httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const ValidationError& e) {
        json fields = json::object();
        for (const auto& [name, msg] : e.fields()) fields[name] = msg;
        reply(res, 422, {{"error", "validation"}, {"message", e.what()}, {"fields", fields}});
      } catch (const NotFound& e) {
        reply(res, 404, {{"error", "not_found"}, {"message", e.what()}});
      } catch (const StateError& e) {
        reply(res, 409, {{"error", "state"}, {"message", e.what()}});
      } catch (const ConfigError& e) {
        reply(res, 400, {{"error", "config"}, {"message", e.what()}});
      } catch (const json::exception& e) {
        reply(res, 400, {{"error", "bad_request"}, {"message", e.what()}});
      } catch (const std::exception& e) {
        reply(res, 500, {{"error", "internal"}, {"message", e.what()}});
      }
    };
  }

  static json body_of(const httplib::Request& req) {
    try {
      return json::parse(req.body);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("request body is not JSON: ") + e.what());
    }
  }

  static long query_int(const httplib::Request& req, const char* key, long fallback) {
    if (!req.has_param(key)) return fallback;
    try {
      return std::stol(req.get_param_value(key));
    } catch (const std::exception&) {
      throw ConfigError(std::string("query parameter '") + key + "' must be an integer");
    }
  }

  static double query_double(const httplib::Request& req, const char* key, double fallback) {
    if (!req.has_param(key)) return fallback;
    try {
      return std::stod(req.get_param_value(key));
    } catch (const std::exception&) {
      throw ConfigError(std::string("query parameter '") + key + "' must be a number");
    }
  }

  static std::size_t query_res(const httplib::Request& req, long fallback) {
    const long r = query_int(req, "res", fallback);
    if (r < 2 || r > 512) throw ConfigError("res must lie in [2, 512]");
    return static_cast<std::size_t>(r);
  }

  std::string new_id() {
    std::lock_guard lock(mu_);
    std::ostringstream s;
    s << std::hex << rng_() << std::hex << (++session_counter_);
    return s.str();
  }

  void routes() {
    const std::string sid = "/session/([0-9a-f]+)";

    http_.Post("/session", guarded([this](const httplib::Request&, httplib::Response& res) {
      const std::string id = new_id();
      std::lock_guard lock(mu_);
      sessions_[id] = std::make_shared<Session>(id, cfg_.seed + 0x632be59bd9b4e019ULL * session_counter_);
      reply(res, 200, {{"id", id}});
    }));

    http_.Get(sid, guarded([this](const httplib::Request& req, httplib::Response& res) {
      reply(res, 200, find(req.matches[1])->status());
    }));

    http_.Delete(sid, guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::shared_ptr<Session> s = find(req.matches[1]);
      s->shutdown();
      std::lock_guard lock(mu_);
      sessions_.erase(s->id());
      reply(res, 200, {{"id", s->id()}});
    }));

    http_.Post(sid + "/field", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = find(req.matches[1]);
      const json b = body_of(req);
      ValidationError::FieldMessages errs;
      if (!b.contains("z") || !b["z"].is_array()) errs.emplace_back("z", "is required (array)");
      if (b.contains("time") && !b["time"].is_number()) errs.emplace_back("time", "must be a number");
      if (b.contains("res") && !b["res"].is_number_integer()) errs.emplace_back("res", "must be an integer");
      if (!errs.empty()) throw ValidationError(std::move(errs));
      const auto z = b["z"].get<std::vector<double>>();
      const double time = b.value("time", 0.0);
      if (!(time >= -1.0 && time <= 1.0))
        throw ValidationError(ValidationError::FieldMessages{{"time", "must lie in [-1, 1]"}});
      reply(res, 200, eval_field(model(), Eigen::Map<const Vec>(z.data(), static_cast<Eigen::Index>(z.size())), time,
                                 b.value("res", std::size_t{32})));
    }));

    http_.Post(sid + "/feature", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = find(req.matches[1]);
      const FeatureSpec spec = feature_from_json(body_of(req));
      spec.validate(model().param_dim());
      if (spec.label < 0 || static_cast<std::size_t>(spec.label) >= cfg_.max_labels)
        throw ValidationError(ValidationError::FieldMessages{
            {"label", "must lie in [0, " + std::to_string(cfg_.max_labels - 1) + "]"}});
      const auto run = s->submit(spec, model(), prior(), cfg_);
      reply(res, 202, {{"run", run}, {"label", spec.label}});
    }));

    http_.Get(sid + "/marginals", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = find(req.matches[1]);
      const int label = static_cast<int>(query_int(req, "label", 0));
      const std::size_t r = query_res(req, 32);
      std::size_t batches = 0;
      const auto samples = s->snapshot(label, &batches);
      json j = to_json(marginal_matrix(sample_values(samples), model().space, r));
      j["label"] = label;
      j["batches"] = batches;
      j["samples"] = samples.size();
      reply(res, 200, j);
    }));

    http_.Get(sid + "/variance", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = find(req.matches[1]);
      const int label = static_cast<int>(query_int(req, "label", 0));
      const std::size_t r = query_res(req, static_cast<long>(cfg_.variance_resolution));
      FeatureSpec spec;
      const auto samples = s->snapshot(label, nullptr, &spec);
      const double time = query_double(req, "time", spec.time);
      if (!(time >= -1.0 && time <= 1.0)) throw ConfigError("time must lie in [-1, 1]");
      const Mat v = variance_map(model(), samples, r, r, time);
      const Mat vt = v.transpose();
      reply(res, 200, {{"label", label},
                       {"resolution", r},
                       {"time", time},
                       {"values", std::vector<double>(vt.data(), vt.data() + vt.size())}});
    }));

    http_.Get(sid + "/compare", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = find(req.matches[1]);
      const std::size_t r = query_res(req, 32);
      std::array<std::size_t, 2> pair{0, 1};
      if (req.has_param("pair")) {
        const std::string p = req.get_param_value("pair");
        const auto comma = p.find(',');
        if (comma == std::string::npos) throw ConfigError("pair must be 'j,k'");
        pair = {std::stoul(p.substr(0, comma)), std::stoul(p.substr(comma + 1))};
      }
      const auto a = sample_values(s->snapshot(0));
      const auto b = sample_values(s->snapshot(1));
      if (model().param_dim() < 2) throw StateError("comparison grids need at least two parameters");
      const auto [ga, gb] = compare_densities(a, b, model().space, pair, r);
      reply(res, 200, {{"pair", {pair[0], pair[1]}}, {"resolution", r}, {"a", ga}, {"b", gb}});
    }));

    http_.Get(sid + "/stream", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = find(req.matches[1]);
      const long from = query_int(req, "from", 0);
      if (from < 0) throw ConfigError("from must be >= 0");
      const bool until_idle = query_int(req, "until_idle", 0) != 0;
      auto cursor = std::make_shared<std::size_t>(static_cast<std::size_t>(from));
      res.set_chunked_content_provider(
          "application/x-ndjson", [this, s, cursor, until_idle](std::size_t, httplib::DataSink& sink) {
            while (!stopping_) {
              bool idle = false;
              const auto events = s->events_since(*cursor, std::chrono::milliseconds(200), idle);
              for (const auto& e : events) {
                const std::string line = e + "\n";
                if (!sink.write(line.data(), line.size())) return false;
                ++*cursor;
              }
              if (!events.empty()) return true;
              if (!sink.is_writable()) return false;
              if (idle && (until_idle || s->closed())) break;
            }
            sink.done();
            return true;
          });
    }));
  }

  std::shared_ptr<const SurrogateModel> model_;
  std::shared_ptr<const PriorModel> prior_;
  ServerConfig cfg_;
  httplib::Server http_;
  std::thread listener_;
  int port_ = -1;
  std::atomic<bool> stopping_{false};
  mutable std::mutex mu_;
  std::mt19937_64 rng_;
  std::uint64_t session_counter_ = 0;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

}  // namespace fieldprobe

#endif  // FIELDPROBE_SERVER_HPP
