#ifndef FIELDPROBE_SURROGATE_HPP
#define FIELDPROBE_SURROGATE_HPP

// SIREN surrogate f(x, z) over normalized coordinates x in [-1,1]^m and
// normalized parameters z in [-1,1]^d. Input scaling: the network sees
// [coord_scale * x ; param_scale * z].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fieldprobe/ensemble.hpp"
#include "fieldprobe/errors.hpp"
#include "fieldprobe/siren.hpp"

namespace fieldprobe {


struct SurrogateModel {
  std::vector<std::size_t> hidden;  // hidden layer widths
  double coord_scale = 30.0;
  double param_scale = 10.0;
  ParameterSpace space;
  DomainSpec domain;
  SirenLayers<double> net;

  std::size_t coord_dim() const { return domain.coord_dim(); }
  std::size_t param_dim() const { return space.dim(); }
  std::size_t output_dim() const { return domain.output_dim; }
  std::size_t parameter_count() const { return net.parameter_count(); }
};

/// SIREN initialization: first layer U(-1/fan_in, 1/fan_in), later layers
/// U(-sqrt(6/fan_in), sqrt(6/fan_in)) (hidden sine frequency is 1 since the
/// frequency scaling lives on the inputs), biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline SurrogateModel init_model(const ParameterSpace& space, const DomainSpec& domain,
                                 std::vector<std::size_t> hidden, std::uint64_t seed,
                                 double coord_scale = 30.0, double param_scale = 10.0) {
  if (hidden.empty()) throw ConfigError("at least one hidden layer is required");
  for (auto w : hidden)
    if (w == 0) throw ConfigError("hidden widths must be positive");
  SurrogateModel m;
  m.hidden = std::move(hidden);
  m.coord_scale = coord_scale;
  m.param_scale = param_scale;
  m.space = space;
  m.domain = domain;

  std::vector<std::size_t> sizes{m.coord_dim() + m.param_dim()};
  sizes.insert(sizes.end(), m.hidden.begin(), m.hidden.end());
  sizes.push_back(m.output_dim());

  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const double fan_in = static_cast<double>(sizes[l]);
    const double wb = l == 0 ? 1.0 / fan_in : std::sqrt(6.0 / fan_in);
    const double bb = 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> wdist(-wb, wb), bdist(-bb, bb);
    Mat w(sizes[l + 1], sizes[l]);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = wdist(rng);
    Vec b(sizes[l + 1]);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = bdist(rng);
    m.net.weights.push_back(std::move(w));
    m.net.biases.push_back(std::move(b));
  }
  return m;
}

namespace detail {

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> scaled_input(const SurrogateModel& model,
                                                                   const Mat& coords,
                                                                   const Mat& params) {
  const auto m = static_cast<Eigen::Index>(model.coord_dim());
  const auto d = static_cast<Eigen::Index>(model.param_dim());
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> in(m + d, coords.cols());
  in.topRows(m) = (model.coord_scale * coords).template cast<Scalar>();
  in.bottomRows(d) = (model.param_scale * params).template cast<Scalar>();
  return in;
}

inline void check_batch(const SurrogateModel& model, const Mat& coords, const Mat& params) {
  if (static_cast<std::size_t>(coords.rows()) != model.coord_dim() ||
      static_cast<std::size_t>(params.rows()) != model.param_dim() ||
      coords.cols() != params.cols())
    throw ShapeError("forward: coords must be m x B and params d x B");
}

}  // namespace detail

/// Evaluates the surrogate column-wise: coords (m x B), params (d x B) -> (n x B).
inline Mat forward(const SurrogateModel& model, const Mat& coords, const Mat& params) {
  detail::check_batch(model, coords, params);
  return siren_forward(model.net, detail::scaled_input<double>(model, coords, params));
}

/// Evaluates at many coordinates with one shared parameter vector.
inline Mat forward_at(const SurrogateModel& model, const Mat& coords, const Vec& z) {
  return forward(model, coords, z.replicate(1, coords.cols()));
}

/// d f(x_k, z) / d z for M coordinates, stacked as rows k*n + c.
inline Mat jacobian_wrt_params(const SurrogateModel& model, const Mat& coords, const Vec& z) {
  const Eigen::Index n = static_cast<Eigen::Index>(model.output_dim());
  const Eigen::Index d = static_cast<Eigen::Index>(model.param_dim());
  const Eigen::Index count = coords.cols();
  const Mat params = z.replicate(1, count);
  detail::check_batch(model, coords, params);
  SirenCache<double> cache;
  Mat out;
  siren_forward(model.net, detail::scaled_input<double>(model, coords, params), out, cache);
  const Mat w_param = model.net.weights[0].rightCols(d);
  Mat jac(count * n, d);
  Mat seed = Mat::Zero(n, count);
  Mat d_pre1;
  for (Eigen::Index c = 0; c < n; ++c) {
    seed.setZero();
    seed.row(c).setOnes();
    siren_backward_to_preact(model.net, cache, seed, d_pre1);
    const Mat dz = model.param_scale * (w_param.transpose() * d_pre1);  // d x count
    for (Eigen::Index k = 0; k < count; ++k) jac.row(k * n + c) = dz.col(k).transpose();
  }
  return jac;
}

/// Central-difference counterpart of jacobian_wrt_params (verification oracle).
inline Mat finite_difference_jacobian(const SurrogateModel& model, const Mat& coords,
                                      const Vec& z, double step) {
  if (!(step > 0)) throw ConfigError("finite difference step must be positive");
  const Eigen::Index n = static_cast<Eigen::Index>(model.output_dim());
  const Eigen::Index d = static_cast<Eigen::Index>(model.param_dim());
  Mat jac(coords.cols() * n, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    Vec zp = z, zm = z;
    zp[j] += step;
    zm[j] -= step;
    const Mat diff = (forward_at(model, coords, zp) - forward_at(model, coords, zm)) / (2 * step);
    for (Eigen::Index k = 0; k < coords.cols(); ++k)
      for (Eigen::Index c = 0; c < n; ++c) jac(k * n + c, j) = diff(c, k);
  }
  return jac;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch_size = 4096;
  double base_lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  /// Samples held in the resampled training buffer (refilled after one pass).
  std::size_t buffer_size = std::size_t{1} << 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (buffer_size < batch_size) throw ConfigError("buffer_size must be >= batch_size");
  }
};

struct LossRecord {
  std::size_t step;  // last step of the window
  double loss;       // mean minibatch MSE over the window
};

/// Member fields held in memory plus their normalized coordinates/params.
struct TrainingData {
  DomainSpec domain;
  std::vector<Vec> params;               // normalized z per member
  std::vector<std::vector<float>> fields;

  static TrainingData load(const EnsembleDataset& ds) {
    TrainingData td;
    td.domain = ds.domain();
    for (const auto& m : ds.members()) {
      td.params.push_back(ds.space().normalize(m.z));
      td.fields.push_back(ds.load_member(m.id));
    }
    return td;
  }
};

namespace detail {

/// Precomputed normalized grid coordinates, m x points.
inline Eigen::MatrixXf normalized_grid(const DomainSpec& domain) {
  Eigen::MatrixXf g(domain.coord_dim(), domain.points_per_member());
  for (std::size_t p = 0; p < domain.points_per_member(); ++p)
    g.col(static_cast<Eigen::Index>(p)) =
        domain.normalize_point(domain.grid_point(p)).cast<float>();
  return g;
}

}  // namespace detail

/// Adam on mean squared error, learning rate annealed linearly to zero.
/// Minibatches are consecutive slices of a buffer of (member, grid point)
/// pairs sampled uniformly at random; the buffer is redrawn once consumed.
/// Bulk training runs in single precision; the stored model stays double.
inline std::vector<LossRecord> train(SurrogateModel& model, const TrainingData& data,
                                     const TrainConfig& cfg) {
  cfg.validate();
  if (data.fields.empty()) throw ConfigError("cannot train on an empty dataset");
  using MatF = Eigen::MatrixXf;
  const std::size_t n = model.output_dim();
  const auto m = static_cast<Eigen::Index>(model.coord_dim());
  const auto d = static_cast<Eigen::Index>(model.param_dim());
  const std::size_t points = data.domain.points_per_member();
  const MatF grid = detail::normalized_grid(data.domain);

  SirenLayers<float> net = model.net.cast<float>();
  SirenLayers<float> grad, m1, m2;
  grad.set_zero_like(net);
  m1.set_zero_like(net);
  m2.set_zero_like(net);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_member(0, data.fields.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_point(0, points - 1);
  const std::size_t buffer_len =
      std::max(cfg.batch_size, std::min(cfg.buffer_size, data.fields.size() * points));
  MatF buf_in(m + d, buffer_len), buf_out(n, buffer_len);
  std::size_t cursor = buffer_len;
  auto refill = [&] {
    for (std::size_t i = 0; i < buffer_len; ++i) {
      const std::size_t mem = pick_member(rng), p = pick_point(rng);
      const auto col = static_cast<Eigen::Index>(i);
      buf_in.col(col).head(m) = static_cast<float>(model.coord_scale) * grid.col(static_cast<Eigen::Index>(p));
      buf_in.col(col).tail(d) = static_cast<float>(model.param_scale) * data.params[mem].cast<float>();
      for (std::size_t c = 0; c < n; ++c)
        buf_out(static_cast<Eigen::Index>(c), col) = data.fields[mem][p * n + c];
    }
    cursor = 0;
  };

  std::vector<LossRecord> trace;
  double window_loss = 0.0;
  std::size_t window_count = 0;
  SirenCache<float> cache;
  MatF out, d_out;
  const auto bs = static_cast<Eigen::Index>(cfg.batch_size);
  const float scale = 2.0f / static_cast<float>(cfg.batch_size * n);
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cursor + cfg.batch_size > buffer_len) refill();
    const auto start = static_cast<Eigen::Index>(cursor);
    cursor += cfg.batch_size;
    siren_forward(net, MatF(buf_in.middleCols(start, bs)), out, cache, /*keep_input=*/true);
    d_out = out - buf_out.middleCols(start, bs);
    const double loss = static_cast<double>(d_out.squaredNorm()) / static_cast<double>(cfg.batch_size * n);
    if (!std::isfinite(loss)) throw TrainingDiverged(step);
    window_loss += loss;
    ++window_count;
    d_out *= scale;
    for (std::size_t l = 0; l < grad.layer_count(); ++l) {
      grad.weights[l].setZero();
      grad.biases[l].setZero();
    }
    siren_backward_weights(net, cache, d_out, grad);

    const double lr = cfg.base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(cfg.steps));
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const auto step_size = static_cast<float>(lr * std::sqrt(1.0 - b2t) / (1.0 - b1t));
    const auto eps_hat = static_cast<float>(cfg.eps * std::sqrt(1.0 - b2t));
    auto adam = [&](auto& p, auto& g, auto& mm, auto& vv) {
      mm.array() = b1 * mm.array() + (1 - b1) * g.array();
      vv.array() = b2 * vv.array() + (1 - b2) * g.array().square();
      p.array() -= step_size * mm.array() / (vv.array().sqrt() + eps_hat);
    };
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
      adam(net.weights[l], grad.weights[l], m1.weights[l], m2.weights[l]);
      adam(net.biases[l], grad.biases[l], m1.biases[l], m2.biases[l]);
    }
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      trace.push_back({step + 1, window_loss / static_cast<double>(window_count)});
      window_loss = 0.0;
      window_count = 0;
    }
  }
  if (!net.all_finite()) throw TrainingDiverged(cfg.steps);
  model.net = net.cast<double>();
  return trace;
}

inline std::vector<LossRecord> train(SurrogateModel& model, const EnsembleDataset& ds,
                                     const TrainConfig& cfg) {
  if (ds.count() == 0) throw ConfigError("cannot train on an empty dataset");
  return train(model, TrainingData::load(ds), cfg);
}

/// Predicted field for one member on the dataset grid, (t, y, x, c) order.
inline std::vector<float> predict_grid(const SurrogateModel& model, const Vec& z_normalized) {
  const auto& dom = model.domain;
  const Mat coords = detail::normalized_grid(dom).cast<double>();
  std::vector<float> out(dom.values_per_member());
  const Eigen::Index chunk = 8192;
  for (Eigen::Index s = 0; s < coords.cols(); s += chunk) {
    const Eigen::Index len = std::min(chunk, coords.cols() - s);
    const Mat y = forward_at(model, coords.middleCols(s, len), z_normalized);
    for (Eigen::Index k = 0; k < len; ++k)
      for (Eigen::Index c = 0; c < y.rows(); ++c)
        out[static_cast<std::size_t>((s + k) * y.rows() + c)] = static_cast<float>(y(c, k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: "FPSIREN\0", u32 version, u64 header length, JSON header,
// then float64 blocks per layer (weights row-major, then bias).

namespace detail {
inline constexpr char kModelMagic[8] = {'F', 'P', 'S', 'I', 'R', 'E', 'N', '\0'};
inline constexpr std::uint32_t kModelVersion = 1;
}  // namespace detail

inline void save_model(const SurrogateModel& model, const fs::path& path) {
  nlohmann::json header = {{"hidden", model.hidden},
                           {"coord_scale", model.coord_scale},
                           {"param_scale", model.param_scale},
                           {"parameter_space", to_json(model.space)},
                           {"domain", to_json(model.domain)}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(detail::kModelMagic, 8);
  const std::uint32_t version = detail::kModelVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t l = 0; l < model.net.layer_count(); ++l) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w = model.net.weights[l];
    out.write(reinterpret_cast<const char*>(w.data()), static_cast<std::streamsize>(w.size() * 8));
    out.write(reinterpret_cast<const char*>(model.net.biases[l].data()),
              static_cast<std::streamsize>(model.net.biases[l].size() * 8));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline SurrogateModel load_model(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open model " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, detail::kModelMagic, 8) != 0)
    throw FormatError("not a surrogate model file: " + path.string());
  if (version != detail::kModelVersion)
    throw FormatError("unsupported model version " + std::to_string(version));
  if (len > (std::uint64_t{1} << 24)) throw FormatError("corrupt model header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError("truncated model header");
  SurrogateModel m;
  try {
    const auto h = nlohmann::json::parse(text);
    m.hidden = h.at("hidden").get<std::vector<std::size_t>>();
    m.coord_scale = h.at("coord_scale").get<double>();
    m.param_scale = h.at("param_scale").get<double>();
    m.space = parameter_space_from_json(h.at("parameter_space"));
    m.domain = domain_from_json(h.at("domain"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model header: ") + e.what());
  }
  std::vector<std::size_t> sizes{m.coord_dim() + m.param_dim()};
  sizes.insert(sizes.end(), m.hidden.begin(), m.hidden.end());
  sizes.push_back(m.output_dim());
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w(sizes[l + 1], sizes[l]);
    Vec b(sizes[l + 1]);
    in.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * 8));
    in.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(b.size() * 8));
    if (!in) throw FormatError("truncated model weights in " + path.string());
    m.net.weights.emplace_back(w);
    m.net.biases.push_back(std::move(b));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in model file");
  return m;
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_SURROGATE_HPP
