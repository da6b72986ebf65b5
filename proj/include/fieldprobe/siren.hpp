#ifndef FIELDPROBE_SIREN_HPP
#define FIELDPROBE_SIREN_HPP

// Batched sine-activated MLP with a hand-written backward pass.
// Columns are samples. Layer l maps a_{l-1} -> W_l a_{l-1} + b_l; every layer
// except the last is followed by sin().

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace fieldprobe {

namespace detail {

/// Vectorizable sin/cos for doubles: quadrant reduction by pi/2 with a
/// three-part Cody-Waite split, then the Cephes minimax polynomials on
/// [-pi/4, pi/4]. Accurate to ~1 ulp for |x| < 1e5.
inline void sincos_array(const double* x, double* s, double* c, std::size_t n) {
  constexpr double two_over_pi = 0.63661977236758134308;
  constexpr double p1 = 1.57079625129699707031;
  constexpr double p2 = 7.54978941586159635335e-8;
  constexpr double p3 = 5.39030285815811905290e-15;
  constexpr double round_magic = 6755399441055744.0;  // 1.5 * 2^52
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    const double qd = (v * two_over_pi + round_magic) - round_magic;
    const auto q = static_cast<std::int64_t>(qd);
    const double r = ((v - qd * p1) - qd * p2) - qd * p3;
    const double z = r * r;
    const double ps = ((((1.58962301576546568060e-10 * z - 2.50507477628578072866e-8) * z +
                         2.75573136213857245213e-6) * z - 1.98412698295895385996e-4) * z +
                       8.33333333332211858878e-3) * z - 1.66666666666666307295e-1;
    const double pc = ((((-1.13585365213876817300e-11 * z + 2.08757008419747316778e-9) * z -
                         2.75573141792967388112e-7) * z + 2.48015872888517045348e-5) * z -
                       1.38888888888730564116e-3) * z + 4.16666666666665929218e-2;
    const double sr = r + r * z * ps;
    const double cr = 1.0 - 0.5 * z + z * z * pc;
    const double sv = (q & 1) ? cr : sr;
    const double cv = (q & 1) ? sr : cr;
    s[i] = (q & 2) ? -sv : sv;
    c[i] = ((q + 1) & 2) ? -cv : cv;
  }
}

inline void sincos_array(const float* x, float* s, float* c, std::size_t n) {
  using Arr = Eigen::Array<float, Eigen::Dynamic, 1>;
  const Eigen::Map<const Arr> in(x, static_cast<Eigen::Index>(n));
  Eigen::Map<Arr>(s, static_cast<Eigen::Index>(n)) = in.sin();
  Eigen::Map<Arr>(c, static_cast<Eigen::Index>(n)) = in.cos();
}

}  // namespace detail

template <typename Scalar>
struct SirenLayers {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using ColVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  std::vector<Mat> weights;  // weights[l]: fan_out x fan_in
  std::vector<ColVec> biases;

  std::size_t layer_count() const { return weights.size(); }
  Eigen::Index input_dim() const { return weights.front().cols(); }
  Eigen::Index output_dim() const { return weights.back().rows(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l)
      n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    return n;
  }

  template <typename Other>
  SirenLayers<Other> cast() const {
    SirenLayers<Other> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.weights.push_back(weights[l].template cast<Other>());
      out.biases.push_back(biases[l].template cast<Other>());
    }
    return out;
  }

  void set_zero_like(const SirenLayers& other) {
    weights.resize(other.weights.size());
    biases.resize(other.biases.size());
    for (std::size_t l = 0; l < other.weights.size(); ++l) {
      weights[l].setZero(other.weights[l].rows(), other.weights[l].cols());
      biases[l].setZero(other.biases[l].size());
    }
  }

  bool all_finite() const {
    for (std::size_t l = 0; l < weights.size(); ++l)
      if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
    return true;
  }
};

/// Intermediate values of one forward pass, needed by the backward passes.
template <typename Scalar>
struct SirenCache {
  using Mat = typename SirenLayers<Scalar>::Mat;
  Mat input;                   // a_0, only kept when weight gradients are wanted
  std::vector<Mat> sines;      // a_1 .. a_{L-1}
  std::vector<Mat> cosines;    // sin'(pre-activation) per hidden layer
};

namespace detail {

template <typename Scalar, typename Mat>
void apply_sine(const Mat& pre, Mat& s, Mat& c) {
  s.resize(pre.rows(), pre.cols());
  c.resize(pre.rows(), pre.cols());
  sincos_array(pre.data(), s.data(), c.data(), static_cast<std::size_t>(pre.size()));
}

}  // namespace detail

/// Runs the network from the first-layer pre-activation (W_1 a_0 + b_1).
/// Splitting at this point lets callers assemble the first layer cheaply when
/// inputs have product structure (shared coordinates x per-row parameters).
template <typename Scalar>
void siren_forward_from_preact(const SirenLayers<Scalar>& net,
                               const typename SirenLayers<Scalar>::Mat& pre1,
                               typename SirenLayers<Scalar>::Mat& out, SirenCache<Scalar>& cache) {
  using Mat = typename SirenLayers<Scalar>::Mat;
  const std::size_t hidden = net.layer_count() - 1;
  cache.sines.resize(hidden);
  cache.cosines.resize(hidden);
  if (hidden == 0) {
    out = pre1;
    return;
  }
  detail::apply_sine<Scalar>(pre1, cache.sines[0], cache.cosines[0]);
  Mat pre;
  for (std::size_t l = 1; l < hidden; ++l) {
    pre.noalias() = net.weights[l] * cache.sines[l - 1];
    pre.colwise() += net.biases[l];
    detail::apply_sine<Scalar>(pre, cache.sines[l], cache.cosines[l]);
  }
  out.noalias() = net.weights[hidden] * cache.sines[hidden - 1];
  out.colwise() += net.biases[hidden];
}

template <typename Scalar>
void siren_forward(const SirenLayers<Scalar>& net, const typename SirenLayers<Scalar>::Mat& input,
                   typename SirenLayers<Scalar>::Mat& out, SirenCache<Scalar>& cache,
                   bool keep_input = false) {
  typename SirenLayers<Scalar>::Mat pre1;
  pre1.noalias() = net.weights[0] * input;
  pre1.colwise() += net.biases[0];
  if (keep_input) cache.input = input;
  siren_forward_from_preact(net, pre1, out, cache);
}

template <typename Scalar>
typename SirenLayers<Scalar>::Mat siren_forward(const SirenLayers<Scalar>& net,
                                                const typename SirenLayers<Scalar>::Mat& input) {
  SirenCache<Scalar> cache;
  typename SirenLayers<Scalar>::Mat out;
  siren_forward(net, input, out, cache);
  return out;
}

/// Back-propagates d(loss)/d(output) to d(loss)/d(first-layer pre-activation).
template <typename Scalar>
void siren_backward_to_preact(const SirenLayers<Scalar>& net, const SirenCache<Scalar>& cache,
                              const typename SirenLayers<Scalar>::Mat& d_out,
                              typename SirenLayers<Scalar>::Mat& d_pre1) {
  using Mat = typename SirenLayers<Scalar>::Mat;
  const std::size_t hidden = net.layer_count() - 1;
  if (hidden == 0) {
    d_pre1 = d_out;
    return;
  }
  Mat g;
  g.noalias() = net.weights[hidden].transpose() * d_out;
  for (std::size_t l = hidden - 1; l >= 1; --l) {
    g.array() *= cache.cosines[l].array();
    Mat next;
    next.noalias() = net.weights[l].transpose() * g;
    g.swap(next);
  }
  g.array() *= cache.cosines[0].array();
  d_pre1.swap(g);
}

/// d(loss)/d(input) for a cached forward pass.
template <typename Scalar>
typename SirenLayers<Scalar>::Mat siren_backward_input(
    const SirenLayers<Scalar>& net, const SirenCache<Scalar>& cache,
    const typename SirenLayers<Scalar>::Mat& d_out) {
  typename SirenLayers<Scalar>::Mat d_pre1;
  siren_backward_to_preact(net, cache, d_out, d_pre1);
  return net.weights[0].transpose() * d_pre1;
}

/// Accumulates weight gradients into grads (must be shaped like net). The
/// forward pass must have been run with keep_input = true.
template <typename Scalar>
void siren_backward_weights(const SirenLayers<Scalar>& net, const SirenCache<Scalar>& cache,
                            const typename SirenLayers<Scalar>::Mat& d_out,
                            SirenLayers<Scalar>& grads) {
  using Mat = typename SirenLayers<Scalar>::Mat;
  const std::size_t hidden = net.layer_count() - 1;
  Mat g = d_out;
  for (std::size_t l = hidden + 1; l-- > 0;) {
    const Mat& a_prev = l == 0 ? cache.input : cache.sines[l - 1];
    grads.weights[l].noalias() += g * a_prev.transpose();
    grads.biases[l] += g.rowwise().sum();
    if (l == 0) break;
    Mat next;
    next.noalias() = net.weights[l].transpose() * g;
    next.array() *= cache.cosines[l - 1].array();
    g.swap(next);
  }
}

}  // namespace fieldprobe

#endif  // FIELDPROBE_SIREN_HPP
