#pragma once

// Oracles and fixtures shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tinyhd/tinyhd.hpp"

namespace tinyhd::testing {

/// Uniform [lo, hi) tensor from a seeded generator.
template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(u(rng));
  return t;
}

/// Positive tensor whose trailing [H, W] slices each sum to one.
template <typename T>
Tensor<T> random_distribution(const Shape& shape, std::mt19937_64& rng) {
  Tensor<T> t = random_tensor<T>(shape, rng, 0.05, 1.0);
  const std::size_t slice = shape.size() >= 2 ? shape[shape.size() - 1] * shape[shape.size() - 2] : t.numel();
  for (std::size_t s = 0; s < t.numel() / slice; ++s) {
    double z = 0;
    for (std::size_t i = s * slice; i < (s + 1) * slice; ++i) z += t[i];
    for (std::size_t i = s * slice; i < (s + 1) * slice; ++i) t[i] = static_cast<T>(t[i] / z);
  }
  return t;
}

/// Direct seven-loop 3D convolution; also counts the multiply-adds it performs.
template <typename T>
Tensor<T> naive_conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, const ConvGeometry& g,
                       std::uint64_t* macs = nullptr) {
  const Shape& xs = x.shape();
  const std::size_t N = xs[0];
  const Dims3 od = g.output_dims({xs[2], xs[3], xs[4]});
  Tensor<T> y({N, static_cast<std::size_t>(g.out_channels), od[0], od[1], od[2]});
  const int ipg = g.in_per_group(), opg = g.out_channels / g.groups;
  std::uint64_t count = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (std::size_t t = 0; t < od[0]; ++t)
        for (std::size_t h = 0; h < od[1]; ++h)
          for (std::size_t q = 0; q < od[2]; ++q) {
            double acc = b ? static_cast<double>((*b)[o]) : 0.0;
            const int grp = o / opg;
            for (int i = 0; i < ipg; ++i)
              for (int kt = 0; kt < g.kernel[0]; ++kt)
                for (int kh = 0; kh < g.kernel[1]; ++kh)
                  for (int kw = 0; kw < g.kernel[2]; ++kw) {
                    ++count;
                    const long it = static_cast<long>(t) * g.stride[0] - g.padding[0] + kt;
                    const long ih = static_cast<long>(h) * g.stride[1] - g.padding[1] + kh;
                    const long iw = static_cast<long>(q) * g.stride[2] - g.padding[2] + kw;
                    if (it < 0 || ih < 0 || iw < 0 || it >= static_cast<long>(xs[2]) ||
                        ih >= static_cast<long>(xs[3]) || iw >= static_cast<long>(xs[4])) {
                      continue;
                    }
                    const std::size_t c = static_cast<std::size_t>(grp * ipg + i);
                    const double xv = x[(((n * xs[1] + c) * xs[2] + it) * xs[3] + ih) * xs[4] + iw];
                    const double wv =
                        w[(((static_cast<std::size_t>(o) * ipg + i) * g.kernel[0] + kt) * g.kernel[1] + kh) *
                              g.kernel[2] +
                          kw];
                    acc += xv * wv;
                  }
            y[(((n * g.out_channels + o) * od[0] + t) * od[1] + h) * od[2] + q] = static_cast<T>(acc);
          }
  // Padding taps are counted too: the analytic count is kernel volume times outputs.
  if (macs) *macs = count / N;
  return y;
}

struct GradCheck {
  std::string name;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error;
};

/// |a - n| / max(|a|, |n|); both below `zero` counts as agreement at 0.
inline double rel_error(double a, double n, double zero = 1e-12) {
  const double scale = std::max(std::abs(a), std::abs(n));
  if (scale < zero) return 0.0;
  return std::abs(a - n) / scale;
}

/// Central differences of `loss` on `probes` (parameter index, element index).
inline std::vector<GradCheck> finite_difference_check(
    const std::vector<NamedParam<double>>& params, const std::function<double()>& loss,
    const std::vector<std::pair<std::size_t, std::size_t>>& probes, double h = 1e-6) {
  std::vector<GradCheck> out;
  for (auto [p, i] : probes) {
    Var<double> v = params[p].var;
    const double analytic = v.grad_or_zero()[i];
    const double saved = v.value()[i];
    v.mutable_value()[i] = saved + h;
    const double up = loss();
    v.mutable_value()[i] = saved - h;
    const double down = loss();
    v.mutable_value()[i] = saved;
    const double numeric = (up - down) / (2 * h);
    out.push_back({params[p].name, i, analytic, numeric, rel_error(analytic, numeric)});
  }
  return out;
}

/// Small config for fast tests: 4 frames at 16x16.
inline ModelConfig tiny_config(PredictionMode mode = PredictionMode::mimo) {
  ModelConfig c;
  c.mode = mode;
  c.clip_length = 4;
  c.height = 16;
  c.width = 16;
  return c;
}

/// Rewrites `model` so that every reducible channel pair carries identical
/// activations: output kernels, biases and norm parameters of channel 2j+1
/// copy channel 2j. Channel reduction of such a model is exact.
template <typename T>
void make_duplicate_pairs(TinyHD<T>& model) {
  auto dup = [](Tensor<T>& t, std::size_t rows, std::size_t row_size,
                const std::vector<std::vector<std::size_t>>& groups) {
    (void)rows;
    for (const auto& g : groups) {
      if (g.size() != 2) continue;
      std::copy_n(t.ptr() + g[0] * row_size, row_size, t.ptr() + g[1] * row_size);
    }
  };
  model.visit(Overloaded{
      [&](Conv3dLayer<T>& c) {
        if (!c.reduce_out) return;
        const ConvGeometry& g = c.geometry;
        const auto groups = detail::pair_groups(g.is_depthwise() ? c.in_segments : std::vector<int>{g.out_channels});
        const std::size_t row = g.weight_count() / static_cast<std::size_t>(g.out_channels);
        dup(c.weight.mutable_value(), g.out_channels, row, groups);
        if (c.bias.defined()) dup(c.bias.mutable_value(), g.out_channels, 1, groups);
      },
      [&](BatchNorm3d<T>& b) {
        const auto groups = detail::pair_groups({b.channels});
        std::mt19937_64 rng(static_cast<std::uint64_t>(b.channels));
        // Non-trivial statistics so the test exercises them.
        b.gamma.mutable_value() = random_tensor<T>({static_cast<std::size_t>(b.channels)}, rng, 0.5, 1.5);
        b.beta.mutable_value() = random_tensor<T>({static_cast<std::size_t>(b.channels)}, rng, -0.2, 0.2);
        b.running_mean = random_tensor<T>({static_cast<std::size_t>(b.channels)}, rng, -0.1, 0.1);
        b.running_var = random_tensor<T>({static_cast<std::size_t>(b.channels)}, rng, 0.5, 2.0);
        dup(b.gamma.mutable_value(), b.channels, 1, groups);
        dup(b.beta.mutable_value(), b.channels, 1, groups);
        dup(b.running_mean, b.channels, 1, groups);
        dup(b.running_var, b.channels, 1, groups);
      }});
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("tinyhd_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Synthetic spec matching tiny_config().
inline SyntheticSceneSpec tiny_scene(std::uint64_t seed) {
  SyntheticSceneSpec s;
  s.seed = seed;
  s.clip_length = 4;
  s.height = 16;
  s.width = 16;
  s.sigma_min = 1.5;
  s.sigma_max = 2.5;
  s.teacher_blur = {2, 1, 1, 0.5, 0.5};
  return s;
}

// Brute-force ROC: for each distinct fixated value, rescan every pixel.
inline double auc_judd_bruteforce(const std::vector<double>& p, const std::vector<double>& fix) {
  std::vector<double> th;
  std::int64_t np = 0, nn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (fix[i] > 0) {
      th.push_back(p[i]);
      ++np;
    } else {
      ++nn;
    }
  }
  std::sort(th.begin(), th.end(), std::greater<>());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  std::int64_t twice = 0, tp0 = 0, fp0 = 0;
  for (double t : th) {
    std::int64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] >= t) (fix[i] > 0 ? tp : fp) += 1;
    }
    twice += (fp - fp0) * (tp + tp0);
    tp0 = tp;
    fp0 = fp;
  }
  twice += (nn - fp0) * (np + tp0);
  return static_cast<double>(twice) / (2.0 * static_cast<double>(np) * static_cast<double>(nn));
}

inline double cc_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  long double mp = 0, mq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) mp += p[i], mq += q[i];
  mp /= p.size();
  mq /= q.size();
  long double num = 0, dp = 0, dq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    num += (p[i] - mp) * (q[i] - mq);
    dp += (p[i] - mp) * (p[i] - mp);
    dq += (q[i] - mq) * (q[i] - mq);
  }
  return static_cast<double>(num / std::sqrt(dp * dq));
}

inline double nss_oracle(const std::vector<double>& p, const std::vector<double>& fix) {
  long double m = 0;
  for (double v : p) m += v;
  m /= p.size();
  long double var = 0;
  for (double v : p) var += (v - m) * (v - m);
  const long double sd = std::sqrt(var / p.size());
  long double acc = 0;
  int n = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (fix[i] > 0) acc += (p[i] - m) / sd, ++n;
  return static_cast<double>(acc / n);
}

inline double sim_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  long double zp = 0, zq = 0, s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) zp += p[i], zq += q[i];
  for (std::size_t i = 0; i < p.size(); ++i) s += std::min(p[i] / zp, q[i] / zq);
  return static_cast<double>(s);
}

}  // namespace tinyhd::testing
