#pragma once

// Building blocks for the video encoder and decoders. Activations are laid out
// as [N, C, T, H, W] in row-major order.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tinyhd/autograd.hpp"
#include "tinyhd/geometry.hpp"
#include "tinyhd/optim.hpp"
#include "tinyhd/profiler.hpp"

namespace tinyhd {

namespace detail {

struct Range {
  std::size_t lo = 0, hi = 0;
};

// Output positions o with 0 <= o*s - p + k < in.
inline Range valid_outputs(int k, int s, int p, std::size_t in, std::size_t out) {
  const long off = static_cast<long>(p) - k;
  long lo = off <= 0 ? 0 : (off + s - 1) / s;
  const long last_in = static_cast<long>(in) - 1 + off;
  long hi = last_in < 0 ? 0 : last_in / s + 1;
  hi = std::min<long>(hi, static_cast<long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Calls inner(weight_index, in_start, out_start, count) for every (batch, out
// channel, in channel, tap, output row) combination; output columns
// out_start + j read input columns in_start + j * stride_w.
template <typename Inner>
void conv_sweep(const ConvGeometry& g, const Shape& xs, const Shape& ys,
                Inner&& inner) {
  const std::size_t N = xs[0], C = xs[1], Ti = xs[2], Hi = xs[3], Wi = xs[4];
  const std::size_t Co = ys[1], To = ys[2], Ho = ys[3], Wo = ys[4];
  const std::size_t ipg = C / g.groups, opg = Co / g.groups;
  const auto [kT, kH, kW] = g.kernel;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oc = 0; oc < Co; ++oc) {
      const std::size_t grp = oc / opg;
      for (std::size_t icg = 0; icg < ipg; ++icg) {
        const std::size_t ic = grp * ipg + icg;
        for (int kt = 0; kt < kT; ++kt) {
          const Range rt = valid_outputs(kt, g.stride[0], g.padding[0], Ti, To);
          for (int kh = 0; kh < kH; ++kh) {
            const Range rh = valid_outputs(kh, g.stride[1], g.padding[1], Hi, Ho);
            for (int kw = 0; kw < kW; ++kw) {
              const Range rw = valid_outputs(kw, g.stride[2], g.padding[2], Wi, Wo);
              if (rw.lo >= rw.hi) continue;
              const std::size_t widx =
                  ((oc * ipg + icg) * kT + kt) * kH * kW + kh * kW + kw;
              const std::size_t iw_lo = rw.lo * g.stride[2] + kw - g.padding[2];
              for (std::size_t ot = rt.lo; ot < rt.hi; ++ot) {
                const std::size_t it = ot * g.stride[0] + kt - g.padding[0];
                for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
                  const std::size_t ih = oh * g.stride[1] + kh - g.padding[1];
                  const std::size_t in_row = (((n * C + ic) * Ti + it) * Hi + ih) * Wi;
                  const std::size_t out_row = (((n * Co + oc) * To + ot) * Ho + oh) * Wo;
                  inner(widx, in_row + iw_lo, out_row + rw.lo, rw.hi - rw.lo);
                }
              }
            }
          }
        }
      }
    }
}

}  // namespace detail

/// 3D cross-correlation with stride, zero padding and channel groups.
/// `bias` may be an undefined Var.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const ConvGeometry& g) {
  g.validate();
  const Shape& xs = x.shape();
  if (xs.size() != 5) {
    throw ShapeError("conv3d expects [N,C,T,H,W] input, got " + shape_str(xs));
  }
  if (static_cast<int>(xs[1]) != g.in_channels) {
    throw ShapeError("conv3d input has " + std::to_string(xs[1]) +
                     " channels, layer expects " + std::to_string(g.in_channels));
  }
  require_same_shape(weight.shape(), g.weight_shape(), "conv3d weight");
  if (g.bias != bias.defined()) {
    throw ShapeError("conv3d bias presence does not match geometry");
  }
  if (bias.defined()) {
    require_same_shape(bias.shape(), {static_cast<std::size_t>(g.out_channels)},
                       "conv3d bias");
  }
  const Dims3 od = g.output_dims({xs[2], xs[3], xs[4]});
  for (auto d : od) {
    if (d < 1) throw GeometryError("conv3d output extent < 1");
  }
  const Shape ys{xs[0], static_cast<std::size_t>(g.out_channels), od[0], od[1], od[2]};
  Tensor<T> y(ys);
  const T* X = x.value().ptr();
  const T* Wt = weight.value().ptr();
  T* Y = y.ptr();
  const std::size_t vol = od[0] * od[1] * od[2];
  const std::size_t N = xs[0], Co = ys[1], Ci = xs[1];

  if (bias.defined()) {
    const T* B = bias.value().ptr();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < Co; ++o)
        std::fill_n(Y + (n * Co + o) * vol, vol, B[o]);
  }
  const bool pointwise = g.is_pointwise();
  if (pointwise) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < Co; ++o) {
        T* yr = Y + (n * Co + o) * vol;
        for (std::size_t i = 0; i < Ci; ++i) {
          const T w = Wt[o * Ci + i];
          const T* xr = X + (n * Ci + i) * vol;
          for (std::size_t v = 0; v < vol; ++v) yr[v] += w * xr[v];
        }
      }
  } else {
    const std::size_t sw = g.stride[2];
    detail::conv_sweep(g, xs, ys,
                       [&](std::size_t widx, std::size_t in0, std::size_t out0, std::size_t count) {
                         const T w = Wt[widx];
                         const T* xr = X + in0;
                         T* yr = Y + out0;
                         for (std::size_t j = 0; j < count; ++j) yr[j] += w * xr[j * sw];
                       });
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(
      std::move(y), "conv3d", std::move(parents),
      [g, xs, ys, vol, pointwise](Node<T>& self) {
        const T* G = self.grad->ptr();
        const T* X = self.parents[0]->value.ptr();
        const T* Wt = self.parents[1]->value.ptr();
        const std::size_t N = xs[0], Ci = xs[1], Co = ys[1];
        auto* gx = detail::parent_grad(self, 0);
        auto* gw = detail::parent_grad(self, 1);
        if (self.parents.size() > 2) {
          if (auto* gb = detail::parent_grad(self, 2)) {
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t o = 0; o < Co; ++o) {
                const T* gr = G + (n * Co + o) * vol;
                double acc = 0.0;
                for (std::size_t v = 0; v < vol; ++v) acc += gr[v];
                (*gb)[o] += static_cast<T>(acc);
              }
          }
        }
        if (pointwise) {
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Co; ++o) {
              const T* gr = G + (n * Co + o) * vol;
              for (std::size_t i = 0; i < Ci; ++i) {
                const T* xr = X + (n * Ci + i) * vol;
                if (gw) {
                  T acc{0};
#pragma omp simd reduction(+ : acc)
                  for (std::size_t v = 0; v < vol; ++v) acc += gr[v] * xr[v];
                  (*gw)[o * Ci + i] += acc;
                }
                if (gx) {
                  const T w = Wt[o * Ci + i];
                  T* gxr = gx->ptr() + (n * Ci + i) * vol;
                  for (std::size_t v = 0; v < vol; ++v) gxr[v] += w * gr[v];
                }
              }
            }
          return;
        }
        const std::size_t sw = g.stride[2];
        if (gw) {
          T* GW = gw->ptr();
          detail::conv_sweep(g, xs, ys,
                             [&](std::size_t widx, std::size_t in0, std::size_t out0, std::size_t count) {
                               const T* xr = X + in0;
                               const T* gr = G + out0;
                               T acc{0};
#pragma omp simd reduction(+ : acc)
                               for (std::size_t j = 0; j < count; ++j) acc += gr[j] * xr[j * sw];
                               GW[widx] += acc;
                             });
        }
        if (gx) {
          T* GX = gx->ptr();
          detail::conv_sweep(g, xs, ys,
                             [&](std::size_t widx, std::size_t in0, std::size_t out0, std::size_t count) {
                               const T w = Wt[widx];
                               T* xr = GX + in0;
                               const T* gr = G + out0;
                               for (std::size_t j = 0; j < count; ++j) xr[j * sw] += w * gr[j];
                             });
        }
      });
}

// ---- kernel inflation -------------------------------------------------------

enum class InflationMode { replicate, replicate_normalized };

/// Replicates a [C_out, C_in, H, W] kernel along a new temporal axis of extent
/// `temporal`. replicate_normalized additionally scales every slice by 1/T.
template <typename T>
Tensor<T> inflate_kernel(const Tensor<T>& weight2d, int temporal, InflationMode mode) {
  if (temporal < 1) {
    throw ParameterError("inflate_kernel: temporal extent must be >= 1, got " +
                         std::to_string(temporal));
  }
  if (weight2d.rank() != 4) {
    throw ShapeError("inflate_kernel expects a rank-4 kernel, got " +
                     shape_str(weight2d.shape()));
  }
  const Shape& s = weight2d.shape();
  const std::size_t plane = s[2] * s[3];
  const std::size_t T3 = static_cast<std::size_t>(temporal);
  Tensor<T> out({s[0], s[1], T3, s[2], s[3]});
  const T scale = mode == InflationMode::replicate_normalized
                      ? T{1} / static_cast<T>(temporal)
                      : T{1};
  for (std::size_t k = 0; k < s[0] * s[1]; ++k)
    for (std::size_t t = 0; t < T3; ++t)
      for (std::size_t i = 0; i < plane; ++i)
        out[(k * T3 + t) * plane + i] = weight2d[k * plane + i] * scale;
  return out;
}

// ---- resizing ---------------------------------------------------------------

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel centers: src = (dst + 0.5) * in / out - 0.5, clamped to the grid.
inline std::vector<LerpTap> lerp_table(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    double w1 = src - static_cast<double>(i0);
    if (i1 == i0) w1 = 0;
    taps[o] = {i0, i1, w1};
  }
  return taps;
}

inline std::vector<std::size_t> nearest_table(std::size_t in, std::size_t out) {
  std::vector<std::size_t> idx(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    auto i = static_cast<std::size_t>((static_cast<double>(o) + 0.5) * scale);
    idx[o] = std::min(i, in - 1);
  }
  return idx;
}

}  // namespace detail

/// Resizes the (T, H, W) axes of an [N, C, T, H, W] tensor.
template <typename T>
Var<T> upsample(const Var<T>& x, const Dims3& target, UpsampleMode mode) {
  const Shape& xs = x.shape();
  if (xs.size() != 5) {
    throw ShapeError("upsample expects [N,C,T,H,W], got " + shape_str(xs));
  }
  for (auto d : target) {
    if (d < 1) throw ParameterError("upsample target dims must be >= 1");
  }
  const std::size_t planes = xs[0] * xs[1];
  const std::size_t Ti = xs[2], Hi = xs[3], Wi = xs[4];
  const auto [To, Ho, Wo] = target;
  Shape ys{xs[0], xs[1], To, Ho, Wo};
  Tensor<T> y(ys);
  const T* X = x.value().ptr();
  T* Y = y.ptr();

  if (mode == UpsampleMode::nearest) {
    const auto it = detail::nearest_table(Ti, To), ih = detail::nearest_table(Hi, Ho),
               iw = detail::nearest_table(Wi, Wo);
    std::vector<std::size_t> src_index(To * Ho * Wo);
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t h = 0; h < Ho; ++h)
        for (std::size_t w = 0; w < Wo; ++w)
          src_index[(t * Ho + h) * Wo + w] = (it[t] * Hi + ih[h]) * Wi + iw[w];
    const std::size_t vin = Ti * Hi * Wi, vout = To * Ho * Wo;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t v = 0; v < vout; ++v) Y[p * vout + v] = X[p * vin + src_index[v]];
    return make_result<T>(std::move(y), "upsample_nearest", {x},
                          [src_index, planes, vin, vout](Node<T>& self) {
                            auto* gx = detail::parent_grad(self, 0);
                            if (!gx) return;
                            for (std::size_t p = 0; p < planes; ++p)
                              for (std::size_t v = 0; v < vout; ++v)
                                (*gx)[p * vin + src_index[v]] += (*self.grad)[p * vout + v];
                          });
  }

  // Separable: resize W, then H, then T. Each pass is a 1D lerp along one axis
  // of a tensor viewed as [outer, n, inner].
  struct Pass {
    std::size_t outer, n_in, n_out, inner;
    std::vector<detail::LerpTap> taps;
  };
  const std::array<Pass, 3> passes{
      Pass{planes * Ti * Hi, Wi, Wo, 1, detail::lerp_table(Wi, Wo)},
      Pass{planes * Ti, Hi, Ho, Wo, detail::lerp_table(Hi, Ho)},
      Pass{planes, Ti, To, Ho * Wo, detail::lerp_table(Ti, To)}};
  auto forward_pass = [](const Pass& ps, const T* in, T* out) {
    for (std::size_t o = 0; o < ps.outer; ++o) {
      const T* src = in + o * ps.n_in * ps.inner;
      T* dst = out + o * ps.n_out * ps.inner;
      for (std::size_t k = 0; k < ps.n_out; ++k) {
        const T a = static_cast<T>(ps.taps[k].w1), b = T{1} - a;
        const T* r0 = src + ps.taps[k].i0 * ps.inner;
        const T* r1 = src + ps.taps[k].i1 * ps.inner;
        T* d = dst + k * ps.inner;
        for (std::size_t j = 0; j < ps.inner; ++j) d[j] = b * r0[j] + a * r1[j];
      }
    }
  };
  auto backward_pass = [](const Pass& ps, const T* gout, T* gin) {
    for (std::size_t o = 0; o < ps.outer; ++o) {
      const T* g = gout + o * ps.n_out * ps.inner;
      T* dst = gin + o * ps.n_in * ps.inner;
      for (std::size_t k = 0; k < ps.n_out; ++k) {
        const T a = static_cast<T>(ps.taps[k].w1), b = T{1} - a;
        T* r0 = dst + ps.taps[k].i0 * ps.inner;
        T* r1 = dst + ps.taps[k].i1 * ps.inner;
        const T* gk = g + k * ps.inner;
        for (std::size_t j = 0; j < ps.inner; ++j) {
          r0[j] += b * gk[j];
          r1[j] += a * gk[j];
        }
      }
    }
  };
  Tensor<T> s1({passes[0].outer * Wo}), s2({passes[1].outer * Ho * Wo});
  forward_pass(passes[0], X, s1.ptr());
  forward_pass(passes[1], s1.ptr(), s2.ptr());
  forward_pass(passes[2], s2.ptr(), Y);
  return make_result<T>(std::move(y), "upsample_trilinear", {x},
                        [passes, backward_pass](Node<T>& self) {
                          auto* gx = detail::parent_grad(self, 0);
                          if (!gx) return;
                          std::vector<T> g2(passes[1].outer * passes[1].n_out * passes[1].inner);
                          std::vector<T> g1(passes[0].outer * passes[0].n_out);
                          backward_pass(passes[2], self.grad->ptr(), g2.data());
                          backward_pass(passes[1], g2.data(), g1.data());
                          backward_pass(passes[0], g1.data(), gx->ptr());
                        });
}

// ---- layers -------------------------------------------------------------------

/// He-normal 2D kernel inflated to the 3D geometry (identity when kT == 1).
template <typename T>
Tensor<T> init_conv_weight(const ConvGeometry& g, std::mt19937_64& rng,
                           InflationMode inflation = InflationMode::replicate_normalized) {
  const std::size_t fan_in = static_cast<std::size_t>(g.in_per_group()) * g.kernel[1] * g.kernel[2];
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> w2({static_cast<std::size_t>(g.out_channels),
                static_cast<std::size_t>(g.in_per_group()),
                static_cast<std::size_t>(g.kernel[1]),
                static_cast<std::size_t>(g.kernel[2])});
  for (auto& v : w2.data()) v = static_cast<T>(normal(rng));
  return inflate_kernel(w2, g.kernel[0], inflation);
}

/// A named 3D convolution. `in_segments` lists the sizes of concatenated input
/// groups; channel reduction pairs input channels only within a segment.
template <typename T>
struct Conv3dLayer {
  std::string name;
  ConvGeometry geometry;
  Var<T> weight;
  Var<T> bias;
  std::vector<int> in_segments;
  bool reduce_out = true;
  bool reduce_in = true;

  Conv3dLayer() = default;
  Conv3dLayer(std::string n, const ConvGeometry& g, std::mt19937_64& rng,
              InflationMode inflation = InflationMode::replicate_normalized)
      : name(std::move(n)), geometry(g) {
    g.validate();
    weight = Var<T>::parameter(init_conv_weight<T>(g, rng, inflation));
    if (g.bias) bias = Var<T>::parameter(Tensor<T>({static_cast<std::size_t>(g.out_channels)}));
    in_segments = {g.in_channels};
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> y = conv3d(x, weight, bias, geometry);
    if (cost_recording()) {
      const Shape& s = x.shape();
      const LayerCount c = count_layer(geometry, {s[1], s[2], s[3], s[4]});
      record_cost(name, geometry.is_depthwise() ? "conv_dw" : "conv", y.shape(), c.macs,
                  c.params);
    }
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out) const {
    out.push_back({name + ".weight", weight});
    if (bias.defined()) out.push_back({name + ".bias", bias});
  }
};

template <typename T>
struct BatchNorm3d {
  std::string name;
  int channels = 0;
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm3d() = default;
  BatchNorm3d(std::string n, int c)
      : name(std::move(n)),
        channels(c),
        gamma(Var<T>::parameter(Tensor<T>({static_cast<std::size_t>(c)}, T{1}))),
        beta(Var<T>::parameter(Tensor<T>({static_cast<std::size_t>(c)}))),
        running_mean({static_cast<std::size_t>(c)}),
        running_var({static_cast<std::size_t>(c)}, T{1}) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    Var<T> y = batchnorm3d(x, training);
    record_cost(name, "batchnorm", y.shape(), 0, 2 * static_cast<std::uint64_t>(channels));
    return y;
  }

  void collect(std::vector<NamedParam<T>>& out) const {
    out.push_back({name + ".gamma", gamma});
    out.push_back({name + ".beta", beta});
  }

 private:
  Var<T> batchnorm3d(const Var<T>& x, bool training);
};

template <typename T>
Var<T> BatchNorm3d<T>::batchnorm3d(const Var<T>& x, bool training) {
  const Shape& xs = x.shape();
  if (xs.size() != 5 || static_cast<int>(xs[1]) != channels) {
    throw ShapeError("batchnorm '" + name + "' expects " + std::to_string(channels) +
                     " channels, got input " + shape_str(xs));
  }
  const std::size_t N = xs[0], C = xs[1], V = xs[2] * xs[3] * xs[4];
  const std::size_t M = N * V;
  if (M == 0) throw ShapeError("batchnorm over an empty reduction set");
  std::vector<T> mean(C), inv_std(C);
  const T* X = x.value().ptr();
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* xr = X + (n * C + c) * V;
        for (std::size_t v = 0; v < V; ++v) s += xr[v];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* xr = X + (n * C + c) * V;
        for (std::size_t v = 0; v < V; ++v) {
          const double d = xr[v] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = M > 1 ? var * static_cast<double>(M) / static_cast<double>(M - 1) : var;
      running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * mu);
      running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
    }
  }
  Tensor<T> y(xs);
  Tensor<T> xhat(xs);
  const T* G = gamma.value().ptr();
  const T* B = beta.value().ptr();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t o = (n * C + c) * V;
      for (std::size_t v = 0; v < V; ++v) {
        const T h = (X[o + v] - mean[c]) * inv_std[c];
        xhat[o + v] = h;
        y[o + v] = G[c] * h + B[c];
      }
    }
  return make_result<T>(
      std::move(y), training ? "batchnorm_train" : "batchnorm_eval", {x, gamma, beta},
      [xhat = std::move(xhat), inv_std, N, C, V, M, training](Node<T>& self) {
        const T* Gy = self.grad->ptr();
        const T* Gm = self.parents[1]->value.ptr();
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t o = (n * C + c) * V;
            for (std::size_t v = 0; v < V; ++v) {
              sum_g[c] += Gy[o + v];
              sum_gx[c] += static_cast<double>(Gy[o + v]) * xhat[o + v];
            }
          }
        if (auto* gg = detail::parent_grad(self, 1))
          for (std::size_t c = 0; c < C; ++c) (*gg)[c] += static_cast<T>(sum_gx[c]);
        if (auto* gb = detail::parent_grad(self, 2))
          for (std::size_t c = 0; c < C; ++c) (*gb)[c] += static_cast<T>(sum_g[c]);
        auto* gx = detail::parent_grad(self, 0);
        if (!gx) return;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t o = (n * C + c) * V;
            const T k = Gm[c] * inv_std[c];
            if (training) {
              const T mg = static_cast<T>(sum_g[c] / static_cast<double>(M));
              const T mgx = static_cast<T>(sum_gx[c] / static_cast<double>(M));
              for (std::size_t v = 0; v < V; ++v)
                (*gx)[o + v] += k * (Gy[o + v] - mg - xhat[o + v] * mgx);
            } else {
              for (std::size_t v = 0; v < V; ++v) (*gx)[o + v] += k * Gy[o + v];
            }
          }
      });
}

template <typename T>
Var<T> relu6_named(const Var<T>& x, const std::string& name) {
  Var<T> y = relu6(x);
  record_cost(name, "relu6", y.shape(), 0, 0);
  return y;
}

template <typename T>
Var<T> upsample_named(const Var<T>& x, const Dims3& target, UpsampleMode mode,
                      const std::string& name) {
  Var<T> y = upsample(x, target, mode);
  record_cost(name, mode == UpsampleMode::trilinear ? "upsample_trilinear" : "upsample_nearest",
              y.shape(), upsample_macs(mode, Shape(y.shape().begin() + 1, y.shape().end())), 0);
  return y;
}

/// MobileNetV2-style block: pointwise expand, depthwise 3x3x3, linear
/// pointwise projection, residual when input and output shapes agree.
template <typename T>
struct InvertedResidual {
  std::string name;
  Conv3dLayer<T> expand;
  BatchNorm3d<T> bn_expand;
  Conv3dLayer<T> depthwise;
  BatchNorm3d<T> bn_depthwise;
  Conv3dLayer<T> project;
  BatchNorm3d<T> bn_project;
  bool use_residual = false;

  InvertedResidual() = default;
  InvertedResidual(std::string n, int in, int out, int hidden, std::array<int, 3> stride,
                   std::mt19937_64& rng, InflationMode inflation)
      : name(std::move(n)) {
    if (hidden < in) throw ParameterError("inverted residual expansion ratio must be >= 1");
    ConvGeometry ge{in, hidden};
    ConvGeometry gd{hidden, hidden, {3, 3, 3}, stride, {1, 1, 1}, hidden};
    ConvGeometry gp{hidden, out};
    expand = Conv3dLayer<T>(name + ".expand", ge, rng, inflation);
    bn_expand = BatchNorm3d<T>(name + ".expand_bn", hidden);
    depthwise = Conv3dLayer<T>(name + ".depthwise", gd, rng, inflation);
    bn_depthwise = BatchNorm3d<T>(name + ".depthwise_bn", hidden);
    project = Conv3dLayer<T>(name + ".project", gp, rng, inflation);
    bn_project = BatchNorm3d<T>(name + ".project_bn", out);
    use_residual = in == out && stride == std::array<int, 3>{1, 1, 1};
  }

  Var<T> operator()(const Var<T>& x, bool training) {
    Var<T> h = relu6_named(bn_expand(expand(x), training), name + ".expand_act");
    h = relu6_named(bn_depthwise(depthwise(h), training), name + ".depthwise_act");
    h = bn_project(project(h), training);
    if (use_residual) {
      h = add(h, x);
      record_cost(name + ".residual", "add", h.shape(), 0, 0);
    }
    return h;
  }

  template <typename F>
  void visit(F&& f) {
    f(expand);
    f(bn_expand);
    f(depthwise);
    f(bn_depthwise);
    f(project);
    f(bn_project);
  }
};

}  // namespace tinyhd
