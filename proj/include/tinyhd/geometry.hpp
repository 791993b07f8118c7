#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "tinyhd/tensor.hpp"

namespace tinyhd {

using Dims3 = std::array<std::size_t, 3>;

inline std::string dims_str(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" +
         std::to_string(d[2]);
}

/// Static description of a 3D convolution (T, H, W axes).
struct ConvGeometry {
  int in_channels = 1;
  int out_channels = 1;
  std::array<int, 3> kernel{1, 1, 1};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> padding{0, 0, 0};
  int groups = 1;
  bool bias = true;

  int in_per_group() const { return in_channels / groups; }
  bool is_pointwise() const {
    return kernel == std::array<int, 3>{1, 1, 1} &&
           stride == std::array<int, 3>{1, 1, 1} &&
           padding == std::array<int, 3>{0, 0, 0} && groups == 1;
  }
  bool is_depthwise() const {
    return groups > 1 && groups == in_channels && groups == out_channels;
  }
  std::size_t kernel_volume() const {
    return static_cast<std::size_t>(kernel[0]) * kernel[1] * kernel[2];
  }
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_per_group() *
           kernel_volume();
  }
  std::size_t bias_count() const { return bias ? out_channels : 0; }
  Shape weight_shape() const {
    return {static_cast<std::size_t>(out_channels),
            static_cast<std::size_t>(in_per_group()),
            static_cast<std::size_t>(kernel[0]),
            static_cast<std::size_t>(kernel[1]),
            static_cast<std::size_t>(kernel[2])};
  }

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || groups < 1) {
      throw ParameterError("conv channels and groups must be positive");
    }
    if (in_channels % groups != 0 || out_channels % groups != 0) {
      throw ParameterError("conv channels " + std::to_string(in_channels) +
                           "->" + std::to_string(out_channels) +
                           " not divisible by groups " +
                           std::to_string(groups));
    }
    for (int a = 0; a < 3; ++a) {
      if (kernel[a] < 1 || stride[a] < 1 || padding[a] < 0) {
        throw ParameterError("conv kernel/stride must be >= 1, padding >= 0");
      }
    }
  }

  /// d' = floor((d + 2p - k) / s) + 1 per axis.
  Dims3 output_dims(const Dims3& in) const {
    Dims3 out{};
    for (int a = 0; a < 3; ++a) {
      const long span = static_cast<long>(in[a]) + 2L * padding[a] - kernel[a];
      if (span < 0) {
        throw GeometryError("conv input " + dims_str(in) +
                            " smaller than kernel extent on axis " +
                            std::to_string(a));
      }
      out[a] = static_cast<std::size_t>(span / stride[a] + 1);
    }
    return out;
  }
};

/// "same"-style padding: floor(k/2) per axis.
inline std::array<int, 3> same_padding(const std::array<int, 3>& kernel) {
  return {kernel[0] / 2, kernel[1] / 2, kernel[2] / 2};
}

}  // namespace tinyhd
