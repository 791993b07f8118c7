#pragma once

// Analytic multiply-accumulate and parameter accounting.
//
// Layers report themselves to the active CostRecorder while a forward pass
// runs, so a profile always follows the exact execution path of the model.
// Counts are analytic (closed-form per layer), per batch item.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "tinyhd/autograd.hpp"
#include "tinyhd/geometry.hpp"

namespace tinyhd {

struct LayerCount {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

/// MACs = C_out * (C_in / groups) * kT*kH*kW * T'*H'*W'; params = weights + bias.
/// `input_shape` is [C, T, H, W] (no batch axis).
inline LayerCount count_layer(const ConvGeometry& g, const Shape& input_shape) {
  g.validate();
  if (input_shape.size() != 4) {
    throw ShapeError("count_layer expects [C,T,H,W], got " +
                     shape_str(input_shape));
  }
  if (static_cast<int>(input_shape[0]) != g.in_channels) {
    throw ShapeError("count_layer: input has " + std::to_string(input_shape[0]) +
                     " channels, layer expects " +
                     std::to_string(g.in_channels));
  }
  const Dims3 out = g.output_dims({input_shape[1], input_shape[2], input_shape[3]});
  const std::uint64_t positions = static_cast<std::uint64_t>(out[0]) * out[1] * out[2];
  LayerCount c;
  c.macs = static_cast<std::uint64_t>(g.out_channels) * g.in_per_group() *
           g.kernel_volume() * positions;
  c.params = g.weight_count() + g.bias_count();
  return c;
}

enum class UpsampleMode { nearest, trilinear };

/// 0 for nearest, 7 per output element for trilinear (8-corner lerp tree).
inline std::uint64_t upsample_macs(UpsampleMode mode, const Shape& output_shape) {
  return mode == UpsampleMode::trilinear ? 7 * shape_numel(output_shape) : 0;
}

struct LayerCost {
  std::string name;
  std::string kind;
  Shape output_shape;  // without batch axis
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

class CostRecorder {
 public:
  void add(LayerCost c) { entries_.push_back(std::move(c)); }
  const std::vector<LayerCost>& entries() const { return entries_; }

 private:
  std::vector<LayerCost> entries_;
};

namespace detail {
inline thread_local CostRecorder* active_recorder = nullptr;
}

/// Routes layer cost reports to `recorder` for its lifetime.
class CostRecordingScope {
 public:
  explicit CostRecordingScope(CostRecorder& recorder)
      : previous_(detail::active_recorder) {
    detail::active_recorder = &recorder;
  }
  ~CostRecordingScope() { detail::active_recorder = previous_; }
  CostRecordingScope(const CostRecordingScope&) = delete;
  CostRecordingScope& operator=(const CostRecordingScope&) = delete;

 private:
  CostRecorder* previous_;
};

inline bool cost_recording() { return detail::active_recorder != nullptr; }

inline void record_cost(const std::string& name, const std::string& kind,
                        const Shape& shape_with_batch, std::uint64_t macs,
                        std::uint64_t params) {
  if (!detail::active_recorder) return;
  Shape s(shape_with_batch.begin() + 1, shape_with_batch.end());
  detail::active_recorder->add({name, kind, std::move(s), macs, params});
}

struct CostReport {
  std::vector<LayerCost> layers;
  std::uint64_t total_macs = 0;
  std::uint64_t total_params = 0;
  std::string mode;
  int maps_per_forward = 1;
  int passes_per_16_maps = 16;
  std::uint64_t macs_per_16_maps = 0;

  static CostReport from_entries(std::vector<LayerCost> entries, std::string mode,
                                 int maps_per_forward) {
    CostReport r;
    r.layers = std::move(entries);
    for (const auto& l : r.layers) {
      r.total_macs += l.macs;
      r.total_params += l.params;
    }
    r.mode = std::move(mode);
    r.maps_per_forward = maps_per_forward;
    r.passes_per_16_maps = (16 + maps_per_forward - 1) / maps_per_forward;
    r.macs_per_16_maps = r.total_macs * static_cast<std::uint64_t>(r.passes_per_16_maps);
    return r;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "layer,output_shape,macs,params\n";
    for (const auto& l : layers) {
      os << l.name << ',' << shape_str(l.output_shape) << ',' << l.macs << ','
         << l.params << '\n';
    }
    os << "TOTAL,," << total_macs << ',' << total_params << '\n';
    return os.str();
  }

  std::string to_text() const {
    std::size_t width = 5;
    for (const auto& l : layers) width = std::max(width, l.name.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(width) + 2) << "layer"
       << std::setw(18) << "output" << std::right << std::setw(14) << "MACs"
       << std::setw(12) << "params" << '\n';
    for (const auto& l : layers) {
      os << std::left << std::setw(static_cast<int>(width) + 2) << l.name
         << std::setw(18) << shape_str(l.output_shape) << std::right
         << std::setw(14) << l.macs << std::setw(12) << l.params << '\n';
    }
    os << std::string(width + 46, '-') << '\n';
    os << "total MACs per pass : " << total_macs << '\n';
    os << "total params        : " << total_params << '\n';
    os << "mode                : " << mode << " (" << maps_per_forward
       << " map(s) per forward)\n";
    os << std::fixed << std::setprecision(4);
    os << "GMACs for 16 maps   : "
       << static_cast<double>(total_macs) / 1e9 << " x" << passes_per_16_maps
       << " = " << static_cast<double>(macs_per_16_maps) / 1e9 << '\n';
    return os.str();
  }
};

/// Traces one batch-1 eval forward pass of `model` and collects its costs.
template <typename Model>
CostReport count_model(Model& model) {
  using T = typename Model::scalar_type;
  const auto& cfg = model.config();
  Tensor<T> clip({1, 3, static_cast<std::size_t>(cfg.clip_length),
                  static_cast<std::size_t>(cfg.height),
                  static_cast<std::size_t>(cfg.width)});
  CostRecorder recorder;
  {
    const bool was_training = model.training();
    model.set_training(false);
    NoGradGuard no_grad;
    CostRecordingScope scope(recorder);
    model.forward(clip);
    model.set_training(was_training);
  }
  return CostReport::from_entries(recorder.entries(), cfg.mode_name(),
                                  cfg.maps_per_forward());
}

}  // namespace tinyhd
