#pragma once

// The multi-decoder video saliency network.
//
//   clip -> inflated MobileNetV2-style encoder -> 4 feature taps
//        -> D1 (one map per tap), D2 (U-Net-like), D3 (iterative aggregation)
//        -> 1x1x1 fusion of the six maps -> final map
//
// Every emitted map is a spatial softmax, i.e. each [H, W] slice sums to 1.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tinyhd/nn.hpp"

namespace tinyhd {

enum class PredictionMode { miso, mimo };

inline const char* to_string(PredictionMode m) {
  return m == PredictionMode::miso ? "miso" : "mimo";
}

inline PredictionMode parse_mode(const std::string& s) {
  if (s == "miso") return PredictionMode::miso;
  if (s == "mimo") return PredictionMode::mimo;
  throw ConfigError("unknown prediction mode '" + s + "' (expected miso|mimo)");
}

struct ModelConfig {
  static constexpr int n_intermediate = 4;

  double width_multiplier = 1.0;
  PredictionMode mode = PredictionMode::mimo;
  int clip_length = 16;
  int height = 48;
  int width = 64;
  int stem_channels = 8;
  // Channels of each tap; a tap concatenates two blocks of half this width.
  std::array<int, 4> encoder_tap_channels{16, 32, 64, 256};
  int expansion = 2;
  int d1_channels = 8;
  std::array<int, 3> d2_channels{32, 16, 8};
  int d3_channels = 16;
  InflationMode inflation = InflationMode::replicate_normalized;

  /// ceil(base * width_multiplier), at least 1.
  int scaled(int base) const {
    const double v = std::ceil(static_cast<double>(base) * width_multiplier - 1e-9);
    return std::max(1, static_cast<int>(v));
  }
  int stage_channels(int k) const { return scaled(encoder_tap_channels[k] / 2); }
  int tap_channels(int k) const { return 2 * stage_channels(k); }

  std::string mode_name() const { return to_string(mode); }
  int maps_per_forward() const { return mode == PredictionMode::mimo ? clip_length : 1; }
  int output_frames() const { return maps_per_forward(); }

  void validate() const {
    const double w = width_multiplier;
    if (!(w == 1.0 || w == 0.5 || w == 0.25)) {
      throw ConfigError("width_multiplier must be one of 1, 0.5, 0.25");
    }
    if (clip_length < 1) throw ConfigError("clip_length must be >= 1");
    if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0) {
      throw GeometryError("spatial size " + std::to_string(height) + "x" +
                          std::to_string(width) + " must be a multiple of 16");
    }
    for (int c : encoder_tap_channels) {
      if (c < 2 || c % 2 != 0) throw ConfigError("encoder tap channels must be even and >= 2");
    }
    if (stem_channels < 1 || expansion < 1 || d1_channels < 1 || d3_channels < 1) {
      throw ConfigError("channel counts must be positive");
    }
    for (int c : d2_channels) {
      if (c < 1) throw ConfigError("channel counts must be positive");
    }
  }

  /// One-line key=value echo used by checkpoint manifests.
  std::string serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "width_multiplier=" << width_multiplier << " mode=" << mode_name()
       << " clip_length=" << clip_length << " height=" << height << " width=" << width
       << " stem_channels=" << stem_channels << " taps=" << encoder_tap_channels[0] << ','
       << encoder_tap_channels[1] << ',' << encoder_tap_channels[2] << ','
       << encoder_tap_channels[3] << " expansion=" << expansion
       << " d1=" << d1_channels << " d2=" << d2_channels[0] << ',' << d2_channels[1] << ','
       << d2_channels[2] << " d3=" << d3_channels << " inflation="
       << (inflation == InflationMode::replicate ? "replicate" : "replicate_normalized");
    return os.str();
  }

  static ModelConfig deserialize(const std::string& line) {
    ModelConfig c;
    std::istringstream is(line);
    std::string tok;
    auto ints = [](const std::string& v, auto& arr) {
      std::istringstream vs(v);
      std::string part;
      std::size_t i = 0;
      while (std::getline(vs, part, ',')) {
        if (i >= arr.size()) throw DataError("too many values in '" + v + "'");
        arr[i++] = std::stoi(part);
      }
      if (i != arr.size()) throw DataError("too few values in '" + v + "'");
    };
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw DataError("bad config token '" + tok + "'");
      const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
      if (k == "width_multiplier") c.width_multiplier = std::stod(v);
      else if (k == "mode") c.mode = parse_mode(v);
      else if (k == "clip_length") c.clip_length = std::stoi(v);
      else if (k == "height") c.height = std::stoi(v);
      else if (k == "width") c.width = std::stoi(v);
      else if (k == "stem_channels") c.stem_channels = std::stoi(v);
      else if (k == "taps") ints(v, c.encoder_tap_channels);
      else if (k == "expansion") c.expansion = std::stoi(v);
      else if (k == "d1") c.d1_channels = std::stoi(v);
      else if (k == "d2") ints(v, c.d2_channels);
      else if (k == "d3") c.d3_channels = std::stoi(v);
      else if (k == "inflation")
        c.inflation = v == "replicate" ? InflationMode::replicate : InflationMode::replicate_normalized;
      else throw DataError("unknown config key '" + k + "'");
    }
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Four D1 maps, the D2 and D3 maps and the fused output. Maps are
/// [N, T', H, W] with T' = 1 (MISO) or clip_length (MIMO).
template <typename T>
struct SaliencyMapSet {
  std::array<Var<T>, 4> intermediate;
  Var<T> d2_map;
  Var<T> d3_map;
  Var<T> fused;

  std::array<Var<T>, 6> fusion_inputs() const {
    return {intermediate[0], intermediate[1], intermediate[2], intermediate[3], d2_map, d3_map};
  }
};

template <typename... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <typename... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

/// Softmax-normalizes each [H, W] slice of a [N, T', H, W] or [N, 1, T', H, W] tensor.
template <typename T>
Var<T> spatial_softmax(const Var<T>& logits) {
  const Shape& s = logits.shape();
  const std::size_t inner = s[s.size() - 1] * s[s.size() - 2];
  return softmax_blocks(logits, inner);
}

/// softmax(gain * sum_k w_k * map_k + b) over each spatial slice.
/// `maps` are [N, T', H, W]; returns [N, T', H, W].
template <typename T>
Var<T> fuse(const std::vector<Var<T>>& maps, const Conv3dLayer<T>& mixer, T gain) {
  if (maps.empty()) throw ShapeError("fuse: no maps");
  if (static_cast<int>(maps.size()) != mixer.geometry.in_channels) {
    throw ShapeError("fuse: got " + std::to_string(maps.size()) + " maps, mixer expects " +
                     std::to_string(mixer.geometry.in_channels));
  }
  const Shape s = maps[0].shape();
  if (s.size() != 4) throw ShapeError("fuse: maps must be [N,T,H,W], got " + shape_str(s));
  std::vector<Var<T>> stacked;
  for (const auto& m : maps) {
    require_same_shape(m.shape(), s, "fuse");
    stacked.push_back(reshape(m, {s[0], 1, s[1], s[2], s[3]}));
  }
  Var<T> x = concat(stacked, 1);
  if (gain != T{1}) x = mul(x, gain);
  Var<T> y = mixer(x);
  return reshape(spatial_softmax(y), s);
}

template <typename T>
class TinyHD {
 public:
  using scalar_type = T;
  static constexpr int kD3Merges = 3;

  TinyHD(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }

  Var<T> check_clip(const Var<T>& clip) const {
    const Shape& s = clip.shape();
    const Shape want{s.empty() ? 0 : s[0], 3, static_cast<std::size_t>(cfg_.clip_length),
                     static_cast<std::size_t>(cfg_.height), static_cast<std::size_t>(cfg_.width)};
    if (s.size() != 5 || s != want) {
      throw ShapeError("clip shape " + shape_str(s) + " does not match config [N x 3 x " +
                       std::to_string(cfg_.clip_length) + " x " + std::to_string(cfg_.height) +
                       " x " + std::to_string(cfg_.width) + "]");
    }
    return clip;
  }

  std::array<Var<T>, 4> encode(const Var<T>& clip) {
    check_clip(clip);
    Var<T> x = relu6_named(stem_bn_(stem_(clip), training_), "encoder.stem.act");
    std::array<Var<T>, 4> taps;
    for (int k = 0; k < 4; ++k) {
      Var<T> a = stages_[k][0](x, training_);
      Var<T> b = stages_[k][1](a, training_);
      taps[k] = concat<T>({a, b}, 1);
      x = b;
    }
    return taps;
  }

  std::array<Var<T>, 4> decode_d1(const std::array<Var<T>, 4>& taps) {
    check_taps(taps);
    std::array<Var<T>, 4> maps;
    for (int k = 0; k < 4; ++k) {
      auto& head = d1_[k];
      const std::string n = "d1.head" + std::to_string(k + 1);
      Var<T> h = relu6_named(head.bn(head.hidden(taps[k]), training_), n + ".act");
      maps[k] = map_head(head.out(h), n);
    }
    return maps;
  }

  Var<T> decode_d2(const std::array<Var<T>, 4>& taps) {
    check_taps(taps);
    Var<T> x = taps[3];
    for (int j = 0; j < 3; ++j) {
      const int k = 2 - j;
      auto& st = d2_[j];
      const std::string n = "d2.up" + std::to_string(j + 1);
      Var<T> up = upsample_named(x, spatial_dims(taps[k]), UpsampleMode::trilinear, n + ".resize");
      Var<T> cat = concat<T>({up, taps[k]}, 1);
      Var<T> h = relu6_named(st.bn_pw(st.pw(cat), training_), n + ".pw_act");
      x = relu6_named(st.bn_dw(st.dw(h), training_), n + ".dw_act");
    }
    return map_head(d2_head_(x), "d2.head");
  }

  Var<T> decode_d3(const std::array<Var<T>, 4>& taps) {
    check_taps(taps);
    std::array<Var<T>, 4> proj;
    for (int k = 0; k < 4; ++k) {
      auto& p = d3_proj_[k];
      proj[k] = relu6_named(p.bn(p.conv(taps[k]), training_),
                            "d3.proj" + std::to_string(k + 1) + ".act");
    }
    Var<T> agg = proj[3];
    last_d3_stages_.clear();
    for (int j = 0; j < kD3Merges; ++j) {
      const int k = 2 - j;
      auto& node = d3_nodes_[j];
      const std::string n = "d3.node" + std::to_string(j + 1);
      Var<T> up = upsample_named(agg, spatial_dims(proj[k]), UpsampleMode::trilinear, n + ".resize");
      Var<T> cat = concat<T>({proj[k], up}, 1);
      Var<T> h = relu6_named(node.bn_pw(node.pw(cat), training_), n + ".pw_act");
      h = node.bn_dw(node.dw(h), training_);
      agg = relu6_named(add(h, up), n + ".act");
      last_d3_stages_.push_back(agg);
    }
    return map_head(d3_head_(agg), "d3.head");
  }

  /// Aggregation-node outputs of the most recent decode_d3 call, shallowest last.
  const std::vector<Var<T>>& d3_stage_outputs() const { return last_d3_stages_; }

  Var<T> fuse_maps(const std::array<Var<T>, 6>& maps) {
    std::vector<Var<T>> v(maps.begin(), maps.end());
    Var<T> y = fuse(v, fusion_, fusion_gain());
    record_cost("fusion.softmax", "softmax", y.shape(), 0, 0);
    return y;
  }

  /// Gain applied to the stacked maps before the 1x1x1 mixer: the number of
  /// spatial locations, so that mixer inputs are O(1).
  T fusion_gain() const { return static_cast<T>(cfg_.height * cfg_.width); }

  SaliencyMapSet<T> forward(const Var<T>& clip) {
    const auto taps = encode(clip);
    SaliencyMapSet<T> out;
    out.intermediate = decode_d1(taps);
    out.d2_map = decode_d2(taps);
    out.d3_map = decode_d3(taps);
    out.fused = fuse_maps(out.fusion_inputs());
    return out;
  }
  SaliencyMapSet<T> forward(const Tensor<T>& clip) { return forward(Var<T>(clip)); }

  /// Visits every Conv3dLayer and BatchNorm3d in construction order.
  template <typename F>
  void visit(F&& f) {
    f(stem_);
    f(stem_bn_);
    for (auto& stage : stages_)
      for (auto& block : stage) block.visit(f);
    for (auto& h : d1_) {
      f(h.hidden);
      f(h.bn);
      f(h.out);
    }
    for (auto& st : d2_) {
      f(st.pw);
      f(st.bn_pw);
      f(st.dw);
      f(st.bn_dw);
    }
    f(d2_head_);
    for (auto& p : d3_proj_) {
      f(p.conv);
      f(p.bn);
    }
    for (auto& node : d3_nodes_) {
      f(node.pw);
      f(node.bn_pw);
      f(node.dw);
      f(node.bn_dw);
    }
    f(d3_head_);
    f(fusion_);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<TinyHD*>(this)->visit(std::forward<F>(f));
  }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    visit([&](auto& layer) { layer.collect(out); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.var.numel();
    return n;
  }

  /// Deep copy with independent parameter storage.
  TinyHD clone() const {
    TinyHD copy = *this;
    copy.last_d3_stages_.clear();
    copy.visit(Overloaded{
        [](Conv3dLayer<T>& c) {
          c.weight = Var<T>(c.weight.value(), c.weight.requires_grad());
          if (c.bias.defined()) c.bias = Var<T>(c.bias.value(), c.bias.requires_grad());
        },
        [](BatchNorm3d<T>& b) {
          b.gamma = Var<T>(b.gamma.value(), b.gamma.requires_grad());
          b.beta = Var<T>(b.beta.value(), b.beta.requires_grad());
        }});
    return copy;
  }

  /// Stops every parameter from receiving gradients.
  void freeze() {
    for (auto& p : parameters()) {
      Var<T> v = p.var;
      v.set_requires_grad(false);
      v.clear_grad();
    }
  }

 private:
  struct D1Head {
    Conv3dLayer<T> hidden;
    BatchNorm3d<T> bn;
    Conv3dLayer<T> out;
  };
  // Pointwise merge of the concatenated streams, then depthwise 3x3x3.
  struct SepStage {
    Conv3dLayer<T> pw;
    BatchNorm3d<T> bn_pw;
    Conv3dLayer<T> dw;
    BatchNorm3d<T> bn_dw;
  };
  struct Projection {
    Conv3dLayer<T> conv;
    BatchNorm3d<T> bn;
  };

  static Dims3 spatial_dims(const Var<T>& x) {
    const Shape& s = x.shape();
    return {s[2], s[3], s[4]};
  }

  void check_taps(const std::array<Var<T>, 4>& taps) const {
    for (int k = 0; k < 4; ++k) {
      if (!taps[k].defined() || taps[k].shape().size() != 5 ||
          static_cast<int>(taps[k].shape()[1]) != cfg_.tap_channels(k)) {
        throw ShapeError("decoder tap " + std::to_string(k + 1) + " has shape " +
                         (taps[k].defined() ? shape_str(taps[k].shape()) : std::string("<none>")) +
                         ", expected " + std::to_string(cfg_.tap_channels(k)) + " channels");
      }
    }
  }

  // [N,1,t,h,w] logits -> [N,T',H,W] distribution.
  Var<T> map_head(const Var<T>& logits, const std::string& name) {
    Var<T> x = logits;
    Dims3 target{static_cast<std::size_t>(cfg_.clip_length), static_cast<std::size_t>(cfg_.height),
                 static_cast<std::size_t>(cfg_.width)};
    if (cfg_.mode == PredictionMode::miso) {
      x = mean_axis(x, 2);
      record_cost(name + ".temporal_pool", "pool", x.shape(), 0, 0);
      target[0] = 1;
    }
    x = upsample_named(x, target, UpsampleMode::trilinear, name + ".resize");
    const Shape& s = x.shape();
    Var<T> y = reshape(spatial_softmax(x), {s[0], s[2], s[3], s[4]});
    record_cost(name + ".softmax", "softmax", s, 0, 0);
    return y;
  }

  void build(std::mt19937_64& rng) {
    const auto infl = cfg_.inflation;
    const int stem = cfg_.scaled(cfg_.stem_channels);
    stem_ = Conv3dLayer<T>("encoder.stem.conv", ConvGeometry{3, stem, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}}, rng, infl);
    stem_.reduce_in = false;
    stem_bn_ = BatchNorm3d<T>("encoder.stem.bn", stem);

    const std::array<std::array<int, 3>, 4> strides{{{1, 2, 2}, {2, 2, 2}, {1, 2, 2}, {1, 2, 2}}};
    int in = stem, in_base = cfg_.stem_channels;
    for (int k = 0; k < 4; ++k) {
      const int base = cfg_.encoder_tap_channels[k] / 2;
      const int c = cfg_.stage_channels(k);
      const std::string n = "encoder.stage" + std::to_string(k + 1);
      stages_[k][0] = InvertedResidual<T>(n + ".block1", in, c, cfg_.scaled(cfg_.expansion * in_base),
                                          strides[k], rng, infl);
      stages_[k][1] = InvertedResidual<T>(n + ".block2", c, c, cfg_.scaled(cfg_.expansion * base),
                                          {1, 1, 1}, rng, infl);
      in = c;
      in_base = base;
    }

    const int d1 = cfg_.scaled(cfg_.d1_channels);
    for (int k = 0; k < 4; ++k) {
      const std::string n = "d1.head" + std::to_string(k + 1);
      const int c = cfg_.stage_channels(k);
      d1_[k].hidden = Conv3dLayer<T>(n + ".hidden", ConvGeometry{2 * c, d1}, rng, infl);
      d1_[k].hidden.in_segments = {c, c};
      d1_[k].bn = BatchNorm3d<T>(n + ".bn", d1);
      d1_[k].out = Conv3dLayer<T>(n + ".out", ConvGeometry{d1, 1}, rng, infl);
      d1_[k].out.reduce_out = false;
    }

    std::vector<int> segs{cfg_.stage_channels(3), cfg_.stage_channels(3)};
    for (int j = 0; j < 3; ++j) {
      const int k = 2 - j;
      const int c = cfg_.stage_channels(k);
      segs.push_back(c);
      segs.push_back(c);
      int cat = 0;
      for (int s : segs) cat += s;
      const int outc = cfg_.scaled(cfg_.d2_channels[j]);
      const std::string n = "d2.up" + std::to_string(j + 1);
      auto& st = d2_[j];
      st.pw = Conv3dLayer<T>(n + ".pw", ConvGeometry{cat, outc}, rng, infl);
      st.pw.in_segments = segs;
      st.bn_pw = BatchNorm3d<T>(n + ".pw_bn", outc);
      st.dw = Conv3dLayer<T>(n + ".dw", ConvGeometry{outc, outc, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, outc}, rng, infl);
      st.bn_dw = BatchNorm3d<T>(n + ".dw_bn", outc);
      segs = {outc};
    }
    d2_head_ = Conv3dLayer<T>("d2.head.out", ConvGeometry{segs[0], 1}, rng, infl);
    d2_head_.reduce_out = false;

    const int d3 = cfg_.scaled(cfg_.d3_channels);
    for (int k = 0; k < 4; ++k) {
      const int c = cfg_.stage_channels(k);
      const std::string n = "d3.proj" + std::to_string(k + 1);
      d3_proj_[k].conv = Conv3dLayer<T>(n + ".conv", ConvGeometry{2 * c, d3}, rng, infl);
      d3_proj_[k].conv.in_segments = {c, c};
      d3_proj_[k].bn = BatchNorm3d<T>(n + ".bn", d3);
    }
    for (int j = 0; j < kD3Merges; ++j) {
      const std::string n = "d3.node" + std::to_string(j + 1);
      auto& node = d3_nodes_[j];
      node.pw = Conv3dLayer<T>(n + ".pw", ConvGeometry{2 * d3, d3}, rng, infl);
      node.pw.in_segments = {d3, d3};
      node.bn_pw = BatchNorm3d<T>(n + ".pw_bn", d3);
      node.dw = Conv3dLayer<T>(n + ".dw", ConvGeometry{d3, d3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, d3}, rng, infl);
      node.bn_dw = BatchNorm3d<T>(n + ".dw_bn", d3);
    }
    d3_head_ = Conv3dLayer<T>("d3.head.out", ConvGeometry{d3, 1}, rng, infl);
    d3_head_.reduce_out = false;

    fusion_ = Conv3dLayer<T>("fusion.mixer", ConvGeometry{6, 1}, rng, infl);
    fusion_.weight.mutable_value().fill(static_cast<T>(1.0 / 6.0));
    fusion_.reduce_out = false;
    fusion_.reduce_in = false;
  }

  ModelConfig cfg_;
  bool training_ = true;
  Conv3dLayer<T> stem_;
  BatchNorm3d<T> stem_bn_;
  std::array<std::array<InvertedResidual<T>, 2>, 4> stages_;
  std::array<D1Head, 4> d1_;
  std::array<SepStage, 3> d2_;
  Conv3dLayer<T> d2_head_;
  std::array<Projection, 4> d3_proj_;
  std::array<SepStage, 3> d3_nodes_;
  Conv3dLayer<T> d3_head_;
  Conv3dLayer<T> fusion_;
  std::vector<Var<T>> last_d3_stages_;
};

}  // namespace tinyhd
