#pragma once

// On-disk formats and synthetic data.
//
// StoredTensor (.nst):
//   "NST1" | u64 rank | u64 dims[rank] | u32 dtype (1 = f32) | f32 payload
// all little-endian. Dataset layout:
//   <dir>/index.txt                 one clip id per line
//   <dir>/dataset.txt               generator settings
//   <dir>/<clip_id>/frames.nst      [3, T, H, W] in [0, 1]
//   <dir>/<clip_id>/gt.nst          [T, H, W], each frame sums to 1
//   <dir>/<clip_id>/fix.nst         [T, H, W], values in {0, 1}
//   <dir>/<clip_id>/teacher_k.nst   [T, H, W], k = 1..5 (D1 maps 1-4, fused)

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include "tinyhd/model.hpp"

namespace tinyhd {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "StoredTensor I/O assumes a little-endian host");

inline constexpr char kTensorMagic[4] = {'N', 'S', 'T', '1'};
inline constexpr std::uint32_t kDtypeF32 = 1;
inline constexpr int kCheckpointVersion = 1;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
inline void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw DataError("cannot rename '" + tmp.string() + "' to '" + path.string() +
                    "': " + ec.message());
  }
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U take(const std::string& in, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(U) > in.size()) throw DataError(what + ": truncated header");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace detail

template <typename T>
std::string encode_tensor(const Tensor<T>& t) {
  std::string out(kTensorMagic, 4);
  detail::put<std::uint64_t>(out, t.rank());
  for (auto d : t.shape()) detail::put<std::uint64_t>(out, d);
  detail::put<std::uint32_t>(out, kDtypeF32);
  out.reserve(out.size() + 4 * t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) detail::put<float>(out, static_cast<float>(t[i]));
  return out;
}

template <typename T = float>
Tensor<T> decode_tensor(const std::string& bytes, const std::string& what = "tensor") {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw DataError(what + ": bad magic (expected NST1)");
  }
  std::size_t pos = 4;
  const auto rank = detail::take<std::uint64_t>(bytes, pos, what);
  if (rank > 16) throw DataError(what + ": implausible rank " + std::to_string(rank));
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) {
    const auto d = detail::take<std::uint64_t>(bytes, pos, what);
    if (d == 0) throw DataError(what + ": zero-sized dimension");
    shape.push_back(static_cast<std::size_t>(d));
  }
  const auto dtype = detail::take<std::uint32_t>(bytes, pos, what);
  if (dtype != kDtypeF32) throw DataError(what + ": unsupported dtype code " + std::to_string(dtype));
  const std::size_t n = shape_numel(shape);
  if (bytes.size() - pos != 4 * n) {
    throw DataError(what + ": payload is " + std::to_string(bytes.size() - pos) +
                    " bytes, expected " + std::to_string(4 * n));
  }
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < n; ++i) {
    float v;
    std::memcpy(&v, bytes.data() + pos + 4 * i, 4);
    t[i] = static_cast<T>(v);
  }
  return t;
}

template <typename T>
void save_tensor(const fs::path& path, const Tensor<T>& t) {
  atomic_write(path, encode_tensor(t));
}

template <typename T = float>
Tensor<T> load_tensor(const fs::path& path) {
  return decode_tensor<T>(read_file(path), path.string());
}

// ---- synthetic scenes ---------------------------------------------------------

struct SyntheticSceneSpec {
  std::uint64_t seed = 0;
  int min_blobs = 1;
  int max_blobs = 3;
  double sigma_min = 2.5;  // pixels at the configured size
  double sigma_max = 5.0;
  double speed_max = 1.5;  // pixels per frame
  double texture_amplitude = 0.15;
  int clip_length = 16;
  int height = 48;
  int width = 64;
  int fixations_per_frame = 12;
  std::array<double, 5> teacher_blur{8, 4, 2, 1, 1};  // pixels at width 64

  void validate() const {
    if (min_blobs < 1 || max_blobs > 3 || min_blobs > max_blobs) {
      throw ParameterError("blob count range must lie within [1, 3]");
    }
    if (!(sigma_min > 0) || sigma_max < sigma_min) throw ParameterError("blob sigma range invalid");
    if (speed_max < 0) throw ParameterError("speed_max must be >= 0");
    if (texture_amplitude < 0 || texture_amplitude > 0.5) {
      throw ParameterError("texture_amplitude must lie in [0, 0.5]");
    }
    if (clip_length < 1 || height < 4 || width < 4) throw ParameterError("clip geometry invalid");
    if (fixations_per_frame < 1) throw ParameterError("fixations_per_frame must be >= 1");
    for (double b : teacher_blur) {
      if (b < 0) throw ParameterError("teacher blur must be >= 0");
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "seed=" << seed << " blobs=" << min_blobs << ',' << max_blobs << " sigma=" << sigma_min
       << ',' << sigma_max << " speed_max=" << speed_max << " texture=" << texture_amplitude
       << " clip_length=" << clip_length << " height=" << height << " width=" << width
       << " fixations=" << fixations_per_frame;
    return os.str();
  }
};

/// One synthetic clip with its ground truth and synthetic teacher maps.
struct SyntheticClip {
  Tensor<float> frames;                 // [3, T, H, W]
  Tensor<float> gt;                     // [T, H, W]
  Tensor<float> fixations;              // [T, H, W]
  std::array<Tensor<float>, 5> teacher;  // [T, H, W] each
};

struct Blob {
  double x, y, vx, vy, sigma, weight;
  std::array<double, 3> color;
};

/// Places `count` seeded samples of `density` ([H, W], sums to 1) as 1s.
inline void sample_fixations(const float* density, std::size_t H, std::size_t W, int count,
                             std::mt19937_64& rng, float* out) {
  std::vector<double> cdf(H * W);
  double acc = 0.0;
  for (std::size_t i = 0; i < H * W; ++i) {
    acc += density[i];
    cdf[i] = acc;
  }
  std::uniform_real_distribution<double> u(0.0, acc);
  std::fill_n(out, H * W, 0.0f);
  for (int k = 0; k < count; ++k) {
    const double r = u(rng);
    auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
    std::size_t idx = static_cast<std::size_t>(it - cdf.begin());
    if (idx >= H * W) {
      idx = H * W - 1;
      while (idx > 0 && density[idx] == 0.0f) --idx;
    }
    out[idx] = 1.0f;
  }
}

/// Separable Gaussian blur of an [H, W] plane with clamped borders.
inline std::vector<double> gaussian_blur(const std::vector<double>& in, std::size_t H, std::size_t W,
                                         double sigma) {
  if (sigma <= 0) return in;
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double ks = 0;
  for (int i = -radius; i <= radius; ++i) ks += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  std::vector<double> tmp(H * W, 0.0), out(H * W, 0.0);
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      double s = 0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * in[r * w + std::clamp(c + i, 0L, w - 1)];
      tmp[r * w + c] = s;
    }
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      double s = 0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp[std::clamp(r + i, 0L, h - 1) * w + c];
      out[r * w + c] = s;
    }
  return out;
}

inline SyntheticClip generate_synthetic(const SyntheticSceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t T = spec.clip_length, H = spec.height, W = spec.width;
  const double h = static_cast<double>(H), w = static_cast<double>(W);
  const double scale = w / 64.0;

  // Background: a few low-frequency gratings per channel.
  struct Grating {
    double fx, fy, phase, amp;
  };
  std::array<std::vector<Grating>, 3> gratings;
  for (auto& g : gratings)
    for (int k = 0; k < 3; ++k)
      g.push_back({(0.5 + 2.5 * u01(rng)) * 2 * M_PI / w, (0.5 + 2.5 * u01(rng)) * 2 * M_PI / h,
                   2 * M_PI * u01(rng), spec.texture_amplitude * (0.3 + 0.7 * u01(rng)) / 3});
  const double base = 0.25 + 0.1 * u01(rng);

  std::uniform_int_distribution<int> nblobs(spec.min_blobs, spec.max_blobs);
  std::vector<Blob> blobs(static_cast<std::size_t>(nblobs(rng)));
  for (auto& b : blobs) {
    b.sigma = (spec.sigma_min + (spec.sigma_max - spec.sigma_min) * u01(rng)) * scale;
    b.x = b.sigma + (w - 1 - 2 * b.sigma) * u01(rng);
    b.y = b.sigma + (h - 1 - 2 * b.sigma) * u01(rng);
    const double ang = 2 * M_PI * u01(rng), sp = spec.speed_max * scale * u01(rng);
    b.vx = sp * std::cos(ang);
    b.vy = sp * std::sin(ang);
    b.weight = 0.5 + u01(rng);
    b.color = {0.6 + 0.4 * u01(rng), 0.6 + 0.4 * u01(rng), 0.6 + 0.4 * u01(rng)};
  }

  SyntheticClip out{Tensor<float>({3, T, H, W}), Tensor<float>({T, H, W}), Tensor<float>({T, H, W}), {}};
  for (auto& t : out.teacher) t = Tensor<float>({T, H, W});
  std::vector<double> density(H * W);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(density.begin(), density.end(), 0.0);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        std::array<double, 3> px;
        for (int ch = 0; ch < 3; ++ch) {
          double v = base;
          for (const auto& g : gratings[ch]) v += g.amp * std::sin(g.fx * c + g.fy * r + g.phase);
          px[ch] = v;
        }
        double d = 0;
        for (const auto& b : blobs) {
          const double dx = c - b.x, dy = r - b.y;
          const double g = std::exp(-0.5 * (dx * dx + dy * dy) / (b.sigma * b.sigma));
          d += b.weight * g;
          for (int ch = 0; ch < 3; ++ch) px[ch] += g * (b.color[ch] - px[ch]);
        }
        density[r * W + c] = d;
        for (int ch = 0; ch < 3; ++ch) {
          out.frames[((ch * T + t) * H + r) * W + c] = static_cast<float>(std::clamp(px[ch], 0.0, 1.0));
        }
      }
    double total = 0;
    for (double d : density) total += d;
    float* gt = out.gt.ptr() + t * H * W;
    for (std::size_t i = 0; i < H * W; ++i) gt[i] = static_cast<float>(density[i] / total);
    sample_fixations(gt, H, W, spec.fixations_per_frame, rng, out.fixations.ptr() + t * H * W);
    for (std::size_t k = 0; k < 5; ++k) {
      const auto blurred = gaussian_blur(density, H, W, spec.teacher_blur[k] * scale);
      double s = 0;
      for (double v : blurred) s += v;
      float* tm = out.teacher[k].ptr() + t * H * W;
      for (std::size_t i = 0; i < H * W; ++i) tm[i] = static_cast<float>(blurred[i] / s);
    }
    // Reflective motion keeps centers at least one sigma inside the frame.
    for (auto& b : blobs) {
      b.x += b.vx;
      b.y += b.vy;
      const double lo_x = b.sigma, hi_x = w - 1 - b.sigma, lo_y = b.sigma, hi_y = h - 1 - b.sigma;
      if (b.x < lo_x) b.x = 2 * lo_x - b.x, b.vx = -b.vx;
      if (b.x > hi_x) b.x = 2 * hi_x - b.x, b.vx = -b.vx;
      if (b.y < lo_y) b.y = 2 * lo_y - b.y, b.vy = -b.vy;
      if (b.y > hi_y) b.y = 2 * hi_y - b.y, b.vy = -b.vy;
    }
  }
  return out;
}

/// Per-clip seed derived from a dataset seed (splitmix64 step).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::string clip_id(std::size_t index) {
  std::ostringstream os;
  os << "clip_" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

/// Writes `count` clips generated from `spec` (per-clip seeds derived from spec.seed).
inline std::vector<std::string> write_synthetic_dataset(const fs::path& dir, const SyntheticSceneSpec& spec,
                                                        std::size_t count) {
  spec.validate();
  if (count == 0) throw ParameterError("dataset must contain at least one clip");
  std::vector<std::string> ids;
  std::string index;
  for (std::size_t i = 0; i < count; ++i) {
    SyntheticSceneSpec s = spec;
    s.seed = derive_seed(spec.seed, i);
    const SyntheticClip clip = generate_synthetic(s);
    const std::string id = clip_id(i);
    const fs::path cd = dir / id;
    save_tensor(cd / "frames.nst", clip.frames);
    save_tensor(cd / "gt.nst", clip.gt);
    save_tensor(cd / "fix.nst", clip.fixations);
    for (std::size_t k = 0; k < 5; ++k) {
      save_tensor(cd / ("teacher_" + std::to_string(k + 1) + ".nst"), clip.teacher[k]);
    }
    ids.push_back(id);
    index += id + "\n";
  }
  atomic_write(dir / "dataset.txt", spec.serialize() + " count=" + std::to_string(count) + "\n");
  atomic_write(dir / "index.txt", index);
  return ids;
}

inline std::vector<std::string> read_index(const fs::path& dir) {
  const fs::path p = dir / "index.txt";
  if (!fs::exists(p)) throw DataError("dataset '" + dir.string() + "' has no index.txt");
  std::istringstream is(read_file(p));
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) ids.push_back(line);
  }
  if (ids.empty()) throw DataError("dataset '" + dir.string() + "' is empty");
  return ids;
}

/// A clip held in memory. Maps are [T, H, W].
struct ClipRecord {
  std::string id;
  Tensor<float> frames;
  Tensor<float> gt;
  Tensor<float> fixations;
};

inline ClipRecord load_clip(const fs::path& dir, const std::string& id) {
  const fs::path cd = dir / id;
  ClipRecord r{id, load_tensor(cd / "frames.nst"), load_tensor(cd / "gt.nst"), load_tensor(cd / "fix.nst")};
  if (r.frames.rank() != 4 || r.frames.dim(0) != 3) {
    throw DataError("clip '" + id + "' frames must be [3,T,H,W], got " + shape_str(r.frames.shape()));
  }
  const Shape maps{r.frames.dim(1), r.frames.dim(2), r.frames.dim(3)};
  if (r.gt.shape() != maps || r.fixations.shape() != maps) {
    throw DataError("clip '" + id + "' ground truth does not match frames " + shape_str(maps));
  }
  return r;
}

struct Dataset {
  fs::path dir;
  std::vector<ClipRecord> clips;

  static Dataset load(const fs::path& dir) {
    Dataset d{dir, {}};
    for (const auto& id : read_index(dir)) d.clips.push_back(load_clip(dir, id));
    return d;
  }
  std::size_t size() const { return clips.size(); }
};

// ---- checkpoints --------------------------------------------------------------

/// Parameters and normalization buffers of a model in visiting order.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> checkpoint_entries(TinyHD<T>& model) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  model.visit(Overloaded{
      [&](Conv3dLayer<T>& c) {
        out.push_back({c.name + ".weight", &c.weight.mutable_value()});
        if (c.bias.defined()) out.push_back({c.name + ".bias", &c.bias.mutable_value()});
      },
      [&](BatchNorm3d<T>& b) {
        out.push_back({b.name + ".gamma", &b.gamma.mutable_value()});
        out.push_back({b.name + ".beta", &b.beta.mutable_value()});
        out.push_back({b.name + ".running_mean", &b.running_mean});
        out.push_back({b.name + ".running_var", &b.running_var});
      }});
  return out;
}

/// Writes `<path>` (text manifest) and `<path>.bin` (raw f32 blob).
template <typename T>
void save_checkpoint(const fs::path& path, TinyHD<T>& model) {
  std::string blob;
  std::ostringstream manifest;
  const fs::path blob_path = fs::path(path.string() + ".bin");
  manifest << "tinyhd-checkpoint " << kCheckpointVersion << '\n';
  manifest << "config " << model.config().serialize() << '\n';
  manifest << "blob " << blob_path.filename().string() << '\n';
  for (const auto& [name, t] : checkpoint_entries(model)) {
    std::string dims;
    for (std::size_t i = 0; i < t->rank(); ++i) dims += (i ? "x" : "") + std::to_string(t->dim(i));
    manifest << "param " << name << ' ' << dims << ' ' << blob.size() << '\n';
    for (std::size_t i = 0; i < t->numel(); ++i) detail::put<float>(blob, static_cast<float>((*t)[i]));
  }
  atomic_write(blob_path, blob);
  atomic_write(path, manifest.str());
}

struct CheckpointManifest {
  int version = 0;
  ModelConfig config;
  std::string blob;
  struct Record {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Record> records;
};

inline CheckpointManifest read_manifest(const fs::path& path) {
  std::istringstream is(read_file(path));
  CheckpointManifest m;
  std::string line;
  bool header = false, has_config = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "tinyhd-checkpoint") {
      ls >> m.version;
      if (m.version != kCheckpointVersion) {
        throw DataError("checkpoint '" + path.string() + "' has version " + std::to_string(m.version) +
                        ", expected " + std::to_string(kCheckpointVersion));
      }
      header = true;
    } else if (!header) {
      throw DataError("'" + path.string() + "' is not a checkpoint manifest");
    } else if (key == "config") {
      m.config = ModelConfig::deserialize(line.substr(7));
      has_config = true;
    } else if (key == "blob") {
      ls >> m.blob;
    } else if (key == "param") {
      CheckpointManifest::Record r;
      std::string dims;
      ls >> r.name >> dims >> r.offset;
      if (!ls) throw DataError("malformed record '" + line + "' in " + path.string());
      std::istringstream ds(dims);
      std::string part;
      while (std::getline(ds, part, 'x')) r.shape.push_back(std::stoul(part));
      m.records.push_back(std::move(r));
    } else {
      throw DataError("unknown manifest key '" + key + "' in " + path.string());
    }
  }
  if (!header || !has_config || m.blob.empty()) {
    throw DataError("checkpoint manifest '" + path.string() + "' is incomplete");
  }
  return m;
}

/// Loads weights into an existing model; every name and shape must match.
template <typename T>
void load_checkpoint_into(const fs::path& path, TinyHD<T>& model) {
  const CheckpointManifest m = read_manifest(path);
  const std::string blob = read_file(path.parent_path() / m.blob);
  auto entries = checkpoint_entries(model);
  for (std::size_t i = 0; i < std::max(entries.size(), m.records.size()); ++i) {
    if (i >= entries.size() || i >= m.records.size()) {
      const std::string name = i < entries.size() ? entries[i].first : m.records[i].name;
      throw ShapeError("checkpoint and model disagree on parameter count at '" + name + "'");
    }
    const auto& rec = m.records[i];
    Tensor<T>& t = *entries[i].second;
    if (rec.name != entries[i].first || rec.shape != t.shape()) {
      throw ShapeError("checkpoint parameter '" + rec.name + "' " + shape_str(rec.shape) +
                       " does not match model parameter '" + entries[i].first + "' " +
                       shape_str(t.shape()));
    }
    if (rec.offset + 4 * t.numel() > blob.size()) {
      throw DataError("checkpoint blob truncated at parameter '" + rec.name + "'");
    }
    for (std::size_t k = 0; k < t.numel(); ++k) {
      float v;
      std::memcpy(&v, blob.data() + rec.offset + 4 * k, 4);
      t[k] = static_cast<T>(v);
    }
  }
}

/// Builds a model from the manifest's config echo and loads its weights.
template <typename T = float>
TinyHD<T> load_checkpoint(const fs::path& path) {
  TinyHD<T> model(read_manifest(path).config, 0);
  load_checkpoint_into(path, model);
  return model;
}

// ---- prefetching ----------------------------------------------------------------

/// Bounded blocking FIFO. pop() returns nullopt once closed and drained.
template <typename Item>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(std::max<std::size_t>(1, capacity)) {}

  void push(Item item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
  }

  std::optional<Item> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    Item item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<Item> items_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
};

/// Runs `produce(k)` for k = 0..count-1 on a worker thread, in order, and
/// hands results out through a bounded queue.
template <typename Item>
class Prefetcher {
 public:
  template <typename Produce>
  Prefetcher(std::size_t count, std::size_t depth, Produce produce) : queue_(depth) {
    worker_ = std::thread([this, count, produce = std::move(produce)]() mutable {
      try {
        for (std::size_t k = 0; k < count; ++k) queue_.push(produce(k));
      } catch (...) {
        std::lock_guard lock(error_mu_);
        error_ = std::current_exception();
      }
      queue_.close();
    });
  }
  ~Prefetcher() {
    queue_.close();
    if (worker_.joinable()) worker_.join();
  }
  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  std::optional<Item> next() {
    auto item = queue_.pop();
    if (!item) {
      std::lock_guard lock(error_mu_);
      if (error_) std::rethrow_exception(error_);
    }
    return item;
  }

 private:
  BoundedQueue<Item> queue_;
  std::thread worker_;
  std::mutex error_mu_;
  std::exception_ptr error_;
};

}  // namespace tinyhd
