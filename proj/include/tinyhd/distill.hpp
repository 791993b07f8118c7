#pragma once

// Losses, teachers, the training loop, channel reduction and the
// teacher-assistant pipeline.

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tinyhd/dataio.hpp"
#include "tinyhd/metrics.hpp"
#include "tinyhd/model.hpp"
#include "tinyhd/optim.hpp"

namespace tinyhd {

inline constexpr double kKlFloor = 1e-7;

namespace detail {
// Elements per distribution: the trailing [H, W] plane, or everything for rank < 2.
inline std::size_t kl_slice(const Shape& s) {
  return s.size() >= 2 ? s[s.size() - 1] * s[s.size() - 2] : shape_numel(s);
}
}  // namespace detail

/// sum_i y_i log(y_i / max(x_i, eps)) per slice, averaged over slices.
/// Accumulated in double; terms with y_i = 0 contribute nothing.
template <typename T>
Var<T> kl_divergence(const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "kl_divergence");
  const std::size_t slice = detail::kl_slice(target.shape());
  const std::size_t slices = target.numel() / slice;
  const T* X = pred.value().ptr();
  const T* Y = target.ptr();
  double total = 0.0;
  for (std::size_t s = 0; s < slices; ++s) {
    double acc = 0.0;
    for (std::size_t i = s * slice; i < (s + 1) * slice; ++i) {
      if (Y[i] > 0) {
        const double x = std::max(static_cast<double>(X[i]), kKlFloor);
        acc += Y[i] * std::log(static_cast<double>(Y[i]) / x);
      }
    }
    total += acc;
  }
  const double inv = 1.0 / static_cast<double>(slices);
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(total * inv)), "kl_divergence", {pred},
                        [target, inv](Node<T>& self) {
                          auto* gx = detail::parent_grad(self, 0);
                          if (!gx) return;
                          const double g = static_cast<double>(self.grad->item()) * inv;
                          const T* X = self.parents[0]->value.ptr();
                          for (std::size_t i = 0; i < target.numel(); ++i) {
                            const double y = target[i];
                            if (y > 0 && static_cast<double>(X[i]) > kKlFloor) {
                              (*gx)[i] += static_cast<T>(-g * y / static_cast<double>(X[i]));
                            }
                          }
                        });
}

/// Teacher maps for the student slots D1-1..D1-4 and fused; [N, T', H, W].
template <typename T>
struct TeacherOutputs {
  std::vector<Tensor<T>> maps;
};

inline const std::array<std::string, 6>& loss_term_names() {
  static const std::array<std::string, 6> names{"kl_d1_1", "kl_d1_2", "kl_d1_3",
                                                "kl_d1_4", "kl_fused_teacher", "kl_fused_gt"};
  return names;
}

template <typename T>
struct LossTerms {
  Var<T> total;
  std::vector<std::string> names;
  std::vector<Var<T>> terms;

  double value() const { return static_cast<double>(total.value().item()); }
  double term(std::size_t i) const { return static_cast<double>(terms[i].value().item()); }
  std::size_t size() const { return terms.size(); }

  void add(std::string name, Var<T> v) {
    total = total.defined() ? add_vars(total, v) : v;
    names.push_back(std::move(name));
    terms.push_back(std::move(v));
  }

 private:
  static Var<T> add_vars(const Var<T>& a, const Var<T>& b) { return tinyhd::add(a, b); }
};

namespace detail {
template <typename T>
void check_teacher(const TeacherOutputs<T>* teacher) {
  if (!teacher) throw ConfigError("distillation needs teacher maps");
  if (teacher->maps.size() != 5) {
    throw ConfigError("teacher provides " + std::to_string(teacher->maps.size()) +
                      " maps, expected 5 (D1-1..D1-4, fused)");
  }
}

template <typename T>
void add_teacher_terms(LossTerms<T>& out, const SaliencyMapSet<T>& s, const TeacherOutputs<T>& t,
                       const std::string& prefix) {
  const auto& names = loss_term_names();
  for (int k = 0; k < 4; ++k) out.add(prefix + names[k], kl_divergence(s.intermediate[k], t.maps[k]));
  out.add(prefix + names[4], kl_divergence(s.fused, t.maps[4]));
}
}  // namespace detail

/// Five student-teacher terms plus, when `gt` is given, the fused-vs-gt term.
template <typename T>
LossTerms<T> distillation_loss(const SaliencyMapSet<T>& student, const TeacherOutputs<T>* teacher,
                               const Tensor<T>* gt) {
  detail::check_teacher(teacher);
  LossTerms<T> out;
  detail::add_teacher_terms(out, student, *teacher, "");
  if (gt) out.add(loss_term_names()[5], kl_divergence(student.fused, *gt));
  return out;
}

/// Ground-truth term only (no teacher).
template <typename T>
LossTerms<T> supervised_loss(const SaliencyMapSet<T>& student, const Tensor<T>& gt) {
  LossTerms<T> out;
  out.add(loss_term_names()[5], kl_divergence(student.fused, gt));
  return out;
}

/// Labeled-batch loss plus five teacher terms on the auxiliary batch.
template <typename T>
LossTerms<T> combined_loss(const SaliencyMapSet<T>& student_v, const TeacherOutputs<T>* teacher_v,
                           const Tensor<T>& gt_v, const SaliencyMapSet<T>* student_w,
                           const TeacherOutputs<T>* teacher_w) {
  LossTerms<T> out = distillation_loss(student_v, teacher_v, &gt_v);
  if (student_w) {
    if (!teacher_w) throw ConfigError("auxiliary batch given without teacher maps");
    detail::check_teacher(teacher_w);
    detail::add_teacher_terms(out, *student_w, *teacher_w, "aux_");
  }
  return out;
}

// ---- teachers -------------------------------------------------------------------

/// Five per-clip maps, each [T', H, W].
using ClipTeacherMaps = std::array<Tensor<float>, 5>;

class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual ClipTeacherMaps predict(const ClipRecord& clip, const fs::path& dataset_dir) = 0;
  virtual std::string describe() const = 0;
};

/// Renormalizes every [H, W] slice of `t` in place.
inline void normalize_slices(Tensor<float>& t) {
  const std::size_t slice = detail::kl_slice(t.shape());
  for (std::size_t s = 0; s < t.numel() / slice; ++s) {
    double z = 0;
    for (std::size_t i = s * slice; i < (s + 1) * slice; ++i) z += t[i];
    if (!(z > 0)) throw DataError("map slice has no mass");
    for (std::size_t i = s * slice; i < (s + 1) * slice; ++i) t[i] = static_cast<float>(t[i] / z);
  }
}

/// Reads teacher_k.nst files from `<root>/<clip_id>/`; `root` defaults to the
/// clip's own dataset directory.
class FileBackedTeacher : public Teacher {
 public:
  explicit FileBackedTeacher(fs::path root = {}) : root_(std::move(root)) {}

  ClipTeacherMaps predict(const ClipRecord& clip, const fs::path& dataset_dir) override {
    const fs::path dir = (root_.empty() ? dataset_dir : root_) / clip.id;
    const std::string key = dir.string();
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    ClipTeacherMaps maps;
    for (int k = 0; k < 5; ++k) {
      const fs::path p = dir / ("teacher_" + std::to_string(k + 1) + ".nst");
      if (!fs::exists(p)) {
        throw DataError("teacher map missing for clip '" + clip.id + "' slot " + std::to_string(k + 1) +
                        " (" + p.string() + ")");
      }
      maps[k] = load_tensor(p);
      if (maps[k].rank() != 3) {
        throw DataError("teacher map for clip '" + clip.id + "' slot " + std::to_string(k + 1) +
                        " must be [T,H,W], got " + shape_str(maps[k].shape()));
      }
      normalize_slices(maps[k]);
    }
    return cache_.emplace(key, maps).first->second;
  }

  std::string describe() const override { return "file:" + root_.string(); }

 private:
  fs::path root_;
  std::mutex mu_;
  std::map<std::string, ClipTeacherMaps> cache_;
};

/// A frozen model serving its D1 maps and fused output. Outputs are cached
/// per clip id; the model runs in eval mode and is never updated.
class FrozenHierarchicalTeacher : public Teacher {
 public:
  explicit FrozenHierarchicalTeacher(const TinyHD<float>& model, std::string label = "frozen")
      : model_(model.clone()), label_(std::move(label)) {
    model_.freeze();
    model_.set_training(false);
  }

  ClipTeacherMaps predict(const ClipRecord& clip, const fs::path& dataset_dir) override {
    const std::string key = (dataset_dir / clip.id).string();
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    NoGradGuard no_grad;
    Shape s{1};
    for (auto d : clip.frames.shape()) s.push_back(d);
    const auto out = model_.forward(clip.frames.reshaped(s));
    ClipTeacherMaps maps;
    auto strip = [](const Var<float>& v) {
      const Shape& vs = v.shape();
      return v.value().reshaped({vs[1], vs[2], vs[3]});
    };
    for (int k = 0; k < 4; ++k) maps[k] = strip(out.intermediate[k]);
    maps[4] = strip(out.fused);
    return cache_.emplace(key, maps).first->second;
  }

  std::string describe() const override { return label_; }
  const TinyHD<float>& model() const { return model_; }

 private:
  TinyHD<float> model_;
  std::string label_;
  std::mutex mu_;
  std::map<std::string, ClipTeacherMaps> cache_;
};

// ---- batches ----------------------------------------------------------------------

/// Selects the frames a prediction of `frames` temporal slices refers to:
/// all of them, or the last one.
inline Tensor<float> align_frames(const Tensor<float>& maps, std::size_t frames) {
  if (maps.rank() != 3) throw ShapeError("align_frames expects [T,H,W], got " + shape_str(maps.shape()));
  const std::size_t F = maps.dim(0), plane = maps.dim(1) * maps.dim(2);
  if (F == frames) return maps;
  if (frames != 1) {
    throw ShapeError("cannot align " + std::to_string(F) + " frames to " + std::to_string(frames));
  }
  Tensor<float> out({1, maps.dim(1), maps.dim(2)});
  std::copy_n(maps.ptr() + (F - 1) * plane, plane, out.ptr());
  return out;
}

/// Reverses the last axis of each item k of a batch tensor where flip[k].
template <typename T>
void flip_items(Tensor<T>& t, const std::vector<bool>& flip) {
  const std::size_t N = t.dim(0), per = t.numel() / N, W = t.shape().back();
  for (std::size_t n = 0; n < N; ++n) {
    if (!flip[n]) continue;
    for (std::size_t r = 0; r < per / W; ++r) {
      T* row = t.ptr() + n * per + r * W;
      std::reverse(row, row + W);
    }
  }
}

template <typename T>
struct Batch {
  std::vector<std::string> ids;
  Tensor<T> clips;  // [N, 3, T, H, W]
  Tensor<T> gt;     // [N, T', H, W]
  std::optional<TeacherOutputs<T>> teacher;
};

/// Stacks clips, ground truth and (when `teacher` is set) teacher maps,
/// applying the same horizontal flip to all three.
template <typename T>
Batch<T> make_batch(const std::vector<const ClipRecord*>& items, const std::vector<bool>& flip,
                    Teacher* teacher, const fs::path& dataset_dir, const ModelConfig& cfg) {
  if (items.empty()) throw ParameterError("empty batch");
  const std::size_t N = items.size(), Tc = cfg.clip_length, H = cfg.height, W = cfg.width;
  const std::size_t Tp = static_cast<std::size_t>(cfg.output_frames());
  Batch<T> b;
  b.clips = Tensor<T>({N, 3, Tc, H, W});
  b.gt = Tensor<T>({N, Tp, H, W});
  const Shape clip_shape{3, Tc, H, W}, map_shape{Tc, H, W};
  std::vector<Tensor<T>> tmaps;
  if (teacher) tmaps.assign(5, Tensor<T>({N, Tp, H, W}));
  const std::size_t clip_sz = shape_numel(clip_shape), map_sz = Tp * H * W;
  for (std::size_t n = 0; n < N; ++n) {
    const ClipRecord& c = *items[n];
    if (c.frames.shape() != clip_shape) {
      throw DataError("clip '" + c.id + "' has shape " + shape_str(c.frames.shape()) + ", model expects " +
                      shape_str(clip_shape));
    }
    b.ids.push_back(c.id);
    for (std::size_t i = 0; i < clip_sz; ++i) b.clips[n * clip_sz + i] = static_cast<T>(c.frames[i]);
    const Tensor<float> g = align_frames(c.gt, Tp);
    for (std::size_t i = 0; i < map_sz; ++i) b.gt[n * map_sz + i] = static_cast<T>(g[i]);
    if (teacher) {
      const ClipTeacherMaps maps = teacher->predict(c, dataset_dir);
      for (int k = 0; k < 5; ++k) {
        if (maps[k].rank() != 3 || maps[k].dim(1) != H || maps[k].dim(2) != W) {
          throw DataError("teacher map for clip '" + c.id + "' slot " + std::to_string(k + 1) + " has shape " +
                          shape_str(maps[k].shape()));
        }
        const Tensor<float> a = align_frames(maps[k], Tp);
        for (std::size_t i = 0; i < map_sz; ++i) tmaps[k][n * map_sz + i] = static_cast<T>(a[i]);
      }
    }
  }
  flip_items(b.clips, flip);
  flip_items(b.gt, flip);
  if (teacher) {
    for (auto& m : tmaps) flip_items(m, flip);
    b.teacher = TeacherOutputs<T>{std::move(tmaps)};
  }
  return b;
}

// ---- schedule and training ----------------------------------------------------------

struct Schedule {
  int epochs = 20;
  std::vector<int> milestones{10, 15, 18};
  int batch_size = 4;
  double lr = 0.01;
  double momentum = 0.9;
  double gamma = 0.1;
  double flip_prob = 0.5;

  /// 200 epochs, batch 12, decay at 100/150/180.
  static Schedule paper() { return {200, {100, 150, 180}, 12, 0.01, 0.9, 0.1, 0.5}; }

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr >= 0) || !(momentum >= 0) || !(gamma > 0)) throw ConfigError("lr/momentum/gamma out of range");
    if (flip_prob < 0 || flip_prob > 1) throw ConfigError("flip_prob must lie in [0, 1]");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] < 1 || (i > 0 && milestones[i] <= milestones[i - 1])) {
        throw ConfigError("milestones must be positive and strictly increasing");
      }
    }
  }

  /// Learning rate for a 0-based epoch index.
  double lr_at(int epoch) const {
    double r = lr;
    for (int m : milestones) {
      if (epoch >= m) r *= gamma;
    }
    return r;
  }

  /// Same schedule with milestones rescaled proportionally to `n` epochs.
  Schedule scaled_to(int n) const {
    Schedule s = *this;
    s.epochs = n;
    s.milestones.clear();
    for (int m : milestones) {
      const int v = epochs > 0 ? static_cast<int>(std::lround(static_cast<double>(m) * n / epochs)) : 0;
      if (v >= 1 && v < n && (s.milestones.empty() || v > s.milestones.back())) s.milestones.push_back(v);
    }
    return s;
  }
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double total = 0;
  std::array<double, 6> terms{};  // loss_term_names(); auxiliary terms fold into their slot
};

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << std::setprecision(10) << "epoch,lr,total";
  for (const auto& n : loss_term_names()) os << ',' << n;
  os << '\n';
  for (const auto& r : history) {
    os << r.epoch << ',' << r.lr << ',' << r.total;
    for (double t : r.terms) os << ',' << t;
    os << '\n';
  }
  return os.str();
}

enum class Objective { supervised, distill };

struct TrainOptions {
  Schedule schedule;
  std::uint64_t seed = 0;
  Objective objective = Objective::distill;
  Teacher* teacher = nullptr;   // required for distill and for aux
  const Dataset* aux = nullptr;  // unlabeled clips, teacher terms only
  fs::path dump_dir;            // where a divergence dumps its state
  std::size_t prefetch_depth = 2;
  std::function<void(const EpochRecord&)> on_epoch;
};

namespace detail {

inline void fold_terms(const LossTerms<float>& l, std::array<double, 6>& acc) {
  const auto& names = loss_term_names();
  for (std::size_t i = 0; i < l.size(); ++i) {
    std::string n = l.names[i];
    if (n.rfind("aux_", 0) == 0) n = n.substr(4);
    for (std::size_t k = 0; k < 6; ++k) {
      if (names[k] == n) acc[k] += l.term(i);
    }
  }
}

struct StepPlan {
  std::vector<std::size_t> v, w;
  std::vector<bool> v_flip, w_flip;
};

}  // namespace detail

/// Momentum-SGD over the objective; returns one record per epoch.
inline std::vector<EpochRecord> train(TinyHD<float>& model, const Dataset& data, const TrainOptions& opt) {
  const Schedule& sch = opt.schedule;
  sch.validate();
  if (data.size() == 0) throw DataError("training set is empty");
  if ((opt.objective == Objective::distill || opt.aux) && !opt.teacher) {
    throw ConfigError(opt.aux ? "auxiliary data needs a teacher" : "distillation needs a teacher");
  }
  if (opt.aux && opt.aux->size() == 0) throw DataError("auxiliary set is empty");
  std::vector<EpochRecord> history;
  if (sch.epochs == 0) return history;

  // All randomness is drawn up front, in order, from one generator.
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<std::vector<detail::StepPlan>> plan(sch.epochs);
  std::vector<std::size_t> aux_order;
  std::size_t aux_pos = 0;
  for (int e = 0; e < sch.epochs; ++e) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += sch.batch_size) {
      detail::StepPlan p;
      for (std::size_t k = s; k < std::min(order.size(), s + sch.batch_size); ++k) {
        p.v.push_back(order[k]);
        p.v_flip.push_back(coin(rng) < sch.flip_prob);
      }
      if (opt.aux) {
        for (std::size_t k = 0; k < p.v.size(); ++k) {
          if (aux_pos == aux_order.size()) {
            aux_order.resize(opt.aux->size());
            std::iota(aux_order.begin(), aux_order.end(), std::size_t{0});
            std::shuffle(aux_order.begin(), aux_order.end(), rng);
            aux_pos = 0;
          }
          p.w.push_back(aux_order[aux_pos++]);
          p.w_flip.push_back(coin(rng) < sch.flip_prob);
        }
      }
      plan[e].push_back(std::move(p));
    }
  }

  const ModelConfig& cfg = model.config();
  Teacher* labeled_teacher = opt.objective == Objective::distill ? opt.teacher : nullptr;
  struct Work {
    Batch<float> v;
    std::optional<Batch<float>> w;
  };
  std::vector<const detail::StepPlan*> steps;
  for (const auto& ep : plan)
    for (const auto& p : ep) steps.push_back(&p);
  Prefetcher<Work> prefetch(steps.size(), opt.prefetch_depth, [&](std::size_t k) {
    const auto& p = *steps[k];
    std::vector<const ClipRecord*> v, w;
    for (auto i : p.v) v.push_back(&data.clips[i]);
    Work work{make_batch<float>(v, p.v_flip, labeled_teacher, data.dir, cfg), std::nullopt};
    if (opt.aux) {
      for (auto i : p.w) w.push_back(&opt.aux->clips[i]);
      work.w = make_batch<float>(w, p.w_flip, opt.teacher, opt.aux->dir, cfg);
    }
    return work;
  });

  Sgd<float> sgd(model.parameters(), sch.momentum);
  model.set_training(true);
  for (int e = 0; e < sch.epochs; ++e) {
    const double lr = sch.lr_at(e);
    EpochRecord rec{e, lr, 0.0, {}};
    const std::size_t n_steps = plan[e].size();
    for (std::size_t s = 0; s < n_steps; ++s) {
      auto work = prefetch.next();
      if (!work) throw ContractError("prefetcher ended early");
      const auto sv = model.forward(Var<float>(std::move(work->v.clips)));
      std::optional<SaliencyMapSet<float>> sw;
      if (work->w) sw = model.forward(Var<float>(std::move(work->w->clips)));
      LossTerms<float> loss =
          opt.objective == Objective::distill
              ? combined_loss(sv, &*work->v.teacher, work->v.gt, sw ? &*sw : nullptr,
                              work->w ? &*work->w->teacher : nullptr)
              : supervised_loss(sv, work->v.gt);
      if (opt.objective == Objective::supervised && sw) {
        detail::add_teacher_terms(loss, *sw, *work->w->teacher, "aux_");
      }
      const double value = loss.value();
      if (!std::isfinite(value)) {
        std::ostringstream why;
        why << "non-finite loss at epoch " << e << " step " << s << " (";
        for (std::size_t i = 0; i < loss.size(); ++i) why << (i ? " " : "") << loss.names[i] << '=' << loss.term(i);
        why << ')';
        if (!opt.dump_dir.empty()) {
          atomic_write(opt.dump_dir / "divergence.txt", why.str() + "\n");
          save_checkpoint(opt.dump_dir / "divergence.ckpt", model);
        }
        throw DivergenceError(why.str());
      }
      backward(loss.total);
      sgd.step(lr);
      rec.total += value;
      detail::fold_terms(loss, rec.terms);
    }
    rec.total /= static_cast<double>(n_steps);
    for (auto& t : rec.terms) t /= static_cast<double>(n_steps);
    history.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  model.set_training(false);
  return history;
}

// ---- evaluation -------------------------------------------------------------------

struct EvalResult {
  double loss = 0;     // distillation objective (teacher terms + gt) when a teacher is given
  double gt_kl = 0;    // fused map vs ground truth
  double cc = 0;       // fused map vs ground-truth density, frame mean
  std::array<double, 6> terms{};
  Tensor<float> predictions;  // [clips * T', H, W] fused maps
  Tensor<float> ground_truth;
  Tensor<float> fixations;
  std::vector<std::size_t> groups;  // clip index of each predicted frame
};

/// Eval-mode pass over `data`, without gradients.
inline EvalResult evaluate(TinyHD<float>& model, const Dataset& data, Teacher* teacher, int batch_size = 4) {
  if (data.size() == 0) throw DataError("evaluation set is empty");
  const ModelConfig& cfg = model.config();
  const std::size_t Tp = cfg.output_frames(), H = cfg.height, W = cfg.width, plane = H * W;
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  EvalResult r;
  r.predictions = Tensor<float>({data.size() * Tp, H, W});
  r.ground_truth = Tensor<float>({data.size() * Tp, H, W});
  r.fixations = Tensor<float>({data.size() * Tp, H, W});
  double cc_sum = 0;
  for (std::size_t s = 0; s < data.size(); s += batch_size) {
    std::vector<const ClipRecord*> items;
    for (std::size_t k = s; k < std::min(data.size(), s + batch_size); ++k) items.push_back(&data.clips[k]);
    const std::vector<bool> no_flip(items.size(), false);
    Batch<float> b = make_batch<float>(items, no_flip, teacher, data.dir, cfg);
    const auto out = model.forward(Var<float>(b.clips));
    const LossTerms<float> loss = teacher ? distillation_loss(out, &*b.teacher, &b.gt) : supervised_loss(out, b.gt);
    const double w = static_cast<double>(items.size());
    r.loss += loss.value() * w;
    std::array<double, 6> terms{};
    detail::fold_terms(loss, terms);
    for (std::size_t k = 0; k < 6; ++k) r.terms[k] += terms[k] * w;
    r.gt_kl += terms[5] * w;
    const float* P = out.fused.value().ptr();
    for (std::size_t n = 0; n < items.size(); ++n) {
      const Tensor<float> fix = align_frames(items[n]->fixations, Tp);
      for (std::size_t t = 0; t < Tp; ++t) {
        const std::size_t dst = ((s + n) * Tp + t) * plane, src = (n * Tp + t) * plane;
        std::copy_n(P + src, plane, r.predictions.ptr() + dst);
        std::copy_n(b.gt.ptr() + src, plane, r.ground_truth.ptr() + dst);
        std::copy_n(fix.ptr() + t * plane, plane, r.fixations.ptr() + dst);
        r.groups.push_back(s + n);
        cc_sum += cc(std::span<const float>(P + src, plane), std::span<const float>(b.gt.ptr() + src, plane)).value;
      }
    }
  }
  const double n = static_cast<double>(data.size());
  r.loss /= n;
  r.gt_kl /= n;
  for (auto& t : r.terms) t /= n;
  r.cc = cc_sum / static_cast<double>(data.size() * Tp);
  model.set_training(was_training);
  return r;
}

/// Losses of one clip under consistent and inconsistent horizontal flips.
struct FlipCheck {
  double baseline = 0;    // nothing flipped
  double consistent = 0;  // clip, teacher maps and gt flipped together
  double mismatched = 0;  // only the clip flipped
  bool detects_mismatch() const { return mismatched > baseline; }
};

/// `predict` maps a [1, 3, T, H, W] clip to a SaliencyMapSet.
template <typename Predict>
FlipCheck flip_self_check(Predict&& predict, const ClipRecord& clip, Teacher& teacher, const fs::path& dir,
                          const ModelConfig& cfg) {
  NoGradGuard no_grad;
  auto loss_of = [&](bool flip_clip, bool flip_maps) {
    Batch<float> plain = make_batch<float>({&clip}, {flip_maps}, &teacher, dir, cfg);
    if (flip_clip != flip_maps) flip_items(plain.clips, {true});
    const SaliencyMapSet<float> out = predict(plain.clips);
    return distillation_loss(out, &*plain.teacher, &plain.gt).value();
  };
  return {loss_of(false, false), loss_of(true, true), loss_of(true, false)};
}

// ---- channel reduction ------------------------------------------------------------

namespace detail {

// Groups of consecutive indices (2j, 2j+1) within each segment; an odd
// segment keeps its last index alone.
inline std::vector<std::vector<std::size_t>> pair_groups(const std::vector<int>& segments) {
  std::vector<std::vector<std::size_t>> groups;
  std::size_t base = 0;
  for (int seg : segments) {
    const auto n = static_cast<std::size_t>(seg);
    for (std::size_t j = 0; j < n; j += 2) {
      if (j + 1 < n) groups.push_back({base + j, base + j + 1});
      else groups.push_back({base + j});
    }
    base += n;
  }
  return groups;
}

inline std::vector<std::vector<std::size_t>> identity_groups(std::size_t n) {
  std::vector<std::vector<std::size_t>> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = {i};
  return g;
}

template <typename T>
Tensor<T> average_groups(const Tensor<T>& v, const std::vector<std::vector<std::size_t>>& groups) {
  Tensor<T> out({groups.size()});
  for (std::size_t j = 0; j < groups.size(); ++j) {
    double s = 0;
    for (auto i : groups[j]) s += v[i];
    out[j] = static_cast<T>(s / static_cast<double>(groups[j].size()));
  }
  return out;
}

template <typename T>
void reduce_conv(const Conv3dLayer<T>& src, Conv3dLayer<T>& dst) {
  const ConvGeometry& g = src.geometry;
  const std::size_t kvol = g.kernel_volume();
  const auto out_groups = !src.reduce_out ? identity_groups(g.out_channels)
                          : g.is_depthwise() ? pair_groups(src.in_segments)
                                             : pair_groups({g.out_channels});
  const auto in_groups = (g.is_depthwise() || !src.reduce_in) ? identity_groups(g.in_per_group())
                                                              : pair_groups(src.in_segments);
  if (g.groups != 1 && !g.is_depthwise()) {
    throw PlanError("cannot reduce grouped conv '" + src.name + "'");
  }
  const std::size_t in_new = g.is_depthwise() ? 1 : in_groups.size();
  const Shape want = dst.geometry.weight_shape();
  const Shape got{out_groups.size(), in_new, want[2], want[3], want[4]};
  if (got != want || dst.name != src.name) {
    throw PlanError("reduced '" + src.name + "' would be " + shape_str(got) + ", target layer '" + dst.name +
                    "' is " + shape_str(want));
  }
  const Tensor<T>& W = src.weight.value();
  Tensor<T> out(want);
  const std::size_t ipg = g.in_per_group();
  for (std::size_t o = 0; o < out_groups.size(); ++o)
    for (std::size_t i = 0; i < in_new; ++i)
      for (std::size_t k = 0; k < kvol; ++k) {
        double acc = 0;
        for (auto so : out_groups[o]) {
          if (g.is_depthwise()) {
            acc += W[so * kvol + k];
          } else {
            for (auto si : in_groups[i]) acc += W[(so * ipg + si) * kvol + k];
          }
        }
        out[(o * in_new + i) * kvol + k] = static_cast<T>(acc / static_cast<double>(out_groups[o].size()));
      }
  dst.weight.mutable_value() = std::move(out);
  if (src.bias.defined()) dst.bias.mutable_value() = average_groups(src.bias.value(), out_groups);
}

template <typename T>
void reduce_norm(const BatchNorm3d<T>& src, BatchNorm3d<T>& dst) {
  const auto groups = pair_groups({src.channels});
  if (static_cast<int>(groups.size()) != dst.channels || src.name != dst.name) {
    throw PlanError("reduced norm '" + src.name + "' does not match target '" + dst.name + "'");
  }
  dst.gamma.mutable_value() = average_groups(src.gamma.value(), groups);
  dst.beta.mutable_value() = average_groups(src.beta.value(), groups);
  dst.running_mean = average_groups(src.running_mean, groups);
  dst.running_var = average_groups(src.running_var, groups);
}

}  // namespace detail

/// Halves every hidden channel count: output kernels (2j, 2j+1) are averaged,
/// input slots (2j, 2j+1) summed within each concatenated segment, depthwise
/// channels and norm parameters averaged pairwise. Map heads keep their single
/// output channel and the fusion layer is copied unchanged.
template <typename T>
TinyHD<T> reduce_channels(const TinyHD<T>& model, double target_multiplier) {
  const double current = model.config().width_multiplier;
  if (target_multiplier != current / 2) {
    throw PlanError("reduction stage " + std::to_string(target_multiplier) + " is not half of current width " +
                    std::to_string(current));
  }
  ModelConfig cfg = model.config();
  cfg.width_multiplier = target_multiplier;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw PlanError(std::string("cannot reduce further: ") + e.what());
  }
  TinyHD<T> out(cfg, 0);
  std::vector<Conv3dLayer<T>*> dst_convs;
  std::vector<BatchNorm3d<T>*> dst_norms;
  out.visit(Overloaded{[&](Conv3dLayer<T>& c) { dst_convs.push_back(&c); },
                       [&](BatchNorm3d<T>& b) { dst_norms.push_back(&b); }});
  std::size_t ci = 0, ni = 0;
  model.visit(Overloaded{[&](Conv3dLayer<T>& c) { detail::reduce_conv(c, *dst_convs.at(ci++)); },
                         [&](BatchNorm3d<T>& b) { detail::reduce_norm(b, *dst_norms.at(ni++)); }});
  out.set_training(model.training());
  return out;
}

struct ReductionPlan {
  std::vector<double> stages{1.0, 0.5, 0.25};
  bool use_teacher_assistant = true;

  void validate() const {
    if (stages.empty()) throw PlanError("reduction plan has no stages");
    for (std::size_t i = 1; i < stages.size(); ++i) {
      if (stages[i] != stages[i - 1] / 2) {
        throw PlanError("stage " + std::to_string(stages[i]) + " is not half of " + std::to_string(stages[i - 1]));
      }
    }
  }
};

struct StageResult {
  double width;
  TinyHD<float> model;
  std::vector<EpochRecord> history;
};

/// Trains (or takes) the first-stage model, then for each later stage
/// initializes by channel reduction of the previous stage and distills it,
/// either from `base_teacher` or from the first-stage model.
inline std::vector<StageResult> teacher_assistant_pipeline(const ReductionPlan& plan, const ModelConfig& cfg,
                                                           std::optional<TinyHD<float>> trained_first,
                                                           const Dataset& data, Teacher& base_teacher,
                                                           TrainOptions opt, std::uint64_t model_seed) {
  plan.validate();
  std::vector<StageResult> results;
  opt.teacher = &base_teacher;
  opt.objective = Objective::distill;
  if (trained_first) {
    if (trained_first->config().width_multiplier != plan.stages[0]) {
      throw PlanError("first-stage model width does not match plan");
    }
    results.push_back({plan.stages[0], std::move(*trained_first), {}});
  } else {
    ModelConfig c = cfg;
    c.width_multiplier = plan.stages[0];
    TinyHD<float> m(c, model_seed);
    auto h = train(m, data, opt);
    results.push_back({plan.stages[0], std::move(m), std::move(h)});
  }
  std::unique_ptr<FrozenHierarchicalTeacher> assistant;
  if (plan.use_teacher_assistant && plan.stages.size() > 1) {
    assistant = std::make_unique<FrozenHierarchicalTeacher>(results[0].model, "assistant");
  }
  for (std::size_t s = 1; s < plan.stages.size(); ++s) {
    TinyHD<float> m = reduce_channels(results.back().model, plan.stages[s]);
    TrainOptions o = opt;
    o.teacher = assistant ? static_cast<Teacher*>(assistant.get()) : &base_teacher;
    o.seed = derive_seed(opt.seed, s);
    auto h = train(m, data, o);
    results.push_back({plan.stages[s], std::move(m), std::move(h)});
  }
  return results;
}

}  // namespace tinyhd
