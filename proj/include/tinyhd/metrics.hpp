#pragma once

// Saliency metrics and pairwise model agreement.
//
// Conventions follow the MIT saliency benchmark where it is explicit; the
// degenerate cases are pinned down here:
//   cc   both maps constant            -> 0, degenerate
//   nss  population sigma below 1e-8   -> 0, degenerate; no fixations -> skipped
//   sim  inputs not summing to 1       -> renormalized, flagged
//   auc  no fixations / no negatives   -> skipped

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tinyhd/tensor.hpp"

namespace tinyhd {

struct MetricResult {
  double value = 0.0;
  bool degenerate = false;
  bool skipped = false;
  bool renormalized = false;
};

inline constexpr double kSigmaFloor = 1e-8;

namespace detail {

template <typename V>
void require_same_size(std::span<const V> p, std::span<const V> q, const char* what) {
  if (p.size() != q.size() || p.empty()) {
    throw ShapeError(std::string(what) + ": maps have " + std::to_string(p.size()) + " and " +
                     std::to_string(q.size()) + " elements");
  }
}

template <typename V>
MetricResult cc_impl(std::span<const V> p, std::span<const V> q) {
  require_same_size(p, q, "cc");
  const double n = static_cast<double>(p.size());
  double mp = 0, mq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    mp += p[i];
    mq += q[i];
  }
  mp /= n;
  mq /= n;
  double spq = 0, spp = 0, sqq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p[i] - mp, b = q[i] - mq;
    spq += a * b;
    spp += a * a;
    sqq += b * b;
  }
  if (spp == 0 || sqq == 0) return {0.0, true};
  return {std::clamp(spq / std::sqrt(spp * sqq), -1.0, 1.0)};
}

template <typename V>
MetricResult sim_impl(std::span<const V> p, std::span<const V> q) {
  require_same_size(p, q, "sim");
  double sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) throw ParameterError("sim: maps must be nonnegative");
    sp += p[i];
    sq += q[i];
  }
  if (sp <= 0 || sq <= 0) return {0.0, true};
  MetricResult r;
  r.renormalized = std::abs(sp - 1) > 1e-6 || std::abs(sq - 1) > 1e-6;
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::min(p[i] / sp, q[i] / sq);
  r.value = s;
  return r;
}

template <typename V>
MetricResult nss_impl(std::span<const V> p, std::span<const V> fix) {
  require_same_size(p, fix, "nss");
  const double n = static_cast<double>(p.size());
  double m = 0;
  std::size_t nfix = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    m += p[i];
    nfix += fix[i] > 0;
  }
  if (nfix == 0) return {0.0, false, true};
  m /= n;
  double ss = 0;
  for (auto v : p) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / n);
  if (sd < kSigmaFloor) return {0.0, true};
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (fix[i] > 0) acc += (p[i] - m) / sd;
  }
  return {acc / static_cast<double>(nfix)};
}

// Trapezoidal ROC area from integer counts at descending thresholds taken
// from the positive set. Exact: one division of an integer numerator.
template <typename V>
MetricResult auc_judd_impl(std::span<const V> p, std::span<const V> fix) {
  require_same_size(p, fix, "auc_judd");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < p.size(); ++i) (fix[i] > 0 ? pos : neg).push_back(p[i]);
  if (pos.empty() || neg.empty()) return {0.0, false, true};
  std::sort(pos.begin(), pos.end(), std::greater<>());
  std::sort(neg.begin(), neg.end(), std::greater<>());
  std::int64_t twice_area = 0, tp_prev = 0, fp_prev = 0;
  std::size_t ip = 0, in = 0;
  while (ip < pos.size()) {
    const double th = pos[ip];
    while (ip < pos.size() && pos[ip] >= th) ++ip;
    while (in < neg.size() && neg[in] >= th) ++in;
    const auto tp = static_cast<std::int64_t>(ip), fp = static_cast<std::int64_t>(in);
    twice_area += (fp - fp_prev) * (tp + tp_prev);
    tp_prev = tp;
    fp_prev = fp;
  }
  const auto np = static_cast<std::int64_t>(pos.size()), nn = static_cast<std::int64_t>(neg.size());
  twice_area += (nn - fp_prev) * (np + tp_prev);
  return {static_cast<double>(twice_area) / (2.0 * static_cast<double>(np) * static_cast<double>(nn))};
}

}  // namespace detail

/// Area under the full-sweep ROC of positives vs negatives; ties count 1/2.
inline double rank_auc(std::vector<double> pos, std::vector<double> neg) {
  if (pos.empty() || neg.empty()) throw ParameterError("rank_auc needs both classes");
  std::sort(neg.begin(), neg.end());
  double wins = 0;
  for (double v : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), v);
    const auto hi = std::upper_bound(lo, neg.end(), v);
    wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

inline MetricResult cc(std::span<const double> p, std::span<const double> q) { return detail::cc_impl(p, q); }
inline MetricResult cc(std::span<const float> p, std::span<const float> q) { return detail::cc_impl(p, q); }
inline MetricResult sim(std::span<const double> p, std::span<const double> q) { return detail::sim_impl(p, q); }
inline MetricResult sim(std::span<const float> p, std::span<const float> q) { return detail::sim_impl(p, q); }
inline MetricResult nss(std::span<const double> p, std::span<const double> fix) { return detail::nss_impl(p, fix); }
inline MetricResult nss(std::span<const float> p, std::span<const float> fix) { return detail::nss_impl(p, fix); }
inline MetricResult auc_judd(std::span<const double> p, std::span<const double> fix) {
  return detail::auc_judd_impl(p, fix);
}
inline MetricResult auc_judd(std::span<const float> p, std::span<const float> fix) {
  return detail::auc_judd_impl(p, fix);
}

inline constexpr int kDefaultSplits = 100;

/// Negatives drawn uniformly (with replacement) from non-fixated pixels,
/// as many as there are fixations, `n_splits` times.
template <typename V>
MetricResult auc_borji(std::span<const V> p, std::span<const V> fix, int n_splits = kDefaultSplits,
                       std::uint64_t seed = 0) {
  detail::require_same_size(p, fix, "auc_borji");
  std::vector<double> pos;
  std::vector<std::size_t> neg_idx;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (fix[i] > 0) pos.push_back(p[i]);
    else neg_idx.push_back(i);
  }
  if (pos.empty() || neg_idx.empty() || n_splits < 1) return {0.0, false, true};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, neg_idx.size() - 1);
  double acc = 0;
  std::vector<double> neg(pos.size());
  for (int s = 0; s < n_splits; ++s) {
    for (auto& v : neg) v = p[neg_idx[pick(rng)]];
    acc += rank_auc(pos, neg);
  }
  return {acc / n_splits};
}

/// Shuffled AUC: negatives drawn from `pool` (flat pixel indices of fixations
/// from other frames), excluding locations fixated in this frame.
template <typename V>
MetricResult sauc(std::span<const V> p, std::span<const V> fix, const std::vector<std::size_t>& pool,
                  int n_splits = kDefaultSplits, std::uint64_t seed = 0) {
  detail::require_same_size(p, fix, "sauc");
  std::vector<double> pos;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (fix[i] > 0) pos.push_back(p[i]);
  }
  std::vector<std::size_t> candidates;
  for (auto idx : pool) {
    if (idx >= p.size()) throw ParameterError("sauc: pool index out of range");
    if (!(fix[idx] > 0)) candidates.push_back(idx);
  }
  if (pos.empty() || candidates.empty() || n_splits < 1) return {0.0, false, true};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  double acc = 0;
  std::vector<double> neg(pos.size());
  for (int s = 0; s < n_splits; ++s) {
    for (auto& v : neg) v = p[candidates[pick(rng)]];
    acc += rank_auc(pos, neg);
  }
  return {acc / n_splits};
}

inline MetricResult auc_borji(std::span<const float> p, std::span<const float> fix,
                              int n_splits = kDefaultSplits, std::uint64_t seed = 0) {
  return auc_borji<float>(p, fix, n_splits, seed);
}
inline MetricResult auc_borji(std::span<const double> p, std::span<const double> fix,
                              int n_splits = kDefaultSplits, std::uint64_t seed = 0) {
  return auc_borji<double>(p, fix, n_splits, seed);
}
inline MetricResult sauc(std::span<const float> p, std::span<const float> fix,
                         const std::vector<std::size_t>& pool, int n_splits = kDefaultSplits,
                         std::uint64_t seed = 0) {
  return sauc<float>(p, fix, pool, n_splits, seed);
}
inline MetricResult sauc(std::span<const double> p, std::span<const double> fix,
                         const std::vector<std::size_t>& pool, int n_splits = kDefaultSplits,
                         std::uint64_t seed = 0) {
  return sauc<double>(p, fix, pool, n_splits, seed);
}

// ---- reports --------------------------------------------------------------------

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"auc_j", "auc_b", "sauc", "cc", "nss", "sim"};
  return names;
}

struct FrameMetrics {
  std::string label;
  std::array<MetricResult, 6> values;  // order of metric_names()
};

struct MetricReport {
  std::vector<FrameMetrics> frames;
  std::array<double, 6> aggregate{};
  std::array<std::size_t, 6> counted{};
  std::array<std::size_t, 6> skipped{};

  void finalize() {
    aggregate.fill(0);
    counted.fill(0);
    skipped.fill(0);
    for (const auto& f : frames)
      for (std::size_t m = 0; m < 6; ++m) {
        if (f.values[m].skipped) {
          ++skipped[m];
        } else {
          aggregate[m] += f.values[m].value;
          ++counted[m];
        }
      }
    for (std::size_t m = 0; m < 6; ++m) {
      if (counted[m] > 0) aggregate[m] /= static_cast<double>(counted[m]);
    }
  }

  double get(const std::string& name) const {
    const auto& n = metric_names();
    const auto it = std::find(n.begin(), n.end(), name);
    if (it == n.end()) throw ParameterError("unknown metric '" + name + "'");
    return aggregate[static_cast<std::size_t>(it - n.begin())];
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10) << "frame";
    for (const auto& n : metric_names()) os << ',' << n;
    os << '\n';
    for (const auto& f : frames) {
      os << f.label;
      for (const auto& v : f.values) {
        os << ',';
        if (!v.skipped) os << v.value;
      }
      os << '\n';
    }
    return os.str();
  }

  std::string summary() const {
    std::ostringstream os;
    os << "metric     mean        frames  skipped\n";
    os << std::fixed << std::setprecision(4);
    for (std::size_t m = 0; m < 6; ++m) {
      os << std::left << std::setw(10) << metric_names()[m] << ' ' << std::right << std::setw(8)
         << aggregate[m] << "    " << std::setw(6) << counted[m] << "  " << std::setw(7) << skipped[m]
         << '\n';
    }
    return os.str();
  }
};

/// Scores predictions against ground truth frame by frame. All tensors are
/// [F, H, W]; `group[f]` names the clip of frame f, and sAUC negatives come
/// from the fixations of frames in other groups (other frames when there is
/// only one group).
inline MetricReport evaluate_maps(const Tensor<float>& pred, const Tensor<float>& gt,
                                  const Tensor<float>& fix, const std::vector<std::size_t>& group,
                                  std::uint64_t seed, int n_splits = kDefaultSplits) {
  if (pred.rank() != 3) throw ShapeError("evaluate_maps expects [F,H,W], got " + shape_str(pred.shape()));
  require_same_shape(pred.shape(), gt.shape(), "evaluate_maps gt");
  require_same_shape(pred.shape(), fix.shape(), "evaluate_maps fixations");
  const std::size_t F = pred.dim(0), HW = pred.dim(1) * pred.dim(2);
  if (group.size() != F) throw DataError("evaluate_maps: frame grouping does not match frame count");
  const bool single_group = std::all_of(group.begin(), group.end(), [&](auto g) { return g == group[0]; });
  MetricReport r;
  for (std::size_t f = 0; f < F; ++f) {
    std::span<const float> p(pred.ptr() + f * HW, HW), g(gt.ptr() + f * HW, HW), x(fix.ptr() + f * HW, HW);
    std::vector<std::size_t> pool;
    for (std::size_t o = 0; o < F; ++o) {
      if (o == f || (!single_group && group[o] == group[f])) continue;
      for (std::size_t i = 0; i < HW; ++i) {
        if (fix[o * HW + i] > 0) pool.push_back(i);
      }
    }
    std::sort(pool.begin(), pool.end());
    pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
    const std::uint64_t fs = seed + f;
    r.frames.push_back({"frame_" + std::to_string(f),
                        {auc_judd(p, x), auc_borji(p, x, n_splits, fs), sauc(p, x, pool, n_splits, fs),
                         cc(p, g), nss(p, x), sim(p, g)}});
  }
  r.finalize();
  return r;
}

// ---- agreement --------------------------------------------------------------------

struct AgreementMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<double>> cc;   // percent
  std::vector<std::vector<double>> sim;  // percent

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10) << "metric,model";
    for (const auto& n : names) os << ',' << n;
    os << '\n';
    auto block = [&](const char* tag, const std::vector<std::vector<double>>& m) {
      for (std::size_t i = 0; i < names.size(); ++i) {
        os << tag << ',' << names[i];
        for (double v : m[i]) os << ',' << v;
        os << '\n';
      }
    };
    block("cc", cc);
    block("sim", sim);
    return os.str();
  }

  std::string to_text() const {
    std::size_t w = 8;
    for (const auto& n : names) w = std::max(w, n.size() + 2);
    std::ostringstream os;
    os << "# frame-averaged; each pair is the mean of both prediction/reference orders\n";
    auto grid = [&](const char* title, const std::vector<std::vector<double>>& m) {
      os << title << '\n' << std::setw(static_cast<int>(w)) << "";
      for (const auto& n : names) os << std::setw(static_cast<int>(w)) << n;
      os << '\n' << std::fixed << std::setprecision(1);
      for (std::size_t i = 0; i < names.size(); ++i) {
        os << std::setw(static_cast<int>(w)) << names[i];
        for (double v : m[i]) {
          std::ostringstream cell;
          cell << std::fixed << std::setprecision(1) << v << '%';
          os << std::setw(static_cast<int>(w)) << cell.str();
        }
        os << '\n';
      }
    };
    grid("CC", cc);
    os << '\n';
    grid("SIM", sim);
    return os.str();
  }
};

/// `maps[m]` is model m's prediction sequence, [F, H, W].
inline AgreementMatrix agreement(const std::vector<std::string>& names, const std::vector<Tensor<float>>& maps) {
  if (names.size() != maps.size()) throw ParameterError("agreement: names and predictions differ in count");
  if (maps.size() < 2) throw ParameterError("agreement needs at least two models");
  for (const auto& m : maps) {
    if (m.rank() != 3 || m.shape() != maps[0].shape()) {
      throw DataError("agreement: prediction " + shape_str(m.shape()) + " is not aligned with " +
                      shape_str(maps[0].shape()));
    }
  }
  const std::size_t M = maps.size(), F = maps[0].dim(0), HW = maps[0].dim(1) * maps[0].dim(2);
  std::vector<std::vector<double>> occ(M, std::vector<double>(M)), osim(M, std::vector<double>(M));
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < M; ++j) {
      double c = 0, s = 0;
      for (std::size_t f = 0; f < F; ++f) {
        std::span<const float> p(maps[i].ptr() + f * HW, HW), q(maps[j].ptr() + f * HW, HW);
        c += cc(p, q).value;
        s += sim(p, q).value;
      }
      occ[i][j] = 100.0 * c / static_cast<double>(F);
      osim[i][j] = 100.0 * s / static_cast<double>(F);
    }
  AgreementMatrix a{names, occ, osim};
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < M; ++j) {
      if (i == j) {
        a.cc[i][j] = a.sim[i][j] = 100.0;
      } else {
        a.cc[i][j] = 0.5 * (occ[i][j] + occ[j][i]);
        a.sim[i][j] = 0.5 * (osim[i][j] + osim[j][i]);
      }
    }
  return a;
}

}  // namespace tinyhd
