#include <gtest/gtest.h>

#include <cstdio>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace tinyhd;
using namespace tinyhd::testing;

namespace {

using Vec = std::vector<double>;
std::span<const double> S(const Vec& v) { return v; }

Vec random_vec(std::size_t n, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

Vec affine(const Vec& v, double a, double b) {
  Vec out(v);
  for (auto& x : out) x = a * x + b;
  return out;
}

bool same_values(const Var<float>& a, const Var<float>& b) { return a.value() == b.value(); }

// Every conv layer (geometry and flags) in visiting order.
template <typename T>
std::vector<const Conv3dLayer<T>*> conv_layers(const TinyHD<T>& m) {
  std::vector<const Conv3dLayer<T>*> out;
  m.visit(Overloaded{[&](const Conv3dLayer<T>& c) { out.push_back(&c); }, [](const auto&) {}});
  return out;
}

template <typename T>
std::size_t conv_stack_params(const TinyHD<T>& m) {
  std::size_t n = 0;
  for (const auto* c : conv_layers(m)) n += c->geometry.weight_count() + c->geometry.bias_count();
  return n;
}

// Kept pairs per segment: (c + 1) / 2 for each segment of c channels.
int halved(const std::vector<int>& segments) {
  int n = 0;
  for (int c : segments) n += (c + 1) / 2;
  return n;
}

struct TinyData {
  std::filesystem::path dir;
  Dataset data;
};

TinyData tiny_dataset(const std::string& name, std::uint64_t seed, std::size_t n) {
  const auto dir = scratch_dir(name);
  write_synthetic_dataset(dir, tiny_scene(seed), n);
  return {dir, Dataset::load(dir)};
}

// Mean distillation objective over the dataset, batches of two in clip
// order, training-mode normalization, measured on a copy of the model.
double epoch_mean_loss(const TinyHD<float>& model, const TinyData& d, Teacher& teacher) {
  TinyHD<float> m = model.clone();
  m.set_training(true);
  NoGradGuard no_grad;
  double sum = 0;
  int batches = 0;
  for (std::size_t i = 0; i < d.data.size(); i += 2) {
    std::vector<const ClipRecord*> items{&d.data.clips[i]};
    if (i + 1 < d.data.size()) items.push_back(&d.data.clips[i + 1]);
    const Batch<float> b = make_batch<float>(items, std::vector<bool>(items.size(), false), &teacher, d.dir,
                                             m.config());
    sum += distillation_loss(m.forward(b.clips), &*b.teacher, &b.gt).value();
    ++batches;
  }
  return sum / batches;
}

}  // namespace

// ---- tensor ---------------------------------------------------------------------

TEST(TensorProperty, ReshapePreservesFlatData) {
  std::mt19937_64 rng(200);
  const std::vector<std::pair<Shape, Shape>> cases{
      {{2, 3, 4}, {24}}, {{2, 3, 4}, {4, 6}}, {{1, 5, 1, 3}, {15, 1}}, {{6, 2, 2}, {2, 3, 2, 2}}, {{7}, {1, 7, 1}}};
  for (const auto& [from, to] : cases) {
    const Tensor<double> t = random_tensor<double>(from, rng);
    const Var<double> r = reshape(Var<double>(t), to);
    EXPECT_EQ(r.shape(), to);
    EXPECT_EQ(r.value().storage(), t.storage());
    EXPECT_EQ(reshape(r, from).value(), t);
  }
}

// ---- nnblocks -------------------------------------------------------------------

TEST(NnProperty, DepthwiseThenPointwiseEqualsComposedConv) {
  std::mt19937_64 rng(201);
  std::uniform_int_distribution<int> ch(1, 4), kt(1, 3), st(1, 2), pad(0, 1), dim(3, 6);
  for (int trial = 0; trial < 20; ++trial) {
    const int C = ch(rng), O = ch(rng);
    ConvGeometry dw;
    dw.in_channels = dw.out_channels = dw.groups = C;
    dw.kernel = {kt(rng), 1, 1};
    dw.stride = {st(rng), 1, 1};
    dw.padding = {pad(rng), 0, 0};
    ConvGeometry pw;
    pw.in_channels = C;
    pw.out_channels = O;
    ConvGeometry full = dw;
    full.out_channels = O;
    full.groups = 1;

    const std::size_t T = static_cast<std::size_t>(dw.kernel[0] + dim(rng));
    const Tensor<double> x = random_tensor<double>({2, static_cast<std::size_t>(C), T, 3, 4}, rng);
    const Tensor<double> wd = random_tensor<double>({static_cast<std::size_t>(C), 1, static_cast<std::size_t>(dw.kernel[0]), 1, 1}, rng);
    const Tensor<double> bd = random_tensor<double>({static_cast<std::size_t>(C)}, rng);
    const Tensor<double> wp = random_tensor<double>({static_cast<std::size_t>(O), static_cast<std::size_t>(C), 1, 1, 1}, rng);
    const Tensor<double> bp = random_tensor<double>({static_cast<std::size_t>(O)}, rng);

    // Composed kernel W[o, c, t] = wp[o, c] * wd[c, t]; bias bp[o] + sum_c wp[o, c] * bd[c].
    const std::size_t K = static_cast<std::size_t>(dw.kernel[0]);
    Tensor<double> wf({static_cast<std::size_t>(O), static_cast<std::size_t>(C), K, 1, 1});
    Tensor<double> bf({static_cast<std::size_t>(O)});
    for (int o = 0; o < O; ++o) {
      bf[o] = bp[o];
      for (int c = 0; c < C; ++c) {
        bf[o] += wp[o * C + c] * bd[c];
        for (std::size_t t = 0; t < K; ++t) wf[(o * C + c) * K + t] = wp[o * C + c] * wd[c * K + t];
      }
    }
    const auto two = conv3d(conv3d(Var<double>(x), Var<double>(wd), Var<double>(bd), dw), Var<double>(wp),
                            Var<double>(bp), pw)
                         .value();
    const auto one = conv3d(Var<double>(x), Var<double>(wf), Var<double>(bf), full).value();
    ASSERT_EQ(two.shape(), one.shape());
    for (std::size_t i = 0; i < one.numel(); ++i) ASSERT_NEAR(two[i], one[i], 1e-5) << trial;
  }
}

// ---- saliencynet ----------------------------------------------------------------

TEST(ModelProperty, D1MapsDependOnlyOnTheirOwnTap) {
  std::mt19937_64 rng(202);
  for (auto mode : {PredictionMode::mimo, PredictionMode::miso}) {
    // At 16x16 the deepest taps are 1x1 and their maps are uniform whatever
    // the features, so use the desk-scale frame size.
    ModelConfig cfg = tiny_config(mode);
    cfg.height = 48;
    cfg.width = 64;
    TinyHD<float> m(cfg, 9);
    m.set_training(false);
    NoGradGuard no_grad;
    const auto taps = m.encode(Var<float>(random_tensor<float>({1, 3, 4, 48, 64}, rng, 0, 1)));
    const auto base = m.decode_d1(taps);
    for (int k = 0; k < 4; ++k) {
      auto perturbed = taps;
      Tensor<float> v = taps[k].value();
      const Tensor<float> noise = random_tensor<float>(v.shape(), rng);
      for (std::size_t i = 0; i < v.numel(); ++i) v[i] += noise[i];
      perturbed[k] = Var<float>(v);
      const auto maps = m.decode_d1(perturbed);
      for (int j = 0; j < 4; ++j) {
        if (j == k) {
          EXPECT_FALSE(same_values(maps[j], base[j])) << "tap " << k;
        } else {
          EXPECT_TRUE(same_values(maps[j], base[j])) << "tap " << k << " changed map " << j;
        }
      }
    }
  }
}

TEST(ModelProperty, D1GradientFlowsOnlyToItsTap) {
  std::mt19937_64 rng(203);
  ModelConfig cfg = tiny_config();
  cfg.height = 48;
  cfg.width = 64;
  TinyHD<double> m(cfg, 10);
  m.set_training(false);
  std::array<Var<double>, 4> taps;
  {
    NoGradGuard no_grad;
    taps = m.encode(Var<double>(random_tensor<double>({1, 3, 4, 48, 64}, rng, 0, 1)));
  }
  for (int j = 0; j < 4; ++j) {
    std::array<Var<double>, 4> leaves;
    for (int k = 0; k < 4; ++k) leaves[k] = Var<double>(taps[k].value(), true);
    const auto maps = m.decode_d1(leaves);
    const Tensor<double> w = random_tensor<double>(maps[j].shape(), rng);
    backward(sum(mul(maps[j], Var<double>(w))));
    for (int k = 0; k < 4; ++k) {
      const Tensor<double> g = leaves[k].grad_or_zero();
      double mag = 0;
      for (double v : g.storage()) mag += std::abs(v);
      if (k == j) {
        EXPECT_GT(mag, 1e-6);
      } else {
        EXPECT_EQ(mag, 0.0) << "map " << j << " reached tap " << k;
      }
    }
    for (auto& p : m.parameters()) p.var.zero_grad();
  }
}

TEST(ModelProperty, EvalForwardIsBitIdentical) {
  std::mt19937_64 rng(204);
  for (auto mode : {PredictionMode::mimo, PredictionMode::miso}) {
    TinyHD<float> m(tiny_config(mode), 11);
    // Non-default running statistics.
    m.forward(random_tensor<float>({2, 3, 4, 16, 16}, rng, 0, 1));
    m.set_training(false);
    const Tensor<float> clip = random_tensor<float>({2, 3, 4, 16, 16}, rng, 0, 1);
    const auto a = m.forward(clip), b = m.forward(clip);
    for (int k = 0; k < 4; ++k) EXPECT_TRUE(same_values(a.intermediate[k], b.intermediate[k]));
    EXPECT_TRUE(same_values(a.d2_map, b.d2_map));
    EXPECT_TRUE(same_values(a.d3_map, b.d3_map));
    EXPECT_TRUE(same_values(a.fused, b.fused));
  }
}

// ---- profiler -------------------------------------------------------------------

TEST(ProfilerProperty, MimoCheaperThanSixteenMisoPasses) {
  std::vector<ModelConfig> configs;
  for (double w : {1.0, 0.5, 0.25})
    for (auto [h, wd] : {std::pair{48, 64}, std::pair{32, 32}, std::pair{64, 48}}) {
      ModelConfig c;
      c.width_multiplier = w;
      c.height = h;
      c.width = wd;
      configs.push_back(c);
    }
  for (ModelConfig c : configs) {
    c.mode = PredictionMode::mimo;
    TinyHD<float> mimo(c, 1);
    c.mode = PredictionMode::miso;
    TinyHD<float> miso(c, 1);
    const CostReport a = count_model(mimo), b = count_model(miso);
    const std::string tag = std::to_string(c.width_multiplier) + " " + std::to_string(c.height) + "x" +
                            std::to_string(c.width);
    EXPECT_LT(a.macs_per_16_maps, 2 * b.total_macs) << tag;
    EXPECT_EQ(b.macs_per_16_maps, 16 * b.total_macs) << tag;
    EXPECT_GT(static_cast<double>(b.macs_per_16_maps) / static_cast<double>(a.macs_per_16_maps), 8.0) << tag;
    const double pa = static_cast<double>(mimo.parameter_count()), pb = static_cast<double>(miso.parameter_count());
    EXPECT_LT(std::abs(pa - pb) / std::max(pa, pb), 0.05) << tag;
  }
}

// ---- distill --------------------------------------------------------------------

TEST(DistillProperty, KlIsNonNegativeAndZeroOnlyForEqualMaps) {
  std::mt19937_64 rng(205);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{2, 3, 5, 4};
    const Tensor<double> p = random_distribution<double>(s, rng), q = random_distribution<double>(s, rng);
    const double d = kl_divergence(Var<double>(p), q).value().item();
    EXPECT_GT(d, 0.0);
    EXPECT_NEAR(kl_divergence(Var<double>(p), p).value().item(), 0.0, 1e-15);
  }
}

TEST(DistillProperty, CombinedLossGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(206);
  TinyHD<double> m(tiny_config(), 12);
  const Tensor<double> xv = random_tensor<double>({2, 3, 4, 16, 16}, rng, 0, 1);
  const Tensor<double> xw = random_tensor<double>({2, 3, 4, 16, 16}, rng, 0, 1);
  const Shape ms{2, 4, 16, 16};
  TeacherOutputs<double> tv, tw;
  for (int k = 0; k < 5; ++k) {
    tv.maps.push_back(random_distribution<double>(ms, rng));
    tw.maps.push_back(random_distribution<double>(ms, rng));
  }
  const Tensor<double> gt = random_distribution<double>(ms, rng);
  auto loss = [&] {
    const auto sv = m.forward(xv), sw = m.forward(xw);
    return combined_loss(sv, &tv, gt, &sw, &tw);
  };
  const auto l0 = loss();
  backward(l0.total);
  const double L0 = l0.value();
  const auto params = m.parameters();
  std::vector<std::pair<std::size_t, std::size_t>> probes;
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  for (int i = 0; i < 20; ++i) {
    const std::size_t p = pick(rng);
    probes.emplace_back(p, std::uniform_int_distribution<std::size_t>(0, params[p].var.numel() - 1)(rng));
  }
  const double h = 1e-6;
  // Differences below the central-difference roundoff floor count as zero.
  const double zero = 100 * std::abs(L0) * std::numeric_limits<double>::epsilon() / h;
  for (const auto& c : finite_difference_check(params, [&] { return loss().value(); }, probes, h)) {
    EXPECT_LT(rel_error(c.analytic, c.numeric, zero), 1e-3)
        << c.name << "[" << c.index << "] analytic " << c.analytic << " numeric " << c.numeric;
  }
}

TEST(DistillProperty, OneEpochLowersEpochMeanLossOnMostSeeds) {
  const TinyData d = tiny_dataset("one_epoch", 207, 8);
  FileBackedTeacher teacher;
  int decreased = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    TinyHD<float> m(tiny_config(), derive_seed(207, s));
    TrainOptions o;
    o.schedule = Schedule{}.scaled_to(1);
    o.schedule.batch_size = 2;
    o.teacher = &teacher;
    o.seed = derive_seed(208, s);
    const double before = epoch_mean_loss(m, d, teacher);
    train(m, d.data, o);
    const double after = epoch_mean_loss(m, d, teacher);
    decreased += after < before;
  }
  EXPECT_GE(decreased, 8);
}

TEST(DistillProperty, ReduceHalvesHiddenChannels) {
  const TinyHD<float> full(ModelConfig{}, 13);
  const TinyHD<float> half = reduce_channels(full, 0.5);
  const TinyHD<float> quarter = reduce_channels(half, 0.25);
  for (const auto& [from, to] : {std::pair{&full, &half}, std::pair{&half, &quarter}}) {
    const auto a = conv_layers(*from), b = conv_layers(*to);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      const ConvGeometry &ga = a[i]->geometry, &gb = b[i]->geometry;
      const int want_out =
          a[i]->reduce_out ? (ga.is_depthwise() ? halved(a[i]->in_segments) : halved({ga.out_channels}))
                           : ga.out_channels;
      EXPECT_EQ(gb.out_channels, want_out) << a[i]->name;
      if (a[i]->reduce_in) {
        EXPECT_EQ(gb.in_channels, halved(a[i]->in_segments)) << a[i]->name;
      } else {
        EXPECT_EQ(gb.in_channels, ga.in_channels) << a[i]->name;
      }
    }
  }
}

TEST(DistillProperty, ReducedConvStackKeepsAQuarterToThirtyPercent) {
  const TinyHD<float> full(ModelConfig{}, 14);
  const TinyHD<float> half = reduce_channels(full, 0.5);
  const TinyHD<float> quarter = reduce_channels(half, 0.25);
  const double r1 = static_cast<double>(conv_stack_params(half)) / static_cast<double>(conv_stack_params(full));
  const double r2 =
      static_cast<double>(conv_stack_params(quarter)) / static_cast<double>(conv_stack_params(half));
  EXPECT_GE(r1, 0.24);
  EXPECT_LE(r1, 0.30);
  EXPECT_GE(r2, 0.24);
  EXPECT_LE(r2, 0.30);
}

TEST(DistillProperty, FlippingEverythingLeavesLossUnchanged) {
  const TinyData d = tiny_dataset("flip_equiv", 209, 5);
  FileBackedTeacher teacher;
  // Per-pixel predictor, so it commutes with a horizontal flip.
  auto predict = [](const Tensor<float>& clip) {
    const std::size_t T = 4, HW = 256;
    Tensor<float> lum({1, T, 16, 16});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < T * HW; ++i) lum[i] += clip[c * T * HW + i] * (30.0f / 3);
    const Var<float> m = softmax_blocks(Var<float>(lum), HW);
    SaliencyMapSet<float> s;
    for (auto& v : s.intermediate) v = m;
    s.d2_map = s.d3_map = s.fused = m;
    return s;
  };
  for (const auto& clip : d.data.clips) {
    const FlipCheck r = flip_self_check(predict, clip, teacher, d.dir, tiny_config());
    EXPECT_NEAR(r.consistent, r.baseline, 1e-5) << clip.id;
  }
}

// ---- metrics --------------------------------------------------------------------

TEST(MetricProperty, CcIsSymmetricAndAffineInvariant) {
  std::mt19937_64 rng(210);
  std::uniform_real_distribution<double> a(0.1, 10), b(-5, 5);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec p = random_vec(64, rng), q = random_vec(64, rng);
    const double base = cc(S(p), S(q)).value;
    EXPECT_NEAR(cc(S(q), S(p)).value, base, 1e-12);
    EXPECT_NEAR(cc(S(affine(p, a(rng), b(rng))), S(q)).value, base, 1e-9);
    EXPECT_NEAR(cc(S(p), S(affine(q, a(rng), b(rng)))).value, base, 1e-9);
  }
}

TEST(MetricProperty, SimIsSymmetricAndAtMostOne) {
  std::mt19937_64 rng(211);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec p = random_vec(64, rng), q = random_vec(64, rng);
    const double s = sim(S(p), S(q)).value;
    EXPECT_NEAR(sim(S(q), S(p)).value, s, 1e-12);
    EXPECT_LT(s, 1.0);
    EXPECT_NEAR(sim(S(p), S(p)).value, 1.0, 1e-12);
  }
}

TEST(MetricProperty, NssIsAffineInvariant) {
  std::mt19937_64 rng(212);
  std::uniform_real_distribution<double> a(0.1, 10), b(-5, 5);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec p = random_vec(64, rng);
    Vec fix(64, 0);
    for (int k = 0; k < 5; ++k) fix[(trial * 7 + k * 13) % 64] = 1;
    EXPECT_NEAR(nss(S(affine(p, a(rng), b(rng))), S(fix)).value, nss(S(p), S(fix)).value, 1e-9);
  }
}

// ---- dataio ---------------------------------------------------------------------

TEST(DataProperty, DeltaDensityPlacesEveryFixationOnThePeak) {
  const std::size_t H = 5, W = 7;
  std::mt19937_64 rng(213);
  for (std::size_t peak = 0; peak < H * W; ++peak) {
    std::vector<float> density(H * W, 0.f), out(H * W);
    density[peak] = 1.f;
    sample_fixations(density.data(), H, W, 25, rng, out.data());
    for (std::size_t i = 0; i < H * W; ++i) EXPECT_EQ(out[i], i == peak ? 1.f : 0.f) << peak;
  }
}

TEST(DataProperty, WritesGoThroughATempFileAndRename) {
  const auto dir = scratch_dir("atomic");
  std::mt19937_64 rng(214);
  const auto a = random_tensor<float>({3, 4}, rng), b = random_tensor<float>({5}, rng);
  save_tensor(dir / "x.nst", a);
  save_tensor(dir / "x.nst", b);
  EXPECT_EQ(load_tensor(dir / "x.nst"), b);
  std::set<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir)) names.insert(e.path().filename().string());
  EXPECT_EQ(names, (std::set<std::string>{"x.nst"}));

  // A failed rename leaves no temp file and the previous artifact intact.
  std::filesystem::create_directories(dir / "blocked.nst" / "inner");
  EXPECT_THROW(save_tensor(dir / "blocked.nst", a), DataError);
  names.clear();
  for (const auto& e : std::filesystem::directory_iterator(dir)) names.insert(e.path().filename().string());
  EXPECT_EQ(names, (std::set<std::string>{"x.nst", "blocked.nst"}));
  EXPECT_EQ(load_tensor(dir / "x.nst"), b);
}

// ---- cli ------------------------------------------------------------------------

namespace {

std::string run_capture(const std::string& cmd) {
  std::string out;
  FILE* p = ::popen((cmd + " 2>&1").c_str(), "r");
  if (!p) return out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  ::pclose(p);
  return out;
}

}  // namespace

TEST(CliProperty, HelpListsEveryFlagWithADescription) {
  const std::map<std::string, std::vector<std::string>> flags{
      {"synth-data", {"--config", "--out", "--seed", "--count"}},
      {"train", {"--config", "--out", "--seed", "--mode", "--width", "--data", "--eval", "--epochs"}},
      {"distill",
       {"--config", "--out", "--seed", "--mode", "--width", "--data", "--eval", "--epochs", "--teacher", "--aux"}},
      {"reduce",
       {"--config", "--out", "--seed", "--mode", "--width", "--data", "--eval", "--epochs", "--teacher",
        "--checkpoint", "--no-ta"}},
      {"eval", {"--config", "--out", "--seed", "--checkpoint", "--data", "--teacher", "--splits"}},
      {"profile", {"--config", "--out", "--mode", "--width"}},
      {"agree", {"--config", "--out", "--checkpoint", "--data"}}};
  for (const auto& [cmd, want] : flags) {
    const std::string help = run_capture(std::string(TINYHD_CLI) + " " + cmd + " --help");
    std::set<std::string> listed;
    std::istringstream lines(help);
    for (std::string line; std::getline(lines, line);) {
      const auto pos = line.find("--");
      if (line.rfind("  ", 0) != 0 || pos == std::string::npos || pos > 6) continue;
      const auto end = line.find_first_of(" \t", pos);
      const std::string flag = line.substr(pos, end - pos);
      if (flag == "--help") continue;
      listed.insert(flag);
      // Flag, optional type, then a description.
      std::istringstream words(line.substr(end == std::string::npos ? line.size() : end));
      std::vector<std::string> rest{std::istream_iterator<std::string>(words), {}};
      EXPECT_GE(rest.size(), 2u) << cmd << ": " << line;
    }
    EXPECT_EQ(listed, std::set<std::string>(want.begin(), want.end())) << cmd << "\n" << help;
  }
}
