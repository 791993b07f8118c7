#pragma once

// Experiment configuration: an INI-style text file.
//
//   # comment
//   [run]
//   seed = 7
//   [model]
//   mode = mimo
//
// Sections: run, model, data, schedule, reduction, synth, eval. Unknown
// sections or keys are rejected.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tinyhd/dataio.hpp"
#include "tinyhd/distill.hpp"
#include "tinyhd/model.hpp"

namespace tinyhd {

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;
  std::string out;
  ModelConfig model;
  std::string train_dir, eval_dir, aux_dir;
  std::string teacher;  // file:<dir> | frozen:<checkpoint>
  std::string checkpoint;
  Schedule schedule;
  std::size_t prefetch_depth = 2;
  ReductionPlan reduction;
  SyntheticSceneSpec synth;
  std::size_t synth_count = 8;
  int eval_splits = 100;

  /// The run seed; absent seeds are an error rather than a clock default.
  std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("no seed given; set [run] seed or pass --seed");
    return *seed;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::istringstream is(v);
  std::string part;
  while (std::getline(is, part, ',')) out.push_back(trim(part));
  return out;
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  N n{};
  if constexpr (std::is_unsigned_v<N>) {
    if (!v.empty() && v[0] == '-') throw ConfigError("key '" + key + "' must be non-negative, got '" + v + "'");
  }
  is >> n;
  if (is.fail() || !is.eof()) throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
  return n;
}

template <typename N, std::size_t K>
std::array<N, K> parse_array(const std::string& key, const std::string& v) {
  const auto parts = split_list(v);
  if (parts.size() != K) {
    throw ConfigError("key '" + key + "' expects " + std::to_string(K) + " values, got '" + v + "'");
  }
  std::array<N, K> out{};
  for (std::size_t i = 0; i < K; ++i) out[i] = parse_number<N>(key, parts[i]);
  return out;
}

template <typename N>
std::vector<N> parse_vector(const std::string& key, const std::string& v) {
  std::vector<N> out;
  if (trim(v).empty()) return out;
  for (const auto& p : split_list(v)) out.push_back(parse_number<N>(key, p));
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "' expects true|false, got '" + v + "'");
}

inline void apply_key(ExperimentConfig& c, const std::string& section, const std::string& key,
                      const std::string& v) {
  const std::string full = section + "." + key;
  auto num = [&](auto& field) { field = parse_number<std::decay_t<decltype(field)>>(full, v); };
  auto& m = c.model;
  auto& s = c.schedule;
  auto& y = c.synth;
  if (section == "run") {
    if (key == "seed") c.seed = parse_number<std::uint64_t>(full, v);
    else if (key == "out") c.out = v;
    else goto unknown;
  } else if (section == "model") {
    if (key == "width_multiplier") num(m.width_multiplier);
    else if (key == "mode") m.mode = parse_mode(v);
    else if (key == "clip_length") num(m.clip_length);
    else if (key == "height") num(m.height);
    else if (key == "width") num(m.width);
    else if (key == "stem_channels") num(m.stem_channels);
    else if (key == "taps") m.encoder_tap_channels = parse_array<int, 4>(full, v);
    else if (key == "expansion") num(m.expansion);
    else if (key == "d1") num(m.d1_channels);
    else if (key == "d2") m.d2_channels = parse_array<int, 3>(full, v);
    else if (key == "d3") num(m.d3_channels);
    else if (key == "inflation") {
      if (v == "replicate") m.inflation = InflationMode::replicate;
      else if (v == "replicate_normalized") m.inflation = InflationMode::replicate_normalized;
      else throw ConfigError("key '" + full + "' expects replicate|replicate_normalized");
    } else goto unknown;
  } else if (section == "data") {
    if (key == "train") c.train_dir = v;
    else if (key == "eval") c.eval_dir = v;
    else if (key == "aux") c.aux_dir = v;
    else if (key == "teacher") c.teacher = v;
    else if (key == "checkpoint") c.checkpoint = v;
    else goto unknown;
  } else if (section == "schedule") {
    if (key == "epochs") num(s.epochs);
    else if (key == "milestones") s.milestones = parse_vector<int>(full, v);
    else if (key == "batch_size") num(s.batch_size);
    else if (key == "lr") num(s.lr);
    else if (key == "momentum") num(s.momentum);
    else if (key == "gamma") num(s.gamma);
    else if (key == "flip_prob") num(s.flip_prob);
    else if (key == "prefetch") num(c.prefetch_depth);
    else goto unknown;
  } else if (section == "reduction") {
    if (key == "stages") c.reduction.stages = parse_vector<double>(full, v);
    else if (key == "teacher_assistant") c.reduction.use_teacher_assistant = parse_bool(full, v);
    else goto unknown;
  } else if (section == "synth") {
    if (key == "count") num(c.synth_count);
    else if (key == "min_blobs") num(y.min_blobs);
    else if (key == "max_blobs") num(y.max_blobs);
    else if (key == "sigma_min") num(y.sigma_min);
    else if (key == "sigma_max") num(y.sigma_max);
    else if (key == "speed_max") num(y.speed_max);
    else if (key == "texture") num(y.texture_amplitude);
    else if (key == "clip_length") num(y.clip_length);
    else if (key == "height") num(y.height);
    else if (key == "width") num(y.width);
    else if (key == "fixations") num(y.fixations_per_frame);
    else if (key == "teacher_blur") y.teacher_blur = parse_array<double, 5>(full, v);
    else goto unknown;
  } else if (section == "eval") {
    if (key == "splits") num(c.eval_splits);
    else goto unknown;
  } else {
    throw ConfigError("unknown section [" + section + "]");
  }
  return;
unknown:
  throw ConfigError("unknown key '" + full + "'");
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  ExperimentConfig c;
  std::istringstream is(text);
  std::string line, section;
  std::map<std::string, int> seen;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    const std::string full = section + "." + key;
    if (auto [it, fresh] = seen.emplace(full, lineno); !fresh) {
      throw ConfigError(where + "duplicate key '" + full + "' (first on line " + std::to_string(it->second) + ")");
    }
    try {
      detail::apply_key(c, section, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    } catch (const std::exception& e) {
      throw ConfigError(where + "key '" + full + "': " + e.what());
    }
  }
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str(), path.string());
}

}  // namespace tinyhd
