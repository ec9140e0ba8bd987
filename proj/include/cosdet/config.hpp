#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosdet/comparator.hpp"
#include "cosdet/detector.hpp"

namespace cosdet {

struct LrSchedule {
  double base = 0.01;
  int warmup_iters = 100;
  std::vector<int> decay_iters = {3500, 4500};
  double decay_factor = 0.1;
};

inline double lr_at(const LrSchedule& s, int iter) {
  double lr = s.base;
  if (s.warmup_iters > 0 && iter < s.warmup_iters)
    lr = s.base * static_cast<double>(iter + 1) / s.warmup_iters;
  for (int d : s.decay_iters)
    if (iter >= d) lr *= s.decay_factor;
  return lr;
}

struct SumocoConfig {
  bool enabled = false;
  int queue = 100;
  double alpha = 0.999;
};

struct RunConfig {
  std::uint64_t dataset_seed = 7;
  int dataset_size = 600;
  std::string split = "base";
  int way = 5;
  int shot = 1;
  int iterations = 5000;
  LrSchedule lr;
  ComparatorMode mode = ComparatorMode::kCosine;
  Objective objective = Objective::kSoftmax;
  Aggregation aggregation = Aggregation::kFeatureAverage;
  SumocoConfig sumoco;
  RpnVariant rpn = RpnVariant::kStandard;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
};

namespace detail {

inline void require_keys(const nlohmann::json& j, const std::set<std::string>& keys,
                         const std::string& where) {
  check(j.is_object(), "config: " + where + " must be an object");
  for (const auto& [k, _] : j.items())
    check(keys.count(k) == 1, "config: unknown key '" + k + "' in " + where);
  for (const auto& k : keys)
    check(j.contains(k), "config: missing key '" + k + "' in " + where);
}

}  // namespace detail

inline ComparatorMode comparator_mode_from_string(const std::string& s) {
  if (s == "cosine") return ComparatorMode::kCosine;
  if (s == "cosine_no_affine") return ComparatorMode::kCosineNoAffine;
  if (s == "cosine_scale_only") return ComparatorMode::kCosineScaleOnly;
  if (s == "l2") return ComparatorMode::kL2;
  throw std::runtime_error("config: unknown comparator mode '" + s + "'");
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "softmax") return Objective::kSoftmax;
  if (s == "sigmoid") return Objective::kSigmoid;
  throw std::runtime_error("config: unknown objective '" + s + "'");
}

inline Aggregation aggregation_from_string(const std::string& s) {
  if (s == "feature_average") return Aggregation::kFeatureAverage;
  if (s == "sum_scores") return Aggregation::kSumScores;
  throw std::runtime_error("config: unknown aggregation mode '" + s + "'");
}

inline RpnVariant rpn_variant_from_string(const std::string& s) {
  if (s == "standard") return RpnVariant::kStandard;
  if (s == "cos_linear") return RpnVariant::kCosLinear;
  throw std::runtime_error("config: unknown rpn variant '" + s + "'");
}

// All fields are required; unknown keys are rejected at any nesting level.
inline RunConfig parse_config(const nlohmann::json& j) {
  detail::require_keys(j, {"dataset", "split", "way", "shot", "iterations", "lr", "comparator",
                           "aggregation", "sumoco", "rpn", "seed", "output_dir"},
                       "config");
  detail::require_keys(j.at("dataset"), {"seed", "size"}, "dataset");
  detail::require_keys(j.at("lr"), {"base", "warmup_iters", "decay_iters", "decay_factor"}, "lr");
  detail::require_keys(j.at("comparator"), {"mode", "objective"}, "comparator");
  detail::require_keys(j.at("sumoco"), {"enabled", "queue", "alpha"}, "sumoco");

  RunConfig c;
  c.dataset_seed = j.at("dataset").at("seed").get<std::uint64_t>();
  c.dataset_size = j.at("dataset").at("size").get<int>();
  c.split = j.at("split").get<std::string>();
  c.way = j.at("way").get<int>();
  c.shot = j.at("shot").get<int>();
  c.iterations = j.at("iterations").get<int>();
  c.lr.base = j.at("lr").at("base").get<double>();
  c.lr.warmup_iters = j.at("lr").at("warmup_iters").get<int>();
  c.lr.decay_iters = j.at("lr").at("decay_iters").get<std::vector<int>>();
  c.lr.decay_factor = j.at("lr").at("decay_factor").get<double>();
  c.mode = comparator_mode_from_string(j.at("comparator").at("mode").get<std::string>());
  c.objective = objective_from_string(j.at("comparator").at("objective").get<std::string>());
  c.aggregation = aggregation_from_string(j.at("aggregation").get<std::string>());
  c.sumoco.enabled = j.at("sumoco").at("enabled").get<bool>();
  c.sumoco.queue = j.at("sumoco").at("queue").get<int>();
  c.sumoco.alpha = j.at("sumoco").at("alpha").get<double>();
  c.rpn = rpn_variant_from_string(j.at("rpn").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.output_dir = j.at("output_dir").get<std::string>();

  check(c.dataset_size >= 1, "config: dataset size must be positive");
  check(c.split == "base", "config: training split must be 'base'");
  check(c.way >= 1 && c.way <= 6, "config: way must be in [1,6] (six base classes)");
  check(c.shot >= 1, "config: shot must be positive");
  check(c.iterations >= 0, "config: iterations must be non-negative");
  check(c.lr.base > 0.0, "config: base learning rate must be positive");
  check(c.lr.warmup_iters >= 0, "config: warmup must be non-negative");
  check(c.lr.decay_factor > 0.0 && c.lr.decay_factor <= 1.0,
        "config: decay factor must be in (0,1]");
  check(c.sumoco.queue >= 0, "config: queue size must be non-negative");
  check(c.sumoco.alpha >= 0.0 && c.sumoco.alpha <= 1.0, "config: alpha must be in [0,1]");
  check(!(c.sumoco.enabled && c.sumoco.queue > 0 && c.objective == Objective::kSigmoid),
        "config: Su-MoCo queue augmentation is defined for the softmax objective only");
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "config: cannot open " + path);
  return parse_config(nlohmann::json::parse(in));
}

inline nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{
      {"dataset", {{"seed", c.dataset_seed}, {"size", c.dataset_size}}},
      {"split", c.split},
      {"way", c.way},
      {"shot", c.shot},
      {"iterations", c.iterations},
      {"lr",
       {{"base", c.lr.base},
        {"warmup_iters", c.lr.warmup_iters},
        {"decay_iters", c.lr.decay_iters},
        {"decay_factor", c.lr.decay_factor}}},
      {"comparator", {{"mode", to_string(c.mode)}, {"objective", to_string(c.objective)}}},
      {"aggregation", to_string(c.aggregation)},
      {"sumoco",
       {{"enabled", c.sumoco.enabled}, {"queue", c.sumoco.queue}, {"alpha", c.sumoco.alpha}}},
      {"rpn", to_string(c.rpn)},
      {"seed", c.seed},
      {"output_dir", c.output_dir}};
}

}  // namespace cosdet
