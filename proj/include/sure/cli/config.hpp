#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>

#include <json.hpp>

#include "sure/error.hpp"
#include "sure/model/model.hpp"
#include "sure/train/trainer.hpp"

namespace sure::cli {

using json = nlohmann::json;

inline constexpr std::uint64_t kModelInitStream = 7;

/// Training hyperparameters plus the model widths and the ablation switches.
struct RunConfig {
  train::TrainConfig train;
  backbone::BackboneConfig backbone;
  std::size_t c_fine = 64;
  std::size_t attention_layers = 1;
  std::size_t head_hidden = 128;
  double kl_sigma = 1.0;
  model::HeadMode head_mode = model::HeadMode::evidential;
  bool fusion_enabled = true;
  bool filtering_enabled = true;
  double tau_c = 0.2;
  double q_a = 0.95;
  double q_e = 0.95;
  bool absolute_thresholds = false;

  model::ModelConfig model_config() const {
    model::ModelConfig mc;
    mc.backbone = backbone;
    mc.c_fine = c_fine;
    mc.attention_layers = attention_layers;
    mc.head_hidden = head_hidden;
    mc.bins = train.bins;
    mc.tau = train.tau;
    mc.head_mode = head_mode;
    mc.fusion_enabled = fusion_enabled;
    mc.kl_sigma = kl_sigma;
    return mc;
  }

  model::MatchOptions match_options() const {
    model::MatchOptions mo;
    mo.tau_c = tau_c;
    mo.q_a = q_a;
    mo.q_e = q_e;
    mo.filtering = filtering_enabled;
    mo.absolute_thresholds = absolute_thresholds;
    return mo;
  }

  std::uint64_t model_seed() const { return derive_seed(train.seed, kModelInitStream); }

  void validate() const {
    train.validate();
    model_config().validate();
    if (!(tau_c >= 0.0 && tau_c <= 1.0)) throw InvalidArgument("tau_c must lie in [0, 1]");
    if (absolute_thresholds) {
      if (!(q_a >= 0.0 && std::isfinite(q_a)))
        throw InvalidArgument("q_a must be a finite threshold >= 0");
      if (!(q_e >= 0.0 && std::isfinite(q_e)))
        throw InvalidArgument("q_e must be a finite threshold >= 0");
      return;
    }
    if (!(q_a > 0.0 && q_a <= 1.0)) throw InvalidArgument("q_a must lie in (0, 1]");
    if (!(q_e > 0.0 && q_e <= 1.0)) throw InvalidArgument("q_e must lie in (0, 1]");
  }
};

inline json to_json(const RunConfig& c) {
  const auto& t = c.train;
  json j;
  j["lr"] = t.lr;
  j["weight_decay"] = t.weight_decay;
  j["alpha"] = t.alpha;
  j["gamma"] = t.gamma;
  j["lambda_c"] = t.lambda_c;
  j["lambda_f"] = t.lambda_f;
  j["zeta"] = t.zeta;
  j["tau"] = t.tau;
  j["bins"] = t.bins;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["seed"] = t.seed;
  j["image_size"] = t.image_size;
  j["warmup_steps"] = t.warmup_steps;
  j["fine_supervision"] = model::to_string(t.fine_supervision);
  j["coarse_negatives"] = t.coarse_negatives;
  j["supervision_tau_c"] = t.supervision_tau_c;
  j["neighbor_pairs"] = t.neighbor_pairs;
  j["freeze_norms_after"] = t.freeze_norms_after;
  j["c_half"] = c.backbone.c_half;
  j["c_quarter"] = c.backbone.c_quarter;
  j["c_eighth"] = c.backbone.c_eighth;
  j["c_coarse"] = c.backbone.c_coarse;
  j["norm_enabled"] = c.backbone.norm_enabled;
  j["c_fine"] = c.c_fine;
  j["attention_layers"] = c.attention_layers;
  j["head_hidden"] = c.head_hidden;
  j["kl_sigma"] = c.kl_sigma;
  j["head_mode"] = model::to_string(c.head_mode);
  j["fusion_enabled"] = c.fusion_enabled;
  j["filtering_enabled"] = c.filtering_enabled;
  j["tau_c"] = c.tau_c;
  j["q_a"] = c.q_a;
  j["q_e"] = c.q_e;
  j["absolute_thresholds"] = c.absolute_thresholds;
  return j;
}

/// Sorted keys, no whitespace: the form embedded in checkpoints and hashed.
inline std::string canonical(const RunConfig& c) { return to_json(c).dump(); }

/// FNV-1a over the canonical form, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

template <class V>
V field(const json& j, const std::string& key) {
  const auto& v = j.at(key);
  if constexpr (std::is_same_v<V, bool>) {
    if (!v.is_boolean()) throw InvalidArgument("config field '" + key + "': expected a boolean");
  } else if constexpr (std::is_same_v<V, std::string>) {
    if (!v.is_string()) throw InvalidArgument("config field '" + key + "': expected a string");
  } else if constexpr (std::is_integral_v<V>) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw InvalidArgument("config field '" + key + "': expected a non-negative integer");
  } else {
    if (!v.is_number()) throw InvalidArgument("config field '" + key + "': expected a number");
  }
  return v.get<V>();
}

}  // namespace detail

/// Fields absent from `j` keep the values already in `base`; unknown keys are
/// rejected. The result is validated.
inline RunConfig from_json(const json& j, RunConfig base = {}) {
  if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
  static const std::set<std::string> known = [] {
    std::set<std::string> s;
    const auto defaults = to_json(RunConfig{});
    for (const auto& [k, v] : defaults.items()) s.insert(k);
    return s;
  }();
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw InvalidArgument("unknown config field '" + k + "'");

  auto& t = base.train;
  auto num = [&](const char* k, double& dst) {
    if (j.contains(k)) dst = detail::field<double>(j, k);
  };
  auto count = [&](const char* k, std::size_t& dst) {
    if (j.contains(k)) dst = detail::field<std::size_t>(j, k);
  };
  auto flag = [&](const char* k, bool& dst) {
    if (j.contains(k)) dst = detail::field<bool>(j, k);
  };
  num("lr", t.lr);
  num("weight_decay", t.weight_decay);
  num("alpha", t.alpha);
  num("gamma", t.gamma);
  num("lambda_c", t.lambda_c);
  num("lambda_f", t.lambda_f);
  num("zeta", t.zeta);
  num("tau", t.tau);
  count("bins", t.bins);
  count("epochs", t.epochs);
  count("batch_size", t.batch_size);
  if (j.contains("seed")) t.seed = detail::field<std::uint64_t>(j, "seed");
  count("image_size", t.image_size);
  count("warmup_steps", t.warmup_steps);
  if (j.contains("fine_supervision"))
    t.fine_supervision =
        model::parse_fine_supervision(detail::field<std::string>(j, "fine_supervision"));
  flag("coarse_negatives", t.coarse_negatives);
  num("supervision_tau_c", t.supervision_tau_c);
  count("neighbor_pairs", t.neighbor_pairs);
  count("freeze_norms_after", t.freeze_norms_after);
  count("c_half", base.backbone.c_half);
  count("c_quarter", base.backbone.c_quarter);
  count("c_eighth", base.backbone.c_eighth);
  count("c_coarse", base.backbone.c_coarse);
  flag("norm_enabled", base.backbone.norm_enabled);
  count("c_fine", base.c_fine);
  count("attention_layers", base.attention_layers);
  count("head_hidden", base.head_hidden);
  num("kl_sigma", base.kl_sigma);
  if (j.contains("head_mode"))
    base.head_mode = model::parse_head_mode(detail::field<std::string>(j, "head_mode"));
  flag("fusion_enabled", base.fusion_enabled);
  flag("filtering_enabled", base.filtering_enabled);
  num("tau_c", base.tau_c);
  num("q_a", base.q_a);
  num("q_e", base.q_e);
  flag("absolute_thresholds", base.absolute_thresholds);
  base.validate();
  return base;
}

}  // namespace sure::cli
