#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "adaptor/adaptor_net.hpp"
#include "adaptor/data_pipeline.hpp"
#include "adaptor/objective.hpp"

namespace adaptor {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamSettings&) const = default;
};

/// Pre-training hyperparameters. Desk-scale defaults for batch size and
/// epochs; the reference recipe (batch 1024, 50 epochs) is expressible.
struct TrainConfig {
  double alpha = kDefaultAlpha;
  double lr = 2e-5;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  AdaptorConfig adaptor;
  AdamSettings adam;
  std::optional<double> clip_grad_norm;  // off unless set

  void validate() const {
    validate_alpha(alpha);
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (contrastive loss needs negatives)");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0)) {
      throw ConfigError("adam betas must lie in [0, 1) and eps must be positive");
    }
    if (clip_grad_norm && !(*clip_grad_norm > 0.0)) throw ConfigError("clip_grad_norm must be positive");
    adaptor.validate();
  }

  bool operator==(const TrainConfig&) const = default;
};

struct ProbeConfig {
  std::size_t hidden_dim = 0;  // 0 -> d_shared of the adaptor
  double lr = 1e-2;
  std::size_t epochs = 300;
  double data_fraction = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) {
      throw ConfigError("probe data_fraction must lie in (0, 1], got " + std::to_string(data_fraction));
    }
    if (!(lr > 0.0)) throw ConfigError("probe lr must be positive");
    if (epochs == 0) throw ConfigError("probe epochs must be positive");
  }

  bool operator==(const ProbeConfig&) const = default;
};

// ---------------------------------------------------------------------------
// JSON codecs. Readers reject unknown keys and fill omitted keys with the
// struct defaults.

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& dst, const char* where) {
  if (!j.contains(key)) return;
  if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    // nlohmann converts -3 to a huge unsigned value without complaint
    const auto& v = j.at(key);
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(std::string(where) + "." + key + ": expected a non-negative integer");
    }
  }
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(where) + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const AdaptorConfig& c) {
  return {{"d_img", c.d_img},       {"d_txt", c.d_txt},
          {"d_shared", c.d_shared}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},   {"d_ffn", c.d_ffn},
          {"pooling", "mean"},      {"normalize_outputs", c.normalize_outputs},
          {"share_branch_weights", c.share_branch_weights}, {"ln_eps", c.ln_eps}};
}

inline AdaptorConfig adaptor_config_from_json(const nlohmann::json& j) {
  constexpr const char* where = "adaptor";
  detail::reject_unknown(j, {"d_img", "d_txt", "d_shared", "n_layers", "n_heads", "d_ffn", "pooling",
                             "normalize_outputs", "share_branch_weights", "ln_eps"},
                         where);
  AdaptorConfig c;
  detail::read_opt(j, "d_img", c.d_img, where);
  detail::read_opt(j, "d_txt", c.d_txt, where);
  detail::read_opt(j, "d_shared", c.d_shared, where);
  detail::read_opt(j, "n_layers", c.n_layers, where);
  detail::read_opt(j, "n_heads", c.n_heads, where);
  detail::read_opt(j, "d_ffn", c.d_ffn, where);
  std::string pooling = "mean";
  detail::read_opt(j, "pooling", pooling, where);
  if (pooling != "mean") throw ConfigError("adaptor.pooling: only 'mean' is supported");
  detail::read_opt(j, "normalize_outputs", c.normalize_outputs, where);
  detail::read_opt(j, "share_branch_weights", c.share_branch_weights, where);
  detail::read_opt(j, "ln_eps", c.ln_eps, where);
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"alpha", c.alpha},
                      {"lr", c.lr},
                      {"batch_size", c.batch_size},
                      {"epochs", c.epochs},
                      {"seed", c.seed},
                      {"adaptor", to_json(c.adaptor)},
                      {"adam_beta1", c.adam.beta1},
                      {"adam_beta2", c.adam.beta2},
                      {"adam_eps", c.adam.eps}};
  j["clip_grad_norm"] = c.clip_grad_norm ? nlohmann::json(*c.clip_grad_norm) : nlohmann::json(nullptr);
  return j;
}

/// Reads the training keys of `j`; `extra` names sibling keys owned by
/// another reader (the run-config file shares one top-level object).
inline TrainConfig train_config_from_json(const nlohmann::json& j, std::initializer_list<const char*> extra = {}) {
  constexpr const char* where = "config";
  std::set<std::string> known = {"alpha",      "lr",         "batch_size", "epochs",   "seed",          "adaptor",
                                 "adam_beta1", "adam_beta2", "adam_eps",   "clip_grad_norm"};
  known.insert(extra.begin(), extra.end());
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
  TrainConfig c;
  detail::read_opt(j, "alpha", c.alpha, where);
  detail::read_opt(j, "lr", c.lr, where);
  detail::read_opt(j, "batch_size", c.batch_size, where);
  detail::read_opt(j, "epochs", c.epochs, where);
  detail::read_opt(j, "seed", c.seed, where);
  if (j.contains("adaptor")) c.adaptor = adaptor_config_from_json(j.at("adaptor"));
  detail::read_opt(j, "adam_beta1", c.adam.beta1, where);
  detail::read_opt(j, "adam_beta2", c.adam.beta2, where);
  detail::read_opt(j, "adam_eps", c.adam.eps, where);
  if (j.contains("clip_grad_norm") && !j.at("clip_grad_norm").is_null()) {
    double v = 0.0;
    detail::read_opt(j, "clip_grad_norm", v, where);
    c.clip_grad_norm = v;
  }
  return c;
}

inline nlohmann::json to_json(const ProbeConfig& c) {
  return {{"hidden_dim", c.hidden_dim},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"data_fraction", c.data_fraction},
          {"seed", c.seed}};
}

inline ProbeConfig probe_config_from_json(const nlohmann::json& j) {
  constexpr const char* where = "probe";
  detail::reject_unknown(j, {"hidden_dim", "lr", "epochs", "data_fraction", "seed"}, where);
  ProbeConfig c;
  detail::read_opt(j, "hidden_dim", c.hidden_dim, where);
  detail::read_opt(j, "lr", c.lr, where);
  detail::read_opt(j, "epochs", c.epochs, where);
  detail::read_opt(j, "data_fraction", c.data_fraction, where);
  detail::read_opt(j, "seed", c.seed, where);
  return c;
}

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"n_samples", s.n_samples},       {"d_latent", s.d_latent},         {"d_img", s.d_img},
          {"d_txt", s.d_txt},               {"n_classes", s.n_classes},       {"noise_sigma", s.noise_sigma},
          {"seed", s.seed},                 {"center_scale", s.center_scale}, {"latent_sigma", s.latent_sigma},
          {"nuisance_dim", s.nuisance_dim}, {"nuisance_sigma", s.nuisance_sigma},
          {"tokens_img", s.tokens_img},     {"tokens_txt", s.tokens_txt}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  constexpr const char* where = "synth";
  detail::reject_unknown(j, {"n_samples", "d_latent", "d_img", "d_txt", "n_classes", "noise_sigma", "seed",
                             "center_scale", "latent_sigma", "nuisance_dim", "nuisance_sigma", "tokens_img",
                             "tokens_txt"},
                         where);
  SynthSpec s;
  detail::read_opt(j, "n_samples", s.n_samples, where);
  detail::read_opt(j, "d_latent", s.d_latent, where);
  detail::read_opt(j, "d_img", s.d_img, where);
  detail::read_opt(j, "d_txt", s.d_txt, where);
  detail::read_opt(j, "n_classes", s.n_classes, where);
  detail::read_opt(j, "noise_sigma", s.noise_sigma, where);
  detail::read_opt(j, "seed", s.seed, where);
  detail::read_opt(j, "center_scale", s.center_scale, where);
  detail::read_opt(j, "latent_sigma", s.latent_sigma, where);
  detail::read_opt(j, "nuisance_dim", s.nuisance_dim, where);
  detail::read_opt(j, "nuisance_sigma", s.nuisance_sigma, where);
  detail::read_opt(j, "tokens_img", s.tokens_img, where);
  detail::read_opt(j, "tokens_txt", s.tokens_txt, where);
  return s;
}

/// The run-config file: training keys at top level plus optional "probe"
/// and "paths" sections.
struct RunConfig {
  TrainConfig train;
  ProbeConfig probe;
  std::optional<std::string> train_cache;
  std::optional<std::string> val_cache;
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig rc;
  rc.train = train_config_from_json(j, {"probe", "paths"});
  if (j.contains("probe")) rc.probe = probe_config_from_json(j.at("probe"));
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::reject_unknown(p, {"train_cache", "val_cache"}, "paths");
    for (auto [key, dst] : {std::pair{"train_cache", &rc.train_cache}, std::pair{"val_cache", &rc.val_cache}}) {
      if (!p.contains(key)) continue;
      std::string v;
      detail::read_opt(p, key, v, "paths");
      *dst = v;
    }
  }
  return rc;
}

}  // namespace adaptor
