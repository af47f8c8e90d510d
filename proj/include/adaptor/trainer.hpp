#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptor/config.hpp"

namespace adaptor {

/// ADAPTOR_DETERMINISTIC=1 (or any value other than "0") turns on
/// deterministic mode. Arithmetic is single-threaded and reproducible either
/// way; the mode additionally zeroes wall-clock fields so logs compare
/// byte-for-byte.
inline bool deterministic_from_env() {
  const char* v = std::getenv("ADAPTOR_DETERMINISTIC");
  return v != nullptr && std::string(v) != "0" && std::string(v) != "";
}

/// Optimizer-owned training state. Moments are stored per parameter tensor
/// in AdaptorParams::named_tensors() order.
struct TrainState {
  AdaptorParams params;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t seed = 0;   // batch order is keyed by (seed, epoch)
};

struct EpochMetrics {
  std::uint64_t epoch = 0;  // zero-based index of the finished epoch
  std::uint64_t step = 0;   // optimizer steps taken so far
  double loss = 0.0;
  double l_i2t = 0.0;
  double l_t2i = 0.0;
  double tau = 0.0;
  double wall_ms = 0.0;
  std::optional<double> val_loss;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"epoch", epoch}, {"step", step}, {"loss", loss},       {"l_i2t", l_i2t},
                        {"l_t2i", l_t2i}, {"tau", tau},   {"wall_ms", wall_ms}};
    if (val_loss) j["val_loss"] = *val_loss;
    return j;
  }

  static EpochMetrics from_json(const nlohmann::json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<std::uint64_t>();
    m.step = j.at("step").get<std::uint64_t>();
    m.loss = j.at("loss").get<double>();
    m.l_i2t = j.at("l_i2t").get<double>();
    m.l_t2i = j.at("l_t2i").get<double>();
    m.tau = j.at("tau").get<double>();
    m.wall_ms = j.at("wall_ms").get<double>();
    if (j.contains("val_loss")) m.val_loss = j.at("val_loss").get<double>();
    return m;
  }

  bool operator==(const EpochMetrics&) const = default;
};

/// One JSON object per line.
inline std::string metrics_jsonl(std::span<const EpochMetrics> log) {
  std::string out;
  for (const auto& m : log) out += m.to_json().dump() + "\n";
  return out;
}

inline TrainState init_train_state(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.params = init_params(config.adaptor, config.seed);
  for (const auto& t : s.params.tensors()) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  s.seed = config.seed;
  return s;
}

/// Current gradients, one buffer per parameter tensor (empty when absent).
inline std::vector<std::vector<double>> collect_grads(const AdaptorParams& params) {
  std::vector<std::vector<double>> out;
  for (const auto& t : params.tensors()) out.emplace_back(t.grad().begin(), t.grad().end());
  return out;
}

/// Scales all gradients so their global L2 norm is at most max_norm.
inline void clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double ss = 0.0;
  for (const auto& g : grads)
    for (double x : g) ss += x * x;
  const double norm = std::sqrt(ss);
  if (norm <= max_norm) return;
  const double f = max_norm / norm;
  for (auto& g : grads)
    for (double& x : g) x *= f;
}

/// Adam with bias correction. An empty gradient buffer counts as zero.
/// log_tau is clamped so tau stays within [0.01, 100].
inline void adam_step(TrainState& state, std::span<const std::vector<double>> grads, const AdamSettings& adam,
                      double lr) {
  auto named = state.params.named_tensors();
  if (grads.size() != named.size() || state.m.size() != named.size() || state.v.size() != named.size()) {
    throw DimensionError("adam_step: expected " + std::to_string(named.size()) + " gradient buffers, got " +
                         std::to_string(grads.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& g = grads[i];
    if (!g.empty() && g.size() != named[i].second.numel()) {
      throw DimensionError("adam_step: gradient for " + named[i].first + " has " + std::to_string(g.size()) +
                           " entries, parameter has " + std::to_string(named[i].second.numel()));
    }
    for (double x : g) {
      if (!std::isfinite(x)) throw NumericError("adam_step: non-finite gradient in parameter '" + named[i].first + "'");
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(adam.beta1, t);
  const double bc2 = 1.0 - std::pow(adam.beta2, t);
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto data = named[i].second.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = adam.beta1 * m[k] + (1.0 - adam.beta1) * gk;
      v[k] = adam.beta2 * v[k] + (1.0 - adam.beta2) * gk * gk;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      data[k] -= lr * mhat / (std::sqrt(vhat) + adam.eps);
    }
  }
  auto lt = state.params.log_tau.mutable_data();
  lt[0] = std::clamp(lt[0], std::log(kTauMin), std::log(kTauMax));
}

inline void check_cache_compat(const TrainConfig& config, const EmbeddingCache& cache) {
  if (cache.d_img != config.adaptor.d_img || cache.d_txt != config.adaptor.d_txt) {
    throw ConfigError("cache dims (d_img=" + std::to_string(cache.d_img) + ", d_txt=" + std::to_string(cache.d_txt) +
                      ") do not match adaptor config (d_img=" + std::to_string(config.adaptor.d_img) +
                      ", d_txt=" + std::to_string(config.adaptor.d_txt) + ")");
  }
}

/// Contrastive loss of one batch: fused all-pairs similarity, then the
/// alpha-weighted symmetric InfoNCE with tau = exp(log_tau).
inline LossBreakdown batch_loss(const AdaptorParams& params, const PairedBatch& batch, double alpha) {
  Tensor s = pairwise_similarity(batch.img, batch.txt, params);
  return total_loss(s, exp(params.log_tau), alpha);
}

inline double validation_loss(const AdaptorParams& params, const EmbeddingCache& val, const TrainConfig& config) {
  NoGradGuard guard;
  const auto bs = std::min(config.batch_size, val.n_samples);
  double total = 0.0;
  const auto batches = sample_batches(val, bs, config.seed, 0);
  for (const auto& b : batches) total += batch_loss(params, b, config.alpha).total;
  return total / static_cast<double>(batches.size());
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs epochs state.epoch .. config.epochs-1, mutating `state`. One metrics
/// record per epoch.
inline std::vector<EpochMetrics> train_epochs(TrainState& state, const TrainConfig& config,
                                              const EmbeddingCache& train, const EmbeddingCache* val = nullptr,
                                              bool deterministic = true, const EpochCallback& on_epoch = {}) {
  config.validate();
  check_cache_compat(config, train);
  if (val) check_cache_compat(config, *val);
  validate_batch_size(config.batch_size, train.n_samples);

  std::vector<EpochMetrics> log;
  while (state.epoch < config.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics em;
    em.epoch = state.epoch;
    const auto batches = sample_batches(train, config.batch_size, state.seed, state.epoch);
    for (const auto& batch : batches) {
      state.params.zero_grad();
      auto loss = batch_loss(state.params, batch, config.alpha);
      backward(loss.total_tensor);
      auto grads = collect_grads(state.params);
      if (config.clip_grad_norm) clip_global_norm(grads, *config.clip_grad_norm);
      adam_step(state, grads, config.adam, config.lr);
      em.loss += loss.total;
      em.l_i2t += loss.l_i2t;
      em.l_t2i += loss.l_t2i;
    }
    state.params.zero_grad();
    const double nb = static_cast<double>(batches.size());
    em.loss /= nb;
    em.l_i2t /= nb;
    em.l_t2i /= nb;
    em.tau = state.params.tau();
    em.step = state.step;
    if (val && val->n_samples >= 2) em.val_loss = validation_loss(state.params, *val, config);
    state.epoch += 1;
    if (!deterministic) {
      em.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    log.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return log;
}

struct PretrainResult {
  TrainState state;
  std::vector<EpochMetrics> log;
};

/// Fresh pre-training run over a train-split cache.
inline PretrainResult pretrain(const TrainConfig& config, const EmbeddingCache& cache,
                               const EmbeddingCache* val = nullptr, bool deterministic = true,
                               const EpochCallback& on_epoch = {}) {
  config.validate();
  check_cache_compat(config, cache);
  if (cache.split != Split::train) {
    throw ConfigError(std::string("pretrain expects a train-split cache, got ") + to_string(cache.split));
  }
  PretrainResult r{init_train_state(config), {}};
  r.log = train_epochs(r.state, config, cache, val, deterministic, on_epoch);
  return r;
}

/// CRC-32 over every parameter value, in canonical order.
inline std::uint32_t parameter_checksum(const AdaptorParams& params) {
  io::Writer w;
  for (const auto& t : params.tensors())
    for (double v : t.data()) w.put<double>(v);
  return io::crc32(w.bytes());
}

// ---------------------------------------------------------------------------
// ADPK checkpoint
//
//   magic "ADPK", version u32 = 1
//   string  config JSON (u32 length + bytes)
//   u64 step, u64 epoch, u64 seed
//   u32 tensor count, then per tensor:
//       string name, u32 rows, u32 cols,
//       f64[rows*cols] values, f64[...] first moment, f64[...] second moment
//   string  metrics history (JSON lines)
//   u32     CRC-32 of every preceding byte

struct Checkpoint {
  TrainConfig config;
  TrainState state;
  std::vector<EpochMetrics> metrics;
};

inline constexpr char kCheckpointMagic[4] = {'A', 'D', 'P', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  io::Writer w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4});
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(to_json(ck.config).dump());
  w.put<std::uint64_t>(ck.state.step);
  w.put<std::uint64_t>(ck.state.epoch);
  w.put<std::uint64_t>(ck.state.seed);
  const auto named = ck.state.params.named_tensors();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, t] = named[i];
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.cols()));
    for (double v : t.data()) w.put<double>(v);
    for (double v : ck.state.m[i]) w.put<double>(v);
    for (double v : ck.state.v[i]) w.put<double>(v);
  }
  w.put_string(metrics_jsonl(ck.metrics));
  const auto crc = io::crc32(w.bytes());
  w.put<std::uint32_t>(crc);
  return w.take();
}

/// Parses and fully validates before returning; nothing is mutated on error.
inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  detail::check_magic(r, kCheckpointMagic, "ADPK");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw ParseError(ParseErrorKind::version_mismatch,
                     "ADPK version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < 12) throw ParseError(ParseErrorKind::truncated, "ADPK file too short for footer");
  io::Reader footer(bytes.last(4));
  if (io::crc32(bytes.first(bytes.size() - 4)) != footer.get<std::uint32_t>("crc")) {
    throw ParseError(ParseErrorKind::checksum_mismatch, "ADPK checksum does not match contents");
  }
  io::Reader body(bytes.first(bytes.size() - 4));
  body.get_bytes(8, "header");

  Checkpoint ck;
  try {
    ck.config = train_config_from_json(nlohmann::json::parse(body.get_string("config")));
    ck.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::invalid_payload, std::string("config JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(ParseErrorKind::invalid_payload, std::string("config: ") + e.what());
  }
  ck.state.step = body.get<std::uint64_t>("step");
  ck.state.epoch = body.get<std::uint64_t>("epoch");
  ck.state.seed = body.get<std::uint64_t>("seed");

  // The stored tensors must match the layout implied by the config exactly.
  ck.state.params = init_params(ck.config.adaptor, 0);
  auto named = ck.state.params.named_tensors();
  const auto count = body.get<std::uint32_t>("tensor count");
  if (count != named.size()) {
    throw ParseError(ParseErrorKind::invalid_payload, "tensor count " + std::to_string(count) +
                                                          " does not match config (" +
                                                          std::to_string(named.size()) + ")");
  }
  for (auto& [name, t] : named) {
    const auto stored = body.get_string("tensor name", 256);
    const auto rows = body.get<std::uint32_t>("rows");
    const auto cols = body.get<std::uint32_t>("cols");
    if (stored != name || rows != t.rows() || cols != t.cols()) {
      throw ParseError(ParseErrorKind::invalid_payload, "tensor '" + stored + "' does not match expected '" + name +
                                                            "' " + shape_str(t.shape()));
    }
    auto data = t.mutable_data();
    for (auto& x : data) x = body.get<double>("tensor values");
    auto& m = ck.state.m.emplace_back(t.numel());
    for (auto& x : m) x = body.get<double>("first moment");
    auto& v = ck.state.v.emplace_back(t.numel());
    for (auto& x : v) x = body.get<double>("second moment");
    auto finite = [](double x) { return std::isfinite(x); };
    if (!std::all_of(data.begin(), data.end(), finite) || !std::all_of(m.begin(), m.end(), finite) ||
        !std::all_of(v.begin(), v.end(), finite)) {
      throw ParseError(ParseErrorKind::invalid_payload, "non-finite value in tensor '" + name + "'");
    }
  }
  const auto lines = body.get_string("metrics");
  try {
    std::istringstream in(lines);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) ck.metrics.push_back(EpochMetrics::from_json(nlohmann::json::parse(line)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::invalid_payload, std::string("metrics history: ") + e.what());
  }
  if (body.remaining() != 0) throw ParseError(ParseErrorKind::invalid_payload, "trailing bytes before footer");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace adaptor
