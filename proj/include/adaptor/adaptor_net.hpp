#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "adaptor/ops.hpp"

namespace adaptor {

enum class Modality { image, text };
enum class Pooling { mean };

struct AdaptorConfig {
  std::size_t d_img = 0;
  std::size_t d_txt = 0;
  std::size_t d_shared = 28;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 56;
  Pooling pooling = Pooling::mean;
  bool normalize_outputs = true;
  // false gives each branch its own block weights (ablation only)
  bool share_branch_weights = true;
  double ln_eps = 1e-5;

  void validate() const {
    if (d_img == 0 || d_txt == 0) throw ConfigError("adaptor: d_img and d_txt must be positive");
    if (d_shared == 0 || d_ffn == 0) throw ConfigError("adaptor: d_shared and d_ffn must be positive");
    if (n_layers == 0) throw ConfigError("adaptor: n_layers must be at least 1");
    if (n_heads == 0 || d_shared % n_heads != 0) {
      throw ConfigError("adaptor: d_shared (" + std::to_string(d_shared) + ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (!(ln_eps > 0.0)) throw ConfigError("adaptor: ln_eps must be positive");
  }

  bool operator==(const AdaptorConfig&) const = default;
};

inline constexpr double kTauMin = 0.01;
inline constexpr double kTauMax = 100.0;
inline constexpr double kTauInit = 0.07;

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

/// Weights of one pre-norm Transformer layer (attention + feedforward).
struct BlockParams {
  Linear query, key, value, output;
  Linear ffn_in, ffn_out;
  LayerNormParams attn_norm, ffn_norm;
};

using NamedTensor = std::pair<std::string, Tensor>;

struct AdaptorParams {
  AdaptorConfig config;
  Linear image_proj;
  Linear text_proj;
  std::vector<BlockParams> blocks;       // image branch; text branch too when shared
  std::vector<BlockParams> text_blocks;  // populated only when weights are unshared
  Tensor log_tau;                        // 1 x 1

  const BlockParams& image_block(std::size_t layer) const { return blocks[layer]; }
  const BlockParams& text_block(std::size_t layer) const {
    return config.share_branch_weights ? blocks[layer] : text_blocks[layer];
  }

  double tau() const { return std::exp(log_tau.item()); }

  /// Every trainable tensor in canonical order. The order is part of the
  /// checkpoint format.
  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    auto add_linear = [&](const std::string& prefix, const Linear& l) {
      out.emplace_back(prefix + ".weight", l.weight);
      out.emplace_back(prefix + ".bias", l.bias);
    };
    auto add_block = [&](const std::string& prefix, const BlockParams& b) {
      add_linear(prefix + ".query", b.query);
      add_linear(prefix + ".key", b.key);
      add_linear(prefix + ".value", b.value);
      add_linear(prefix + ".output", b.output);
      add_linear(prefix + ".ffn_in", b.ffn_in);
      add_linear(prefix + ".ffn_out", b.ffn_out);
      out.emplace_back(prefix + ".attn_norm.gain", b.attn_norm.gain);
      out.emplace_back(prefix + ".attn_norm.bias", b.attn_norm.bias);
      out.emplace_back(prefix + ".ffn_norm.gain", b.ffn_norm.gain);
      out.emplace_back(prefix + ".ffn_norm.bias", b.ffn_norm.bias);
    };
    add_linear("image_proj", image_proj);
    add_linear("text_proj", text_proj);
    for (std::size_t l = 0; l < blocks.size(); ++l) add_block("blocks." + std::to_string(l), blocks[l]);
    for (std::size_t l = 0; l < text_blocks.size(); ++l) add_block("text_blocks." + std::to_string(l), text_blocks[l]);
    out.emplace_back("log_tau", log_tau);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += t.numel();
    return n;
  }

  void zero_grad() const {
    for (auto t : tensors()) t.zero_grad();
  }

  /// Deep copy: the result shares no storage with *this.
  AdaptorParams clone() const {
    AdaptorParams copy = *this;
    auto cl = [](Linear& l) { l = {l.weight.clone(), l.bias.clone()}; };
    auto cb = [&](BlockParams& b) {
      for (auto* l : {&b.query, &b.key, &b.value, &b.output, &b.ffn_in, &b.ffn_out}) cl(*l);
      b.attn_norm = {b.attn_norm.gain.clone(), b.attn_norm.bias.clone()};
      b.ffn_norm = {b.ffn_norm.gain.clone(), b.ffn_norm.bias.clone()};
    };
    cl(copy.image_proj);
    cl(copy.text_proj);
    for (auto& b : copy.blocks) cb(b);
    for (auto& b : copy.text_blocks) cb(b);
    copy.log_tau = log_tau.clone();
    return copy;
  }
};

/// Trainable scalars for a configuration, by closed form:
///
///   projections  (d_img + 1) * d_shared + (d_txt + 1) * d_shared
///   per block    4 * (d_shared + 1) * d_shared          Q, K, V, output
///              + (d_shared + 1) * d_ffn + (d_ffn + 1) * d_shared   feedforward
///              + 4 * d_shared                           two layer norms
///   blocks       n_layers (shared) or 2 * n_layers (unshared)
///   temperature  1
inline std::size_t param_count(const AdaptorConfig& c) {
  const std::size_t ds = c.d_shared;
  const std::size_t projections = (c.d_img + 1) * ds + (c.d_txt + 1) * ds;
  const std::size_t block = 4 * (ds + 1) * ds + (ds + 1) * c.d_ffn + (c.d_ffn + 1) * ds + 4 * ds;
  const std::size_t branches = c.share_branch_weights ? 1 : 2;
  return projections + branches * c.n_layers * block + 1;
}

namespace detail {

inline Linear glorot_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(in * out);
  for (auto& v : w) v = dist(rng);
  return {Tensor::from_data({in, out}, std::move(w), true), Tensor::zeros({1, out}, true)};
}

inline BlockParams init_block(const AdaptorConfig& c, std::mt19937_64& rng) {
  const auto ds = c.d_shared;
  BlockParams b;
  b.query = glorot_linear(ds, ds, rng);
  b.key = glorot_linear(ds, ds, rng);
  b.value = glorot_linear(ds, ds, rng);
  b.output = glorot_linear(ds, ds, rng);
  b.ffn_in = glorot_linear(ds, c.d_ffn, rng);
  b.ffn_out = glorot_linear(c.d_ffn, ds, rng);
  b.attn_norm = {Tensor::full({1, ds}, 1.0, true), Tensor::zeros({1, ds}, true)};
  b.ffn_norm = {Tensor::full({1, ds}, 1.0, true), Tensor::zeros({1, ds}, true)};
  return b;
}

}  // namespace detail

/// Glorot-uniform weights, zero biases, unit layer-norm gains and
/// tau = 0.07. Deterministic in `seed`.
inline AdaptorParams init_params(const AdaptorConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  AdaptorParams p;
  p.config = config;
  p.image_proj = detail::glorot_linear(config.d_img, config.d_shared, rng);
  p.text_proj = detail::glorot_linear(config.d_txt, config.d_shared, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) p.blocks.push_back(detail::init_block(config, rng));
  if (!config.share_branch_weights) {
    for (std::size_t l = 0; l < config.n_layers; ++l) p.text_blocks.push_back(detail::init_block(config, rng));
  }
  p.log_tau = Tensor::scalar(std::log(kTauInit), true);
  return p;
}

// ---------------------------------------------------------------------------
// Attention

/// How a stacked token matrix splits into independent attention problems:
/// `groups` sequences, each with q_len query rows attending to kv_len rows.
struct AttentionLayout {
  std::size_t groups = 1;
  std::size_t q_len = 1;
  std::size_t kv_len = 1;
  std::size_t heads = 1;
};

/// Records softmax attention maps for inspection. One entry per block call,
/// laid out [group][head][query][key].
struct AttentionTrace {
  std::vector<std::vector<double>> maps;
};

/// Multi-head scaled dot-product attention over grouped rows.
/// q: (groups*q_len) x d, k and v: (groups*kv_len) x d.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, AttentionLayout lay,
                                   AttentionTrace* trace = nullptr) {
  detail::require_rank2(q, "attention");
  detail::require_rank2(k, "attention");
  detail::require_rank2(v, "attention");
  const auto d = q.cols();
  if (k.cols() != d || v.cols() != d) {
    throw DimensionError("attention: widths differ, q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  if (q.rows() != lay.groups * lay.q_len || k.rows() != lay.groups * lay.kv_len || v.rows() != k.rows()) {
    throw DimensionError("attention: row counts do not match the grouping");
  }
  if (lay.heads == 0 || d % lay.heads != 0) throw DimensionError("attention: width not divisible by heads");
  const auto G = lay.groups, Tq = lay.q_len, Tk = lay.kv_len, H = lay.heads, dh = d / H;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> probs(G * H * Tq * Tk);
  std::vector<double> out(G * Tq * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Tq; ++i) {
        double* p = probs.data() + ((g * H + h) * Tq + i) * Tk;
        const double* qrow = Q + (g * Tq + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Tk; ++j) {
          const double* krow = K + (g * Tk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
          p[j] = s * sc;
          mx = std::max(mx, p[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < Tk; ++j) {
          p[j] = std::exp(p[j] - mx);
          total += p[j];
        }
        double* orow = out.data() + (g * Tq + i) * d + h * dh;
        for (std::size_t j = 0; j < Tk; ++j) {
          p[j] /= total;
          const double* vrow = V + (g * Tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += p[j] * vrow[c];
        }
      }
    }
  }
  if (trace) trace->maps.push_back(probs);

  return detail::make_result(
      {G * Tq, d}, std::move(out), {q, k, v},
      [q, k, v, G, Tq, Tk, H, dh, d, sc, probs = std::move(probs)](detail::Node& self) {
        const double* dO = self.grad.data();
        const double* Q = q.data().data();
        const double* K = k.data().data();
        const double* V = v.data().data();
        auto* gq = q.requires_grad() ? q.node()->grad_buffer().data() : nullptr;
        auto* gk = k.requires_grad() ? k.node()->grad_buffer().data() : nullptr;
        auto* gv = v.requires_grad() ? v.node()->grad_buffer().data() : nullptr;
        std::vector<double> dp(Tk);
        for (std::size_t g = 0; g < G; ++g) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Tq; ++i) {
              const double* p = probs.data() + ((g * H + h) * Tq + i) * Tk;
              const double* dorow = dO + (g * Tq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < Tk; ++j) {
                const double* vrow = V + (g * Tk + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += dorow[c] * vrow[c];
                dp[j] = s;
                dot += p[j] * s;
                if (gv) {
                  double* gvrow = gv + (g * Tk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvrow[c] += p[j] * dorow[c];
                }
              }
              const double* qrow = Q + (g * Tq + i) * d + h * dh;
              for (std::size_t j = 0; j < Tk; ++j) {
                const double ds = p[j] * (dp[j] - dot) * sc;
                if (ds == 0.0) continue;
                const double* krow = K + (g * Tk + j) * d + h * dh;
                if (gq) {
                  double* gqrow = gq + (g * Tq + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqrow[c] += ds * krow[c];
                }
                if (gk) {
                  double* gkrow = gk + (g * Tk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkrow[c] += ds * qrow[c];
                }
              }
            }
          }
        }
      });
}

/// Pre-norm Transformer layer over grouped rows:
///   y   = q + Attn(LN1(q), LN1(kv))
///   out = y + FFN(LN2(y)),  FFN = Linear -> GELU -> Linear
inline Tensor cross_attention_block(const Tensor& q_tokens, const Tensor& kv_tokens, const BlockParams& block,
                                    AttentionLayout lay, double ln_eps = 1e-5, AttentionTrace* trace = nullptr) {
  detail::require_rank2(q_tokens, "cross_attention_block");
  detail::require_rank2(kv_tokens, "cross_attention_block");
  const auto ds = block.query.weight.rows();
  if (q_tokens.cols() != ds || kv_tokens.cols() != ds) {
    throw DimensionError("cross_attention_block: token widths " + std::to_string(q_tokens.cols()) + " and " +
                         std::to_string(kv_tokens.cols()) + " must both equal d_shared=" + std::to_string(ds));
  }
  if (q_tokens.rows() != lay.groups * lay.q_len || kv_tokens.rows() != lay.groups * lay.kv_len) {
    throw DimensionError("cross_attention_block: row counts do not match the grouping");
  }
  const auto& an = block.attn_norm;
  Tensor qn = layer_norm(q_tokens, an.gain, an.bias, ln_eps);
  Tensor kvn = &q_tokens == &kv_tokens ? qn : layer_norm(kv_tokens, an.gain, an.bias, ln_eps);

  Tensor attended;
  if (lay.kv_len == 1) {
    // A single key gets softmax weight exactly 1, so queries and keys cannot
    // influence the output and their projections are skipped.
    std::vector<std::size_t> idx(lay.groups * lay.q_len);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i / lay.q_len;
    attended = gather_rows(block.value(kvn), std::move(idx));
    if (trace) trace->maps.emplace_back(lay.groups * lay.heads * lay.q_len, 1.0);
  } else {
    attended = multi_head_attention(block.query(qn), block.key(kvn), block.value(kvn), lay, trace);
  }
  Tensor y = add(q_tokens, block.output(attended));
  Tensor hidden = gelu(block.ffn_in(layer_norm(y, block.ffn_norm.gain, block.ffn_norm.bias, ln_eps)));
  return add(y, block.ffn_out(hidden));
}

/// Single-sequence convenience overload.
inline Tensor cross_attention_block(const Tensor& q_tokens, const Tensor& kv_tokens, const BlockParams& block,
                                    std::size_t n_heads, double ln_eps = 1e-5, AttentionTrace* trace = nullptr) {
  return cross_attention_block(q_tokens, kv_tokens, block, {1, q_tokens.rows(), kv_tokens.rows(), n_heads}, ln_eps,
                               trace);
}

// ---------------------------------------------------------------------------
// Forward passes

/// Frozen-encoder output for one sample: tokens x d (tokens == 1 for a
/// global vector).
struct ModalEmbedding {
  Tensor tokens;
  Modality modality = Modality::image;
};

/// `count` samples stacked as (count * tokens_per_sample) x d.
struct TokenBatch {
  Tensor tokens;
  std::size_t count = 0;
  std::size_t tokens_per_sample = 1;

  static TokenBatch single(const ModalEmbedding& e) { return {e.tokens, 1, e.tokens.rows()}; }
};

struct AdaptorOutput {
  Tensor image;  // count x d_shared
  Tensor text;   // count x d_shared
};

namespace detail {

inline void check_batch(const TokenBatch& b, std::size_t width, const char* what) {
  require_rank2(b.tokens, what);
  if (b.count == 0 || b.tokens_per_sample == 0) throw DimensionError(std::string(what) + ": empty batch");
  if (b.tokens.rows() != b.count * b.tokens_per_sample) {
    throw DimensionError(std::string(what) + ": " + std::to_string(b.tokens.rows()) + " rows for " +
                         std::to_string(b.count) + " samples of " + std::to_string(b.tokens_per_sample) + " tokens");
  }
  if (b.tokens.cols() != width) {
    throw DimensionError(std::string(what) + ": embedding width " + std::to_string(b.tokens.cols()) +
                         " does not match configured " + std::to_string(width));
  }
}

inline Tensor pool_and_normalize(const Tensor& tokens, std::size_t per_sample, const AdaptorConfig& c) {
  Tensor pooled = segment_mean(tokens, per_sample);
  return c.normalize_outputs ? l2_normalize_rows(pooled) : pooled;
}

// Runs both branches over `groups` aligned (image, text) token groups that
// are already projected to d_shared.
inline AdaptorOutput run_branches(Tensor img, Tensor txt, std::size_t groups, std::size_t ti, std::size_t tt,
                                  const AdaptorParams& p, AttentionTrace* trace) {
  const auto& c = p.config;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Tensor img_next = cross_attention_block(img, txt, p.image_block(l), {groups, ti, tt, c.n_heads}, c.ln_eps, trace);
    Tensor txt_next = cross_attention_block(txt, img, p.text_block(l), {groups, tt, ti, c.n_heads}, c.ln_eps, trace);
    img = std::move(img_next);
    txt = std::move(txt_next);
  }
  return {pool_and_normalize(img, ti, c), pool_and_normalize(txt, tt, c)};
}

}  // namespace detail

/// Aligned forward: sample i of `img` is fused with sample i of `txt`.
/// Image branch queries text (Q=image, K=V=text); text branch the reverse.
inline AdaptorOutput adaptor_forward(const TokenBatch& img, const TokenBatch& txt, const AdaptorParams& p,
                                     AttentionTrace* trace = nullptr) {
  detail::check_batch(img, p.config.d_img, "adaptor_forward(image)");
  detail::check_batch(txt, p.config.d_txt, "adaptor_forward(text)");
  if (img.count != txt.count) throw DimensionError("adaptor_forward: image and text batch sizes differ");
  return detail::run_branches(p.image_proj(img.tokens), p.text_proj(txt.tokens), img.count, img.tokens_per_sample,
                              txt.tokens_per_sample, p, trace);
}

inline std::pair<Tensor, Tensor> adaptor_forward(const ModalEmbedding& img, const ModalEmbedding& txt,
                                                 const AdaptorParams& p, AttentionTrace* trace = nullptr) {
  if (img.modality != Modality::image || txt.modality != Modality::text) {
    throw DimensionError("adaptor_forward: expected (image, text) embeddings");
  }
  auto out = adaptor_forward(TokenBatch::single(img), TokenBatch::single(txt), p, trace);
  return {out.image, out.text};
}

/// Fused similarity for every (image i, text j) combination of a batch:
/// S[i][j] = <x_hat, t_hat> where both come from the Adaptor run on the pair
/// (i, j). Projections are computed once per sample, then expanded.
inline Tensor pairwise_similarity(const TokenBatch& img, const TokenBatch& txt, const AdaptorParams& p) {
  detail::check_batch(img, p.config.d_img, "pairwise_similarity(image)");
  detail::check_batch(txt, p.config.d_txt, "pairwise_similarity(text)");
  if (img.count != txt.count) throw DimensionError("pairwise_similarity: image and text batch sizes differ");
  const auto n = img.count, ti = img.tokens_per_sample, tt = txt.tokens_per_sample;
  Tensor pi = p.image_proj(img.tokens);
  Tensor pt = p.text_proj(txt.tokens);
  std::vector<std::size_t> img_idx, txt_idx;
  img_idx.reserve(n * n * ti);
  txt_idx.reserve(n * n * tt);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t t = 0; t < ti; ++t) img_idx.push_back(i * ti + t);
      for (std::size_t t = 0; t < tt; ++t) txt_idx.push_back(j * tt + t);
    }
  }
  auto out = detail::run_branches(gather_rows(pi, std::move(img_idx)), gather_rows(pt, std::move(txt_idx)), n * n, ti,
                                  tt, p, nullptr);
  return reshape(rowwise_dot(out.image, out.text), {n, n});
}

/// Text-free forward used downstream: every block runs with Q=K=V=image
/// tokens, reusing the image-branch weights.
inline Tensor adaptor_forward_image_only(const TokenBatch& img, const AdaptorParams& p,
                                         AttentionTrace* trace = nullptr) {
  detail::check_batch(img, p.config.d_img, "adaptor_forward_image_only");
  const auto& c = p.config;
  const auto ti = img.tokens_per_sample;
  Tensor x = p.image_proj(img.tokens);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    x = cross_attention_block(x, x, p.image_block(l), {img.count, ti, ti, c.n_heads}, c.ln_eps, trace);
  }
  return detail::pool_and_normalize(x, ti, c);
}

inline Tensor adaptor_forward_image_only(const ModalEmbedding& img, const AdaptorParams& p,
                                         AttentionTrace* trace = nullptr) {
  if (img.modality != Modality::image) throw DimensionError("adaptor_forward_image_only: expected an image embedding");
  return adaptor_forward_image_only(TokenBatch::single(img), p, trace);
}

}  // namespace adaptor
