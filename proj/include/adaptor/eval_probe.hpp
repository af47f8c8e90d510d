#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptor/trainer.hpp"

namespace adaptor {

// ---------------------------------------------------------------------------
// Retrieval

/// Fraction of rows i whose matching column i ranks in the top k of row i
/// of `s`. Columns scoring equal to the match count as ahead of it only when
/// their index is lower.
inline double recall_at_k_from_similarity(const Tensor& s, std::size_t k) {
  detail::require_rank2(s, "recall_at_k");
  const auto n = s.rows();
  if (s.cols() != n) throw DimensionError("recall_at_k: similarity matrix must be square, got " + shape_str(s.shape()));
  if (k < 1 || k > n) {
    throw ConfigError("recall_at_k: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  const auto d = s.data();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = d[i * n + i];
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = d[i * n + j];
      if (v > target || (v == target && j < i)) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// Recall@k for independently embedded images and texts (rows paired by
/// index), ranking by inner product.
inline double recall_at_k(const Tensor& image_emb, const Tensor& text_emb, std::size_t k) {
  NoGradGuard guard;
  return recall_at_k_from_similarity(similarity_matrix(image_emb, text_emb), k);
}

// ---------------------------------------------------------------------------
// AUROC

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied scores
/// share their average rank. Labels are 0 (negative) / 1 (positive).
inline double auroc(std::span<const double> scores, std::span<const std::uint32_t> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auroc: scores and labels differ in length");
  const auto n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) {
    if (l > 1) throw DomainError("auroc: labels must be 0 or 1");
    n_pos += l;
  }
  const auto n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DomainError("auroc: needs at least one positive and one negative");
  for (double s : scores)
    if (std::isnan(s)) throw NumericError("auroc: NaN score");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t)
      if (labels[order[t]] == 1) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// ---------------------------------------------------------------------------
// Separability

/// Leave-one-out nearest-centroid accuracy. Each sample is assigned to the
/// class with the closest (squared Euclidean) centroid, its own class's
/// centroid computed without it; ties go to the lower class index. A sample
/// that is alone in its class can only be matched against other classes.
inline double separability_score(const Tensor& features, std::span<const std::uint32_t> labels) {
  detail::require_rank2(features, "separability_score");
  const auto n = features.rows();
  const auto d = features.cols();
  if (labels.size() != n) throw DimensionError("separability_score: label count differs from feature rows");
  const std::size_t n_classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  std::vector<std::size_t> count(n_classes, 0);
  for (auto l : labels) ++count[l];
  if (std::count_if(count.begin(), count.end(), [](auto c) { return c > 0; }) < 2) {
    throw ConfigError("separability_score: needs at least 2 classes");
  }
  const auto x = features.data();
  std::vector<double> sums(n_classes * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) sums[labels[i] * d + k] += x[i * d + k];

  std::size_t correct = 0;
  std::vector<double> centroid(d);
  for (std::size_t i = 0; i < n; ++i) {
    std::optional<std::size_t> best;
    double best_dist = 0.0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      const bool own = c == labels[i];
      const std::size_t members = count[c] - (own ? 1 : 0);
      if (members == 0) continue;
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double s = sums[c * d + k] - (own ? x[i * d + k] : 0.0);
        const double diff = x[i * d + k] - s / static_cast<double>(members);
        dist += diff * diff;
      }
      if (!best || dist < best_dist) {
        best = c;
        best_dist = dist;
      }
    }
    if (best && *best == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Classification probe

/// Stratified, seeded subset of row indices: each class keeps
/// max(1, round(fraction * n_c)) of its samples. Result is sorted.
inline std::vector<std::size_t> stratified_subset(std::span<const std::uint32_t> labels, double fraction,
                                                  std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data_fraction must lie in (0, 1]");
  std::map<std::uint32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (auto& [cls, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size()))));
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct ProbeResult {
  double accuracy = 0.0;
  std::optional<double> auroc;  // two-class tasks only
  std::size_t train_samples = 0;
};

namespace detail {

inline Tensor select_rows(const Tensor& x, std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size() * x.cols());
  const auto d = x.data();
  for (auto i : idx) out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(i * x.cols()),
                                d.begin() + static_cast<std::ptrdiff_t>((i + 1) * x.cols()));
  return Tensor::from_data({idx.size(), x.cols()}, std::move(out));
}

inline Tensor one_hot(std::span<const std::uint32_t> labels, std::size_t classes) {
  auto t = Tensor::zeros({labels.size(), classes});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < labels.size(); ++i) d[i * classes + labels[i]] = 1.0;
  return t;
}

}  // namespace detail

/// Trains a classification head (linear -> ReLU -> linear, cross-entropy,
/// full-batch Adam) on fixed features and scores it on held-out features.
/// Features are detached, so nothing upstream can receive gradients.
inline ProbeResult linear_probe(const Tensor& train_x, std::span<const std::uint32_t> train_y, const Tensor& test_x,
                                std::span<const std::uint32_t> test_y, const ProbeConfig& config,
                                std::size_t hidden_dim) {
  config.validate();
  detail::require_rank2(train_x, "linear_probe");
  detail::require_rank2(test_x, "linear_probe");
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size()) {
    throw DimensionError("linear_probe: label count differs from feature rows");
  }
  if (train_x.cols() != test_x.cols()) throw DimensionError("linear_probe: train/test feature widths differ");
  if (hidden_dim == 0) throw ConfigError("linear_probe: hidden_dim must be positive");

  const auto subset = stratified_subset(train_y, config.data_fraction, config.seed);
  std::vector<std::uint32_t> y;
  for (auto i : subset) y.push_back(train_y[i]);
  if (std::all_of(y.begin(), y.end(), [&](auto l) { return l == y.front(); })) {
    throw ConfigError("linear_probe: training subset contains a single class");
  }
  const std::size_t classes =
      static_cast<std::size_t>(std::max(*std::max_element(train_y.begin(), train_y.end()),
                                        *std::max_element(test_y.begin(), test_y.end()))) + 1;
  const Tensor x = detail::select_rows(train_x.detach(), subset);
  const Tensor target = detail::one_hot(y, classes);

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  Linear l1 = detail::glorot_linear(x.cols(), hidden_dim, rng);
  Linear l2 = detail::glorot_linear(hidden_dim, classes, rng);
  std::vector<Tensor> params = {l1.weight, l1.bias, l2.weight, l2.bias};
  std::vector<std::vector<double>> m, v;
  for (const auto& p : params) {
    m.emplace_back(p.numel(), 0.0);
    v.emplace_back(p.numel(), 0.0);
  }
  const AdamSettings adam;
  const double inv_n = 1.0 / static_cast<double>(y.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (auto& p : params) p.zero_grad();
    Tensor logits = l2(relu(l1(x)));
    Tensor loss = scale(sum(mul(log_softmax(logits, 1), target)), -inv_n);
    backward(loss);
    const double t = static_cast<double>(epoch + 1);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto data = params[i].mutable_data();
      const auto g = params[i].grad();
      for (std::size_t k = 0; k < data.size(); ++k) {
        m[i][k] = adam.beta1 * m[i][k] + (1.0 - adam.beta1) * g[k];
        v[i][k] = adam.beta2 * v[i][k] + (1.0 - adam.beta2) * g[k] * g[k];
        const double mhat = m[i][k] / (1.0 - std::pow(adam.beta1, t));
        const double vhat = v[i][k] / (1.0 - std::pow(adam.beta2, t));
        data[k] -= config.lr * mhat / (std::sqrt(vhat) + adam.eps);
      }
    }
  }

  NoGradGuard guard;
  const Tensor probs = softmax(l2(relu(l1(test_x.detach()))), 1);
  const auto p = probs.data();
  std::size_t correct = 0;
  std::vector<double> pos_scores;
  for (std::size_t i = 0; i < test_y.size(); ++i) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (p[i * classes + c] > p[i * classes + arg]) arg = c;
    if (arg == test_y[i]) ++correct;
    if (classes == 2) pos_scores.push_back(p[i * classes + 1]);
  }
  ProbeResult r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test_y.size());
  r.train_samples = subset.size();
  if (classes == 2) {
    const bool both = std::any_of(test_y.begin(), test_y.end(), [](auto l) { return l == 0; }) &&
                      std::any_of(test_y.begin(), test_y.end(), [](auto l) { return l == 1; });
    if (both) r.auroc = auroc(pos_scores, test_y);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Frozen-adaptor evaluation

/// Image-side features from the frozen adaptor (no graph is recorded).
inline Tensor frozen_image_features(const AdaptorParams& params, const EmbeddingCache& cache) {
  NoGradGuard guard;
  return adaptor_forward_image_only(cache.all_images(), params).detach();
}

/// All-pairs similarity of a cache through the frozen adaptor.
inline Tensor frozen_similarity(const AdaptorParams& params, const EmbeddingCache& cache) {
  NoGradGuard guard;
  return pairwise_similarity(cache.all_images(), cache.all_texts(), params).detach();
}

struct EvalReport {
  std::map<std::size_t, double> recall_at_k;
  std::optional<double> probe_accuracy;
  std::optional<double> probe_auroc;
  std::optional<double> probe_accuracy_raw;  // same head on raw pooled embeddings
  std::optional<double> separability_before;
  std::optional<double> separability_after;
  std::size_t n_eval = 0;
  std::size_t probe_train_samples = 0;
  std::uint32_t checksum_before = 0;
  std::uint32_t checksum_after = 0;
  ProbeConfig probe;
  AdaptorConfig adaptor;

  bool frozen() const { return checksum_before == checksum_after; }

  nlohmann::json to_json() const {
    nlohmann::json r = nlohmann::json::object();
    for (const auto& [k, v] : recall_at_k) r[std::to_string(k)] = v;
    auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
    return {{"recall_at_k", r},
            {"probe_accuracy", opt(probe_accuracy)},
            {"probe_auroc", opt(probe_auroc)},
            {"probe_accuracy_raw", opt(probe_accuracy_raw)},
            {"separability_before", opt(separability_before)},
            {"separability_after", opt(separability_after)},
            {"n_eval", n_eval},
            {"probe_train_samples", probe_train_samples},
            {"adaptor_frozen", frozen()},
            {"parameter_crc32", checksum_after},
            {"config", {{"probe", adaptor::to_json(probe)}, {"adaptor", adaptor::to_json(adaptor)}}}};
  }
};

/// Evaluates frozen parameters on `eval_cache`. The probe head is trained on
/// `probe_train` when given; otherwise a stratified half of the evaluation
/// cache trains it and the other half scores it.
inline EvalReport evaluate(const AdaptorParams& params, const EmbeddingCache& eval_cache, const ProbeConfig& probe,
                           const EmbeddingCache* probe_train = nullptr) {
  probe.validate();
  if (eval_cache.d_img != params.config.d_img || eval_cache.d_txt != params.config.d_txt) {
    throw ConfigError("evaluate: cache dims do not match the adaptor");
  }
  EvalReport rep;
  rep.probe = probe;
  rep.adaptor = params.config;
  rep.n_eval = eval_cache.n_samples;
  rep.checksum_before = parameter_checksum(params);

  const Tensor s = frozen_similarity(params, eval_cache);
  for (std::size_t k : {1, 5, 10})
    if (k <= eval_cache.n_samples) rep.recall_at_k[k] = recall_at_k_from_similarity(s, k);

  if (eval_cache.labels && eval_cache.n_classes() >= 2) {
    const auto& labels = *eval_cache.labels;
    const Tensor raw = eval_cache.pooled_images();
    const Tensor feats = frozen_image_features(params, eval_cache);
    rep.separability_before = separability_score(raw, labels);
    rep.separability_after = separability_score(feats, labels);

    const std::size_t hidden = probe.hidden_dim ? probe.hidden_dim : params.config.d_shared;
    Tensor tr_feats, tr_raw, te_feats = feats, te_raw = raw;
    std::vector<std::uint32_t> tr_y, te_y = labels;
    if (probe_train) {
      if (!probe_train->labels) throw ConfigError("evaluate: probe training cache has no labels");
      if (probe_train->d_img != params.config.d_img) throw ConfigError("evaluate: probe training cache dims differ");
      tr_feats = frozen_image_features(params, *probe_train);
      tr_raw = probe_train->pooled_images();
      tr_y = *probe_train->labels;
    } else {
      auto train_idx = stratified_subset(labels, 0.5, probe.seed);
      std::vector<std::size_t> test_idx;
      for (std::size_t i = 0, t = 0; i < labels.size(); ++i) {
        if (t < train_idx.size() && train_idx[t] == i) {
          ++t;
        } else {
          test_idx.push_back(i);
        }
      }
      if (test_idx.empty()) throw ConfigError("evaluate: evaluation cache too small to hold out probe test samples");
      tr_feats = detail::select_rows(feats, train_idx);
      tr_raw = detail::select_rows(raw, train_idx);
      te_feats = detail::select_rows(feats, test_idx);
      te_raw = detail::select_rows(raw, test_idx);
      for (auto i : train_idx) tr_y.push_back(labels[i]);
      te_y.clear();
      for (auto i : test_idx) te_y.push_back(labels[i]);
    }
    const auto res = linear_probe(tr_feats, tr_y, te_feats, te_y, probe, hidden);
    rep.probe_accuracy = res.accuracy;
    rep.probe_auroc = res.auroc;
    rep.probe_train_samples = res.train_samples;
    rep.probe_accuracy_raw = linear_probe(tr_raw, tr_y, te_raw, te_y, probe, hidden).accuracy;
  }
  rep.checksum_after = parameter_checksum(params);
  if (!rep.frozen()) throw StateError("evaluate: adaptor parameters changed during evaluation");
  return rep;
}

}  // namespace adaptor
