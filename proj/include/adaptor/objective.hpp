#pragma once

#include <string>

#include "adaptor/ops.hpp"

// Symmetric temperature-scaled contrastive objective over an n x n
// similarity matrix whose diagonal holds the matching pairs.
namespace adaptor {

inline constexpr double kDefaultAlpha = 0.75;

/// S = X_hat * T_hat^T for row-stacked embeddings.
inline Tensor similarity_matrix(const Tensor& image_emb, const Tensor& text_emb) {
  detail::require_rank2(image_emb, "similarity_matrix");
  detail::require_rank2(text_emb, "similarity_matrix");
  if (image_emb.shape() != text_emb.shape()) {
    throw DimensionError("similarity_matrix: embeddings must share shape, got " + shape_str(image_emb.shape()) +
                         " and " + shape_str(text_emb.shape()));
  }
  return matmul(image_emb, transpose(text_emb));
}

namespace detail {

inline void check_similarity(const Tensor& s, const Tensor& tau, const char* op) {
  if (!s.defined()) throw DimensionError(std::string(op) + ": empty batch");
  require_rank2(s, op);
  if (s.rows() != s.cols()) throw DimensionError(std::string(op) + ": similarity matrix must be square, got " + shape_str(s.shape()));
  if (tau.numel() != 1) throw DimensionError(std::string(op) + ": tau must be a scalar");
  if (!(tau.item() > 0.0)) throw DomainError(std::string(op) + ": tau must be positive, got " + std::to_string(tau.item()));
  require_finite(s, op);
}

}  // namespace detail

/// Image-to-text InfoNCE: each row of S is a softmax over the batch's texts,
///   -(1/n) sum_k log( exp(S[k][k]/tau) / sum_j exp(S[k][j]/tau) ).
inline Tensor info_nce_i2t(const Tensor& s, const Tensor& tau) {
  detail::check_similarity(s, tau, "info_nce_i2t");
  return scale(mean(diag(log_softmax(div_scalar(s, tau), 1))), -1.0);
}

/// Text-to-image InfoNCE: the denominator runs down each column of S.
/// Defined as info_nce_i2t(S^T), so the two agree bit-for-bit.
inline Tensor info_nce_t2i(const Tensor& s, const Tensor& tau) {
  detail::check_similarity(s, tau, "info_nce_t2i");
  return info_nce_i2t(transpose(s), tau);
}

inline Tensor info_nce_i2t(const Tensor& s, double tau) { return info_nce_i2t(s, Tensor::scalar(tau)); }
inline Tensor info_nce_t2i(const Tensor& s, double tau) { return info_nce_t2i(s, Tensor::scalar(tau)); }

struct LossBreakdown {
  Tensor total_tensor;  // differentiable handle for backward()
  double l_i2t = 0.0;
  double l_t2i = 0.0;
  double total = 0.0;
  double alpha = kDefaultAlpha;
  double tau = 0.0;
};

inline void validate_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ConfigError("alpha must lie in (0, 1), got " + std::to_string(alpha));
  }
}

/// alpha * L_i2t + (1 - alpha) * L_t2i.
inline LossBreakdown total_loss(const Tensor& s, const Tensor& tau, double alpha = kDefaultAlpha) {
  validate_alpha(alpha);
  Tensor i2t = info_nce_i2t(s, tau);
  Tensor t2i = info_nce_t2i(s, tau);
  Tensor total = add(scale(i2t, alpha), scale(t2i, 1.0 - alpha));
  return {total, i2t.item(), t2i.item(), total.item(), alpha, tau.item()};
}

inline LossBreakdown total_loss(const Tensor& s, double tau, double alpha = kDefaultAlpha) {
  return total_loss(s, Tensor::scalar(tau), alpha);
}

}  // namespace adaptor
