#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "adaptor/adaptor_net.hpp"
#include "adaptor/objective.hpp"
#include "support/gradcheck.hpp"

using namespace adaptor;
using testing_support::gradcheck;
using testing_support::random_tensor;

namespace {

AdaptorConfig small_config(std::size_t d_img = 5, std::size_t d_txt = 3) {
  AdaptorConfig c;
  c.d_img = d_img;
  c.d_txt = d_txt;
  c.d_shared = 8;
  c.n_heads = 2;
  c.d_ffn = 6;
  return c;
}

TokenBatch batch(std::size_t count, std::size_t tokens, std::size_t d, std::mt19937_64& rng) {
  return {random_tensor({count * tokens, d}, rng, -1, 1, false), count, tokens};
}

// Attention assembled from primitive ops, one (group, head) slice at a time.
Tensor reference_attention(const Tensor& q, const Tensor& k, const Tensor& v, AttentionLayout lay) {
  const auto d = q.cols(), dh = d / lay.heads;
  std::vector<Tensor> rows;
  Tensor out;
  for (std::size_t g = 0; g < lay.groups; ++g) {
    std::vector<std::size_t> qi, ki;
    for (std::size_t i = 0; i < lay.q_len; ++i) qi.push_back(g * lay.q_len + i);
    for (std::size_t j = 0; j < lay.kv_len; ++j) ki.push_back(g * lay.kv_len + j);
    Tensor heads_out;
    for (std::size_t h = 0; h < lay.heads; ++h) {
      // column selector d x dh
      auto sel = Tensor::zeros({d, dh});
      for (std::size_t c = 0; c < dh; ++c) sel.mutable_data()[(h * dh + c) * dh + c] = 1.0;
      auto qh = matmul(gather_rows(q, qi), sel);
      auto kh = matmul(gather_rows(k, ki), sel);
      auto vh = matmul(gather_rows(v, ki), sel);
      auto p = softmax(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh))), 1);
      auto o = matmul(matmul(p, vh), transpose(sel));  // back to d columns
      heads_out = heads_out.defined() ? add(heads_out, o) : o;
    }
    rows.push_back(heads_out);
  }
  // stack groups
  std::vector<double> all;
  for (const auto& r : rows) all.insert(all.end(), r.data().begin(), r.data().end());
  if (rows.size() == 1) return rows[0];
  // differentiable stacking via gather on a block-diagonal sum
  Tensor stacked;
  const auto per = lay.q_len;
  for (std::size_t g = 0; g < rows.size(); ++g) {
    auto place = Tensor::zeros({rows.size() * per, per});
    for (std::size_t i = 0; i < per; ++i) place.mutable_data()[(g * per + i) * per + i] = 1.0;
    auto part = matmul(place, rows[g]);
    stacked = stacked.defined() ? add(stacked, part) : part;
  }
  return stacked;
}

}  // namespace

TEST(AdaptorConfig, RejectsIndivisibleHeads) {
  auto c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(init_params(c, 0), ConfigError);
}

TEST(InitParams, DeterministicInSeed) {
  auto a = init_params(small_config(), 7);
  auto b = init_params(small_config(), 7);
  auto c = init_params(small_config(), 8);
  auto ta = a.tensors(), tb = b.tensors(), tc = c.tensors();
  bool differs = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    ASSERT_TRUE(std::equal(ta[i].data().begin(), ta[i].data().end(), tb[i].data().begin()));
    differs = differs || !std::equal(ta[i].data().begin(), ta[i].data().end(), tc[i].data().begin());
  }
  EXPECT_TRUE(differs);
}

TEST(InitParams, ConventionsAndGlorotBound) {
  auto p = init_params(small_config(), 1);
  EXPECT_NEAR(p.tau(), 0.07, 1e-15);
  for (const auto& [name, t] : p.named_tensors()) {
    if (name.ends_with(".gain")) {
      for (double v : t.data()) EXPECT_EQ(v, 1.0) << name;
    } else if (name.ends_with(".bias")) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
    } else if (name.ends_with(".weight")) {
      const double bound = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
      for (double v : t.data()) EXPECT_LE(std::abs(v), bound) << name;
    }
  }
}

TEST(ParamCount, MatchesEnumeration) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 20), heads(1, 4), layers(1, 3);
  for (int i = 0; i < 20; ++i) {
    AdaptorConfig c;
    c.d_img = dim(rng);
    c.d_txt = dim(rng);
    c.n_heads = heads(rng);
    c.d_shared = c.n_heads * dim(rng);
    c.d_ffn = dim(rng);
    c.n_layers = layers(rng);
    c.share_branch_weights = i % 3 != 0;
    EXPECT_EQ(param_count(c), init_params(c, 0).scalar_count());
  }
}

TEST(ParamCount, BaseCaseAndFfnDelta) {
  AdaptorConfig c = small_config();
  c.n_layers = 0;
  EXPECT_EQ(param_count(c), (c.d_img + 1) * c.d_shared + (c.d_txt + 1) * c.d_shared + 1);
  c.n_layers = 2;
  const auto before = param_count(c);
  const std::size_t delta = 5;
  c.d_ffn += delta;
  EXPECT_EQ(param_count(c) - before, 2 * c.n_layers * c.d_shared * delta + c.n_layers * delta);
}

TEST(Attention, MatchesPrimitiveReference) {
  std::mt19937_64 rng(5);
  AttentionLayout lay{2, 3, 4, 2};
  auto q = random_tensor({6, 8}, rng);
  auto k = random_tensor({8, 8}, rng);
  auto v = random_tensor({8, 8}, rng);
  auto fused = multi_head_attention(q, k, v, lay);
  auto ref = reference_attention(q, k, v, lay);
  ASSERT_EQ(fused.shape(), ref.shape());
  for (std::size_t i = 0; i < fused.numel(); ++i) EXPECT_NEAR(fused.data()[i], ref.data()[i], 1e-12);

  auto w = random_tensor({6, 8}, rng, -1, 1, false);
  backward(sum(mul(fused, w)));
  std::vector<std::vector<double>> g_fused;
  for (auto* t : {&q, &k, &v}) {
    g_fused.emplace_back(t->grad().begin(), t->grad().end());
    t->zero_grad();
  }
  backward(sum(mul(reference_attention(q, k, v, lay), w)));
  std::size_t idx = 0;
  for (auto* t : {&q, &k, &v}) {
    for (std::size_t i = 0; i < t->numel(); ++i) EXPECT_NEAR(g_fused[idx][i], t->grad()[i], 1e-12);
    ++idx;
  }
}

TEST(Attention, RowsSumToOne) {
  std::mt19937_64 rng(9);
  AttentionTrace trace;
  AttentionLayout lay{3, 2, 5, 4};
  multi_head_attention(random_tensor({6, 8}, rng, -3, 3), random_tensor({15, 8}, rng, -3, 3),
                       random_tensor({15, 8}, rng), lay, &trace);
  ASSERT_EQ(trace.maps.size(), 1u);
  const auto& m = trace.maps[0];
  for (std::size_t r = 0; r < m.size() / 5; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < 5; ++j) total += m[r * 5 + j];
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Attention, Gradcheck) {
  std::mt19937_64 rng(2);
  AttentionLayout lay{2, 2, 3, 2};
  auto q = random_tensor({4, 4}, rng);
  auto k = random_tensor({6, 4}, rng);
  auto v = random_tensor({6, 4}, rng);
  auto w = random_tensor({4, 4}, rng, -1, 1, false);
  EXPECT_TRUE(gradcheck([&] { return sum(mul(multi_head_attention(q, k, v, lay), w)); }, {q, k, v}).ok());
}

TEST(CrossAttentionBlock, SingleKeyGivesUnitWeights) {
  std::mt19937_64 rng(3);
  auto p = init_params(small_config(), 0);
  AttentionTrace trace;
  cross_attention_block(random_tensor({4, 8}, rng), random_tensor({1, 8}, rng), p.blocks[0], 2, 1e-5, &trace);
  ASSERT_EQ(trace.maps.size(), 1u);
  for (double w : trace.maps[0]) EXPECT_EQ(w, 1.0);
}

TEST(CrossAttentionBlock, SingleKeyShortcutMatchesGeneralPath) {
  std::mt19937_64 rng(4);
  auto p = init_params(small_config(), 0);
  auto q = random_tensor({3, 8}, rng);
  auto kv = random_tensor({1, 8}, rng);
  auto fast = cross_attention_block(q, kv, p.blocks[0], 2);
  // same block through the general attention kernel
  const auto& b = p.blocks[0];
  auto qn = layer_norm(q, b.attn_norm.gain, b.attn_norm.bias);
  auto kvn = layer_norm(kv, b.attn_norm.gain, b.attn_norm.bias);
  auto att = multi_head_attention(b.query(qn), b.key(kvn), b.value(kvn), {1, 3, 1, 2});
  auto y = add(q, b.output(att));
  auto slow = add(y, b.ffn_out(gelu(b.ffn_in(layer_norm(y, b.ffn_norm.gain, b.ffn_norm.bias)))));
  for (std::size_t i = 0; i < fast.numel(); ++i) EXPECT_NEAR(fast.data()[i], slow.data()[i], 1e-12);
}

TEST(CrossAttentionBlock, ZeroWeightsGiveResidualIdentity) {
  std::mt19937_64 rng(6);
  auto p = init_params(small_config(), 0);
  auto& b = p.blocks[0];
  for (auto* l : {&b.query, &b.key, &b.value, &b.output, &b.ffn_in, &b.ffn_out}) {
    std::fill(l->weight.mutable_data().begin(), l->weight.mutable_data().end(), 0.0);
  }
  auto q = random_tensor({4, 8}, rng);
  auto out = cross_attention_block(q, random_tensor({6, 8}, rng), b, {2, 2, 3, 2});
  for (std::size_t i = 0; i < q.numel(); ++i) EXPECT_EQ(out.data()[i], q.data()[i]);
}

TEST(CrossAttentionBlock, WidthMismatch) {
  std::mt19937_64 rng(6);
  auto p = init_params(small_config(), 0);
  EXPECT_THROW(cross_attention_block(random_tensor({2, 7}, rng), random_tensor({2, 8}, rng), p.blocks[0], 2),
               DimensionError);
}

TEST(AdaptorForward, OutputsAreUnitNorm) {
  std::mt19937_64 rng(8);
  auto p = init_params(small_config(), 0);
  for (std::size_t ti : {1, 3}) {
    for (std::size_t tt : {1, 2}) {
      auto out = adaptor_forward(batch(4, ti, 5, rng), batch(4, tt, 3, rng), p);
      ASSERT_EQ(out.image.shape(), (Shape{4, 8}));
      ASSERT_EQ(out.text.shape(), (Shape{4, 8}));
      for (const auto* t : {&out.image, &out.text}) {
        for (std::size_t i = 0; i < 4; ++i) {
          double n2 = 0;
          for (std::size_t c = 0; c < 8; ++c) n2 += t->at(i, c) * t->at(i, c);
          EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(AdaptorForward, SwappingInputsSwapsOutputs) {
  std::mt19937_64 rng(12);
  auto p = init_params(small_config(4, 4), 0);
  p.text_proj = {p.image_proj.weight, p.image_proj.bias};
  auto a = batch(3, 2, 4, rng), b = batch(3, 2, 4, rng);
  auto ab = adaptor_forward(a, b, p);
  auto ba = adaptor_forward(b, a, p);
  for (std::size_t i = 0; i < ab.image.numel(); ++i) {
    EXPECT_EQ(ab.image.data()[i], ba.text.data()[i]);
    EXPECT_EQ(ab.text.data()[i], ba.image.data()[i]);
  }
}

TEST(AdaptorForward, ModalityAndDimensionChecks) {
  std::mt19937_64 rng(1);
  auto p = init_params(small_config(), 0);
  ModalEmbedding img{random_tensor({1, 5}, rng), Modality::image};
  ModalEmbedding txt{random_tensor({1, 3}, rng), Modality::text};
  EXPECT_NO_THROW(adaptor_forward(img, txt, p));
  EXPECT_THROW(adaptor_forward(txt, img, p), DimensionError);
  ModalEmbedding wide{random_tensor({1, 6}, rng), Modality::image};
  EXPECT_THROW(adaptor_forward(wide, txt, p), DimensionError);
}

TEST(AdaptorForward, PreNormResidualIdentity) {
  std::mt19937_64 rng(13);
  auto p = init_params(small_config(), 0);
  for (auto& b : p.blocks) {
    for (auto* l : {&b.query, &b.key, &b.value, &b.output, &b.ffn_in, &b.ffn_out}) {
      std::fill(l->weight.mutable_data().begin(), l->weight.mutable_data().end(), 0.0);
    }
  }
  auto img = batch(3, 2, 5, rng), txt = batch(3, 1, 3, rng);
  auto out = adaptor_forward(img, txt, p);
  auto expect_img = l2_normalize_rows(segment_mean(p.image_proj(img.tokens), 2));
  auto expect_txt = l2_normalize_rows(p.text_proj(txt.tokens));
  for (std::size_t i = 0; i < out.image.numel(); ++i) {
    EXPECT_NEAR(out.image.data()[i], expect_img.data()[i], 1e-15);
    EXPECT_NEAR(out.text.data()[i], expect_txt.data()[i], 1e-15);
  }
}

TEST(AdaptorForward, SharedWeightsReachBothBranches) {
  std::mt19937_64 rng(14);
  auto p = init_params(small_config(), 0);
  auto img = batch(2, 1, 5, rng), txt = batch(2, 1, 3, rng);
  auto before = adaptor_forward(img, txt, p);
  auto bumped = p.clone();
  bumped.blocks[1].ffn_out.weight.mutable_data()[0] += 0.5;
  auto after = adaptor_forward(img, txt, bumped);
  auto changed = [](const Tensor& a, const Tensor& b) {
    return !std::equal(a.data().begin(), a.data().end(), b.data().begin());
  };
  EXPECT_TRUE(changed(before.image, after.image));
  EXPECT_TRUE(changed(before.text, after.text));
}

TEST(AdaptorForward, UnsharedTextBlocksLeaveImageBranchLayerOneInputs) {
  std::mt19937_64 rng(15);
  auto c = small_config();
  c.share_branch_weights = false;
  auto p = init_params(c, 0);
  ASSERT_EQ(p.text_blocks.size(), c.n_layers);
  auto img = batch(2, 1, 5, rng), txt = batch(2, 1, 3, rng);
  auto before = adaptor_forward(img, txt, p);
  auto bumped = p.clone();
  // the last text block only feeds the text output
  bumped.text_blocks.back().ffn_out.bias.mutable_data()[0] += 0.5;
  auto after = adaptor_forward(img, txt, bumped);
  EXPECT_TRUE(std::equal(before.image.data().begin(), before.image.data().end(), after.image.data().begin()));
  EXPECT_FALSE(std::equal(before.text.data().begin(), before.text.data().end(), after.text.data().begin()));
}

TEST(PairwiseSimilarity, MatchesPerPairForward) {
  std::mt19937_64 rng(16);
  auto p = init_params(small_config(), 3);
  const std::size_t n = 3;
  auto img = batch(n, 2, 5, rng), txt = batch(n, 3, 3, rng);
  auto s = pairwise_similarity(img, txt, p);
  ASSERT_EQ(s.shape(), (Shape{n, n}));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      auto xi = gather_rows(img.tokens, {2 * i, 2 * i + 1});
      auto tj = gather_rows(txt.tokens, {3 * j, 3 * j + 1, 3 * j + 2});
      auto out = adaptor_forward(TokenBatch{xi, 1, 2}, TokenBatch{tj, 1, 3}, p);
      double dot = 0;
      for (std::size_t c = 0; c < 8; ++c) dot += out.image.at(0, c) * out.text.at(0, c);
      EXPECT_NEAR(s.at(i, j), dot, 1e-12);
    }
  }
}

TEST(ImageOnly, SingleTokenUnitAttentionAndDeterminism) {
  std::mt19937_64 rng(17);
  auto p = init_params(small_config(), 0);
  ModalEmbedding img{random_tensor({1, 5}, rng), Modality::image};
  AttentionTrace trace;
  auto a = adaptor_forward_image_only(img, p, &trace);
  auto b = adaptor_forward_image_only(img, p);
  EXPECT_EQ(trace.maps.size(), p.config.n_layers);
  for (const auto& m : trace.maps)
    for (double w : m) EXPECT_EQ(w, 1.0);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(ImageOnly, DiffersFromProjectionOnlyAblation) {
  std::mt19937_64 rng(18);
  auto p = init_params(small_config(), 0);
  auto img = batch(2, 3, 5, rng);
  auto full = adaptor_forward_image_only(img, p);
  auto ablation = l2_normalize_rows(segment_mean(p.image_proj(img.tokens), 3));
  double diff = 0;
  for (std::size_t i = 0; i < full.numel(); ++i) diff = std::max(diff, std::abs(full.data()[i] - ablation.data()[i]));
  EXPECT_GT(diff, 1e-3);
}

TEST(AdaptorGradients, ScalarOfImageOutputWrtImageProjection) {
  std::mt19937_64 rng(19);
  auto p = init_params(small_config(), 1);
  ModalEmbedding img{random_tensor({2, 5}, rng, -1, 1, false), Modality::image};
  ModalEmbedding txt{random_tensor({3, 3}, rng, -1, 1, false), Modality::text};
  auto w = random_tensor({1, 8}, rng, -1, 1, false);
  auto f = [&] { return sum(mul(adaptor_forward(img, txt, p).first, w)); };
  EXPECT_TRUE(gradcheck(f, {p.image_proj.weight, p.image_proj.bias}).ok());
}

TEST(AdaptorGradients, FullPipelineEveryParameterGroup) {
  std::mt19937_64 rng(20);
  auto p = init_params(small_config(), 2);
  auto img = batch(4, 1, 5, rng), txt = batch(4, 1, 3, rng);
  auto f = [&] { return total_loss(pairwise_similarity(img, txt, p), exp(p.log_tau), 0.75).total_tensor; };
  for (const auto& [name, t] : p.named_tensors()) {
    auto r = gradcheck(f, {t});
    EXPECT_TRUE(r.ok()) << name << " rel error " << r.max_rel_error << " at " << r.worst;
  }
}
