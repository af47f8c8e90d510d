#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "adaptor/adaptor_net.hpp"
#include "adaptor/binary_io.hpp"

namespace adaptor {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// Paired frozen-encoder outputs. Sample i owns tokens_img rows of d_img
/// floats in `img` and tokens_txt rows of d_txt floats in `txt`.
struct EmbeddingCache {
  std::size_t n_samples = 0;
  std::uint32_t d_img = 0;
  std::uint32_t d_txt = 0;
  std::uint32_t tokens_img = 1;
  std::uint32_t tokens_txt = 1;
  std::vector<double> img;
  std::vector<double> txt;
  std::optional<std::vector<std::uint32_t>> labels;
  Split split = Split::train;

  std::size_t img_stride() const { return std::size_t{tokens_img} * d_img; }
  std::size_t txt_stride() const { return std::size_t{tokens_txt} * d_txt; }

  void validate() const {
    if (d_img == 0 || d_txt == 0 || tokens_img == 0 || tokens_txt == 0) {
      throw DimensionError("cache: dimensions and token counts must be positive");
    }
    if (img.size() != n_samples * img_stride() || txt.size() != n_samples * txt_stride()) {
      throw DimensionError("cache: image/text payloads do not hold n_samples pairs");
    }
    if (labels && labels->size() != n_samples) throw DimensionError("cache: label count differs from n_samples");
    for (double v : img)
      if (!std::isfinite(v)) throw NumericError("cache: non-finite image embedding value");
    for (double v : txt)
      if (!std::isfinite(v)) throw NumericError("cache: non-finite text embedding value");
  }

  TokenBatch image_batch(std::span<const std::size_t> idx) const {
    return gather(img, img_stride(), d_img, tokens_img, idx);
  }
  TokenBatch text_batch(std::span<const std::size_t> idx) const {
    return gather(txt, txt_stride(), d_txt, tokens_txt, idx);
  }
  TokenBatch all_images() const { return image_batch(all_indices()); }
  TokenBatch all_texts() const { return text_batch(all_indices()); }

  /// Token-averaged image embeddings, n x d_img.
  Tensor pooled_images() const {
    NoGradGuard guard;
    return segment_mean(all_images().tokens, tokens_img).detach();
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(n_samples);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }

  EmbeddingCache subset(std::span<const std::size_t> idx, Split new_split) const {
    EmbeddingCache out;
    out.n_samples = idx.size();
    out.d_img = d_img;
    out.d_txt = d_txt;
    out.tokens_img = tokens_img;
    out.tokens_txt = tokens_txt;
    out.split = new_split;
    if (labels) out.labels.emplace();
    for (auto i : idx) {
      if (i >= n_samples) throw DimensionError("cache subset: index out of range");
      out.img.insert(out.img.end(), img.begin() + static_cast<std::ptrdiff_t>(i * img_stride()),
                     img.begin() + static_cast<std::ptrdiff_t>((i + 1) * img_stride()));
      out.txt.insert(out.txt.end(), txt.begin() + static_cast<std::ptrdiff_t>(i * txt_stride()),
                     txt.begin() + static_cast<std::ptrdiff_t>((i + 1) * txt_stride()));
      if (labels) out.labels->push_back((*labels)[i]);
    }
    return out;
  }

  std::size_t n_classes() const {
    if (!labels || labels->empty()) return 0;
    return static_cast<std::size_t>(*std::max_element(labels->begin(), labels->end())) + 1;
  }

  bool operator==(const EmbeddingCache&) const = default;

 private:
  static TokenBatch gather(const std::vector<double>& src, std::size_t stride, std::size_t d, std::size_t tokens,
                           std::span<const std::size_t> idx) {
    if (idx.empty()) throw DimensionError("cache: empty index set");
    std::vector<double> out;
    out.reserve(idx.size() * stride);
    for (auto i : idx) {
      if ((i + 1) * stride > src.size()) throw DimensionError("cache: sample index out of range");
      out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(i * stride),
                 src.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
    }
    return {Tensor::from_data({idx.size() * tokens, d}, std::move(out)), idx.size(), tokens};
  }
};

// ---------------------------------------------------------------------------
// Synthetic paired embeddings

/// Generator for a desk-scale stand-in of two frozen encoders. A shared
/// latent z (class center + within-class spread) is mapped to each modality
/// by a fixed random full-rank linear map; the image side additionally
/// carries image-only nuisance variation that the text never sees.
struct SynthSpec {
  std::size_t n_samples = 512;
  std::size_t d_latent = 8;
  std::size_t d_img = 48;
  std::size_t d_txt = 32;
  std::size_t n_classes = 3;
  double noise_sigma = 0.05;   // per-coordinate observation noise, both modalities
  std::uint64_t seed = 0;
  double center_scale = 1.0;   // std of class centers in latent space
  double latent_sigma = 1.0;   // within-class latent spread
  std::size_t nuisance_dim = 8;
  double nuisance_sigma = 2.0; // image-only variation, unrelated to text
  std::uint32_t tokens_img = 1;
  std::uint32_t tokens_txt = 1;

  void validate() const {
    if (n_samples == 0) throw ConfigError("synth: n_samples must be positive");
    if (d_latent == 0) throw ConfigError("synth: d_latent must be positive");
    if (d_latent > std::min(d_img, d_txt)) {
      throw ConfigError("synth: d_latent (" + std::to_string(d_latent) + ") must not exceed min(d_img, d_txt) = " +
                        std::to_string(std::min(d_img, d_txt)));
    }
    if (n_classes == 0) throw ConfigError("synth: n_classes must be at least 1");
    if (!(noise_sigma >= 0.0) || !(center_scale >= 0.0) || !(latent_sigma >= 0.0) || !(nuisance_sigma >= 0.0)) {
      throw ConfigError("synth: noise_sigma, center_scale, latent_sigma and nuisance_sigma must be >= 0");
    }
    if (tokens_img == 0 || tokens_txt == 0) throw ConfigError("synth: token counts must be positive");
  }
};

namespace detail {

// rows x cols matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
inline std::vector<double> orthonormal_columns(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> m(rows * cols);
  for (auto& v : m) v = normal(rng);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t r = 0; r < rows; ++r) dot += m[r * cols + c] * m[r * cols + p];
      for (std::size_t r = 0; r < rows; ++r) m[r * cols + c] -= dot * m[r * cols + p];
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < rows; ++r) norm += m[r * cols + c] * m[r * cols + c];
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < rows; ++r) m[r * cols + c] /= norm;
  }
  return m;
}

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

/// Deterministic in spec.seed. Labels cycle 0..n_classes-1. All values are
/// exactly representable as f32 so the cache round-trips bit-for-bit.
inline EmbeddingCache gen_synthetic(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto L = spec.d_latent, Di = spec.d_img, Dt = spec.d_txt, Dn = spec.nuisance_dim;

  const auto A = detail::orthonormal_columns(Di, L, rng);
  const auto B = detail::orthonormal_columns(Dt, L, rng);
  std::vector<double> N(Di * Dn);
  for (auto& v : N) v = normal(rng) / std::sqrt(static_cast<double>(std::max<std::size_t>(Dn, 1)));
  std::vector<double> centers(spec.n_classes * L);
  for (auto& v : centers) v = spec.center_scale * normal(rng);

  EmbeddingCache cache;
  cache.n_samples = spec.n_samples;
  cache.d_img = static_cast<std::uint32_t>(Di);
  cache.d_txt = static_cast<std::uint32_t>(Dt);
  cache.tokens_img = spec.tokens_img;
  cache.tokens_txt = spec.tokens_txt;
  cache.labels.emplace();
  cache.img.reserve(spec.n_samples * spec.tokens_img * Di);
  cache.txt.reserve(spec.n_samples * spec.tokens_txt * Dt);

  std::vector<double> z(L), u(Dn);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const auto label = static_cast<std::uint32_t>(i % spec.n_classes);
    cache.labels->push_back(label);
    for (std::size_t k = 0; k < L; ++k) z[k] = centers[label * L + k] + spec.latent_sigma * normal(rng);
    for (auto& v : u) v = spec.nuisance_sigma * normal(rng);
    for (std::uint32_t t = 0; t < spec.tokens_img; ++t) {
      for (std::size_t r = 0; r < Di; ++r) {
        double v = 0.0;
        for (std::size_t k = 0; k < L; ++k) v += A[r * L + k] * z[k];
        for (std::size_t k = 0; k < Dn; ++k) v += N[r * Dn + k] * u[k];
        v += spec.noise_sigma * normal(rng);
        cache.img.push_back(detail::to_f32(v));
      }
    }
    for (std::uint32_t t = 0; t < spec.tokens_txt; ++t) {
      for (std::size_t r = 0; r < Dt; ++r) {
        double v = 0.0;
        for (std::size_t k = 0; k < L; ++k) v += B[r * L + k] * z[k];
        v += spec.noise_sigma * normal(rng);
        cache.txt.push_back(detail::to_f32(v));
      }
    }
  }
  return cache;
}

struct CacheSplits {
  EmbeddingCache train, val, test;
};

/// Seeded 80/10/10 partition; each part keeps source order.
inline CacheSplits split_cache(const EmbeddingCache& cache, std::uint64_t seed) {
  auto perm = cache.all_indices();
  std::mt19937_64 rng(seed ^ 0x5851f42d4c957f2dULL);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n = cache.n_samples;
  const auto n_train = n * 8 / 10, n_val = n / 10;
  auto part = [&](std::size_t lo, std::size_t hi, Split s) {
    std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi));
    std::sort(idx.begin(), idx.end());
    return cache.subset(idx, s);
  };
  return {part(0, n_train, Split::train), part(n_train, n_train + n_val, Split::val),
          part(n_train + n_val, n, Split::test)};
}

// ---------------------------------------------------------------------------
// ADPC binary format
//
//   offset  size  field
//        0     4  magic "ADPC"
//        4     4  version (u32) = 1
//        8     8  n_samples (u64)
//       16     4  d_img (u32)
//       20     4  d_txt (u32)
//       24     4  tokens_img (u32)
//       28     4  tokens_txt (u32)
//       32     1  has_labels (u8, 0 or 1)
//       33     1  split (u8: 0 train, 1 val, 2 test)
//       34     6  reserved, zero
//       40        image floats (f32), n * tokens_img * d_img
//                 text floats (f32), n * tokens_txt * d_txt
//                 labels (u32), n, when has_labels
//     end-4    4  CRC-32 of every preceding byte
//
// All integers little-endian.

inline constexpr char kCacheMagic[4] = {'A', 'D', 'P', 'C'};
inline constexpr std::uint32_t kCacheVersion = 1;
inline constexpr std::size_t kCacheHeaderSize = 40;

inline std::vector<std::uint8_t> encode_cache(const EmbeddingCache& cache) {
  if (cache.n_samples == 0) throw ContractError("write_cache: refusing to write an empty cache (n_samples = 0)");
  cache.validate();
  io::Writer w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kCacheMagic), 4});
  w.put<std::uint32_t>(kCacheVersion);
  w.put<std::uint64_t>(cache.n_samples);
  w.put<std::uint32_t>(cache.d_img);
  w.put<std::uint32_t>(cache.d_txt);
  w.put<std::uint32_t>(cache.tokens_img);
  w.put<std::uint32_t>(cache.tokens_txt);
  w.put<std::uint8_t>(cache.labels ? 1 : 0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(cache.split));
  w.put_zeros(6);
  for (double v : cache.img) w.put<float>(static_cast<float>(v));
  for (double v : cache.txt) w.put<float>(static_cast<float>(v));
  if (cache.labels)
    for (auto l : *cache.labels) w.put<std::uint32_t>(l);
  const auto crc = io::crc32(w.bytes());
  w.put<std::uint32_t>(crc);
  return w.take();
}

struct CacheHeader {
  std::uint32_t version = 0;
  std::uint64_t n_samples = 0;
  std::uint32_t d_img = 0, d_txt = 0, tokens_img = 0, tokens_txt = 0;
  bool has_labels = false;
  Split split = Split::train;
};

namespace detail {

inline void check_magic(io::Reader& r, const char (&magic)[4], const char* what) {
  if (r.remaining() < 4) throw ParseError(ParseErrorKind::truncated, std::string(what) + ": file shorter than magic");
  auto m = r.get_bytes(4, "magic");
  if (!std::equal(m.begin(), m.end(), reinterpret_cast<const std::uint8_t*>(magic))) {
    throw ParseError(ParseErrorKind::bad_magic, std::string(what) + ": unexpected magic bytes");
  }
}

// a*b (+c) without wraparound; nullopt on overflow.
inline std::optional<std::uint64_t> checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) return std::nullopt;
  return a * b;
}

}  // namespace detail

inline CacheHeader parse_cache_header(io::Reader& r) {
  detail::check_magic(r, kCacheMagic, "ADPC");
  CacheHeader h;
  h.version = r.get<std::uint32_t>("version");
  if (h.version != kCacheVersion) {
    throw ParseError(ParseErrorKind::version_mismatch, "ADPC version " + std::to_string(h.version) + ", expected " +
                                                           std::to_string(kCacheVersion));
  }
  h.n_samples = r.get<std::uint64_t>("n_samples");
  h.d_img = r.get<std::uint32_t>("d_img");
  h.d_txt = r.get<std::uint32_t>("d_txt");
  h.tokens_img = r.get<std::uint32_t>("tokens_img");
  h.tokens_txt = r.get<std::uint32_t>("tokens_txt");
  const auto has_labels = r.get<std::uint8_t>("has_labels");
  const auto split = r.get<std::uint8_t>("split");
  auto reserved = r.get_bytes(6, "reserved");
  if (has_labels > 1) throw ParseError(ParseErrorKind::invalid_header, "has_labels must be 0 or 1");
  if (split > 2) throw ParseError(ParseErrorKind::invalid_header, "unknown split code " + std::to_string(split));
  if (std::any_of(reserved.begin(), reserved.end(), [](auto b) { return b != 0; })) {
    throw ParseError(ParseErrorKind::invalid_header, "reserved header bytes are not zero");
  }
  if (h.n_samples == 0 || h.d_img == 0 || h.d_txt == 0 || h.tokens_img == 0 || h.tokens_txt == 0) {
    throw ParseError(ParseErrorKind::invalid_header, "zero sample count, dimension, or token count");
  }
  h.has_labels = has_labels == 1;
  h.split = static_cast<Split>(split);
  return h;
}

inline EmbeddingCache decode_cache(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  const auto h = parse_cache_header(r);

  auto img_n = detail::checked_mul(h.n_samples, std::uint64_t{h.tokens_img} * h.d_img);
  auto txt_n = detail::checked_mul(h.n_samples, std::uint64_t{h.tokens_txt} * h.d_txt);
  std::optional<std::uint64_t> payload;
  if (img_n && txt_n && *img_n < (1ULL << 60) && *txt_n < (1ULL << 60)) {
    payload = (*img_n + *txt_n) * 4 + (h.has_labels ? h.n_samples * 4 : 0);
  }
  if (!payload || *payload + 4 > r.remaining()) {
    throw ParseError(ParseErrorKind::truncated, "payload shorter than the header declares");
  }
  if (*payload + 4 < r.remaining()) throw ParseError(ParseErrorKind::invalid_payload, "trailing bytes after footer");

  const auto body = bytes.first(bytes.size() - 4);
  io::Reader footer(bytes.last(4));
  if (io::crc32(body) != footer.get<std::uint32_t>("crc")) {
    throw ParseError(ParseErrorKind::checksum_mismatch, "ADPC checksum does not match contents");
  }

  EmbeddingCache c;
  c.n_samples = h.n_samples;
  c.d_img = h.d_img;
  c.d_txt = h.d_txt;
  c.tokens_img = h.tokens_img;
  c.tokens_txt = h.tokens_txt;
  c.split = h.split;
  c.img.resize(*img_n);
  c.txt.resize(*txt_n);
  for (auto& v : c.img) v = r.get<float>("image payload");
  for (auto& v : c.txt) v = r.get<float>("text payload");
  if (h.has_labels) {
    c.labels.emplace(h.n_samples);
    for (auto& l : *c.labels) l = r.get<std::uint32_t>("labels");
  }
  for (const auto* vec : {&c.img, &c.txt}) {
    for (double v : *vec)
      if (!std::isfinite(v)) throw ParseError(ParseErrorKind::invalid_payload, "non-finite embedding value");
  }
  return c;
}

inline void write_cache(const EmbeddingCache& cache, const std::filesystem::path& path) {
  io::write_file(path, encode_cache(cache));
}

inline EmbeddingCache read_cache(const std::filesystem::path& path) { return decode_cache(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Plain-text import: one sample per line,
//   <id> <label|-> <image floats...> | <text floats...>
// Blank lines and lines starting with '#' are skipped.

inline EmbeddingCache parse_text_import(std::istream& in, Split split = Split::train) {
  EmbeddingCache c;
  c.split = split;
  std::vector<std::uint32_t> labels;
  bool any_label = false, any_missing = false;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw ParseError(ParseErrorKind::invalid_payload, "line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    auto bar = line.find('|');
    if (bar == std::string::npos) fail("missing '|' separator");
    std::istringstream left(line.substr(0, bar)), right(line.substr(bar + 1));
    std::string id, label;
    if (!(left >> id >> label)) fail("expected '<id> <label>' before image values");
    if (label == "-") {
      any_missing = true;
      labels.push_back(0);
    } else {
      try {
        std::size_t used = 0;
        auto v = std::stoul(label, &used);
        if (used != label.size() || v > std::numeric_limits<std::uint32_t>::max()) fail("bad label '" + label + "'");
        labels.push_back(static_cast<std::uint32_t>(v));
        any_label = true;
      } catch (const std::logic_error&) {
        fail("bad label '" + label + "'");
      }
    }
    auto read_floats = [&](std::istringstream& s, std::vector<double>& dst) {
      std::size_t count = 0;
      std::string tok;
      while (s >> tok) {
        try {
          std::size_t used = 0;
          double v = std::stod(tok, &used);
          if (used != tok.size() || !std::isfinite(v)) fail("bad value '" + tok + "'");
          dst.push_back(detail::to_f32(v));
        } catch (const std::logic_error&) {
          fail("bad value '" + tok + "'");
        }
        ++count;
      }
      return count;
    };
    const auto di = read_floats(left, c.img);
    const auto dt = read_floats(right, c.txt);
    if (di == 0 || dt == 0) fail("empty image or text vector");
    if (c.n_samples == 0) {
      c.d_img = static_cast<std::uint32_t>(di);
      c.d_txt = static_cast<std::uint32_t>(dt);
    } else if (di != c.d_img || dt != c.d_txt) {
      fail("dimension differs from first sample");
    }
    ++c.n_samples;
  }
  if (c.n_samples == 0) throw ParseError(ParseErrorKind::invalid_payload, "no samples in import");
  if (any_label && any_missing) throw ParseError(ParseErrorKind::invalid_payload, "labels must be given for all samples or none");
  if (any_label) c.labels = std::move(labels);
  return c;
}

inline EmbeddingCache read_text_import(const std::filesystem::path& path, Split split = Split::train) {
  std::ifstream in(path);
  if (!in) throw ParseError(ParseErrorKind::io, "cannot open " + path.string());
  return parse_text_import(in, split);
}

// ---------------------------------------------------------------------------
// Minibatches

struct PairedBatch {
  TokenBatch img;
  TokenBatch txt;
  std::vector<std::size_t> indices;
  std::optional<std::vector<std::uint32_t>> labels;
};

/// Epoch permutation keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

inline void validate_batch_size(std::size_t batch_size, std::size_t n_samples) {
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (contrastive loss needs negatives)");
  if (batch_size > n_samples) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the " + std::to_string(n_samples) +
                      " available samples");
  }
}

/// Shuffled, non-overlapping batches for one epoch; the trailing partial
/// batch is dropped.
inline std::vector<PairedBatch> sample_batches(const EmbeddingCache& cache, std::size_t batch_size,
                                               std::uint64_t seed, std::uint64_t epoch) {
  validate_batch_size(batch_size, cache.n_samples);
  const auto perm = epoch_permutation(cache.n_samples, seed, epoch);
  std::vector<PairedBatch> out;
  for (std::size_t b = 0; b + 1 <= cache.n_samples / batch_size; ++b) {
    std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(b * batch_size),
                                 perm.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size));
    PairedBatch batch{cache.image_batch(idx), cache.text_batch(idx), idx, std::nullopt};
    if (cache.labels) {
      batch.labels.emplace();
      for (auto i : idx) batch.labels->push_back((*cache.labels)[i]);
    }
    out.push_back(std::move(batch));
  }
  return out;
}

/// Channel-wise spatial average of a channels x h x w feature map, the
/// global representation for convolutional backbones.
inline std::vector<double> pool_feature_map(std::span<const double> fmap, std::size_t channels, std::size_t h,
                                            std::size_t w) {
  if (channels == 0 || h * w == 0) throw DimensionError("pool_feature_map: empty feature map");
  if (fmap.size() != channels * h * w) throw DimensionError("pool_feature_map: data length does not match c*h*w");
  std::vector<double> out(channels, 0.0);
  const auto hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += fmap[c * hw + i];
    out[c] = s / static_cast<double>(hw);
  }
  return out;
}

inline std::vector<double> pool_feature_map(const Tensor& fmap) {
  if (fmap.rank() != 3) throw DimensionError("pool_feature_map: expected channels x h x w, got " + shape_str(fmap.shape()));
  return pool_feature_map(fmap.data(), fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
}

}  // namespace adaptor
