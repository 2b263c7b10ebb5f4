#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protobank/declarations.hpp"
#include "protobank/error.hpp"
#include "protobank/numerics/autograd.hpp"
#include "protobank/numerics/optim.hpp"

namespace protobank {

inline constexpr std::size_t kNumericFeatures = 5;

// log quantity, log gross weight, log CIF value, log(1 + taxes), log price per kg.
inline std::array<double, kNumericFeatures> raw_features(const ImportDeclaration& x) {
  return {std::log(x.quantity), std::log(x.gross_weight), std::log(x.cif_value), std::log1p(x.total_taxes),
          std::log(x.cif_value / x.gross_weight)};
}

struct FeatureStats {
  std::array<double, kNumericFeatures> mean{};
  std::array<double, kNumericFeatures> stdev{1.0, 1.0, 1.0, 1.0, 1.0};

  friend bool operator==(const FeatureStats&, const FeatureStats&) = default;
};

inline constexpr double kStdevFloor = 1e-6;

// Population mean / standard deviation per feature, computed on train only.
inline FeatureStats standardize_stats(const CountryDataset& train) {
  if (train.empty()) throw DataError("standardize_stats: empty training split");
  FeatureStats s;
  const double n = static_cast<double>(train.size());
  std::array<double, kNumericFeatures> sum{}, sq{};
  for (const auto& r : train.records()) {
    const auto f = raw_features(r);
    for (std::size_t j = 0; j < kNumericFeatures; ++j) sum[j] += f[j];
  }
  for (std::size_t j = 0; j < kNumericFeatures; ++j) s.mean[j] = sum[j] / n;
  for (const auto& r : train.records()) {
    const auto f = raw_features(r);
    for (std::size_t j = 0; j < kNumericFeatures; ++j) sq[j] += (f[j] - s.mean[j]) * (f[j] - s.mean[j]);
  }
  for (std::size_t j = 0; j < kNumericFeatures; ++j) s.stdev[j] = std::max(std::sqrt(sq[j] / n), kStdevFloor);
  return s;
}

struct EncoderConfig {
  std::size_t k = 16;             // width of p_x and q_x
  std::size_t d = 32;             // width of the fused representation h_x
  std::size_t hidden = 32;        // transaction-path hidden width
  std::size_t conv_channels = 8;
  std::size_t kernel = 3;
  // false replaces the outer-product/convolution interaction with a plain
  // concatenation [p, q] (the "without domain-invariant encoding" variant).
  bool interaction = true;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Learnable encoder + fraud head, with the vocabularies and feature
// statistics that define its input space.
struct EncoderParams {
  EncoderConfig config;
  Vocabulary hs6_vocab;
  Vocabulary origin_vocab;
  FeatureStats stats;
  ParamSet tensors;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

namespace enc {

inline void init_head(ParamSet& t, const EncoderConfig& c, std::mt19937_64& rng) {
  t["head.w"] = glorot({c.d, 1}, c.d, 1, rng);
  t["head.b"] = Tensor({1});
}

}  // namespace enc

inline EncoderParams init_encoder(const EncoderConfig& c, Vocabulary hs6_vocab, Vocabulary origin_vocab,
                                  FeatureStats stats, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EncoderParams p{c, std::move(hs6_vocab), std::move(origin_vocab), stats, {}};
  auto& t = p.tensors;
  const std::size_t in = kNumericFeatures + c.k;
  t["enc.emb_hs6"] = normal_tensor({p.hs6_vocab.size(), c.k}, 0.5, rng);
  t["enc.emb_origin"] = normal_tensor({p.origin_vocab.size(), c.k}, 0.5, rng);
  t["enc.w1"] = glorot({in, c.hidden}, in, c.hidden, rng);
  t["enc.b1"] = Tensor({c.hidden});
  t["enc.w2"] = glorot({c.hidden, c.k}, c.hidden, c.k, rng);
  t["enc.b2"] = Tensor({c.k});
  if (c.interaction) {
    const std::size_t taps = c.kernel * c.kernel;
    t["enc.conv_w"] = normal_tensor({c.conv_channels, 1, c.kernel, c.kernel}, std::sqrt(2.0 / static_cast<double>(taps)), rng);
    t["enc.conv_b"] = Tensor({c.conv_channels});
    t["enc.g_w"] = glorot({c.conv_channels, c.k}, c.conv_channels, c.k, rng);
    t["enc.g_b"] = Tensor({c.k});
  }
  t["enc.fuse_w"] = glorot({2 * c.k, c.d}, 2 * c.k, c.d, rng);
  t["enc.fuse_b"] = Tensor::filled({c.d}, 0.01);
  enc::init_head(t, c, rng);
  return p;
}

// Fresh encoder whose vocabularies and statistics come from `train`.
inline EncoderParams init_encoder(const EncoderConfig& c, const CountryDataset& train, std::uint64_t seed) {
  return init_encoder(c, train.hs6_vocab(), train.country_vocab(), standardize_stats(train), seed);
}

// Same weights, fresh fraud head.
inline EncoderParams with_fresh_head(EncoderParams p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  enc::init_head(p.tensors, p.config, rng);
  return p;
}

// Model inputs for a batch of records.
struct EncoderInput {
  Tensor numeric;  // [B, kNumericFeatures], standardized
  std::vector<std::size_t> hs6;
  std::vector<std::size_t> origin;

  std::size_t size() const { return hs6.size(); }
};

inline EncoderInput make_input(const EncoderParams& p, std::span<const ImportDeclaration* const> records) {
  EncoderInput in{Tensor({records.size(), kNumericFeatures}), {}, {}};
  in.hs6.reserve(records.size());
  in.origin.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto f = raw_features(*records[i]);
    for (std::size_t j = 0; j < kNumericFeatures; ++j) {
      in.numeric.data[i * kNumericFeatures + j] = (f[j] - p.stats.mean[j]) / p.stats.stdev[j];
    }
    in.hs6.push_back(p.hs6_vocab.index(records[i]->hs6));
    in.origin.push_back(p.origin_vocab.index(records[i]->country_code));
  }
  return in;
}

inline EncoderInput make_input(const EncoderParams& p, const CountryDataset& ds, std::span<const std::size_t> rows) {
  std::vector<const ImportDeclaration*> recs;
  recs.reserve(rows.size());
  for (std::size_t r : rows) recs.push_back(&ds[r]);
  return make_input(p, recs);
}

// Tape nodes of one encoder pass.
struct EncoderTrace {
  ag::Var p;  // transaction embedding [B, k]
  ag::Var q;  // HS6 embedding [B, k]
  ag::Var g;  // interaction vector [B, k] (equals q when interaction is off)
  ag::Var h;  // fused representation [B, d]
};

inline EncoderTrace encode(ag::Tape& tape, const BoundParams& w, const EncoderConfig& c, const EncoderInput& in) {
  using namespace ag;
  const std::size_t b = in.size();
  Var numeric = tape.constant(in.numeric);
  Var origin = gather_rows(w["enc.emb_origin"], in.origin);
  Var hidden = relu(add_bias(matmul(concat(numeric, origin), w["enc.w1"]), w["enc.b1"]));
  Var p = add_bias(matmul(hidden, w["enc.w2"]), w["enc.b2"]);
  Var q = gather_rows(w["enc.emb_hs6"], in.hs6);
  Var g = q;
  if (c.interaction) {
    Var e = reshape(outer(p, q), {b, 1, c.k, c.k});
    Var maps = relu(conv2d(e, w["enc.conv_w"], w["enc.conv_b"]));
    g = add_bias(matmul(global_avg_pool(maps), w["enc.g_w"]), w["enc.g_b"]);
  }
  Var h = relu(add_bias(matmul(concat(p, g), w["enc.fuse_w"]), w["enc.fuse_b"]));
  return {p, q, g, h};
}

// Fraud logit [B, 1] from a representation batch.
inline ag::Var head_logits(const BoundParams& w, ag::Var h) {
  return ag::add_bias(ag::matmul(h, w["head.w"]), w["head.b"]);
}

namespace detail {

inline double sigmoid(double z) { return ag::detail::stable_sigmoid(z); }

inline std::vector<std::size_t> iota_rows(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

inline constexpr std::size_t kEvalChunk = 512;

}  // namespace detail

struct TransactionEmbedding {
  Tensor p;
  Tensor q;
  Tensor g;
  Tensor h;
  double score = 0.5;
};

inline TransactionEmbedding embed(const EncoderParams& params, const ImportDeclaration& x) {
  const ImportDeclaration* one[] = {&x};
  ag::Tape tape;
  BoundParams w(tape, params.tensors, false);
  const EncoderInput in = make_input(params, one);
  const EncoderTrace tr = encode(tape, w, params.config, in);
  const double logit = head_logits(w, tr.h).value().item();
  auto row = [](const Tensor& t) { return Tensor({t.size()}, t.data); };
  return {row(tr.p.value()), row(tr.q.value()), row(tr.g.value()), row(tr.h.value()), detail::sigmoid(logit)};
}

// sigmoid(w . h + b)
inline double fraud_score(const EncoderParams& params, const Tensor& h) {
  const Tensor& w = params.tensors.at("head.w");
  if (h.size() != w.size()) throw NumericError("fraud_score: representation width mismatch");
  double z = params.tensors.at("head.b").data[0];
  for (std::size_t i = 0; i < h.size(); ++i) z += w.data[i] * h.data[i];
  if (!std::isfinite(z)) throw NumericError("fraud_score: non-finite logit");
  return detail::sigmoid(z);
}

// Fused representations of every record, [n, d].
inline Tensor embed_all(const EncoderParams& params, const CountryDataset& ds) {
  Tensor out({ds.size(), params.config.d});
  for (std::size_t start = 0; start < ds.size(); start += detail::kEvalChunk) {
    const std::size_t end = std::min(ds.size(), start + detail::kEvalChunk);
    const auto rows = detail::iota_rows(start, end);
    ag::Tape tape;
    BoundParams w(tape, params.tensors, false);
    const Tensor& h = encode(tape, w, params.config, make_input(params, ds, rows)).h.value();
    std::copy(h.data.begin(), h.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * params.config.d));
  }
  return out;
}

// Fraud scores of every record.
inline std::vector<double> score_all(const EncoderParams& params, const CountryDataset& ds) {
  std::vector<double> scores;
  scores.reserve(ds.size());
  for (std::size_t start = 0; start < ds.size(); start += detail::kEvalChunk) {
    const std::size_t end = std::min(ds.size(), start + detail::kEvalChunk);
    const auto rows = detail::iota_rows(start, end);
    ag::Tape tape;
    BoundParams w(tape, params.tensors, false);
    const Tensor& z = head_logits(w, encode(tape, w, params.config, make_input(params, ds, rows)).h).value();
    for (double v : z.data) scores.push_back(detail::sigmoid(v));
  }
  return scores;
}

}  // namespace protobank
