#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protobank/declarations.hpp"
#include "protobank/encoder.hpp"
#include "protobank/error.hpp"
#include "protobank/metric.hpp"
#include "protobank/seed.hpp"
#include "protobank/numerics/autograd.hpp"
#include "protobank/numerics/optim.hpp"

namespace protobank {

// Supervised contrastive loss from a similarity matrix S [N, N]:
//   sum_i -1/(P_i) sum_{j != i, y_j = y_i} log( exp(S_ij/tau) / sum_{k != i} exp(S_ik/tau) )
// where P_i is the number of same-class partners of i. Anchors without a
// partner contribute 0.
inline ag::Var contrastive_from_similarity(ag::Var sim, std::span<const int> labels, double tau) {
  const Tensor& s = sim.value();
  const std::size_t n = labels.size();
  if (s.rank() != 2 || s.dim(0) != n || s.dim(1) != n) {
    throw NumericError("contrastive loss: similarity must be [N, N] with N = " + std::to_string(n));
  }
  // Per-anchor softmax over k != i, kept for the backward pass.
  Tensor probs({n, n});
  std::vector<double> partners(n, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && labels[j] == labels[i]) partners[i] += 1.0;
    }
    if (partners[i] == 0.0) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      if (k != i) mx = std::max(mx, s.at(i, k) / tau);
    }
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k != i) z += (probs.at(i, k) = std::exp(s.at(i, k) / tau - mx));
    }
    const double log_z = mx + std::log(z);
    for (std::size_t k = 0; k < n; ++k) probs.at(i, k) /= z;
    double term = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && labels[j] == labels[i]) term += s.at(i, j) / tau - log_z;
    }
    loss -= term / partners[i];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return sim.tape->record(Tensor::scalar(loss), {sim},
                          [src = sim.id, probs = std::move(probs), partners = std::move(partners),
                           lab = std::move(lab), tau, n](ag::Tape& tp, std::size_t self) {
    if (!tp.requires_grad(src)) return;
    const double g = tp.grad_if_any(self)->data[0];
    Tensor& gs = tp.grad_slot(src);
    for (std::size_t i = 0; i < n; ++i) {
      if (partners[i] == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double target = lab[j] == lab[i] ? 1.0 / partners[i] : 0.0;
        gs.data[i * n + j] += g * (probs.at(i, j) - target) / tau;
      }
    }
  }, "contrastive_from_similarity");
}

// Contrastive loss on a representation batch H [N, d]; similarities are dot
// products of L2-normalized rows.
inline ag::Var scl_loss(ag::Var h, std::span<const int> labels, double tau) {
  if (labels.size() < 2) throw NumericError("scl_loss: batch size must be at least 2");
  if (!(tau > 0.0)) throw NumericError("scl_loss: tau must be positive");
  if (h.value().rank() != 2 || h.value().dim(0) != labels.size()) {
    throw NumericError("scl_loss: representation batch does not match label count");
  }
  ag::Var z = ag::l2_normalize(h);
  return contrastive_from_similarity(ag::matmul(z, ag::transpose(z)), labels, tau);
}

inline double scl_loss(const Tensor& h, std::span<const int> labels, double tau) {
  ag::Tape tape;
  return scl_loss(tape.constant(h), labels, tau).value().item();
}

struct PretrainConfig {
  double tau = 0.07;
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 0.005;
  double weight_decay = 0.01;
  double cls_weight = 1.0;
  // false trains on the classification loss alone ("without contrastive learning").
  bool use_scl = true;
  double valid_rate = 0.05;
  std::uint64_t seed = 0;
  EncoderConfig encoder;
};

inline void validate(const PretrainConfig& c) {
  if (!(c.tau > 0.0)) throw ConfigError("pretrain: tau must be positive");
  if (c.batch_size < 2) throw ConfigError("pretrain: batch size must be at least 2");
  if (c.epochs < 0) throw ConfigError("pretrain: epochs must be nonnegative");
  if (!(c.learning_rate > 0.0)) throw ConfigError("pretrain: learning rate must be positive");
  if (c.weight_decay < 0.0 || c.cls_weight < 0.0) throw ConfigError("pretrain: weights must be nonnegative");
}

struct CurvePoint {
  int epoch = 0;
  double scl_loss = 0.0;
  double cls_loss = 0.0;
  double valid_revenue = std::numeric_limits<double>::quiet_NaN();
};

struct PretrainResult {
  EncoderParams params;
  std::vector<CurvePoint> curve;
  int best_epoch = 0;
};

// Mini-batches over `positions` where each present class contributes at
// least two members to a batch whenever its size allows it.
inline std::vector<std::vector<std::size_t>> stratified_batches(const std::vector<std::size_t>& positions,
                                                                const std::vector<int>& labels,
                                                                std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < positions.size(); ++i) (labels[i] ? pos : neg).push_back(positions[i]);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const std::size_t n = positions.size();
  const std::size_t nb = std::max<std::size_t>(1, (n + batch_size - 1) / batch_size);
  std::vector<std::vector<std::size_t>> batches(nb);
  auto deal = [&](const std::vector<std::size_t>& members) {
    if (members.size() >= 2 * nb) {
      for (std::size_t i = 0; i < members.size(); ++i) batches[i % nb].push_back(members[i]);
    } else {
      // Too few to reach every batch: hand them out in pairs.
      for (std::size_t i = 0; i < members.size(); ++i) batches[std::min(i / 2, nb - 1)].push_back(members[i]);
    }
  };
  deal(pos);
  deal(neg);
  batches.erase(std::remove_if(batches.begin(), batches.end(), [](const auto& b) { return b.empty(); }),
                batches.end());
  return batches;
}

namespace detail {

inline std::vector<std::size_t> labeled_positions(const CountryDataset& ds) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds[i].labeled()) rows.push_back(i);
  }
  return rows;
}

inline void require_both_classes(const CountryDataset& ds, const std::vector<std::size_t>& rows, const char* who) {
  bool pos = false, neg = false;
  for (std::size_t r : rows) (ds[r].label() > 0.5 ? pos : neg) = true;
  if (!pos || !neg) {
    throw DataError(std::string(who) + ": labeled training records of " + ds.country_id() +
                    " contain a single class");
  }
}

// Validation Revenue@k, or NaN when the metric is undefined on this split.
template <class ScoreFn>
double validation_revenue(ScoreFn&& score, const CountryDataset& valid, double rate) {
  if (valid.empty()) return std::numeric_limits<double>::quiet_NaN();
  try {
    const auto s = score(valid);
    return revenue_at_k(s, valid, rate);
  } catch (const DataError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace detail

// Trains encoder + fraud head on the labeled part of `train`, minimizing
// scl_loss + cls_weight * BCE. Returns the parameters of the epoch with the
// best validation Revenue@k (the last epoch when validation is undefined).
inline PretrainResult pretrain(const CountryDataset& train, const CountryDataset& valid, const PretrainConfig& cfg,
                               const EncoderParams* init = nullptr) {
  validate(cfg);
  const auto rows = detail::labeled_positions(train);
  detail::require_both_classes(train, rows, "pretrain");
  std::vector<int> labels;
  for (std::size_t r : rows) labels.push_back(train[r].label() > 0.5 ? 1 : 0);

  EncoderParams params = init ? *init : init_encoder(cfg.encoder, train, derive_seed(cfg.seed, "init"));
  OptimizerState opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  std::mt19937_64 rng(derive_seed(cfg.seed, "batches"));

  PretrainResult result{params, {}, 0};
  double best = -std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    CurvePoint pt;
    pt.epoch = epoch;
    std::size_t steps = 0;
    for (const auto& batch : stratified_batches(rows, labels, static_cast<std::size_t>(cfg.batch_size), rng)) {
      if (batch.size() < 2) continue;
      std::vector<int> y;
      std::vector<double> yd;
      for (std::size_t r : batch) {
        y.push_back(train[r].label() > 0.5 ? 1 : 0);
        yd.push_back(static_cast<double>(y.back()));
      }
      ag::Tape tape;
      BoundParams w(tape, params.tensors);
      const EncoderTrace tr = encode(tape, w, params.config, make_input(params, train, batch));
      ag::Var cls = ag::bce_with_logits(head_logits(w, tr.h), yd);
      ag::Var loss = ag::scale(cls, cfg.cls_weight);
      if (cfg.use_scl) {
        ag::Var scl = scl_loss(tr.h, y, cfg.tau);
        pt.scl_loss += scl.value().item();
        loss = ag::add(scl, loss);
      }
      pt.cls_loss += cls.value().item();
      tape.backward(loss);
      ParamSet grads = w.grads();
      // without a classification term the head stays untrained (no decay either)
      if (cfg.cls_weight == 0.0) std::erase_if(grads, [](const auto& kv) { return kv.first.rfind("head.", 0) == 0; });
      opt_step(params.tensors, grads, opt);
      ++steps;
    }
    if (steps) {
      pt.scl_loss /= static_cast<double>(steps);
      pt.cls_loss /= static_cast<double>(steps);
    }
    pt.valid_revenue = detail::validation_revenue([&](const CountryDataset& v) { return score_all(params, v); },
                                                  valid, cfg.valid_rate);
    const double key = std::isnan(pt.valid_revenue) ? -1.0 : pt.valid_revenue;
    if (key > best || (std::isnan(pt.valid_revenue) && epoch == cfg.epochs && best < 0.0)) {
      best = key;
      result.params = params;
      result.best_epoch = epoch;
    }
    result.curve.push_back(pt);
  }
  return result;
}

// The top ceil(fraction * n) records by fraud score (ties by ascending id),
// with their inspection labels.
inline CountryDataset select_fraud_like(const EncoderParams& params, const CountryDataset& ds, double fraction = 0.05) {
  if (ds.empty()) throw DataError("select_fraud_like: empty dataset");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("select_fraud_like: fraction must lie in (0, 1]");
  const auto scores = score_all(params, ds);
  auto order = rank_by_score(scores, ds);
  order.resize(top_count(fraction, ds.size()));
  std::sort(order.begin(), order.end());
  return ds.subset(order);
}

}  // namespace protobank
