#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protobank/bank.hpp"
#include "protobank/declarations.hpp"
#include "protobank/encoder.hpp"
#include "protobank/error.hpp"
#include "protobank/metric.hpp"
#include "protobank/numerics/autograd.hpp"
#include "protobank/numerics/optim.hpp"
#include "protobank/pretrain.hpp"
#include "protobank/seed.hpp"

namespace protobank {

// Target model: encoder + head, calibration gate g, fusion phi_r, and the
// flattened memory bank it attends over (empty when memory is off).
struct AdaptParams {
  EncoderParams model;
  Tensor memory;  // [|M|, d], zero rows when memory is off
  bool use_memory = false;
  // false drops the gate: h_bar = phi_r([h_ts, h_t]).
  bool calibrated = true;

  friend bool operator==(const AdaptParams&, const AdaptParams&) = default;
};

inline bool is_adapt_param(const std::string& name) { return name.rfind("cal.", 0) == 0 || name.rfind("phi.", 0) == 0; }

// g: [h_t, h_ts] -> affine -> tanh -> affine -> sigmoid; phi_r: 2d -> d affine.
inline void init_adapt_tensors(ParamSet& t, std::size_t d, std::uint64_t seed, double phi_scale = 1.0) {
  std::mt19937_64 rng(seed);
  t["cal.w1"] = glorot({2 * d, d}, 2 * d, d, rng);
  t["cal.b1"] = Tensor({d});
  t["cal.w2"] = glorot({d, d}, d, d, rng);
  t["cal.b2"] = Tensor({d});
  Tensor phi = glorot({2 * d, d}, 2 * d, d, rng);
  for (double& v : phi.data) v *= phi_scale;
  t["phi.w"] = std::move(phi);
  t["phi.b"] = Tensor({d});
}

struct Attention {
  ag::Var h_ts;     // [B, d]
  ag::Var weights;  // [B, |M|]
};

// Softmax over every prototype of h_t . c_k, then the weighted prototype sum.
inline Attention memory_attend(ag::Var h_t, ag::Var memory) {
  const Tensor& m = memory.value();
  if (m.rank() != 2 || m.rows() == 0) throw NumericError("memory_attend: empty bank");
  if (h_t.value().rank() != 2 || h_t.value().cols() != m.cols()) {
    throw NumericError("memory_attend: representation width does not match bank dim " + std::to_string(m.cols()));
  }
  ag::Var w = ag::softmax(ag::matmul(h_t, ag::transpose(memory)));
  return {ag::matmul(w, memory), w};
}

struct AttentionResult {
  Tensor h_ts;     // [d]
  Tensor weights;  // [|M|]
};

inline AttentionResult memory_attend(const Tensor& h_t, const MemoryBank& bank) {
  if (bank.empty() || bank.size() == 0) throw NumericError("memory_attend: empty bank");
  if (h_t.size() != bank.dim()) throw NumericError("memory_attend: dim mismatch");
  ag::Tape tape;
  const Attention a = memory_attend(tape.constant(Tensor({1, h_t.size()}, h_t.data)), tape.constant(bank.flatten()));
  return {Tensor({h_t.size()}, a.h_ts.value().data), Tensor({bank.size()}, a.weights.value().data)};
}

struct Calibration {
  ag::Var gate;   // e in (0,1)^d
  ag::Var h_bar;  // phi_r([e * h_ts, h_t])
};

inline ag::Var calibration_gate(const BoundParams& w, ag::Var h_t, ag::Var h_ts) {
  using namespace ag;
  Var hidden = tanh(add_bias(matmul(concat(h_t, h_ts), w["cal.w1"]), w["cal.b1"]));
  return sigmoid(add_bias(matmul(hidden, w["cal.w2"]), w["cal.b2"]));
}

inline ag::Var fuse_calibrated(const BoundParams& w, ag::Var gate, ag::Var h_t, ag::Var h_ts) {
  using namespace ag;
  return add_bias(matmul(concat(hadamard(gate, h_ts), h_t), w["phi.w"]), w["phi.b"]);
}

inline Calibration calibrate(const BoundParams& w, ag::Var h_t, ag::Var h_ts) {
  if (h_t.value().shape != h_ts.value().shape) throw NumericError("calibrate: h_t and h_ts differ in shape");
  ag::Var e = calibration_gate(w, h_t, h_ts);
  return {e, fuse_calibrated(w, e, h_t, h_ts)};
}

inline ag::Var refine(ag::Var h_t, ag::Var h_bar) {
  if (h_t.value().shape != h_bar.value().shape) throw NumericError("refine: dim mismatch");
  return ag::add(h_t, h_bar);
}

inline Tensor refine(const Tensor& h_t, const Tensor& h_bar) {
  if (h_t.shape != h_bar.shape) throw NumericError("refine: dim mismatch");
  Tensor out = h_t;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += h_bar.data[i];
  return out;
}

inline Tensor calibrate(const AdaptParams& p, const Tensor& h_t, const Tensor& h_ts) {
  if (h_t.shape != h_ts.shape || h_t.rank() != 1) throw NumericError("calibrate: expects two d-vectors");
  ag::Tape tape;
  BoundParams w(tape, p.model.tensors, false);
  const std::size_t d = h_t.size();
  const Calibration c =
      calibrate(w, tape.constant(Tensor({1, d}, h_t.data)), tape.constant(Tensor({1, d}, h_ts.data)));
  return Tensor({d}, c.h_bar.value().data);
}

struct AdaptedTrace {
  EncoderTrace enc;
  ag::Var h_hat;   // refined representation fed to the head
  ag::Var logits;  // [B, 1]
};

// Full target forward pass; without memory the head sees h_t directly.
inline AdaptedTrace adapted_forward(ag::Tape& tape, const BoundParams& w, const AdaptParams& p,
                                    const EncoderInput& in) {
  AdaptedTrace t{encode(tape, w, p.model.config, in), {}, {}};
  t.h_hat = t.enc.h;
  if (p.use_memory && p.memory.size() > 0) {
    const Attention a = memory_attend(t.enc.h, tape.constant(p.memory));
    ag::Var h_bar = p.calibrated ? calibrate(w, t.enc.h, a.h_ts).h_bar
                                 : fuse_calibrated(w, tape.constant(Tensor::filled(a.h_ts.value().shape, 1.0)),
                                                   t.enc.h, a.h_ts);
    t.h_hat = refine(t.enc.h, h_bar);
  }
  t.logits = head_logits(w, t.h_hat);
  return t;
}

inline std::vector<double> predict(const AdaptParams& p, const CountryDataset& ds) {
  std::vector<double> scores;
  scores.reserve(ds.size());
  for (std::size_t start = 0; start < ds.size(); start += detail::kEvalChunk) {
    const auto rows = detail::iota_rows(start, std::min(ds.size(), start + detail::kEvalChunk));
    ag::Tape tape;
    BoundParams w(tape, p.model.tensors, false);
    const Tensor& z = adapted_forward(tape, w, p, make_input(p.model, ds, rows)).logits.value();
    for (double v : z.data) scores.push_back(detail::sigmoid(v));
  }
  return scores;
}

struct FinetuneConfig {
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 0.005;
  double weight_decay = 0.01;
  bool init_from_source = true;
  bool use_memory = true;
  bool freeze_encoder = false;
  bool use_calibration = true;
  // Multiplier on the initial phi_r weights. 0 starts the refinement branch
  // switched off (h_hat = h_t), so memory can only be learned in.
  double phi_init_scale = 0.0;
  double valid_rate = 0.05;
  std::uint64_t seed = 0;
  EncoderConfig encoder;  // used when training from scratch
};

inline void validate(const FinetuneConfig& c) {
  if (c.batch_size < 1) throw ConfigError("finetune: batch size must be positive");
  if (c.epochs < 0) throw ConfigError("finetune: epochs must be nonnegative");
  if (!(c.learning_rate > 0.0)) throw ConfigError("finetune: learning rate must be positive");
  if (c.weight_decay < 0.0) throw ConfigError("finetune: weight decay must be nonnegative");
}

struct FinetuneResult {
  AdaptParams params;
  std::vector<CurvePoint> curve;  // scl_loss unused (0), cls_loss = mean BCE
  int best_epoch = 0;
};

// Starting point of a fine-tuning run.
inline AdaptParams initial_adapt_params(const CountryDataset& train, const MemoryBank& bank,
                                        const EncoderParams* source, const FinetuneConfig& cfg) {
  AdaptParams p;
  if (cfg.init_from_source) {
    if (!source) throw ConfigError("finetune: init_from_source requires source parameters");
    p.model = with_fresh_head(*source, derive_seed(cfg.seed, "head"));
  } else {
    p.model = init_encoder(cfg.encoder, train, derive_seed(cfg.seed, "init"));
  }
  const std::size_t d = p.model.config.d;
  init_adapt_tensors(p.model.tensors, d, derive_seed(cfg.seed, "adapt"), cfg.phi_init_scale);
  p.use_memory = cfg.use_memory && !bank.empty() && bank.size() > 0;
  p.memory = Tensor({0, d});
  p.calibrated = cfg.use_calibration;
  if (p.use_memory) {
    if (bank.dim() != d) {
      throw NumericError("finetune: bank dim " + std::to_string(bank.dim()) + " does not match model width " +
                         std::to_string(d));
    }
    p.memory = bank.flatten();
  }
  return p;
}

// Extra loss term added to the BCE of each step.
using ExtraLoss = std::function<std::optional<ag::Var>(ag::Tape&, const BoundParams&, const AdaptParams&)>;

namespace detail {

inline FinetuneResult train_adapted(const CountryDataset& train, const CountryDataset& valid, AdaptParams params,
                                    const FinetuneConfig& cfg, const ExtraLoss& extra = {}) {
  validate(cfg);
  const auto rows = labeled_positions(train);
  require_both_classes(train, rows, "finetune");
  std::vector<int> labels;
  for (std::size_t r : rows) labels.push_back(train[r].label() > 0.5 ? 1 : 0);

  OptimizerState opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  std::mt19937_64 rng(derive_seed(cfg.seed, "finetune-batches"));

  FinetuneResult result{params, {}, 0};
  double best = -std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    CurvePoint pt;
    pt.epoch = epoch;
    std::size_t steps = 0;
    for (const auto& batch : stratified_batches(rows, labels, static_cast<std::size_t>(cfg.batch_size), rng)) {
      std::vector<double> y;
      for (std::size_t r : batch) y.push_back(train[r].label() > 0.5 ? 1.0 : 0.0);
      ag::Tape tape;
      BoundParams w(tape, params.model.tensors);
      const AdaptedTrace tr = adapted_forward(tape, w, params, make_input(params.model, train, batch));
      ag::Var loss = ag::bce_with_logits(tr.logits, y);
      pt.cls_loss += loss.value().item();
      if (extra) {
        if (auto more = extra(tape, w, params)) loss = ag::add(loss, *more);
      }
      tape.backward(loss);
      ParamSet grads = w.grads();
      std::erase_if(grads, [&](const auto& kv) {
        if (!params.use_memory && is_adapt_param(kv.first)) return true;
        return cfg.freeze_encoder && kv.first.rfind("enc.", 0) == 0;
      });
      opt_step(params.model.tensors, grads, opt);
      ++steps;
    }
    if (steps) pt.cls_loss /= static_cast<double>(steps);
    pt.valid_revenue =
        validation_revenue([&](const CountryDataset& v) { return predict(params, v); }, valid, cfg.valid_rate);
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

}  // namespace detail

// Mean BCE fine-tuning of the target model on its labeled records. With
// use_memory off (or an empty bank) the head consumes h_t; init_from_source
// starts the encoder from `source` with a fresh head.
inline FinetuneResult finetune(const CountryDataset& train, const CountryDataset& valid, const MemoryBank& bank,
                               const EncoderParams* source, const FinetuneConfig& cfg) {
  return detail::train_adapted(train, valid, initial_adapt_params(train, bank, source, cfg), cfg);
}

struct AkcConfig {
  double keep_fraction = 0.2;
  double akc_weight = 1.0;
};

// Positions of the keep_fraction of records whose source and target-pretrained
// scores differ least (ties by position).
inline std::vector<std::size_t> akc_select(std::span<const double> source_scores, std::span<const double> target_scores,
                                           double keep_fraction) {
  if (source_scores.size() != target_scores.size()) throw DataError("akc_select: score count mismatch");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("akc: keep_fraction must lie in (0, 1]");
  std::vector<std::size_t> order(source_scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(source_scores[a] - target_scores[a]) < std::abs(source_scores[b] - target_scores[b]);
  });
  order.resize(top_count(keep_fraction, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

// Vanilla transfer plus akc_weight * MSE(h_source(x), h_target(x)) over the
// selected target records. The target-pretrained reference model is a
// from-scratch fit on the same labels.
inline FinetuneResult akc_finetune(const CountryDataset& train, const CountryDataset& valid,
                                   const EncoderParams& source, FinetuneConfig cfg, const AkcConfig& akc = {}) {
  cfg.init_from_source = true;
  cfg.use_memory = false;
  std::vector<std::size_t> keep(train.size());
  std::iota(keep.begin(), keep.end(), 0);
  if (akc.keep_fraction < 1.0) {
    FinetuneConfig ref = cfg;
    ref.init_from_source = false;
    ref.seed = derive_seed(cfg.seed, "akc-reference");
    const AdaptParams reference = finetune(train, valid, MemoryBank{}, nullptr, ref).params;
    keep = akc_select(score_all(source, train), predict(reference, train), akc.keep_fraction);
  } else if (!(akc.keep_fraction > 0.0 && akc.keep_fraction <= 1.0)) {
    throw ConfigError("akc: keep_fraction must lie in (0, 1]");
  }
  const AdaptParams init = initial_adapt_params(train, MemoryBank{}, &source, cfg);
  if (akc.akc_weight == 0.0 || keep.empty()) return detail::train_adapted(train, valid, init, cfg);

  const Tensor h_source = embed_all(source, train.subset(keep));
  const std::size_t d = source.config.d;
  auto cursor = std::make_shared<std::size_t>(0);
  const std::size_t chunk = static_cast<std::size_t>(cfg.batch_size);
  ExtraLoss extra = [&, cursor](ag::Tape& tape, const BoundParams& w, const AdaptParams& p) -> std::optional<ag::Var> {
    std::vector<std::size_t> rows;
    Tensor target_h({std::min(chunk, keep.size()), d});
    for (std::size_t i = 0; i < target_h.rows(); ++i) {
      const std::size_t j = (*cursor + i) % keep.size();
      rows.push_back(keep[j]);
      std::copy(h_source.row_ptr(j), h_source.row_ptr(j) + d, target_h.row_ptr(i));
    }
    *cursor = (*cursor + rows.size()) % keep.size();
    const EncoderTrace tr = encode(tape, w, p.model.config, make_input(p.model, train, rows));
    return ag::scale(ag::mse(tr.h, tape.constant(target_h)), akc.akc_weight);
  };
  return detail::train_adapted(train, valid, init, cfg, extra);
}

// ---------------------------------------------------------------------------
// Container for adapted models (same envelope as encoder models).

inline Bytes serialize(const AdaptParams& p) {
  ByteWriter w;
  w.raw(kModelMagic);
  w.u32(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(ModelKind::kAdapted));
  detail::write_encoder(w, p.model);
  w.u8(p.use_memory ? 1 : 0);
  w.u8(p.calibrated ? 1 : 0);
  w.tensor(p.memory);
  w.seal();
  return std::move(w).bytes();
}

inline AdaptParams deserialize_adapted(const Bytes& bytes) {
  if (peek_model_kind(bytes) != ModelKind::kAdapted) throw FormatError("not an adapted model");
  ByteReader r(bytes, 13);
  AdaptParams p;
  p.model = detail::read_encoder(r);
  const std::uint8_t mem = r.u8();
  if (mem > 1) throw FormatError("bad memory flag");
  p.use_memory = mem == 1;
  const std::uint8_t cal = r.u8();
  if (cal > 1) throw FormatError("bad calibration flag");
  p.calibrated = cal == 1;
  p.memory = r.tensor();
  r.expect_seal(0);
  return p;
}

// Any model file as a scorer: encoder models score with their own head.
inline AdaptParams load_model(const Bytes& bytes) {
  if (peek_model_kind(bytes) == ModelKind::kAdapted) return deserialize_adapted(bytes);
  EncoderParams m = deserialize_encoder(bytes);
  const std::size_t d = m.config.d;
  return AdaptParams{std::move(m), Tensor({0, d}), false, true};
}

}  // namespace protobank
