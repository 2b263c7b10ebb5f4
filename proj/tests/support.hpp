#pragma once

// Generators and independent oracles shared by the unit suite and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "protobank/adapt.hpp"
#include "protobank/bank.hpp"
#include "protobank/encoder.hpp"
#include "protobank/kmeans.hpp"
#include "protobank/metric.hpp"
#include "protobank/numerics/gradcheck.hpp"
#include "protobank/pretrain.hpp"

namespace pbt {

using namespace protobank;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data) v = n(rng);
  return t;
}

inline std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Small labeled dataset with a few HS6 codes and origins.
inline CountryDataset toy_dataset(std::size_t n, std::mt19937_64& rng, const std::string& id = "TT") {
  static const char* hs[] = {"010101", "020202", "030303", "040404"};
  static const char* cc[] = {"AA", "BB", "CC"};
  std::uniform_real_distribution<double> u(1.0, 100.0);
  std::vector<ImportDeclaration> recs;
  for (std::size_t i = 0; i < n; ++i) {
    ImportDeclaration r;
    r.id = static_cast<std::int64_t>(i + 1);
    r.date = static_cast<Day>(i);
    r.quantity = u(rng);
    r.gross_weight = u(rng);
    r.hs6 = hs[uniform(rng, 0, 3)];
    r.country_code = cc[uniform(rng, 0, 2)];
    r.cif_value = u(rng) * 10.0;
    r.total_taxes = r.cif_value * 0.1;
    const bool bad = i % 3 == 0;
    r.illicit = bad;
    r.revenue = bad ? u(rng) : 0.0;
    recs.push_back(r);
  }
  return CountryDataset(id, std::move(recs));
}

// Fixture with explicit ids and revenues; all records inspected.
inline CountryDataset revenue_fixture(const std::vector<double>& revenue, const std::vector<std::int64_t>& ids = {}) {
  std::vector<ImportDeclaration> recs;
  for (std::size_t i = 0; i < revenue.size(); ++i) {
    ImportDeclaration r;
    r.id = ids.empty() ? static_cast<std::int64_t>(i) : ids[i];
    r.hs6 = "123456";
    r.country_code = "ZZ";
    r.illicit = revenue[i] > 0.0;
    r.revenue = revenue[i];
    recs.push_back(r);
  }
  return CountryDataset("FX", std::move(recs));
}

// Record i is inspected iff fewer than m records outrank it, where j outranks
// i when it scores higher or ties with a smaller id. No sorting involved.
inline double revenue_oracle(const std::vector<double>& scores, const std::vector<double>& revenue,
                             const std::vector<std::int64_t>& ids, double rate) {
  const std::size_t n = scores.size();
  std::size_t m = 0;
  while (static_cast<double>(m) < rate * static_cast<double>(n) - 1e-9) ++m;
  double caught = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += revenue[i];
    std::size_t above = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i])) ++above;
    }
    if (above < m) caught += revenue[i];
  }
  return caught / total;
}

// Lowest objective over `restarts` runs of uniform-random initialization
// followed by plain Lloyd iterations.
inline double kmeans_brute_force(const Tensor& x, std::size_t k, int restarts, std::uint64_t seed) {
  const std::size_t n = x.rows(), d = x.cols();
  std::mt19937_64 rng(seed);
  double best = std::numeric_limits<double>::infinity();
  auto dist = [&](const double* a, const double* b) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return s;
  };
  for (int r = 0; r < restarts; ++r) {
    std::vector<std::size_t> pick(n);
    for (std::size_t i = 0; i < n; ++i) pick[i] = i;
    std::shuffle(pick.begin(), pick.end(), rng);
    std::vector<std::vector<double>> c(k);
    for (std::size_t j = 0; j < k; ++j) c[j].assign(x.row_ptr(pick[j]), x.row_ptr(pick[j]) + d);
    std::vector<std::size_t> a(n, k);
    for (int it = 0; it < 200; ++it) {
      bool changed = false;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t bi = 0;
        for (std::size_t j = 1; j < k; ++j) {
          if (dist(x.row_ptr(i), c[j].data()) < dist(x.row_ptr(i), c[bi].data())) bi = j;
        }
        changed |= bi != a[i];
        a[i] = bi;
      }
      if (!changed) break;
      for (std::size_t j = 0; j < k; ++j) {
        std::vector<double> s(d, 0.0);
        std::size_t cnt = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (a[i] != j) continue;
          ++cnt;
          for (std::size_t t = 0; t < d; ++t) s[t] += x.row_ptr(i)[t];
        }
        if (cnt == 0) continue;
        for (std::size_t t = 0; t < d; ++t) c[j][t] = s[t] / static_cast<double>(cnt);
      }
    }
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) obj += dist(x.row_ptr(i), c[a[i]].data());
    best = std::min(best, obj);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Gradient checks. Each entry maps a seed to the worst relative error of one
// component over all of its inputs.

inline EncoderConfig tiny_encoder_config() {
  EncoderConfig c;
  c.k = 4;
  c.d = 5;
  c.hidden = 6;
  c.conv_channels = 2;
  c.kernel = 3;
  return c;
}

// Worst error over every tensor of `params`, with `loss` built on a tape
// where exactly one parameter is the checked leaf.
inline double check_params(const ParamSet& params,
                           const std::function<ag::Var(ag::Tape&, const BoundParams&)>& loss) {
  double worst = 0.0;
  for (const auto& [name, value] : params) {
    ScalarFn f = [&, name = name](ag::Tape& tape, ag::Var x) {
      BoundParams w(tape, params, false);
      w.rebind(name, x);
      return loss(tape, w);
    };
    worst = std::max(worst, grad_check(f, value));
  }
  return worst;
}

// Random linear readout so that every output coordinate matters.
inline ag::Var readout(ag::Tape& tape, ag::Var v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ag::sum(ag::mul(v, tape.constant(random_tensor(v.value().shape, rng))));
}

inline std::map<std::string, double> gradient_errors(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::map<std::string, double> err;
  const std::size_t b = uniform(rng, 2, 4);
  const std::size_t d = uniform(rng, 2, 5);
  const std::size_t m = uniform(rng, 2, 6);

  {  // encoder forward (embed) and BCE on its head
    EncoderConfig c = tiny_encoder_config();
    c.interaction = seed % 4 != 3;
    const CountryDataset ds = toy_dataset(8, rng);
    EncoderParams p = init_encoder(c, ds, seed);
    std::vector<std::size_t> rows(b);
    for (auto& r : rows) r = uniform(rng, 0, ds.size() - 1);
    const EncoderInput in = make_input(p, ds, rows);
    std::vector<double> labels;
    for (std::size_t r : rows) labels.push_back(ds[r].label());
    err["embed"] = check_params(p.tensors, [&](ag::Tape& tape, const BoundParams& w) {
      return readout(tape, encode(tape, w, c, in).h, seed);
    });
    err["bce"] = check_params(p.tensors, [&](ag::Tape& tape, const BoundParams& w) {
      return ag::bce_with_logits(head_logits(w, encode(tape, w, c, in).h), labels);
    });
  }
  {  // scl over the representation batch
    const std::size_t n = uniform(rng, 3, 6);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(uniform(rng, 0, 1));
    labels[0] = labels[1];
    const double tau = std::vector<double>{0.07, 0.1, 0.5, 1.0}[seed % 4];
    err["scl_loss"] = grad_check([&](ag::Tape&, ag::Var h) { return scl_loss(h, labels, tau); },
                                 random_tensor({n, d}, rng));
  }
  const Tensor h_t = random_tensor({b, d}, rng);
  const Tensor mem = random_tensor({m, d}, rng);
  {
    double e = grad_check([&](ag::Tape& tape, ag::Var x) {
      return readout(tape, memory_attend(x, tape.constant(mem)).h_ts, seed);
    }, h_t);
    e = std::max(e, grad_check([&](ag::Tape& tape, ag::Var x) {
      return readout(tape, memory_attend(tape.constant(h_t), x).h_ts, seed);
    }, mem));
    err["memory_attend"] = e;
  }
  {
    ParamSet t;
    init_adapt_tensors(t, d, seed, 1.0);
    for (auto& [name, v] : t) {
      if (name.find(".b") != std::string::npos) v = random_tensor(v.shape, rng, 0.3);
    }
    const Tensor h_ts = random_tensor({b, d}, rng);
    double e = check_params(t, [&](ag::Tape& tape, const BoundParams& w) {
      return readout(tape, calibrate(w, tape.constant(h_t), tape.constant(h_ts)).h_bar, seed);
    });
    e = std::max(e, grad_check([&](ag::Tape& tape, ag::Var x) {
      BoundParams w(tape, t, false);
      return readout(tape, calibrate(w, x, tape.constant(h_ts)).h_bar, seed);
    }, h_t));
    e = std::max(e, grad_check([&](ag::Tape& tape, ag::Var x) {
      BoundParams w(tape, t, false);
      return readout(tape, calibrate(w, tape.constant(h_t), x).h_bar, seed);
    }, h_ts));
    err["calibrate"] = e;
    // refine composed with the attention it normally consumes
    err["refine"] = grad_check([&](ag::Tape& tape, ag::Var x) {
      BoundParams w(tape, t, false);
      const ag::Var ts = memory_attend(x, tape.constant(mem)).h_ts;
      return readout(tape, refine(x, calibrate(w, x, ts).h_bar), seed);
    }, h_t);
  }
  return err;
}

}  // namespace pbt
