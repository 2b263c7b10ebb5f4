#pragma once

#include <atomic>
#include <chrono>
#include <exception>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <future>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "protobank/adapt.hpp"
#include "protobank/bank.hpp"
#include "protobank/declarations.hpp"
#include "protobank/error.hpp"
#include "protobank/metric.hpp"
#include "protobank/pretrain.hpp"
#include "protobank/seed.hpp"
#include "protobank/service.hpp"
#include "protobank/world.hpp"

namespace protobank {

inline constexpr std::string_view kVersion = "0.1.0";

enum class ScenarioKind {
  kTargetOnly,
  kVanilla,
  kAkc,
  kDasSingle,
  kDasMulti,
  kRandomMemory,
  kAblation,
  kProtoCountSweep,
  kLogsizeSweep,
};

enum class Ablation { kNone, kNoEncoding, kNoScl, kNoMemory, kNoCalibration };

inline const char* to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::kTargetOnly: return "target_only";
    case ScenarioKind::kVanilla: return "vanilla";
    case ScenarioKind::kAkc: return "akc";
    case ScenarioKind::kDasSingle: return "das_single";
    case ScenarioKind::kDasMulti: return "das_multi";
    case ScenarioKind::kRandomMemory: return "random_memory";
    case ScenarioKind::kAblation: return "ablation";
    case ScenarioKind::kProtoCountSweep: return "proto_count_sweep";
    case ScenarioKind::kLogsizeSweep: return "logsize_sweep";
  }
  return "?";
}

inline const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoEncoding: return "no_encoding";
    case Ablation::kNoScl: return "no_scl";
    case Ablation::kNoMemory: return "no_memory";
    case Ablation::kNoCalibration: return "no_calibration";
  }
  return "?";
}

struct ScenarioConfig {
  std::string name;  // report key
  ScenarioKind kind = ScenarioKind::kDasSingle;
  std::vector<std::string> source_ids;
  std::string target_id;
  double label_fraction = 0.01;
  std::size_t per_class = 500;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double inspection_rate = 0.05;
  Ablation ablation = Ablation::kNone;
};

inline void validate(const ScenarioConfig& c) {
  if (c.seeds.empty()) throw ConfigError("scenario " + c.name + ": no seeds");
  if (!(c.inspection_rate > 0.0 && c.inspection_rate <= 1.0)) {
    throw ConfigError("scenario " + c.name + ": inspection rate must lie in (0, 1]");
  }
  if (!(c.label_fraction > 0.0 && c.label_fraction <= 1.0)) {
    throw ConfigError("scenario " + c.name + ": label fraction must lie in (0, 1]");
  }
  if (c.target_id.empty()) throw ConfigError("scenario " + c.name + ": no target");
  const bool needs_source = c.kind != ScenarioKind::kTargetOnly;
  if (needs_source && c.source_ids.empty()) throw ConfigError("scenario " + c.name + ": no source countries");
  if (c.kind != ScenarioKind::kDasMulti && c.source_ids.size() > 1) {
    throw ConfigError("scenario " + c.name + ": only das_multi takes several sources");
  }
  if (c.per_class == 0) throw ConfigError("scenario " + c.name + ": per_class must be positive");
}

struct ScenarioReport {
  ScenarioConfig config;
  std::vector<double> revenue;  // one per seed, aligned with config.seeds
  double mean = 0.0;
  double stdev = 0.0;           // sample standard deviation (0 for one seed)
  double wall_seconds = 0.0;
  std::string version{kVersion};
};

inline std::pair<double, double> mean_stdev(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

// Knobs shared by every scenario of one experiment.
struct ExperimentOptions {
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  SplitSpec split;
  AkcConfig akc;
  double fraud_like_fraction = 0.05;
  // Route prototype sets through a local bank service instead of in-process.
  bool exchange_via_service = false;
};

namespace detail {

// Re-raises library errors with the failing stage prefixed, keeping the type.
template <class Fn>
auto staged(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const SchemaError& e) {
    throw DataError("[" + stage + "] " + e.what());
  } catch (const DataError& e) {
    throw DataError("[" + stage + "] " + e.what());
  } catch (const NumericError& e) {
    throw NumericError("[" + stage + "] " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError("[" + stage + "] " + e.what());
  } catch (const FormatError& e) {
    throw FormatError("[" + stage + "] " + e.what());
  } catch (const NotFoundError& e) {
    throw NotFoundError("[" + stage + "] " + e.what());
  }
}

}  // namespace detail

// Generated world plus memoized pipeline stages. Safe to share across threads.
class ExperimentContext {
 public:
  ExperimentContext(SyntheticWorldConfig world, ExperimentOptions opts)
      : world_cfg_(std::move(world)), opts_(std::move(opts)) {
    world_ = generate_world(world_cfg_);
    for (const auto& [id, ds] : world_) splits_.emplace(id, split(ds, opts_.split));
  }

  const ExperimentOptions& options() const { return opts_; }
  const SyntheticWorldConfig& world_config() const { return world_cfg_; }

  const DatasetSplit& split_of(const std::string& id) const {
    auto it = splits_.find(id);
    if (it == splits_.end()) throw ConfigError("unknown country '" + id + "'");
    return it->second;
  }

  // Pretrained source model for (source, seed, ablation-relevant variant).
  EncoderParams source_model(const std::string& id, std::uint64_t seed, Ablation ab) {
    const bool scl = ab != Ablation::kNoScl;
    const bool inter = ab != Ablation::kNoEncoding;
    const std::string key = id + "|" + std::to_string(seed) + "|" + std::to_string(scl) + std::to_string(inter);
    return memo<EncoderParams>(models_, key, [&] {
      const DatasetSplit& s = split_of(id);
      PretrainConfig pc = opts_.pretrain;
      pc.use_scl = scl;
      pc.encoder.interaction = inter;
      pc.seed = derive_seed(seed, "pretrain", id);
      return detail::staged("pretrain " + id, [&] { return pretrain(s.train, s.valid, pc).params; });
    });
  }

  PrototypeSet prototypes(const std::string& id, std::uint64_t seed, Ablation ab, std::size_t per_class) {
    const std::string key = id + "|" + std::to_string(seed) + "|" + std::to_string(ab != Ablation::kNoScl) +
                            std::to_string(ab != Ablation::kNoEncoding) + "|" + std::to_string(per_class);
    return memo<PrototypeSet>(protos_, key, [&] {
      const EncoderParams m = source_model(id, seed, ab);
      return detail::staged("prototypes " + id, [&] {
        const CountryDataset fraud_like = select_fraud_like(m, split_of(id).train, opts_.fraud_like_fraction);
        return extract_prototypes(m, fraud_like, per_class, derive_seed(seed, "prototypes", id));
      });
    });
  }

  std::size_t source_models_trained() {
    std::lock_guard<std::mutex> lock(mu_);
    return models_.size();
  }

  // Revenue@k of one (scenario, seed) cell.
  double run_cell(const ScenarioConfig& cfg, std::uint64_t seed) {
    return memo<double>(cells_, cell_key(cfg, seed), [&] { return compute_cell(cfg, seed); });
  }

 private:
  // Computes each key once; concurrent callers of a key in flight wait for
  // the first one (and see its exception, if any).
  template <class T, class Fn>
  T memo(std::map<std::string, std::shared_future<T>>& cache, const std::string& key, Fn&& make) {
    std::promise<T> promise;
    std::shared_future<T> fut;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto [it, fresh] = cache.try_emplace(key);
      if (!fresh) {
        fut = it->second;
      } else {
        it->second = promise.get_future().share();
      }
    }
    if (fut.valid()) return fut.get();
    try {
      promise.set_value(make());
    } catch (...) {
      promise.set_exception(std::current_exception());
    }
    std::lock_guard<std::mutex> lock(mu_);
    return cache.at(key).get();
  }

  // Everything that determines a cell's value; the display name is excluded.
  static std::string cell_key(const ScenarioConfig& c, std::uint64_t seed) {
    ScenarioKind kind = c.kind;
    if (kind == ScenarioKind::kProtoCountSweep || kind == ScenarioKind::kLogsizeSweep) kind = ScenarioKind::kDasSingle;
    if (kind == ScenarioKind::kAblation && c.ablation == Ablation::kNone) kind = ScenarioKind::kDasSingle;
    if (kind == ScenarioKind::kAblation && c.ablation == Ablation::kNoMemory) kind = ScenarioKind::kVanilla;
    std::string k = std::string(to_string(kind)) + "|" + c.target_id + "|";
    if (kind != ScenarioKind::kTargetOnly) {
      for (const auto& s : c.source_ids) k += s + ",";
    }
    k += "|" + detail::format_double(c.label_fraction) + "|" + detail::format_double(c.inspection_rate);
    if (kind == ScenarioKind::kDasSingle || kind == ScenarioKind::kDasMulti || kind == ScenarioKind::kRandomMemory ||
        kind == ScenarioKind::kAblation) {
      k += "|" + std::to_string(c.per_class);
    }
    if (kind == ScenarioKind::kAblation) k += std::string("|") + to_string(c.ablation);
    return k + "|" + std::to_string(seed);
  }

  MemoryBank exchange(std::vector<PrototypeSet> sets, std::uint64_t seed) {
    if (!opts_.exchange_via_service) return assemble(std::move(sets));
    const auto dir = std::filesystem::temp_directory_path() /
                     ("protobank-exchange-" + std::to_string(::getpid()) + "-" + std::to_string(seed) + "-" +
                      std::to_string(exchange_counter_++));
    std::vector<std::string> ids;
    MemoryBank bank;
    {
      BankServer server(dir);
      BankClient client("127.0.0.1:" + std::to_string(server.port()));
      for (const auto& s : sets) {
        client.put(s);
        ids.push_back(s.source_id);
      }
      bank = client.get(ids);
    }
    std::filesystem::remove_all(dir);
    return bank;
  }

  double compute_cell(const ScenarioConfig& cfg, std::uint64_t seed) {
    const DatasetSplit& tgt = detail::staged("countries", [&]() -> const DatasetSplit& {
      for (const auto& s : cfg.source_ids) split_of(s);
      return split_of(cfg.target_id);
    });
    const CountryDataset train = detail::staged("mask " + cfg.target_id, [&] {
      return mask_labels(tgt.train, cfg.label_fraction, derive_seed(seed, "mask", cfg.target_id));
    });

    FinetuneConfig fc = opts_.finetune;
    fc.seed = derive_seed(seed, "finetune", cfg.target_id);
    ScenarioKind kind = cfg.kind;
    if (kind == ScenarioKind::kProtoCountSweep || kind == ScenarioKind::kLogsizeSweep) kind = ScenarioKind::kDasSingle;
    const Ablation ab = kind == ScenarioKind::kAblation ? cfg.ablation : Ablation::kNone;
    if (ab == Ablation::kNoEncoding) fc.encoder.interaction = false;

    std::optional<AdaptParams> model;
    auto run = [&](const MemoryBank& bank, const EncoderParams* source) {
      return detail::staged("finetune " + cfg.target_id,
                            [&] { return finetune(train, tgt.valid, bank, source, fc).params; });
    };

    if (kind == ScenarioKind::kTargetOnly) {
      fc.init_from_source = false;
      fc.use_memory = false;
      model = run(MemoryBank{}, nullptr);
    } else if (kind == ScenarioKind::kVanilla || ab == Ablation::kNoMemory) {
      const EncoderParams src = source_model(cfg.source_ids.front(), seed, Ablation::kNone);
      fc.init_from_source = true;
      fc.use_memory = false;
      model = run(MemoryBank{}, &src);
    } else if (kind == ScenarioKind::kAkc) {
      const EncoderParams src = source_model(cfg.source_ids.front(), seed, Ablation::kNone);
      model = detail::staged("akc " + cfg.target_id,
                             [&] { return akc_finetune(train, tgt.valid, src, fc, opts_.akc).params; });
    } else {
      // DAS family: memory bank + source initialisation.
      std::vector<PrototypeSet> sets;
      for (const auto& s : cfg.source_ids) sets.push_back(prototypes(s, seed, ab, cfg.per_class));
      MemoryBank bank;
      if (kind == ScenarioKind::kRandomMemory) {
        std::size_t rows = 0;
        for (const auto& s : sets) rows += s.rows();
        bank = assemble({random_bank(sets.front().dim, std::max<std::size_t>(rows, 2), derive_seed(seed, "random"))});
      } else {
        bank = detail::staged("exchange", [&] { return exchange(std::move(sets), seed); });
      }
      const EncoderParams src = best_source(cfg.source_ids, seed, ab, tgt.valid, cfg.inspection_rate);
      fc.init_from_source = true;
      fc.use_memory = true;
      fc.use_calibration = ab != Ablation::kNoCalibration;
      model = run(bank, &src);
    }
    return detail::staged("evaluate " + cfg.target_id,
                          [&] { return revenue_at_k(predict(*model, tgt.test), tgt.test, cfg.inspection_rate); });
  }

  // Among several sources, the model whose own scores rank the target's
  // validation window best initialises the target encoder.
  EncoderParams best_source(const std::vector<std::string>& ids, std::uint64_t seed, Ablation ab,
                            const CountryDataset& valid, double rate) {
    std::optional<EncoderParams> best;
    double best_val = -1.0;
    for (const auto& id : ids) {
      EncoderParams m = source_model(id, seed, ab);
      if (ids.size() == 1) return m;
      double v = detail::validation_revenue([&](const CountryDataset& d) { return score_all(m, d); }, valid, rate);
      if (std::isnan(v)) v = -0.5;
      if (!best || v > best_val) {
        best_val = v;
        best = std::move(m);
      }
    }
    return *best;
  }

  SyntheticWorldConfig world_cfg_;
  ExperimentOptions opts_;
  std::map<std::string, CountryDataset> world_;
  std::map<std::string, DatasetSplit> splits_;
  std::mutex mu_;
  std::map<std::string, std::shared_future<EncoderParams>> models_;
  std::map<std::string, std::shared_future<PrototypeSet>> protos_;
  std::map<std::string, std::shared_future<double>> cells_;
  std::atomic<unsigned> exchange_counter_{0};
};

inline ScenarioReport run_scenario(const ScenarioConfig& cfg, ExperimentContext& ctx) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  ScenarioReport r;
  r.config = cfg;
  for (std::uint64_t s : cfg.seeds) r.revenue.push_back(ctx.run_cell(cfg, s));
  std::tie(r.mean, r.stdev) = mean_stdev(r.revenue);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// Runs every (scenario, seed) cell with up to `jobs` threads, then assembles
// reports in input order.
inline std::vector<ScenarioReport> run_scenarios(const std::vector<ScenarioConfig>& cfgs, ExperimentContext& ctx,
                                                 unsigned jobs = 1) {
  for (const auto& c : cfgs) validate(c);
  if (jobs > 1) {
    std::vector<std::pair<const ScenarioConfig*, std::uint64_t>> cells;
    for (const auto& c : cfgs) {
      for (auto s : c.seeds) cells.emplace_back(&c, s);
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < cells.size();) {
          try {
            ctx.run_cell(*cells[i].first, cells[i].second);
          } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!err) err = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
  }
  std::vector<ScenarioReport> out;
  for (const auto& c : cfgs) out.push_back(run_scenario(c, ctx));
  return out;
}

// ---------------------------------------------------------------------------
// Suites

inline ScenarioConfig make_scenario(std::string name, ScenarioKind kind, std::vector<std::string> sources,
                                    std::string target, double label_fraction = 0.01) {
  ScenarioConfig c;
  c.name = std::move(name);
  c.kind = kind;
  c.source_ids = std::move(sources);
  c.target_id = std::move(target);
  c.label_fraction = label_fraction;
  return c;
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"single", "multi", "logsize", "ablation", "protocount", "randommem"};
  return names;
}

// The world each suite runs on by default.
inline SyntheticWorldConfig suite_world(const std::string& suite, std::uint64_t seed = 7) {
  if (suite == "single") return four_country_world(seed);
  if (suite == "multi") return multi_source_world(seed);
  return two_country_world(seed);
}

// Scenario grid of a suite over `world`. Country roles: in the two-country
// world A is the source and B the target; in the multi-source world the last
// country is the target.
inline std::vector<ScenarioConfig> suite_scenarios(const std::string& suite, const SyntheticWorldConfig& world) {
  std::vector<std::string> ids;
  for (const auto& c : world.countries) ids.push_back(c.country_id);
  if (ids.size() < 2) throw ConfigError("suite " + suite + " needs at least two countries");
  const std::string src = ids.front();
  const std::string tgt = ids.back();
  std::vector<ScenarioConfig> out;
  using K = ScenarioKind;
  if (suite == "single") {
    for (const auto& t : ids) {
      for (const auto& s : ids) {
        if (s == t) continue;
        const std::string pair = s + "_to_" + t;
        out.push_back(make_scenario("target_only_" + pair, K::kTargetOnly, {s}, t));
        out.push_back(make_scenario("vanilla_" + pair, K::kVanilla, {s}, t));
        out.push_back(make_scenario("akc_" + pair, K::kAkc, {s}, t));
        out.push_back(make_scenario("das_" + pair, K::kDasSingle, {s}, t));
      }
    }
  } else if (suite == "multi") {
    const std::vector<std::string> sources(ids.begin(), ids.end() - 1);
    out.push_back(make_scenario("target_only", K::kTargetOnly, {}, tgt));
    const std::size_t m = sources.size();
    for (std::size_t mask = 1; mask < (std::size_t{1} << m); ++mask) {
      std::vector<std::string> pick;
      std::string name;
      for (std::size_t i = 0; i < m; ++i) {
        if (mask & (std::size_t{1} << i)) {
          pick.push_back(sources[i]);
          name += (name.empty() ? "" : "+") + sources[i];
        }
      }
      out.push_back(make_scenario("das_" + name, pick.size() == 1 ? K::kDasSingle : K::kDasMulti, pick, tgt));
    }
  } else if (suite == "logsize") {
    for (double f : {0.01, 0.02, 0.05, 0.10}) {
      const std::string tag = detail::format_double(f);
      out.push_back(make_scenario("target_only_" + tag, K::kTargetOnly, {}, tgt, f));
      out.push_back(make_scenario("das_" + tag, K::kLogsizeSweep, {src}, tgt, f));
    }
  } else if (suite == "ablation") {
    for (Ablation a : {Ablation::kNone, Ablation::kNoEncoding, Ablation::kNoScl, Ablation::kNoMemory,
                       Ablation::kNoCalibration}) {
      auto c = make_scenario(a == Ablation::kNone ? "full" : to_string(a), K::kAblation, {src}, tgt);
      c.ablation = a;
      out.push_back(c);
    }
  } else if (suite == "protocount") {
    out.push_back(make_scenario("protos_0", K::kVanilla, {src}, tgt));
    for (std::size_t total : {10, 100, 1000}) {
      auto c = make_scenario("protos_" + std::to_string(total), K::kProtoCountSweep, {src}, tgt);
      c.per_class = total / 2;
      out.push_back(c);
    }
  } else if (suite == "randommem") {
    out.push_back(make_scenario("no_memory", K::kVanilla, {src}, tgt));
    out.push_back(make_scenario("random", K::kRandomMemory, {src}, tgt));
    out.push_back(make_scenario("source_prototypes", K::kDasSingle, {src}, tgt));
  } else {
    throw ConfigError("unknown suite '" + suite + "'");
  }
  return out;
}

}  // namespace protobank
