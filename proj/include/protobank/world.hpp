#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "protobank/declarations.hpp"
#include "protobank/error.hpp"
#include "protobank/seed.hpp"

namespace protobank {

struct CountrySpec {
  std::string country_id;
  int n_records = 8000;
  int duration_days = 180;
  double base_illicit_rate = 0.1;
  std::set<int> fraud_pattern_ids;

  friend bool operator==(const CountrySpec&, const CountrySpec&) = default;
};

struct SyntheticWorldConfig {
  std::uint64_t seed = 7;
  std::vector<CountrySpec> countries;
  int n_hs6 = 60;
  // Size of the world's fraud-pattern library; countries reference pattern
  // ids in [0, n_shared_patterns) and overlapping ids are the transferable part.
  int n_shared_patterns = 4;
  // Share of a country's frauds that follow one of its patterns.
  double pattern_strength = 0.8;

  friend bool operator==(const SyntheticWorldConfig&, const SyntheticWorldConfig&) = default;
};

// Per-HS6 market profile shared by every country of a world.
struct HsProfile {
  std::string code;
  std::string chapter;
  double log_price_mean = 0.0;  // log price per kg
  double log_price_sd = 0.4;
  double tariff_rate = 0.1;
  double log_weight_mean = 4.0;
};

// Undervaluation scheme: goods of one chapter shipped from one origin, in an
// upper band of true price, declared at a fraction of their value.
struct FraudPattern {
  int id = 0;
  std::string chapter;
  std::string origin;
  double price_z_low = 0.0;
  double price_z_high = 2.0;
  double multiplier_low = 0.3;
  double multiplier_high = 0.55;

  bool matches(const ImportDeclaration& x) const {
    return x.country_code == origin && x.hs6.compare(0, 2, chapter) == 0;
  }
};

struct WorldCatalog {
  std::vector<HsProfile> hs6;
  std::vector<std::string> chapters;
  std::vector<std::string> origins;
  std::vector<FraudPattern> patterns;
};


inline void validate(const SyntheticWorldConfig& cfg) {
  auto fail = [](const std::string& what) { throw ConfigError("world config: " + what); };
  if (cfg.countries.empty()) fail("no countries");
  if (cfg.n_hs6 < 8) fail("n_hs6 must be at least 8");
  if (cfg.n_shared_patterns < 0) fail("n_shared_patterns must be nonnegative");
  if (!(cfg.pattern_strength > 0.0 && cfg.pattern_strength <= 1.0)) fail("pattern_strength must lie in (0, 1]");
  std::set<std::string> ids;
  for (const auto& c : cfg.countries) {
    if (c.country_id.empty()) fail("empty country id");
    if (!ids.insert(c.country_id).second) fail("duplicate country id " + c.country_id);
    if (c.n_records < 1000) fail(c.country_id + ": n_records must be at least 1000");
    if (c.duration_days < 60) fail(c.country_id + ": duration_days must be at least 60");
    if (!(c.base_illicit_rate > 0.0 && c.base_illicit_rate < 0.5)) {
      fail(c.country_id + ": base_illicit_rate must lie in (0, 0.5)");
    }
    for (int p : c.fraud_pattern_ids) {
      if (p < 0 || p >= cfg.n_shared_patterns) fail(c.country_id + ": unknown fraud pattern " + std::to_string(p));
    }
  }
}

inline WorldCatalog world_catalog(const SyntheticWorldConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(derive_seed(cfg.seed, "catalog"));
  WorldCatalog cat;

  const int n_chapters = std::max(4, cfg.n_hs6 / 6);
  std::vector<int> chapter_pool(97);
  std::iota(chapter_pool.begin(), chapter_pool.end(), 1);
  std::shuffle(chapter_pool.begin(), chapter_pool.end(), rng);
  for (int i = 0; i < n_chapters; ++i) {
    char buf[4];
    std::snprintf(buf, sizeof buf, "%02d", chapter_pool[static_cast<std::size_t>(i)]);
    cat.chapters.emplace_back(buf);
  }
  std::sort(cat.chapters.begin(), cat.chapters.end());

  std::uniform_int_distribution<int> suffix(0, 9999);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::set<std::string> seen;
  for (int i = 0; i < cfg.n_hs6; ++i) {
    HsProfile h;
    h.chapter = cat.chapters[static_cast<std::size_t>(i % n_chapters)];
    do {
      char buf[8];
      std::snprintf(buf, sizeof buf, "%s%04d", h.chapter.c_str(), suffix(rng));
      h.code = buf;
    } while (!seen.insert(h.code).second);
    h.log_price_mean = 1.0 + 4.0 * unit(rng);
    h.log_price_sd = 0.3 + 0.2 * unit(rng);
    h.tariff_rate = 0.05 + 0.25 * unit(rng);
    h.log_weight_mean = 2.0 + 5.0 * unit(rng);
    cat.hs6.push_back(std::move(h));
  }

  cat.origins = {"BR", "CN", "DE", "FR", "IN", "IT", "JP", "KR", "MX", "TH", "US", "VN"};

  std::vector<std::size_t> chapter_order(cat.chapters.size());
  std::iota(chapter_order.begin(), chapter_order.end(), 0);
  std::shuffle(chapter_order.begin(), chapter_order.end(), rng);
  std::vector<std::size_t> origin_order(cat.origins.size());
  std::iota(origin_order.begin(), origin_order.end(), 0);
  std::shuffle(origin_order.begin(), origin_order.end(), rng);
  for (int p = 0; p < cfg.n_shared_patterns; ++p) {
    FraudPattern fp;
    fp.id = p;
    fp.chapter = cat.chapters[chapter_order[static_cast<std::size_t>(p) % chapter_order.size()]];
    fp.origin = cat.origins[origin_order[static_cast<std::size_t>(p) % origin_order.size()]];
    fp.price_z_low = 0.0;
    fp.price_z_high = 2.0;
    fp.multiplier_low = 0.3 + 0.1 * unit(rng);
    fp.multiplier_high = fp.multiplier_low + 0.2;
    cat.patterns.push_back(std::move(fp));
  }
  return cat;
}

namespace detail {

inline double round_cents(double v) { return std::max(0.01, std::round(v * 100.0) / 100.0); }

inline CountryDataset generate_country(const SyntheticWorldConfig& cfg, const WorldCatalog& cat,
                                       const CountrySpec& spec) {
  std::mt19937_64 rng(derive_seed(cfg.seed, "country", spec.country_id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> hs_weight(cat.hs6.size());
  for (double& w : hs_weight) w = std::exp(gauss(rng));
  std::vector<double> origin_weight(cat.origins.size());
  for (double& w : origin_weight) w = std::exp(gauss(rng));
  const double price_shift = 0.05 * gauss(rng);

  std::discrete_distribution<std::size_t> pick_hs(hs_weight.begin(), hs_weight.end());
  std::discrete_distribution<std::size_t> pick_origin(origin_weight.begin(), origin_weight.end());

  std::vector<const FraudPattern*> patterns;
  for (int id : spec.fraud_pattern_ids) patterns.push_back(&cat.patterns[static_cast<std::size_t>(id)]);

  // Pattern frauds draw HS6 codes from the pattern chapter, weighted by
  // the country's popularity.
  std::vector<std::discrete_distribution<std::size_t>> pattern_hs;
  std::vector<std::vector<std::size_t>> pattern_codes;
  for (const FraudPattern* p : patterns) {
    std::vector<std::size_t> codes;
    std::vector<double> w;
    for (std::size_t i = 0; i < cat.hs6.size(); ++i) {
      if (cat.hs6[i].chapter == p->chapter) {
        codes.push_back(i);
        w.push_back(hs_weight[i]);
      }
    }
    pattern_codes.push_back(std::move(codes));
    pattern_hs.emplace_back(w.begin(), w.end());
  }

  const Day start = *parse_iso_date("2021-01-01");
  std::uniform_int_distribution<int> pick_day(0, spec.duration_days - 1);

  struct Draft {
    ImportDeclaration rec;
    std::size_t seq;
  };
  std::vector<Draft> drafts;
  drafts.reserve(static_cast<std::size_t>(spec.n_records));
  for (int n = 0; n < spec.n_records; ++n) {
    const bool fraud = unit(rng) < spec.base_illicit_rate;
    std::size_t hs = 0, origin = 0;
    double z = 0.0, multiplier = 1.0;
    if (fraud && !patterns.empty() && unit(rng) < cfg.pattern_strength) {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(0, patterns.size() - 1)(rng);
      const FraudPattern& p = *patterns[k];
      hs = pattern_codes[k][pattern_hs[k](rng)];
      origin = static_cast<std::size_t>(std::find(cat.origins.begin(), cat.origins.end(), p.origin) - cat.origins.begin());
      z = p.price_z_low + (p.price_z_high - p.price_z_low) * unit(rng);
      multiplier = p.multiplier_low + (p.multiplier_high - p.multiplier_low) * unit(rng);
    } else {
      hs = pick_hs(rng);
      origin = pick_origin(rng);
      z = gauss(rng);
      if (fraud) multiplier = 0.55 + 0.3 * unit(rng);
    }
    const HsProfile& prof = cat.hs6[hs];
    const double weight = round_cents(std::exp(prof.log_weight_mean + 0.8 * gauss(rng)));
    const double quantity = std::max(1.0, std::round(std::exp(std::log(weight) - 1.0 + 0.7 * gauss(rng))));
    const double true_value = weight * std::exp(prof.log_price_mean + price_shift + prof.log_price_sd * z);
    const double cif = round_cents(true_value * multiplier);

    ImportDeclaration x;
    x.date = start + pick_day(rng);
    x.quantity = quantity;
    x.gross_weight = weight;
    x.hs6 = prof.code;
    x.country_code = cat.origins[origin];
    x.cif_value = cif;
    x.total_taxes = std::round(prof.tariff_rate * cif * 100.0) / 100.0;
    x.illicit = fraud;
    x.revenue = fraud ? round_cents(prof.tariff_rate * std::max(true_value - cif, 0.0)) : 0.0;
    drafts.push_back({std::move(x), static_cast<std::size_t>(n)});
  }
  std::stable_sort(drafts.begin(), drafts.end(),
                   [](const Draft& a, const Draft& b) { return a.rec.date < b.rec.date; });
  std::vector<ImportDeclaration> records;
  records.reserve(drafts.size());
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    drafts[i].rec.id = static_cast<std::int64_t>(i + 1);
    records.push_back(std::move(drafts[i].rec));
  }
  return CountryDataset(spec.country_id, std::move(records));
}

}  // namespace detail

inline std::map<std::string, CountryDataset> generate_world(const SyntheticWorldConfig& cfg) {
  const WorldCatalog cat = world_catalog(cfg);
  std::map<std::string, CountryDataset> world;
  for (const auto& spec : cfg.countries) world.emplace(spec.country_id, detail::generate_country(cfg, cat, spec));
  return world;
}

// ---------------------------------------------------------------------------
// Presets

// One source (A) and one target (B) that share pattern 0.
inline SyntheticWorldConfig two_country_world(std::uint64_t seed = 7) {
  SyntheticWorldConfig cfg;
  cfg.seed = seed;
  cfg.n_shared_patterns = 3;
  cfg.countries = {{"A", 8000, 180, 0.10, {0, 1}}, {"B", 8000, 180, 0.12, {0, 2}}};
  return cfg;
}

// Four countries with pairwise-overlapping patterns; the default for the
// full experiment grid.
inline SyntheticWorldConfig four_country_world(std::uint64_t seed = 7) {
  SyntheticWorldConfig cfg;
  cfg.seed = seed;
  cfg.n_shared_patterns = 5;
  cfg.countries = {{"A", 8000, 180, 0.10, {0, 1}},
                   {"B", 8000, 180, 0.12, {0, 2}},
                   {"C", 8000, 180, 0.12, {1, 3}},
                   {"D", 8000, 180, 0.12, {2, 3, 4}}};
  return cfg;
}

// Three sources each holding one of the target's patterns (T).
inline SyntheticWorldConfig multi_source_world(std::uint64_t seed = 7) {
  SyntheticWorldConfig cfg;
  cfg.seed = seed;
  cfg.n_shared_patterns = 6;
  cfg.countries = {{"S1", 8000, 180, 0.10, {0, 3}},
                   {"S2", 8000, 180, 0.10, {1, 4}},
                   {"S3", 8000, 180, 0.10, {2, 5}},
                   {"T", 8000, 180, 0.12, {0, 1, 2}}};
  return cfg;
}

inline SyntheticWorldConfig world_preset(const std::string& name, std::uint64_t seed = 7) {
  if (name == "two_country") return two_country_world(seed);
  if (name == "four_country") return four_country_world(seed);
  if (name == "multi_source") return multi_source_world(seed);
  throw ConfigError("unknown world preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Flat key=value config text

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto t = std::string(trim(item));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

inline std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    kv[std::string(trim(body.substr(0, eq)))] = std::string(trim(body.substr(eq + 1)));
  }
  return kv;
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  T v{};
  if (!parse_number(std::string_view(text), v)) throw ConfigError("config key '" + key + "': bad value '" + text + "'");
  return v;
}

}  // namespace detail

// Keys: preset, seed, n_hs6, n_shared_patterns, pattern_strength, countries
// (comma list) and per-country <ID>.n_records, <ID>.duration_days,
// <ID>.base_illicit_rate, <ID>.patterns.
inline SyntheticWorldConfig parse_world_config(std::istream& in) {
  auto kv = detail::parse_key_values(in);
  std::uint64_t seed = 7;
  if (auto it = kv.find("seed"); it != kv.end()) seed = detail::parse_value<std::uint64_t>("seed", it->second);
  SyntheticWorldConfig cfg = kv.count("preset") ? world_preset(kv.at("preset"), seed) : SyntheticWorldConfig{};
  cfg.seed = seed;
  std::set<std::string> used{"preset", "seed"};
  auto take = [&](const std::string& key, auto& field) {
    if (auto it = kv.find(key); it != kv.end()) {
      field = detail::parse_value<std::decay_t<decltype(field)>>(key, it->second);
      used.insert(key);
    }
  };
  take("n_hs6", cfg.n_hs6);
  take("n_shared_patterns", cfg.n_shared_patterns);
  take("pattern_strength", cfg.pattern_strength);
  if (auto it = kv.find("countries"); it != kv.end()) {
    used.insert("countries");
    std::vector<CountrySpec> specs;
    for (const auto& id : detail::split_list(it->second)) {
      auto existing = std::find_if(cfg.countries.begin(), cfg.countries.end(),
                                   [&](const CountrySpec& c) { return c.country_id == id; });
      CountrySpec fresh;
      fresh.country_id = id;
      specs.push_back(existing != cfg.countries.end() ? *existing : fresh);
    }
    cfg.countries = std::move(specs);
  }
  for (auto& c : cfg.countries) {
    take(c.country_id + ".n_records", c.n_records);
    take(c.country_id + ".duration_days", c.duration_days);
    take(c.country_id + ".base_illicit_rate", c.base_illicit_rate);
    if (auto it = kv.find(c.country_id + ".patterns"); it != kv.end()) {
      used.insert(it->first);
      c.fraud_pattern_ids.clear();
      for (const auto& p : detail::split_list(it->second)) {
        c.fraud_pattern_ids.insert(detail::parse_value<int>(it->first, p));
      }
    }
  }
  for (const auto& [k, v] : kv) {
    if (!used.count(k)) throw ConfigError("unknown world config key '" + k + "'");
  }
  validate(cfg);
  return cfg;
}

inline std::string to_config_text(const SyntheticWorldConfig& cfg) {
  std::ostringstream os;
  os << "seed=" << cfg.seed << "\nn_hs6=" << cfg.n_hs6 << "\nn_shared_patterns=" << cfg.n_shared_patterns
     << "\npattern_strength=" << detail::format_double(cfg.pattern_strength) << "\ncountries=";
  for (std::size_t i = 0; i < cfg.countries.size(); ++i) os << (i ? "," : "") << cfg.countries[i].country_id;
  os << '\n';
  for (const auto& c : cfg.countries) {
    os << c.country_id << ".n_records=" << c.n_records << '\n'
       << c.country_id << ".duration_days=" << c.duration_days << '\n'
       << c.country_id << ".base_illicit_rate=" << detail::format_double(c.base_illicit_rate) << '\n'
       << c.country_id << ".patterns=";
    bool first = true;
    for (int p : c.fraud_pattern_ids) {
      os << (first ? "" : ",") << p;
      first = false;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace protobank
