#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "protobank/metric.hpp"
#include "protobank/report.hpp"
#include "protobank/scenario.hpp"
#include "support.hpp"

using namespace protobank;

namespace {

std::vector<std::vector<std::string>> csv_rows(const std::string& csv) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(csv);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

ScenarioReport fake_report(const std::string& name, std::vector<double> revenue) {
  ScenarioReport r;
  r.config = make_scenario(name, ScenarioKind::kDasSingle, {"A"}, "B");
  r.revenue = std::move(revenue);
  std::tie(r.mean, r.stdev) = mean_stdev(r.revenue);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Revenue@k

TEST(Revenue, HandEnumeratedCase) {
  const auto ds = pbt::revenue_fixture({10, 0, 5, 0});
  const std::vector<double> s{0.9, 0.8, 0.7, 0.1};
  EXPECT_NEAR(revenue_at_k(s, ds, 0.25), 10.0 / 15.0, 1e-15);
}

TEST(Revenue, OracleScoresAtFullInspection) {
  const std::vector<double> rev{3, 0, 7, 1, 0};
  EXPECT_EQ(revenue_at_k(rev, pbt::revenue_fixture(rev), 1.0), 1.0);
}

TEST(Revenue, UniformScoresPickLowestIds) {
  for (std::size_t n = 1; n <= 10; ++n) {
    std::vector<double> rev(n);
    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
      rev[i] = static_cast<double>((i * 7) % 5);
      ids[i] = static_cast<std::int64_t>(100 - i * 3);
    }
    rev[0] = 1.0;
    const auto ds = pbt::revenue_fixture(rev, ids);
    std::vector<double> r2;
    std::vector<std::int64_t> i2;
    for (const auto& x : ds.records()) {
      r2.push_back(x.revenue);
      i2.push_back(x.id);
    }
    const std::vector<double> flat(n, 0.5);
    for (double rate : {0.1, 0.3, 0.5, 1.0}) {
      EXPECT_NEAR(revenue_at_k(flat, ds, rate), pbt::revenue_oracle(flat, r2, i2, rate), 1e-15);
    }
  }
}

TEST(Revenue, MatchesOracleOnAllPermutations) {
  std::mt19937_64 rng(1);
  for (std::size_t n = 1; n <= 8; ++n) {
    std::vector<double> rev(n);
    for (auto& r : rev) r = rng() % 2 ? static_cast<double>(pbt::uniform(rng, 1, 9)) : 0.0;
    rev[n - 1] = 2.0;
    const auto ds = pbt::revenue_fixture(rev);
    std::vector<std::int64_t> ids;
    for (const auto& x : ds.records()) ids.push_back(x.id);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) scores[i] = static_cast<double>(i % 3);
    std::sort(scores.begin(), scores.end());
    do {
      for (double rate : {0.05, 0.2, 0.5, 0.9}) {
        ASSERT_NEAR(revenue_at_k(scores, ds, rate), pbt::revenue_oracle(scores, rev, ids, rate), 1e-15);
      }
    } while (std::next_permutation(scores.begin(), scores.end()));
  }
}

TEST(Revenue, MonotoneInRateAndInvariantToIncreasingTransforms) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = pbt::uniform(rng, 1, 50);
    std::vector<double> rev(n), s(n), warped(n);
    for (std::size_t i = 0; i < n; ++i) {
      rev[i] = rng() % 4 == 0 ? static_cast<double>(pbt::uniform(rng, 1, 50)) : 0.0;
      s[i] = static_cast<double>(pbt::uniform(rng, 0, 8)) / 8.0;
      warped[i] = std::exp(3.0 * s[i]) - 7.0;
    }
    rev[0] = 1.0;
    const auto ds = pbt::revenue_fixture(rev);
    double prev = 0.0;
    for (int k = 1; k <= 20; ++k) {
      const double v = revenue_at_k(s, ds, k / 20.0);
      ASSERT_GE(v, prev);
      ASSERT_EQ(v, revenue_at_k(warped, ds, k / 20.0));
      prev = v;
    }
  }
}

TEST(Revenue, Errors) {
  const auto ds = pbt::revenue_fixture({1, 0});
  const std::vector<double> s{1, 0};
  EXPECT_THROW(revenue_at_k(s, ds, 0.0), ConfigError);
  EXPECT_THROW(revenue_at_k(std::vector<double>{1}, ds, 0.5), DataError);
  EXPECT_THROW(revenue_at_k(s, pbt::revenue_fixture({0, 0}), 0.5), DataError);
  EXPECT_EQ(top_count(0.05, 100), 5u);
  EXPECT_EQ(top_count(0.05, 101), 6u);
}

// ---------------------------------------------------------------------------
// Reports

TEST(Report, EmptyListIsHeaderOnly) {
  const auto t = emit_report({});
  EXPECT_EQ(csv_rows(t.csv).size(), 1u);
  EXPECT_TRUE(nlohmann::json::parse(t.json)["rows"].empty());
}

TEST(Report, RowCounts) {
  const auto t = emit_report({fake_report("one", {0.1, 0.2, 0.3, 0.4, 0.5}), fake_report("two", {1, 1, 1, 1, 0.5})});
  const auto rows = csv_rows(t.csv);
  ASSERT_EQ(rows.size(), 1u + 12u);
  EXPECT_EQ(rows[0], report_columns());
  const auto row_col = std::find(report_columns().begin(), report_columns().end(), "row") - report_columns().begin();
  int detail = 0, agg = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    ASSERT_EQ(rows[i].size(), report_columns().size());
    (rows[i][static_cast<std::size_t>(row_col)] == "seed" ? detail : agg) += 1;
  }
  EXPECT_EQ(detail, 10);
  EXPECT_EQ(agg, 2);
}

TEST(Report, CsvAndJsonAgreeAndAggregatesRecompute) {
  const auto t = emit_report({fake_report("one", {0.123456789, 0.2, 0.31}), fake_report("two", {0.5, 0.25})});
  const auto rows = csv_rows(t.csv);
  const auto doc = nlohmann::json::parse(t.json);
  ASSERT_EQ(doc["rows"].size(), rows.size() - 1);
  const auto& cols = report_columns();
  auto col = [&](const char* name) { return static_cast<std::size_t>(std::find(cols.begin(), cols.end(), name) - cols.begin()); };
  std::map<std::string, std::vector<double>> per;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& j = doc["rows"][i - 1];
    EXPECT_EQ(j["scenario"], rows[i][col("scenario")]);
    const double v = std::stod(rows[i][col("revenue_at_k")]);
    EXPECT_EQ(v, j["revenue_at_k"].get<double>());
    if (rows[i][col("row")] == "seed") {
      per[rows[i][col("scenario")]].push_back(v);
    } else {
      const auto [m, s] = mean_stdev(per[rows[i][col("scenario")]]);
      EXPECT_NEAR(v, m, 1e-15);
      EXPECT_NEAR(std::stod(rows[i][col("stdev")]), s, 1e-15);
      EXPECT_EQ(std::stod(rows[i][col("stdev")]), j["stdev"].get<double>());
    }
  }
}

TEST(Report, MeanAndSampleStdev) {
  const auto [m, s] = mean_stdev({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(mean_stdev({7}).second, 0.0);
}

// ---------------------------------------------------------------------------
// Scenario plumbing

TEST(Scenario, SuiteShapes) {
  const auto single = suite_scenarios("single", four_country_world());
  EXPECT_EQ(single.size(), 4u * 3u * 4u);
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& c : single) pairs.insert({c.source_ids.at(0), c.target_id});
  EXPECT_EQ(pairs.size(), 12u);
  EXPECT_EQ(suite_scenarios("multi", multi_source_world()).size(), 1u + 7u);
  EXPECT_EQ(suite_scenarios("ablation", two_country_world()).size(), 5u);
  EXPECT_EQ(suite_scenarios("protocount", two_country_world()).size(), 4u);
  EXPECT_THROW(suite_scenarios("nope", two_country_world()), ConfigError);
  for (const auto& s : suite_names()) {
    for (const auto& c : suite_scenarios(s, suite_world(s))) EXPECT_NO_THROW(validate(c)) << c.name;
  }
}

TEST(Scenario, ValidationCatchesBadConfigs) {
  auto c = make_scenario("x", ScenarioKind::kVanilla, {}, "B");
  EXPECT_THROW(validate(c), ConfigError);
  c = make_scenario("x", ScenarioKind::kDasSingle, {"A", "C"}, "B");
  EXPECT_THROW(validate(c), ConfigError);
  c = make_scenario("x", ScenarioKind::kDasSingle, {"A"}, "B", 0.0);
  EXPECT_THROW(validate(c), ConfigError);
}

namespace {

SyntheticWorldConfig tiny_world() {
  SyntheticWorldConfig w = two_country_world(9);
  for (auto& c : w.countries) c.n_records = 1000;
  return w;
}

ExperimentOptions tiny_options() {
  ExperimentOptions o;
  o.pretrain.epochs = 1;
  o.finetune.epochs = 2;
  return o;
}

}  // namespace

TEST(Scenario, RunsAreDeterministicAndStageErrorsAreTagged) {
  auto cfg = make_scenario("das", ScenarioKind::kDasSingle, {"A"}, "B", 0.05);
  cfg.seeds = {1, 2};
  cfg.per_class = 20;
  ExperimentContext a(tiny_world(), tiny_options());
  ExperimentContext b(tiny_world(), tiny_options());
  const auto ra = run_scenario(cfg, a);
  const auto rb = run_scenario(cfg, b);
  EXPECT_EQ(ra.revenue, rb.revenue);
  EXPECT_EQ(emit_report({ra}).csv, emit_report({rb}).csv);
  // self transfer is legal
  auto self = cfg;
  self.source_ids = {"B"};
  EXPECT_NO_THROW(run_scenario(self, a));
  auto missing = cfg;
  missing.source_ids = {"Z"};
  try {
    run_scenario(missing, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find('['), std::string::npos);
  }
}

TEST(Scenario, NoMemoryAblationIsTheVanillaPathway) {
  ExperimentContext ctx(tiny_world(), tiny_options());
  auto ab = make_scenario("no_memory", ScenarioKind::kAblation, {"A"}, "B", 0.05);
  ab.ablation = Ablation::kNoMemory;
  ab.seeds = {3};
  auto va = make_scenario("vanilla", ScenarioKind::kVanilla, {"A"}, "B", 0.05);
  va.seeds = {3};
  EXPECT_EQ(run_scenario(ab, ctx).revenue, run_scenario(va, ctx).revenue);
}

TEST(Scenario, ServiceExchangeMatchesInProcess) {
  auto cfg = make_scenario("das", ScenarioKind::kDasSingle, {"A"}, "B", 0.05);
  cfg.seeds = {1};
  cfg.per_class = 15;
  ExperimentOptions via = tiny_options();
  via.exchange_via_service = true;
  ExperimentContext a(tiny_world(), tiny_options());
  ExperimentContext b(tiny_world(), via);
  EXPECT_EQ(run_scenario(cfg, a).revenue, run_scenario(cfg, b).revenue);
}

TEST(Scenario, ProtoCountSweepReusesOneSourceModel) {
  ExperimentContext ctx(tiny_world(), tiny_options());
  std::vector<ScenarioConfig> cfgs;
  for (std::size_t per : {5, 50, 500}) {
    auto c = make_scenario("p" + std::to_string(per), ScenarioKind::kProtoCountSweep, {"A"}, "B", 0.05);
    c.per_class = per;
    c.seeds = {1};
    cfgs.push_back(c);
  }
  run_scenarios(cfgs, ctx, 2);
  EXPECT_EQ(ctx.source_models_trained(), 1u);
}
