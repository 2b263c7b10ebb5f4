#include <gtest/gtest.h>

#include <sstream>

#include "protobank/declarations.hpp"
#include "protobank/encoder.hpp"
#include "protobank/world.hpp"

using namespace protobank;

namespace {

const char* kHeader = "id,date,quantity,gross_weight,hs6,country_code,cif_value,total_taxes,illicit,revenue\n";

CountryDataset parse(const std::string& body) {
  std::istringstream in(std::string(kHeader) + body);
  return read_csv(in, "XX");
}

// Records on days 0..days-1, one per day.
CountryDataset daily(int days) {
  std::vector<ImportDeclaration> recs;
  for (int d = 0; d < days; ++d) {
    ImportDeclaration r;
    r.id = d;
    r.date = static_cast<Day>(d);
    r.hs6 = "111111";
    r.country_code = "AB";
    r.illicit = d % 4 == 0;
    r.revenue = d % 4 == 0 ? 1.0 : 0.0;
    recs.push_back(r);
  }
  return CountryDataset("D", recs);
}

SyntheticWorldConfig small_world() {
  SyntheticWorldConfig w = two_country_world(3);
  for (auto& c : w.countries) c.n_records = 1000;
  return w;
}

}  // namespace

TEST(Csv, WellFormedRowsAreSortedByDate) {
  const auto ds = parse(
      "3,2024-01-03,1,2,010101,CN,10,1,0,0\n"
      "1,2024-01-01,1,2,010101,CN,10,1,1,4.5\n"
      "2,2024-01-02,1,2,020202,DE,10,1,,\n");
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds[0].id, 1);
  EXPECT_EQ(ds[2].id, 3);
  EXPECT_FALSE(ds[1].labeled());
  EXPECT_EQ(ds.labeled_count(), 2u);
}

TEST(Csv, BadHs6NamesTheRow) {
  try {
    parse("1,2024-01-01,1,2,010101,CN,10,1,0,0\n7,2024-01-01,1,2,12AB56,CN,10,1,0,0\n");
    FAIL() << "expected a schema error";
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("12AB56"), std::string::npos);
  }
}

TEST(Csv, RevenueOnLicitRecordIsRejected) {
  EXPECT_THROW(parse("1,2024-01-01,1,2,010101,CN,10,1,0,5.0\n"), DataError);
}

TEST(Csv, WriteThenReadRoundTrips) {
  const auto w = generate_world(small_world());
  const auto& a = w.at("A");
  std::ostringstream out;
  write_csv(out, a);
  std::istringstream in(out.str());
  EXPECT_EQ(read_csv(in, "A"), a);
}

TEST(Split, ChronologicalWindows) {
  const auto s = split(daily(100), SplitSpec{});
  EXPECT_EQ(s.train.size(), 56u);
  EXPECT_EQ(s.train.last_day(), 55);
  EXPECT_EQ(s.valid.size(), 14u);
  EXPECT_EQ(s.valid.first_day(), 56);
  EXPECT_EQ(s.test.size(), 30u);
  EXPECT_EQ(s.test.first_day(), 70);
}

TEST(Split, TooShortDatasetFails) { EXPECT_THROW(split(daily(10), SplitSpec{}), DataError); }

TEST(Split, IgnoresSeed) {
  const auto ds = daily(100);
  EXPECT_EQ(split(ds, {}, 1).train, split(ds, {}, 2).train);
  EXPECT_EQ(split(ds, {}, 1).test, split(ds, {}, 2).test);
}

TEST(Mask, FullFractionIsIdentity) {
  const auto ds = daily(100);
  EXPECT_EQ(mask_labels(ds, 1.0, 5), ds);
}

TEST(Mask, KeepsRoundedCountAndSealedOutcomes) {
  const auto ds = daily(200);
  const auto m = mask_labels(ds, 0.01, 9);
  EXPECT_EQ(m.labeled_count(), 2u);
  EXPECT_EQ(m.sealed(), ds.sealed());
  EXPECT_EQ(mask_labels(ds, 0.01, 9), m);
  EXPECT_THROW(mask_labels(ds, 0.0, 9), ConfigError);
}

TEST(World, SameSeedSameData) {
  EXPECT_EQ(generate_world(small_world()), generate_world(small_world()));
  auto other = small_world();
  other.seed = 4;
  EXPECT_NE(generate_world(small_world()).at("A"), generate_world(other).at("A"));
}

TEST(World, IllicitRateTracksConfig) {
  SyntheticWorldConfig w;
  w.countries = {{"R", 10000, 180, 0.05, {0}}};
  const auto ds = generate_world(w).at("R");
  std::size_t bad = 0;
  for (const auto& r : ds.records()) bad += r.illicit.value_or(false);
  const double rate = static_cast<double>(bad) / static_cast<double>(ds.size());
  EXPECT_GE(rate, 0.04);
  EXPECT_LE(rate, 0.06);
}

// A logistic probe fit on A's frauds of the shared pattern ranks B's frauds
// of that pattern above B's licit records.
TEST(World, SharedPatternTransfers) {
  auto cfg = two_country_world(11);
  cfg.countries[0].n_records = 4000;
  cfg.countries[1].n_records = 4000;
  const auto w = generate_world(cfg);
  const auto& a = w.at("A");
  const auto& b = w.at("B");
  const auto stats = standardize_stats(a);
  auto features = [&](const ImportDeclaration& r) {
    auto f = raw_features(r);
    std::vector<double> x;
    for (std::size_t j = 0; j < f.size(); ++j) x.push_back((f[j] - stats.mean[j]) / stats.stdev[j]);
    return x;
  };
  // Full-batch gradient descent on per-HS6 intercepts plus numeric weights.
  std::map<std::string, double> hs_bias;
  std::vector<double> wt(kNumericFeatures, 0.0);
  double b0 = 0.0;
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(kNumericFeatures, 0.0);
    std::map<std::string, double> gh;
    double gb = 0.0;
    for (const auto& r : a.records()) {
      const auto x = features(r);
      double z = b0 + hs_bias[r.hs6];
      for (std::size_t j = 0; j < x.size(); ++j) z += wt[j] * x[j];
      const double e = 1.0 / (1.0 + std::exp(-z)) - r.label();
      for (std::size_t j = 0; j < x.size(); ++j) gw[j] += e * x[j];
      gh[r.hs6] += e;
      gb += e;
    }
    const double n = static_cast<double>(a.size());
    for (std::size_t j = 0; j < wt.size(); ++j) wt[j] -= 0.5 * gw[j] / n;
    for (auto& [k, g] : gh) hs_bias[k] -= 20.0 * g / n;
    b0 -= 0.5 * gb / n;
  }
  auto score = [&](const ImportDeclaration& r) {
    const auto x = features(r);
    double z = b0 + (hs_bias.count(r.hs6) ? hs_bias.at(r.hs6) : 0.0);
    for (std::size_t j = 0; j < x.size(); ++j) z += wt[j] * x[j];
    return z;
  };
  double fraud = 0.0, licit = 0.0;
  std::size_t nf = 0, nl = 0;
  for (const auto& r : b.records()) {
    (r.label() > 0.5 ? fraud : licit) += score(r);
    ++(r.label() > 0.5 ? nf : nl);
  }
  EXPECT_GT(fraud / static_cast<double>(nf), licit / static_cast<double>(nl));
}

TEST(World, ConfigTextRoundTrips) {
  const auto w = four_country_world(5);
  std::istringstream in(to_config_text(w));
  EXPECT_EQ(parse_world_config(in), w);
  std::istringstream bad("seed=1\nbogus=2\n");
  EXPECT_THROW(parse_world_config(bad), ConfigError);
}

TEST(Standardize, HandComputedStats) {
  std::vector<ImportDeclaration> recs;
  for (double q : {1.0, std::exp(1.0), std::exp(2.0)}) {
    ImportDeclaration r;
    r.id = static_cast<std::int64_t>(recs.size());
    r.quantity = q;
    r.hs6 = "111111";
    r.country_code = "AB";
    recs.push_back(r);
  }
  const auto s = standardize_stats(CountryDataset("S", recs));
  EXPECT_NEAR(s.mean[0], 1.0, 1e-12);
  EXPECT_NEAR(s.stdev[0], std::sqrt(2.0 / 3.0), 1e-12);
  // gross weight is constant: floored stdev, standardized value 0
  EXPECT_EQ(s.stdev[1], kStdevFloor);
}
