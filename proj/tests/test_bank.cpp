#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <thread>

#include "protobank/bank.hpp"
#include "protobank/kmeans.hpp"
#include "protobank/service.hpp"
#include "support.hpp"

using namespace protobank;
namespace fs = std::filesystem;

namespace {

PrototypeSet make_set(const std::string& id, std::size_t nf, std::size_t nn, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PrototypeSet s;
  s.source_id = id;
  s.dim = d;
  s.fraud = pbt::random_tensor({nf, d}, rng);
  s.nonfraud = pbt::random_tensor({nn, d}, rng);
  s.created_at = 1700000000 + seed;
  return s;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("pb_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Labeled toy data with a given class mix.
CountryDataset mix(std::size_t fraud, std::size_t licit) {
  std::mt19937_64 rng(1);
  auto base = pbt::toy_dataset(fraud + licit, rng);
  std::vector<ImportDeclaration> recs = base.records();
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].illicit = i < fraud;
    recs[i].revenue = i < fraud ? 1.0 : 0.0;
  }
  return CountryDataset("MX", recs);
}

}  // namespace

// ---------------------------------------------------------------------------
// k-means

TEST(KMeans, TwoPointsTwoClusters) {
  const auto r = kmeans(Tensor::matrix(2, 1, {0, 10}), 2, 1);
  std::vector<double> c(r.centroids.data);
  std::sort(c.begin(), c.end());
  EXPECT_EQ(c, (std::vector<double>{0, 10}));
  EXPECT_EQ(r.final_objective(), 0.0);
}

TEST(KMeans, SingleClusterIsTheMean) {
  std::mt19937_64 rng(4);
  const Tensor x = pbt::random_tensor({37, 3}, rng);
  const auto r = kmeans(x, 1, 2);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < 37; ++i) m += x.at(i, j);
    EXPECT_NEAR(r.centroids.at(0, j), m / 37.0, 1e-12);
  }
}

TEST(KMeans, ObjectiveNeverIncreasesAndCentroidsAreMeans) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = pbt::uniform(rng, 3, 60), d = pbt::uniform(rng, 1, 4), k = pbt::uniform(rng, 1, 7);
    const Tensor x = pbt::random_tensor({n, d}, rng);
    const auto r = kmeans(x, k, rng());
    for (std::size_t i = 1; i < r.objective.size(); ++i) ASSERT_LE(r.objective[i], r.objective[i - 1]);
    for (std::size_t c = 0; c < r.centroids.rows(); ++c) {
      std::vector<double> sum(d, 0.0);
      double cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (r.assignments[i] != c) continue;
        cnt += 1;
        for (std::size_t j = 0; j < d; ++j) sum[j] += x.at(i, j);
      }
      ASSERT_GT(cnt, 0) << "empty cluster";
      for (std::size_t j = 0; j < d; ++j) ASSERT_NEAR(r.centroids.at(c, j), sum[j] / cnt, 1e-9);
    }
  }
}

TEST(KMeans, CloseToBruteForce) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = pbt::uniform(rng, 4, 50), d = pbt::uniform(rng, 1, 3), k = pbt::uniform(rng, 1, 3);
    const Tensor x = pbt::random_tensor({n, d}, rng);
    const double ours = kmeans(x, k, rng()).final_objective();
    EXPECT_LE(ours, 1.05 * pbt::kmeans_brute_force(x, k, 500, rng())) << "instance " << t;
  }
}

TEST(KMeans, DuplicatePointsStillFillEveryCluster) {
  const Tensor x = Tensor::matrix(5, 1, {1, 1, 1, 1, 2});
  const auto r = kmeans(x, 4, 3);
  std::set<std::size_t> used(r.assignments.begin(), r.assignments.end());
  EXPECT_EQ(used.size(), 4u);
}

TEST(KMeans, ClampsAndRejects) {
  EXPECT_EQ(kmeans(Tensor::matrix(3, 1, {1, 2, 3}), 10, 0).centroids.rows(), 3u);
  EXPECT_THROW(kmeans(Tensor::matrix(2, 1, {1, std::nan("")}), 1, 0), NumericError);
  EXPECT_THROW(kmeans(Tensor({0, 2}), 1, 0), NumericError);
  EXPECT_THROW(kmeans(Tensor::matrix(2, 1, {1, 2}), 0, 0), NumericError);
}

TEST(KMeans, Deterministic) {
  std::mt19937_64 rng(1);
  const Tensor x = pbt::random_tensor({40, 2}, rng);
  EXPECT_EQ(kmeans(x, 4, 9).centroids, kmeans(x, 4, 9).centroids);
}

// ---------------------------------------------------------------------------
// Prototypes and banks

TEST(Prototypes, PerClassIsClamped) {
  const auto ds = mix(3, 4);
  const EncoderParams p = init_encoder(pbt::tiny_encoder_config(), ds, 1);
  const auto s = extract_prototypes(p, ds, 500, 2);
  EXPECT_EQ(s.fraud.rows(), 3u);
  EXPECT_EQ(s.nonfraud.rows(), 4u);
  EXPECT_EQ(s.dim, p.config.d);
  EXPECT_EQ(s.source_id, "MX");
}

TEST(Prototypes, FullPerClassReproducesEmbeddings) {
  const auto ds = mix(5, 6);
  const EncoderParams p = init_encoder(pbt::tiny_encoder_config(), ds, 1);
  const auto s = extract_prototypes(p, ds, 5, 2);
  const Tensor h = embed_all(p, ds);
  auto rows = [](const Tensor& t) {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < t.rows(); ++i) out.emplace_back(t.row_ptr(i), t.row_ptr(i) + t.cols());
    std::sort(out.begin(), out.end());
    return out;
  };
  std::vector<std::vector<double>> fraud;
  for (std::size_t i = 0; i < 5; ++i) fraud.emplace_back(h.row_ptr(i), h.row_ptr(i) + h.cols());
  std::sort(fraud.begin(), fraud.end());
  const auto got = rows(s.fraud);
  ASSERT_EQ(got.size(), fraud.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    for (std::size_t j = 0; j < got[i].size(); ++j) EXPECT_NEAR(got[i][j], fraud[i][j], 1e-12);
  }
}

TEST(Prototypes, CarryNoRawFields) {
  const auto ds = mix(4, 4);
  const EncoderParams p = init_encoder(pbt::tiny_encoder_config(), ds, 1);
  const Bytes b = serialize(extract_prototypes(p, ds, 2, 2));
  const std::string text(b.begin(), b.end());
  for (const auto& r : ds.records()) EXPECT_EQ(text.find(r.hs6), std::string::npos);
  const auto s = deserialize_set(b);
  EXPECT_EQ(s.fraud.cols(), p.config.d);
}

TEST(Prototypes, MissingClassIsADataError) {
  const auto ds = mix(0, 6);
  const EncoderParams p = init_encoder(pbt::tiny_encoder_config(), ds, 1);
  EXPECT_THROW(extract_prototypes(p, ds, 5, 2), DataError);
}

TEST(Bank, AssembleCountsAndOrder) {
  EXPECT_EQ(assemble({}).size(), 0u);
  EXPECT_TRUE(assemble({}).empty());
  const auto a = make_set("A", 10, 10, 4, 1);
  const auto b = make_set("B", 5, 5, 4, 2);
  const MemoryBank m = assemble({a, b});
  EXPECT_EQ(m.size(), 30u);
  const Tensor f = m.flatten();
  EXPECT_EQ(f.rows(), 30u);
  EXPECT_EQ(f.at(0, 0), a.fraud.at(0, 0));
  EXPECT_EQ(f.at(10, 0), a.nonfraud.at(0, 0));
  EXPECT_EQ(f.at(20, 0), b.fraud.at(0, 0));
  EXPECT_EQ(f.at(29, 3), b.nonfraud.at(4, 3));
  EXPECT_THROW(assemble({a, make_set("C", 1, 1, 3, 3)}), FormatError);
  EXPECT_THROW(assemble({a, a}), FormatError);
}

TEST(Bank, RandomBankShapeAndNorms) {
  const auto r = random_bank(32, 1000, 4);
  EXPECT_EQ(r.fraud.rows(), 500u);
  EXPECT_EQ(r.nonfraud.rows(), 500u);
  for (const Tensor* t : {&r.fraud, &r.nonfraud}) {
    for (std::size_t i = 0; i < t->rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 32; ++j) s += t->at(i, j) * t->at(i, j);
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
    }
  }
  EXPECT_EQ(random_bank(32, 1000, 4), r);
  EXPECT_NE(random_bank(32, 1000, 5), r);
}

// ---------------------------------------------------------------------------
// Containers

TEST(Codec, RandomRoundTripsAreBitExact) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 1000; ++t) {
    PrototypeSet s = make_set("S" + std::to_string(t), pbt::uniform(rng, 1, 5), pbt::uniform(rng, 1, 5),
                              pbt::uniform(rng, 1, 6), rng());
    s.fraud.data[0] = t % 2 ? -0.0 : std::numeric_limits<double>::denorm_min();
    const Bytes b = serialize(s);
    const PrototypeSet back = deserialize_set(b);
    ASSERT_EQ(serialize(back), b);
    ASSERT_EQ(std::signbit(back.fraud.data[0]), std::signbit(s.fraud.data[0]));
  }
}

TEST(Codec, EveryCorruptionIsRejected) {
  const Bytes b = serialize(make_set("A", 3, 2, 4, 1));
  for (std::size_t i = 0; i < b.size(); ++i) {
    for (int bit : {0, 7}) {
      Bytes bad = b;
      bad[i] ^= static_cast<std::uint8_t>(1 << bit);
      EXPECT_THROW(deserialize_set(bad), FormatError) << "byte " << i;
    }
  }
  for (std::size_t n = 0; n < b.size(); ++n) {
    EXPECT_THROW(deserialize_set(Bytes(b.begin(), b.begin() + static_cast<long>(n))), FormatError);
  }
  Bytes longer = b;
  longer.push_back(0);
  EXPECT_THROW(deserialize_set(longer), FormatError);
}

TEST(Codec, BankContainers) {
  const MemoryBank empty = assemble({});
  EXPECT_TRUE(deserialize_bank(serialize(empty)).empty());
  const MemoryBank m = assemble({make_set("A", 2, 2, 3, 1), make_set("B", 1, 4, 3, 2)});
  EXPECT_EQ(deserialize_bank(serialize(m)), m);
  EXPECT_EQ(load_bank(serialize(make_set("A", 2, 2, 3, 1))).size(), 4u);
  EXPECT_THROW(deserialize_set(serialize(m)), FormatError);
}

TEST(Codec, EncoderModelRoundTrip) {
  std::mt19937_64 rng(3);
  const auto ds = pbt::toy_dataset(12, rng);
  const EncoderParams p = init_encoder(pbt::tiny_encoder_config(), ds, 1);
  const Bytes b = serialize(p);
  EXPECT_EQ(peek_model_kind(b), ModelKind::kEncoder);
  const EncoderParams back = deserialize_encoder(b);
  EXPECT_EQ(serialize(back), b);
  EXPECT_EQ(score_all(back, ds), score_all(p, ds));
}

// ---------------------------------------------------------------------------
// Service

TEST(Service, PutGetList) {
  TempDir dir("svc");
  BankServer server(dir.path);
  BankClient c("127.0.0.1:" + std::to_string(server.port()));
  const auto a = make_set("A", 2, 3, 4, 1);
  const Bytes b = serialize(a);
  EXPECT_EQ(c.put(b), "A");
  EXPECT_EQ(c.get_raw({"A"}).at(0), b);
  EXPECT_EQ(c.get({"A"}).entries().at(0), a);
  EXPECT_THROW(c.get({"nope"}), NotFoundError);
  EXPECT_THROW(c.put(Bytes{1, 2, 3}), FormatError);
  const auto listed = c.list();
  ASSERT_EQ(listed.size(), 1u);
  EXPECT_EQ(listed[0].first, "A");
  EXPECT_EQ(listed[0].second, a.created_at);
}

TEST(Service, UnsafeIdsNeverReachDisk) {
  TempDir dir("unsafe");
  BankStore store(dir.path);
  EXPECT_THROW(store.put(serialize(make_set("../evil", 1, 1, 2, 1))), FormatError);
  EXPECT_FALSE(valid_source_id("a/b"));
  EXPECT_FALSE(valid_source_id(""));
  EXPECT_TRUE(valid_source_id("US-2_x"));
}

TEST(Service, ConcurrentClients) {
  TempDir dir("conc");
  BankServer server(dir.path);
  const std::string addr = "127.0.0.1:" + std::to_string(server.port());
  std::vector<std::thread> threads;
  std::vector<int> ok(8, 0);
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      BankClient c(addr);
      int good = 0;
      for (int i = 0; i < 10; ++i) {
        const Bytes b = serialize(make_set("c" + std::to_string(t) + "_" + std::to_string(i), 3, 3, 5,
                                           static_cast<std::uint64_t>(t * 100 + i)));
        good += c.get_raw({c.put(b)}).at(0) == b;
      }
      ok[static_cast<std::size_t>(t)] = good;
    });
  }
  for (auto& th : threads) th.join();
  for (int v : ok) EXPECT_EQ(v, 10);
  EXPECT_EQ(BankClient(addr).list().size(), 80u);
}

TEST(Service, ConcurrentPutsToOneId) {
  TempDir dir("same");
  BankServer server(dir.path);
  const std::string addr = "127.0.0.1:" + std::to_string(server.port());
  std::vector<Bytes> versions;
  for (int i = 0; i < 8; ++i) versions.push_back(serialize(make_set("X", 2, 2, 3, static_cast<std::uint64_t>(i))));
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) threads.emplace_back([&, i] { BankClient(addr).put(versions[static_cast<std::size_t>(i)]); });
  for (auto& th : threads) th.join();
  const Bytes got = BankClient(addr).get_raw({"X"}).at(0);
  EXPECT_NE(std::find(versions.begin(), versions.end(), got), versions.end());
}

TEST(Service, EndpointParsing) {
  EXPECT_EQ(net::parse_endpoint("127.0.0.1:80").port, 80);
  EXPECT_EQ(net::parse_endpoint(":81").port, 81);
  EXPECT_EQ(net::parse_endpoint("82").port, 82);
  EXPECT_THROW(net::parse_endpoint("host:notaport"), ConfigError);
}
