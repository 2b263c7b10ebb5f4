#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "protobank/codec.hpp"
#include "protobank/declarations.hpp"
#include "protobank/encoder.hpp"
#include "protobank/error.hpp"
#include "protobank/kmeans.hpp"
#include "protobank/seed.hpp"

namespace protobank {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::string_view kSetMagic = "PROTOBNK";
inline constexpr std::string_view kBankMagic = "PROTOMEM";
inline constexpr std::string_view kModelMagic = "PROTOMDL";

// Class-conditional centroids of one source country.
struct PrototypeSet {
  std::string source_id;
  std::size_t dim = 0;
  Tensor fraud;     // [n_f, dim]
  Tensor nonfraud;  // [n_n, dim]
  std::uint64_t created_at = 0;  // seconds since the epoch
  std::uint32_t format_version = kFormatVersion;

  std::size_t rows() const { return fraud.rows() + nonfraud.rows(); }

  friend bool operator==(const PrototypeSet&, const PrototypeSet&) = default;
};

inline void validate(const PrototypeSet& s) {
  auto fail = [&](const std::string& what) { throw FormatError("prototype set '" + s.source_id + "': " + what); };
  if (s.source_id.empty()) fail("empty source id");
  if (s.dim == 0) fail("zero dimension");
  for (const Tensor* t : {&s.fraud, &s.nonfraud}) {
    if (t->rank() != 2 || t->cols() != s.dim) fail("matrix width does not match dim " + std::to_string(s.dim));
    if (t->rows() == 0) fail("each class needs at least one prototype");
    if (!t->all_finite()) fail("non-finite prototype value");
  }
}

// Ordered multi-source bank.
class MemoryBank {
 public:
  MemoryBank() = default;

  const std::vector<PrototypeSet>& entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t dim() const noexcept { return entries_.empty() ? 0 : entries_.front().dim; }

  // Total prototype rows |M|.
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.rows();
    return n;
  }

  // All prototypes as one [|M|, dim] matrix: per source, fraud rows then non-fraud rows.
  Tensor flatten() const {
    Tensor out({size(), dim()});
    std::size_t at = 0;
    for (const auto& e : entries_) {
      for (const Tensor* t : {&e.fraud, &e.nonfraud}) {
        std::copy(t->data.begin(), t->data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at));
        at += t->size();
      }
    }
    return out;
  }

  friend bool operator==(const MemoryBank&, const MemoryBank&) = default;
  friend MemoryBank assemble(std::vector<PrototypeSet> sets);

 private:
  std::vector<PrototypeSet> entries_;
};

inline MemoryBank assemble(std::vector<PrototypeSet> sets) {
  std::set<std::string> seen;
  for (const auto& s : sets) {
    validate(s);
    if (s.dim != sets.front().dim) {
      throw FormatError("assemble: dim " + std::to_string(s.dim) + " of '" + s.source_id + "' differs from " +
                        std::to_string(sets.front().dim));
    }
    if (!seen.insert(s.source_id).second) throw FormatError("assemble: duplicate source id '" + s.source_id + "'");
  }
  MemoryBank b;
  b.entries_ = std::move(sets);
  return b;
}

// Embeds every labeled record and clusters each class separately with
// k = min(per_class, class count).
inline PrototypeSet extract_prototypes(const EncoderParams& params, const CountryDataset& ds, std::size_t per_class,
                                       std::uint64_t seed, std::uint64_t created_at = 0) {
  if (per_class == 0) throw ConfigError("extract_prototypes: per_class must be positive");
  const Tensor h = embed_all(params, ds);
  const std::size_t d = params.config.d;
  std::vector<double> rows[2];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!ds[i].labeled()) continue;
    auto& dst = rows[ds[i].label() > 0.5 ? 1 : 0];
    dst.insert(dst.end(), h.row_ptr(i), h.row_ptr(i) + d);
  }
  PrototypeSet s;
  s.source_id = ds.country_id();
  s.dim = d;
  s.created_at = created_at;
  for (int cls : {1, 0}) {
    const std::size_t n = rows[cls].size() / d;
    if (n == 0) {
      throw DataError("extract_prototypes: no " + std::string(cls ? "fraud" : "non-fraud") + " records in " +
                      ds.country_id());
    }
    KMeansConfig kc;
    kc.k = std::min(per_class, n);
    kc.seed = derive_seed(seed, "kmeans", cls);
    // With k = n every point is its own cluster; skip the restarts.
    if (kc.k == n) kc.n_init = 1;
    Tensor c = kmeans(Tensor({n, d}, std::move(rows[cls])), kc).centroids;
    (cls ? s.fraud : s.nonfraud) = std::move(c);
  }
  validate(s);
  return s;
}

// Unit-norm Gaussian rows, split evenly between the two classes.
inline PrototypeSet random_bank(std::size_t dim, std::size_t n_rows, std::uint64_t seed,
                                std::string source_id = "random") {
  if (dim == 0) throw ConfigError("random_bank: dim must be positive");
  if (n_rows < 2) throw ConfigError("random_bank: need at least 2 rows");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto draw = [&](std::size_t n) {
    Tensor t({n, dim});
    for (std::size_t r = 0; r < n; ++r) {
      double norm = 0.0;
      do {
        norm = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          t.at(r, j) = nd(rng);
          norm += t.at(r, j) * t.at(r, j);
        }
      } while (norm == 0.0);
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < dim; ++j) t.at(r, j) /= norm;
    }
    return t;
  };
  PrototypeSet s;
  s.source_id = std::move(source_id);
  s.dim = dim;
  s.fraud = draw(n_rows - n_rows / 2);
  s.nonfraud = draw(n_rows / 2);
  return s;
}

// ---------------------------------------------------------------------------
// Containers

inline Bytes serialize(const PrototypeSet& s) {
  validate(s);
  ByteWriter w;
  w.raw(kSetMagic);
  w.u32(s.format_version);
  w.u32(static_cast<std::uint32_t>(s.dim));
  w.u32(static_cast<std::uint32_t>(s.fraud.rows()));
  w.u32(static_cast<std::uint32_t>(s.nonfraud.rows()));
  w.str(s.source_id);
  w.u64(s.created_at);
  for (double v : s.fraud.data) w.f64(v);
  for (double v : s.nonfraud.data) w.f64(v);
  w.seal();
  return std::move(w).bytes();
}

namespace detail {

inline void expect_magic(ByteReader& r, std::string_view magic) {
  if (r.raw(magic.size()) != magic) throw FormatError("bad magic, expected " + std::string(magic));
}

inline void expect_version(std::uint32_t v) {
  if (v != kFormatVersion) throw FormatError("unsupported format version " + std::to_string(v));
}

// Reads one sealed prototype-set container spanning the rest of `r`.
inline PrototypeSet read_set(ByteReader& r) {
  const std::size_t start = r.pos();
  expect_magic(r, kSetMagic);
  PrototypeSet s;
  s.format_version = r.u32();
  expect_version(s.format_version);
  s.dim = r.u32();
  const std::size_t nf = r.u32(), nn = r.u32();
  s.source_id = r.str(4096);
  s.created_at = r.u64();
  if (s.dim == 0) throw FormatError("zero dimension");
  if (nf + nn > r.remaining() / 8 / s.dim) throw FormatError("truncated stream: payload too short");
  s.fraud = Tensor({nf, s.dim});
  s.nonfraud = Tensor({nn, s.dim});
  for (double& v : s.fraud.data) v = r.f64();
  for (double& v : s.nonfraud.data) v = r.f64();
  r.expect_seal(start);
  validate(s);
  return s;
}

}  // namespace detail

inline PrototypeSet deserialize_set(const Bytes& bytes) {
  ByteReader r(bytes);
  return detail::read_set(r);
}

// Bank container: magic, version, entry count, then each entry as a
// length-prefixed prototype-set container; sealed like the entries.
inline Bytes serialize(const MemoryBank& b) {
  ByteWriter w;
  w.raw(kBankMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(b.entries().size()));
  for (const auto& e : b.entries()) {
    const Bytes one = serialize(e);
    w.u64(one.size());
    w.raw(one);
  }
  w.seal();
  return std::move(w).bytes();
}

inline MemoryBank deserialize_bank(const Bytes& bytes) {
  ByteReader r(bytes);
  detail::expect_magic(r, kBankMagic);
  detail::expect_version(r.u32());
  const std::uint32_t n = r.u32();
  std::vector<PrototypeSet> sets;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw FormatError("truncated stream: bank entry");
    ByteReader sub(bytes, r.pos(), r.pos() + static_cast<std::size_t>(len));
    sets.push_back(detail::read_set(sub));
    r.raw(static_cast<std::size_t>(len));
  }
  r.expect_seal(0);
  return assemble(std::move(sets));
}

// A bank from either container kind (a single set becomes a one-entry bank).
inline MemoryBank load_bank(const Bytes& bytes) {
  const std::string magic = peek_magic(bytes);
  if (magic == kSetMagic) return assemble({deserialize_set(bytes)});
  if (magic == kBankMagic) return deserialize_bank(bytes);
  throw FormatError("bad magic '" + magic + "'");
}

// ---------------------------------------------------------------------------
// Encoder model container

namespace detail {

inline void write_vocab(ByteWriter& w, const Vocabulary& v) {
  w.u32(static_cast<std::uint32_t>(v.codes().size()));
  for (const auto& c : v.codes()) w.str(c);
}

inline Vocabulary read_vocab(ByteReader& r) {
  const std::uint32_t n = r.u32();
  if (n > r.remaining() / 4) throw FormatError("truncated stream: vocabulary");
  std::vector<std::string> codes(n);
  for (auto& c : codes) c = r.str(64);
  Vocabulary v(codes);
  if (v.codes() != codes) throw FormatError("vocabulary not sorted or not unique");
  return v;
}

inline void write_encoder(ByteWriter& w, const EncoderParams& p) {
  const auto& c = p.config;
  for (std::size_t v : {c.k, c.d, c.hidden, c.conv_channels, c.kernel}) w.u32(static_cast<std::uint32_t>(v));
  w.u8(c.interaction ? 1 : 0);
  write_vocab(w, p.hs6_vocab);
  write_vocab(w, p.origin_vocab);
  for (double v : p.stats.mean) w.f64(v);
  for (double v : p.stats.stdev) w.f64(v);
  w.u32(static_cast<std::uint32_t>(p.tensors.size()));
  for (const auto& [name, t] : p.tensors) {
    w.str(name);
    w.tensor(t);
  }
}

inline EncoderParams read_encoder(ByteReader& r) {
  EncoderParams p;
  auto& c = p.config;
  for (std::size_t* v : {&c.k, &c.d, &c.hidden, &c.conv_channels, &c.kernel}) *v = r.u32();
  const std::uint8_t inter = r.u8();
  if (inter > 1) throw FormatError("bad interaction flag");
  c.interaction = inter == 1;
  p.hs6_vocab = read_vocab(r);
  p.origin_vocab = read_vocab(r);
  for (double& v : p.stats.mean) v = r.f64();
  for (double& v : p.stats.stdev) v = r.f64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str(256);
    Tensor t = r.tensor();
    if (!t.all_finite()) throw FormatError("non-finite parameter '" + name + "'");
    if (!p.tensors.emplace(std::move(name), std::move(t)).second) throw FormatError("duplicate parameter name");
  }
  return p;
}

}  // namespace detail

// Model kinds sharing the model container.
enum class ModelKind : std::uint8_t { kEncoder = 1, kAdapted = 2 };

inline Bytes serialize(const EncoderParams& p) {
  ByteWriter w;
  w.raw(kModelMagic);
  w.u32(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(ModelKind::kEncoder));
  detail::write_encoder(w, p);
  w.seal();
  return std::move(w).bytes();
}

inline ModelKind peek_model_kind(const Bytes& bytes) {
  ByteReader r(bytes);
  detail::expect_magic(r, kModelMagic);
  detail::expect_version(r.u32());
  const std::uint8_t k = r.u8();
  if (k != 1 && k != 2) throw FormatError("unknown model kind " + std::to_string(k));
  return static_cast<ModelKind>(k);
}

inline EncoderParams deserialize_encoder(const Bytes& bytes) {
  if (peek_model_kind(bytes) != ModelKind::kEncoder) throw FormatError("not an encoder model");
  ByteReader r(bytes, 13);
  EncoderParams p = detail::read_encoder(r);
  r.expect_seal(0);
  return p;
}

}  // namespace protobank
