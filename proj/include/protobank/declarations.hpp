#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <tuple>
#include <unordered_set>
#include <utility>
#include <vector>

#include "protobank/error.hpp"

namespace protobank {

// Calendar day as days since 1970-01-01.
using Day = std::int32_t;

inline std::optional<Day> parse_iso_date(std::string_view s) {
  using namespace std::chrono;
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  auto num = [&](std::size_t pos, std::size_t len, auto& out) {
    auto [p, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, out);
    return ec == std::errc{} && p == s.data() + pos + len;
  };
  if (!num(0, 4, y) || !num(5, 2, m) || !num(8, 2, d)) return std::nullopt;
  const year_month_day ymd{year{y}, month{m}, day{d}};
  if (!ymd.ok()) return std::nullopt;
  return static_cast<Day>(sys_days{ymd}.time_since_epoch().count());
}

inline std::string format_iso_date(Day day) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{days{day}}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

inline bool is_hs6(std::string_view s) {
  return s.size() == 6 && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

inline bool is_country_code(std::string_view s) {
  return s.size() == 2 && std::all_of(s.begin(), s.end(), [](char c) { return c >= 'A' && c <= 'Z'; });
}

// Inspection outcome of one declaration.
struct Outcome {
  bool illicit = false;
  double revenue = 0.0;

  friend bool operator==(const Outcome&, const Outcome&) = default;
};

struct ImportDeclaration {
  std::int64_t id = 0;
  Day date = 0;
  double quantity = 1.0;
  double gross_weight = 1.0;
  std::string hs6;
  std::string country_code;
  double cif_value = 1.0;
  double total_taxes = 0.0;
  std::optional<bool> illicit;  // absent when uninspected or masked
  double revenue = 0.0;

  bool labeled() const { return illicit.has_value(); }
  double label() const { return illicit.value_or(false) ? 1.0 : 0.0; }

  friend bool operator==(const ImportDeclaration&, const ImportDeclaration&) = default;
};

// Throws DataError describing the first violated record invariant.
inline void validate(const ImportDeclaration& x) {
  auto fail = [&](const std::string& what) {
    throw DataError("record " + std::to_string(x.id) + ": " + what);
  };
  if (!is_hs6(x.hs6)) fail("hs6 '" + x.hs6 + "' is not 6 decimal digits");
  if (!is_country_code(x.country_code)) fail("country_code '" + x.country_code + "' is not 2 uppercase letters");
  if (!(x.quantity > 0) || !std::isfinite(x.quantity)) fail("quantity must be positive");
  if (!(x.gross_weight > 0) || !std::isfinite(x.gross_weight)) fail("gross_weight must be positive");
  if (!(x.cif_value > 0) || !std::isfinite(x.cif_value)) fail("cif_value must be positive");
  if (!(x.total_taxes >= 0) || !std::isfinite(x.total_taxes)) fail("total_taxes must be nonnegative");
  if (!(x.revenue >= 0) || !std::isfinite(x.revenue)) fail("revenue must be nonnegative");
  if (x.illicit == false && x.revenue != 0.0) fail("revenue > 0 but illicit = 0");
  if (!x.illicit && x.revenue != 0.0) fail("revenue present on an unlabeled record");
}

// Sorted code list; index 0 is reserved for unknown codes.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> codes) : codes_(std::move(codes)) {
    std::sort(codes_.begin(), codes_.end());
    codes_.erase(std::unique(codes_.begin(), codes_.end()), codes_.end());
  }

  static constexpr std::size_t kUnknown = 0;

  std::size_t index(std::string_view code) const {
    auto it = std::lower_bound(codes_.begin(), codes_.end(), code);
    if (it == codes_.end() || *it != code) return kUnknown;
    return static_cast<std::size_t>(it - codes_.begin()) + 1;
  }
  bool contains(std::string_view code) const { return index(code) != kUnknown; }

  // Table rows needed, including the unknown slot.
  std::size_t size() const noexcept { return codes_.size() + 1; }
  const std::vector<std::string>& codes() const noexcept { return codes_; }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  std::vector<std::string> codes_;
};

// One country's declarations, sorted by (date, id), plus a sealed copy of
// the inspection outcomes that survives label masking.
class CountryDataset {
 public:
  CountryDataset() = default;

  CountryDataset(std::string country_id, std::vector<ImportDeclaration> records)
      : country_id_(std::move(country_id)), records_(std::move(records)) {
    sealed_.reserve(records_.size());
    for (const auto& r : records_) {
      sealed_.push_back(r.illicit ? std::optional<Outcome>(Outcome{*r.illicit, r.revenue}) : std::nullopt);
    }
    finish();
  }

  CountryDataset(std::string country_id, std::vector<ImportDeclaration> records,
                 std::vector<std::optional<Outcome>> sealed)
      : country_id_(std::move(country_id)), records_(std::move(records)), sealed_(std::move(sealed)) {
    if (sealed_.size() != records_.size()) throw DataError("sealed label table size mismatch");
    finish();
  }

  const std::string& country_id() const noexcept { return country_id_; }
  const std::vector<ImportDeclaration>& records() const noexcept { return records_; }
  const std::vector<std::optional<Outcome>>& sealed() const noexcept { return sealed_; }
  const Vocabulary& hs6_vocab() const noexcept { return hs6_vocab_; }
  const Vocabulary& country_vocab() const noexcept { return country_vocab_; }

  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  const ImportDeclaration& operator[](std::size_t i) const { return records_[i]; }

  Day first_day() const { return records_.front().date; }
  Day last_day() const { return records_.back().date; }

  std::size_t labeled_count() const {
    return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(),
                                                  [](const auto& r) { return r.labeled(); }));
  }

  // Records at the given positions, keeping their sealed outcomes.
  CountryDataset subset(const std::vector<std::size_t>& positions) const {
    std::vector<ImportDeclaration> recs;
    std::vector<std::optional<Outcome>> sealed;
    recs.reserve(positions.size());
    sealed.reserve(positions.size());
    for (std::size_t p : positions) {
      recs.push_back(records_.at(p));
      sealed.push_back(sealed_.at(p));
    }
    return CountryDataset(country_id_, std::move(recs), std::move(sealed));
  }

  friend bool operator==(const CountryDataset& a, const CountryDataset& b) {
    return a.country_id_ == b.country_id_ && a.records_ == b.records_ && a.sealed_ == b.sealed_;
  }

 private:
  void finish() {
    std::vector<std::size_t> order(records_.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const auto& ra = records_[a];
      const auto& rb = records_[b];
      return std::tie(ra.date, ra.id) < std::tie(rb.date, rb.id);
    });
    std::vector<ImportDeclaration> recs;
    std::vector<std::optional<Outcome>> sealed;
    recs.reserve(order.size());
    sealed.reserve(order.size());
    for (std::size_t i : order) {
      recs.push_back(std::move(records_[i]));
      sealed.push_back(sealed_[i]);
    }
    records_ = std::move(recs);
    sealed_ = std::move(sealed);
    std::unordered_set<std::int64_t> ids;
    std::vector<std::string> hs6, cc;
    for (const auto& r : records_) {
      if (!ids.insert(r.id).second) throw DataError("duplicate record id " + std::to_string(r.id));
      hs6.push_back(r.hs6);
      cc.push_back(r.country_code);
    }
    hs6_vocab_ = Vocabulary(std::move(hs6));
    country_vocab_ = Vocabulary(std::move(cc));
  }

  std::string country_id_;
  std::vector<ImportDeclaration> records_;
  std::vector<std::optional<Outcome>> sealed_;
  Vocabulary hs6_vocab_;
  Vocabulary country_vocab_;
};

// ---------------------------------------------------------------------------
// CSV

inline const std::vector<std::string>& csv_fields() {
  static const std::vector<std::string> fields{"id",        "date",      "quantity",    "gross_weight",
                                               "hs6",       "country_code", "cif_value", "total_taxes",
                                               "illicit",   "revenue"};
  return fields;
}

// Canonical field name -> column header in the file. Missing entries map to
// the canonical name itself.
using FieldMap = std::map<std::string, std::string>;

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && p == s.data() + s.size();
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace detail

inline CountryDataset read_csv(std::istream& in, const std::string& country_id, const FieldMap& schema = {}) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(1, "missing header row");
  const auto header = detail::split_csv_line(detail::trim(line));
  std::map<std::string, std::size_t> column;
  for (const auto& field : csv_fields()) {
    auto it = schema.find(field);
    const std::string want = it == schema.end() ? field : it->second;
    auto pos = std::find_if(header.begin(), header.end(), [&](auto h) { return detail::trim(h) == want; });
    if (pos == header.end()) throw SchemaError(1, "header lacks column '" + want + "' for field '" + field + "'");
    column[field] = static_cast<std::size_t>(pos - header.begin());
  }

  std::vector<ImportDeclaration> records;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto cells = detail::split_csv_line(body);
    if (cells.size() != header.size()) {
      throw SchemaError(lineno, "expected " + std::to_string(header.size()) + " cells, found " +
                                    std::to_string(cells.size()));
    }
    auto cell = [&](const char* field) { return detail::trim(cells[column.at(field)]); };
    auto real = [&](const char* field) {
      double v = 0;
      if (!detail::parse_number(cell(field), v)) {
        throw SchemaError(lineno, std::string("field '") + field + "' is not a number: '" +
                                      std::string(cell(field)) + "'");
      }
      return v;
    };

    ImportDeclaration x;
    if (!detail::parse_number(cell("id"), x.id)) throw SchemaError(lineno, "field 'id' is not an integer");
    const auto day = parse_iso_date(cell("date"));
    if (!day) throw SchemaError(lineno, "field 'date' is not an ISO-8601 date: '" + std::string(cell("date")) + "'");
    x.date = *day;
    x.quantity = real("quantity");
    x.gross_weight = real("gross_weight");
    x.hs6 = std::string(cell("hs6"));
    x.country_code = std::string(cell("country_code"));
    x.cif_value = real("cif_value");
    x.total_taxes = real("total_taxes");
    const auto ill = cell("illicit");
    if (ill == "1") {
      x.illicit = true;
    } else if (ill == "0") {
      x.illicit = false;
    } else if (!ill.empty()) {
      throw SchemaError(lineno, "field 'illicit' must be 0, 1 or empty");
    }
    x.revenue = cell("revenue").empty() ? 0.0 : real("revenue");
    try {
      validate(x);
    } catch (const DataError& e) {
      throw SchemaError(lineno, e.what());
    }
    records.push_back(std::move(x));
  }
  return CountryDataset(country_id, std::move(records));
}

inline CountryDataset load_csv(const std::filesystem::path& path, const FieldMap& schema = {},
                               std::string country_id = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  if (country_id.empty()) country_id = path.stem().string();
  return read_csv(in, country_id, schema);
}

inline void write_csv(std::ostream& out, const CountryDataset& ds) {
  const auto& f = csv_fields();
  for (std::size_t i = 0; i < f.size(); ++i) out << (i ? "," : "") << f[i];
  out << '\n';
  for (const auto& r : ds.records()) {
    out << r.id << ',' << format_iso_date(r.date) << ',' << detail::format_double(r.quantity) << ','
        << detail::format_double(r.gross_weight) << ',' << r.hs6 << ',' << r.country_code << ','
        << detail::format_double(r.cif_value) << ',' << detail::format_double(r.total_taxes) << ',';
    if (r.illicit) {
      out << (*r.illicit ? '1' : '0') << ',' << detail::format_double(r.revenue);
    } else {
      out << ',';
    }
    out << '\n';
  }
}

inline void write_csv(const std::filesystem::path& path, const CountryDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_csv(out, ds);
}

// ---------------------------------------------------------------------------
// Chronological split and label masking

struct SplitSpec {
  int test_window_days = 30;
  int valid_window_days = 14;
  double label_fraction = 1.0;
};

struct DatasetSplit {
  CountryDataset train;
  CountryDataset valid;
  CountryDataset test;
};

// Test is the final test_window_days, valid the valid_window_days before it,
// train the rest. The seed is accepted for interface symmetry; the split
// itself never depends on it.
inline DatasetSplit split(const CountryDataset& ds, const SplitSpec& spec, std::uint64_t /*seed*/ = 0) {
  if (spec.test_window_days <= 0 || spec.valid_window_days <= 0) {
    throw ConfigError("split windows must be positive");
  }
  if (ds.empty()) throw DataError("cannot split an empty dataset");
  const long span = static_cast<long>(ds.last_day()) - ds.first_day() + 1;
  if (span <= spec.test_window_days + spec.valid_window_days) {
    throw DataError("dataset " + ds.country_id() + " spans " + std::to_string(span) +
                    " days, needs more than " + std::to_string(spec.test_window_days + spec.valid_window_days));
  }
  const Day test_start = ds.last_day() - spec.test_window_days + 1;
  const Day valid_start = test_start - spec.valid_window_days;
  std::vector<std::size_t> tr, va, te;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Day d = ds[i].date;
    (d >= test_start ? te : d >= valid_start ? va : tr).push_back(i);
  }
  return {ds.subset(tr), ds.subset(va), ds.subset(te)};
}

// Keeps labels on exactly round(fraction * n) randomly chosen records; the
// others lose illicit/revenue visibility but keep their sealed outcome.
inline CountryDataset mask_labels(const CountryDataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("label fraction must lie in (0, 1], got " + detail::format_double(fraction));
  }
  const std::size_t n = ds.size();
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> visible(n, false);
  for (std::size_t i = 0; i < keep; ++i) visible[order[i]] = true;

  std::vector<ImportDeclaration> recs = ds.records();
  for (std::size_t i = 0; i < n; ++i) {
    if (!visible[i]) {
      recs[i].illicit.reset();
      recs[i].revenue = 0.0;
    }
  }
  return CountryDataset(ds.country_id(), std::move(recs), ds.sealed());
}

}  // namespace protobank
