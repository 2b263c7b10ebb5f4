#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "protobank/declarations.hpp"
#include "protobank/error.hpp"
#include "protobank/scenario.hpp"

namespace protobank {

struct ReportTables {
  std::string csv;
  std::string json;
};

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"scenario",   "kind",     "ablation",  "sources",
                                             "target",     "label_fraction", "per_class", "inspection_rate",
                                             "row",        "seed",     "revenue_at_k", "stdev",
                                             "n_seeds"};
  return cols;
}

namespace detail {

inline std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (const auto& id : ids) s += (s.empty() ? "" : "+") + id;
  return s;
}

}  // namespace detail

// One detail row per (scenario, seed) and one aggregate row per scenario.
// Wall time is left out so that reruns produce identical tables.
inline ReportTables emit_report(const std::vector<ScenarioReport>& reports) {
  using nlohmann::ordered_json;
  std::ostringstream csv;
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) csv << (i ? "," : "") << cols[i];
  csv << "\n";
  ordered_json rows = ordered_json::array();
  auto fmt = detail::format_double;
  for (const auto& r : reports) {
    const auto& c = r.config;
    auto emit = [&](const std::string& row, const std::string& seed, double value, const std::string& stdev,
                    const std::string& n) {
      csv << c.name << ',' << to_string(c.kind) << ',' << to_string(c.ablation) << ',' << detail::join_ids(c.source_ids)
          << ',' << c.target_id << ',' << fmt(c.label_fraction) << ',' << c.per_class << ','
          << fmt(c.inspection_rate) << ',' << row << ',' << seed << ',' << fmt(value) << ',' << stdev << ',' << n
          << "\n";
      ordered_json j;
      j["scenario"] = c.name;
      j["kind"] = to_string(c.kind);
      j["ablation"] = to_string(c.ablation);
      j["sources"] = c.source_ids;
      j["target"] = c.target_id;
      j["label_fraction"] = c.label_fraction;
      j["per_class"] = c.per_class;
      j["inspection_rate"] = c.inspection_rate;
      j["row"] = row;
      j["seed"] = seed.empty() ? ordered_json(nullptr) : ordered_json(std::stoull(seed));
      j["revenue_at_k"] = value;
      j["stdev"] = stdev.empty() ? ordered_json(nullptr) : ordered_json(r.stdev);
      j["n_seeds"] = n.empty() ? ordered_json(nullptr) : ordered_json(c.seeds.size());
      rows.push_back(std::move(j));
    };
    for (std::size_t i = 0; i < r.revenue.size(); ++i) emit("seed", std::to_string(c.seeds[i]), r.revenue[i], "", "");
    emit("aggregate", "", r.mean, fmt(r.stdev), std::to_string(c.seeds.size()));
  }
  ordered_json doc;
  doc["version"] = std::string(kVersion);
  doc["columns"] = cols;
  doc["rows"] = std::move(rows);
  return {csv.str(), doc.dump(2) + "\n"};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}

// <out>/<scenario>/<stamp>.csv|.json per scenario, <out>/summary.csv|.json
// for the whole suite, and wall times in <out>/timing.json.
inline void write_reports(const std::filesystem::path& out, const std::vector<ScenarioReport>& reports,
                          const std::string& stamp) {
  for (const auto& r : reports) {
    const ReportTables t = emit_report({r});
    write_text(out / r.config.name / (stamp + ".csv"), t.csv);
    write_text(out / r.config.name / (stamp + ".json"), t.json);
  }
  const ReportTables all = emit_report(reports);
  write_text(out / "summary.csv", all.csv);
  write_text(out / "summary.json", all.json);
  nlohmann::ordered_json timing;
  for (const auto& r : reports) timing[r.config.name] = r.wall_seconds;
  write_text(out / "timing.json", timing.dump(2) + "\n");
}

}  // namespace protobank
