// protobank: command-line front end for the prototype-sharing pipeline.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "protobank/adapt.hpp"
#include "protobank/bank.hpp"
#include "protobank/declarations.hpp"
#include "protobank/report.hpp"
#include "protobank/scenario.hpp"
#include "protobank/service.hpp"
#include "protobank/world.hpp"

namespace fs = std::filesystem;
using namespace protobank;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// --seed, else PROTOBANK_SEED, else the command default.
std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t flag_value, std::uint64_t fallback) {
  if (opt->count()) return flag_value;
  if (const char* env = std::getenv("PROTOBANK_SEED")) {
    std::uint64_t v = 0;
    if (!detail::parse_number(std::string_view(env), v)) throw ConfigError("PROTOBANK_SEED is not an integer");
    return v;
  }
  return fallback;
}

// One line from which the command can be rerun. `resolved` carries values
// decided at run time (environment seed, clock-derived defaults).
void print_effective(const CLI::App* sub, const std::map<std::string, std::string>& resolved = {}) {
  std::ostringstream line;
  line << "effective-config: protobank " << sub->get_name();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name.empty()) continue;
    if (opt->get_expected_min() == 0) {
      if (opt->count()) line << " --" << name;
      continue;
    }
    std::string value;
    if (auto it = resolved.find(name); it != resolved.end()) {
      value = it->second;
    } else if (opt->count()) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    if (!value.empty()) line << " --" << name << ' ' << value;
  }
  std::cerr << line.str() << "\n";
}

CountryDataset load_data(const std::string& path) { return load_csv(path); }

void write_bytes(const std::string& path, const Bytes& b) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file_atomic(p, b);
}

std::string utc_stamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// id,score rows (header optional).
std::vector<double> load_scores(const std::string& path, const CountryDataset& ds) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path);
  std::map<std::int64_t, double> by_id;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto f = detail::split_csv_line(line);
    if (f.empty() || (f.size() == 1 && detail::trim(f[0]).empty())) continue;
    std::int64_t id = 0;
    double score = 0.0;
    if (f.size() != 2 || !detail::parse_number(detail::trim(f[0]), id) ||
        !detail::parse_number(detail::trim(f[1]), score)) {
      if (lineno == 1) continue;  // header
      throw SchemaError(lineno, "expected id,score");
    }
    by_id[id] = score;
  }
  std::vector<double> scores;
  for (const auto& r : ds.records()) {
    auto it = by_id.find(r.id);
    if (it == by_id.end()) throw DataError("no score for record " + std::to_string(r.id));
    scores.push_back(it->second);
  }
  return scores;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-sharing domain adaptation for customs fraud detection"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_config("--run-config", "", "key=value file with flag values (sections name subcommands)");

  std::uint64_t seed_flag = 0;
  // `fallback` names the default when neither the flag nor the environment is set.
  auto add_seed = [&](CLI::App* sub, const std::string& fallback = "0") {
    return sub->add_option("--seed", seed_flag, "Seed (falls back to PROTOBANK_SEED, then " + fallback + ")")
        ->default_str(fallback);
  };

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic multi-country world as CSV files");
  std::string gen_config, gen_preset = "four_country", gen_out;
  gen->add_option("--config", gen_config, "World config file (key=value)")->check(CLI::ExistingFile);
  gen->add_option("--preset", gen_preset, "Preset used when no config is given")
      ->check(CLI::IsMember({"two_country", "four_country", "multi_source"}));
  gen->add_option("--out", gen_out, "Output directory")->required();
  auto* gen_seed = add_seed(gen, "the world config seed");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Pretrain an encoder + fraud head on a labeled country log");
  std::string pre_data, pre_out;
  PretrainConfig pc;
  SplitSpec pre_split;
  bool pre_no_scl = false, pre_no_interaction = false;
  pre->add_option("--data", pre_data, "Country CSV")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", pre_out, "Output model file")->required();
  pre->add_option("--tau", pc.tau, "Contrastive temperature");
  pre->add_option("--epochs", pc.epochs, "Training epochs");
  pre->add_option("--batch", pc.batch_size, "Batch size");
  pre->add_option("--lr", pc.learning_rate, "Learning rate");
  pre->add_option("--weight-decay", pc.weight_decay, "Decoupled weight decay");
  pre->add_option("--cls-weight", pc.cls_weight, "Weight of the BCE term");
  pre->add_option("--test-days", pre_split.test_window_days, "Held-out final window (days)");
  pre->add_option("--valid-days", pre_split.valid_window_days, "Validation window before the test window (days)");
  pre->add_flag("--no-scl", pre_no_scl, "Train with BCE only");
  pre->add_flag("--no-interaction", pre_no_interaction, "Concatenate [p, q] instead of the interaction encoder");
  auto* pre_seed = add_seed(pre);

  // export-bank
  auto* exp = app.add_subcommand("export-bank", "Select fraud-like records and export their prototypes");
  std::string exp_model, exp_data, exp_out;
  std::size_t exp_per_class = 500;
  double exp_fraction = 0.05;
  std::uint64_t exp_created = 0;
  exp->add_option("--model", exp_model, "Pretrained encoder model")->required()->check(CLI::ExistingFile);
  exp->add_option("--data", exp_data, "Source country CSV")->required()->check(CLI::ExistingFile);
  exp->add_option("--per-class", exp_per_class, "Prototypes per class")->check(CLI::PositiveNumber);
  exp->add_option("--fraud-like", exp_fraction, "Share of top-scored records kept")->check(CLI::Range(1e-9, 1.0));
  auto* exp_created_opt =
      exp->add_option("--created-at", exp_created, "created_at stamp in seconds")->default_str("now");
  exp->add_option("--out", exp_out, "Output prototype-set file")->required();
  auto* exp_seed = add_seed(exp);

  // serve-bank / push-bank / fetch-bank
  auto* serve = app.add_subcommand("serve-bank", "Serve a prototype store over TCP");
  std::string serve_dir, serve_listen = "127.0.0.1:7070";
  serve->add_option("--dir", serve_dir, "Store directory")->required();
  serve->add_option("--listen", serve_listen, "host:port (port 0 picks a free port)");

  auto* push = app.add_subcommand("push-bank", "Upload a prototype set to a bank server");
  std::string push_to, push_bank;
  push->add_option("--to", push_to, "Server host:port")->required();
  push->add_option("--bank", push_bank, "Prototype-set file")->required()->check(CLI::ExistingFile);

  auto* fetch = app.add_subcommand("fetch-bank", "Download prototype sets into one memory bank");
  std::string fetch_from, fetch_sources, fetch_out;
  bool fetch_list = false;
  fetch->add_option("--from", fetch_from, "Server host:port")->required();
  fetch->add_option("--sources", fetch_sources, "Comma-separated source ids");
  fetch->add_flag("--list", fetch_list, "Print available sources instead");
  fetch->add_option("--out", fetch_out, "Output bank file");

  // finetune
  auto* fin = app.add_subcommand("finetune", "Fine-tune a target model with the memory bank");
  std::string fin_data, fin_bank, fin_init, fin_out;
  double fin_fraction = 1.0;
  FinetuneConfig fc;
  SplitSpec fin_split;
  bool fin_no_memory = false, fin_no_calibration = false;
  fin->add_option("--data", fin_data, "Target country CSV")->required()->check(CLI::ExistingFile);
  fin->add_option("--bank", fin_bank, "Memory bank or prototype-set file")->check(CLI::ExistingFile);
  fin->add_option("--init-from", fin_init, "Source encoder model to start from")->check(CLI::ExistingFile);
  fin->add_option("--label-fraction", fin_fraction, "Share of training labels kept")->check(CLI::Range(1e-9, 1.0));
  fin->add_option("--epochs", fc.epochs, "Fine-tuning epochs");
  fin->add_option("--batch", fc.batch_size, "Batch size");
  fin->add_option("--lr", fc.learning_rate, "Learning rate");
  fin->add_option("--weight-decay", fc.weight_decay, "Decoupled weight decay");
  fin->add_option("--test-days", fin_split.test_window_days, "Held-out final window (days)");
  fin->add_option("--valid-days", fin_split.valid_window_days, "Validation window (days)");
  fin->add_flag("--no-memory", fin_no_memory, "Ignore the bank");
  fin->add_flag("--no-calibration", fin_no_calibration, "Drop the calibration gate");
  fin->add_flag("--freeze-encoder", fc.freeze_encoder, "Train only the head and adaptation layers");
  fin->add_option("--out", fin_out, "Output model file")->required();
  auto* fin_seed = add_seed(fin);

  // eval
  auto* ev = app.add_subcommand("eval", "Print Revenue@k of a model (or a score file) on a labeled CSV");
  std::string ev_model, ev_scores, ev_data;
  double ev_rate = 0.05;
  auto* ev_model_opt = ev->add_option("--model", ev_model, "Model file")->check(CLI::ExistingFile);
  auto* ev_scores_opt = ev->add_option("--scores", ev_scores, "id,score CSV instead of a model")->check(CLI::ExistingFile);
  ev_model_opt->excludes(ev_scores_opt);
  ev->add_option("--data", ev_data, "Labeled country CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--rate", ev_rate, "Inspection rate")->check(CLI::Range(1e-9, 1.0));

  // experiment
  auto* ex = app.add_subcommand("experiment", "Run one experiment suite and write reports");
  std::string ex_suite, ex_out, ex_world, ex_stamp, ex_seeds = "1,2,3,4,5";
  unsigned ex_jobs = 1;
  ExperimentOptions eo;
  bool ex_service = false;
  ex->add_option("--suite", ex_suite, "Suite")->required()->check(CLI::IsMember(suite_names()));
  ex->add_option("--out", ex_out, "Report directory")->required();
  ex->add_option("--world-config", ex_world, "World config file (default: the suite's preset)")
      ->check(CLI::ExistingFile);
  ex->add_option("--seeds", ex_seeds, "Comma-separated run seeds");
  ex->add_option("--jobs", ex_jobs, "Parallel (scenario, seed) cells")->check(CLI::PositiveNumber);
  ex->add_option("--stamp", ex_stamp, "Report file stem (default: UTC time)");
  ex->add_option("--tau", eo.pretrain.tau, "Contrastive temperature");
  ex->add_option("--pretrain-epochs", eo.pretrain.epochs, "Source pretraining epochs");
  ex->add_option("--finetune-epochs", eo.finetune.epochs, "Target fine-tuning epochs");
  ex->add_option("--batch", eo.pretrain.batch_size, "Batch size (both stages)");
  ex->add_option("--lr", eo.pretrain.learning_rate, "Learning rate (both stages)");
  ex->add_flag("--via-service", ex_service, "Exchange prototypes through a local bank server");
  auto* ex_seed = add_seed(ex, "7");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      SyntheticWorldConfig cfg = world_preset(gen_preset);
      if (!gen_config.empty()) {
        std::ifstream in(gen_config);
        cfg = parse_world_config(in);
      }
      cfg.seed = resolve_seed(gen_seed, seed_flag, cfg.seed);
      print_effective(gen, {{"seed", std::to_string(cfg.seed)}});
      fs::create_directories(gen_out);
      for (const auto& [id, ds] : generate_world(cfg)) write_csv(fs::path(gen_out) / (id + ".csv"), ds);
      std::ofstream(fs::path(gen_out) / "world.conf") << to_config_text(cfg);
      return kOk;
    }

    if (pre->parsed()) {
      pc.seed = resolve_seed(pre_seed, seed_flag, 0);
      print_effective(pre, {{"seed", std::to_string(pc.seed)}});
      pc.use_scl = !pre_no_scl;
      pc.encoder.interaction = !pre_no_interaction;
      const DatasetSplit s = split(load_data(pre_data), pre_split);
      const PretrainResult r = pretrain(s.train, s.valid, pc);
      for (const auto& p : r.curve) {
        std::cerr << "epoch " << p.epoch << " scl " << p.scl_loss << " bce " << p.cls_loss << " valid_revenue "
                  << p.valid_revenue << "\n";
      }
      std::cerr << "best epoch " << r.best_epoch << "\n";
      write_bytes(pre_out, serialize(r.params));
      return kOk;
    }

    if (exp->parsed()) {
      const std::uint64_t seed = resolve_seed(exp_seed, seed_flag, 0);
      const EncoderParams m = deserialize_encoder(read_file(exp_model));
      const CountryDataset ds = load_data(exp_data);
      const std::uint64_t created =
          exp_created_opt->count() ? exp_created
                                   : static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::seconds>(
                                                                    std::chrono::system_clock::now().time_since_epoch())
                                                                    .count());
      print_effective(exp, {{"seed", std::to_string(seed)}, {"created-at", std::to_string(created)}});
      const PrototypeSet s = extract_prototypes(m, select_fraud_like(m, ds, exp_fraction), exp_per_class, seed, created);
      write_bytes(exp_out, serialize(s));
      std::cout << s.source_id << ": " << s.fraud.rows() << " fraud + " << s.nonfraud.rows()
                << " non-fraud prototypes, dim " << s.dim << "\n";
      return kOk;
    }

    if (serve->parsed()) {
      print_effective(serve);
      BankServer server(serve_dir, serve_listen);
      std::cout << "listening on port " << server.port() << std::endl;
      server.wait();
      return kOk;
    }

    if (push->parsed()) {
      print_effective(push);
      BankClient client(push_to);
      std::cout << client.put(read_file(push_bank)) << "\n";
      return kOk;
    }

    if (fetch->parsed()) {
      print_effective(fetch);
      BankClient client(fetch_from);
      if (fetch_list) {
        for (const auto& [id, ts] : client.list()) std::cout << id << ' ' << ts << "\n";
        return kOk;
      }
      if (fetch_sources.empty() || fetch_out.empty()) throw ConfigError("fetch-bank needs --sources and --out");
      const MemoryBank bank = client.get(split_ids(fetch_sources));
      write_bytes(fetch_out, serialize(bank));
      std::cout << bank.entries().size() << " sources, " << bank.size() << " prototypes\n";
      return kOk;
    }

    if (fin->parsed()) {
      fc.seed = resolve_seed(fin_seed, seed_flag, 0);
      print_effective(fin, {{"seed", std::to_string(fc.seed)}});
      const DatasetSplit s = split(load_data(fin_data), fin_split);
      const CountryDataset train =
          fin_fraction < 1.0 ? mask_labels(s.train, fin_fraction, derive_seed(fc.seed, "mask")) : s.train;
      MemoryBank bank;
      if (!fin_bank.empty()) bank = load_bank(read_file(fin_bank));
      std::optional<EncoderParams> source;
      if (!fin_init.empty()) source = deserialize_encoder(read_file(fin_init));
      fc.init_from_source = source.has_value();
      fc.use_memory = !fin_no_memory && !bank.empty();
      fc.use_calibration = !fin_no_calibration;
      const FinetuneResult r = finetune(train, s.valid, bank, source ? &*source : nullptr, fc);
      for (const auto& p : r.curve) {
        std::cerr << "epoch " << p.epoch << " bce " << p.cls_loss << " valid_revenue " << p.valid_revenue << "\n";
      }
      std::cerr << "best epoch " << r.best_epoch << "\n";
      write_bytes(fin_out, serialize(r.params));
      return kOk;
    }

    if (ev->parsed()) {
      print_effective(ev);
      const CountryDataset ds = load_data(ev_data);
      std::vector<double> scores;
      if (!ev_scores.empty()) {
        scores = load_scores(ev_scores, ds);
      } else if (!ev_model.empty()) {
        scores = predict(load_model(read_file(ev_model)), ds);
      } else {
        throw ConfigError("eval needs --model or --scores");
      }
      std::printf("%.4f\n", revenue_at_k(scores, ds, ev_rate));
      return kOk;
    }

    if (ex->parsed()) {
      const std::uint64_t world_seed = resolve_seed(ex_seed, seed_flag, 7);
      SyntheticWorldConfig world = suite_world(ex_suite, world_seed);
      if (!ex_world.empty()) {
        std::ifstream in(ex_world);
        world = parse_world_config(in);
        if (ex_seed->count() || std::getenv("PROTOBANK_SEED")) world.seed = world_seed;
      }
      if (ex_stamp.empty()) ex_stamp = utc_stamp();
      print_effective(ex, {{"seed", std::to_string(world.seed)}, {"stamp", ex_stamp}});
      eo.finetune.batch_size = eo.pretrain.batch_size;
      eo.finetune.learning_rate = eo.pretrain.learning_rate;
      eo.exchange_via_service = ex_service;
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_ids(ex_seeds)) {
        std::uint64_t v = 0;
        if (!detail::parse_number(std::string_view(s), v)) throw ConfigError("bad seed '" + s + "'");
        seeds.push_back(v);
      }
      if (seeds.empty()) throw ConfigError("no seeds");
      auto scenarios = suite_scenarios(ex_suite, world);
      for (auto& c : scenarios) c.seeds = seeds;
      ExperimentContext ctx(world, eo);
      const auto reports = run_scenarios(scenarios, ctx, ex_jobs);
      write_reports(ex_out, reports, ex_stamp);
      for (const auto& r : reports) std::printf("%-40s %.4f +- %.4f\n", r.config.name.c_str(), r.mean, r.stdev);
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
