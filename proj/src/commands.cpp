#include "cesaa/commands.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

namespace cesaa {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json routing_to_json(const RoutingReport& report) {
  json rows = json::array();
  for (const auto& [domain, p] : report.rows)
    rows.push_back(json{{"domain", domain}, {"p", p}});
  return json{{"experts", report.n_experts}, {"rows", rows}};
}

json eval_to_json(const EvalMetrics& ev) {
  json j{{"auc", ev.auc},
         {"gauc", ev.gauc},
         {"gauc_groups_used", ev.gauc_groups_used},
         {"gauc_groups_excluded", ev.gauc_groups_excluded},
         {"bce", ev.mean_bce},
         {"routing", routing_to_json(ev.routing)}};
  if (ev.mutual_information) j["i_de"] = *ev.mutual_information;
  return j;
}

void append_line(std::string& out, const json& record) {
  out += record.dump();
  out += '\n';
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw DataError("failed writing '" + path + "'");
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_sd(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

/// Run tasks [0, n) on up to `jobs` threads; the first failure is rethrown
/// with its task's context prefixed, keeping the original error category.
void parallel_for(int n, int jobs, const std::function<void(int)>& task,
                  const std::function<std::string(int)>& context) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex fail_mutex;
  std::exception_ptr failure;
  int failed_task = -1;
  auto worker = [&] {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard<std::mutex> lock(fail_mutex);
        if (failure) return;
      }
      try {
        task(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(fail_mutex);
        if (!failure) {
          failure = std::current_exception();
          failed_task = i;
        }
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  const int n_threads = std::min(jobs, n);
  threads.reserve(n_threads);
  for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (failure) {
    const std::string ctx = context(failed_task) + ": ";
    try {
      std::rethrow_exception(failure);
    } catch (const ConfigError& e) {
      throw ConfigError(ctx + e.what());
    } catch (const DataError& e) {
      throw DataError(ctx + e.what());
    } catch (const NumericError& e) {
      throw NumericError(ctx + e.what());
    } catch (const FormatError& e) {
      throw FormatError(ctx + e.what());
    } catch (const std::exception& e) {
      throw Error(ctx + e.what());
    }
  }
}

}  // namespace

std::pair<Dataset, Dataset> load_datasets(const RunConfig& config) {
  Dataset full = config.data.source == "synthetic" ? generate_synthetic(config.data.synthetic)
                                                   : load_csv(config.data.csv_path);
  if (config.data.eval_fraction == 0.0) return {std::move(full), Dataset{}};
  return split_train_eval(full, config.data.eval_fraction, config.data.synthetic.seed);
}

RunRecord train_and_eval(const RunConfig& config, const Dataset& train, const Dataset& eval,
                         const std::string* checkpoint_path) {
  config.validate();
  const json resolved = to_json(config);
  const std::string digest = config_digest(resolved);

  RunRecord rec;
  rec.variant = config.train.variant;
  rec.seed = config.train.seed;
  rec.digest = digest;
  append_line(rec.records_jsonl,
              json{{"type", "config"},
                   {"digest", digest},
                   {"seed", config.train.seed},
                   {"config", resolved}});

  Trainer trainer(config.train, train);
  for (int e = 0; e < config.train.epochs; ++e) {
    EpochMetrics em = trainer.run_epoch();
    rec.epochs.push_back(em);
    append_line(rec.records_jsonl, json{{"type", "epoch"},
                                        {"digest", digest},
                                        {"seed", config.train.seed},
                                        {"variant", to_string(config.train.variant)},
                                        {"epoch", em.epoch},
                                        {"bce", em.bce},
                                        {"mi", em.mi_loss},
                                        {"total", em.total},
                                        {"i_de", em.mutual_information},
                                        {"gate_nonzeros", em.gate_nonzeros_mean},
                                        {"steps", em.steps}});
  }

  const Dataset& eval_data = eval.samples.empty() ? train : eval;
  rec.eval = evaluate(trainer.model(), eval_data, config.group_key, &trainer.joint());
  json ev = eval_to_json(rec.eval);
  ev["type"] = "eval";
  ev["digest"] = digest;
  ev["seed"] = config.train.seed;
  ev["variant"] = to_string(config.train.variant);
  append_line(rec.records_jsonl, ev);

  if (checkpoint_path) trainer.save_checkpoint(*checkpoint_path, resolved.dump());
  return rec;
}

RunRecord run_train(const RunConfig& config, bool write_outputs) {
  config.validate();
  auto [train, eval] = load_datasets(config);
  std::string checkpoint_path;
  if (write_outputs) {
    fs::create_directories(config.out_dir);
    checkpoint_path = (fs::path(config.out_dir) / "checkpoint.bin").string();
  }
  RunRecord rec = train_and_eval(config, train, eval,
                                 write_outputs ? &checkpoint_path : nullptr);
  if (write_outputs)
    write_text((fs::path(config.out_dir) / "metrics.jsonl").string(), rec.records_jsonl);
  return rec;
}

void run_gen_data(const RunConfig& config, const std::string& out_csv) {
  config.data.synthetic.validate();
  Dataset data = generate_synthetic(config.data.synthetic);
  save_csv(data, out_csv);
  const json spec = to_json(config.data.synthetic);
  json sidecar{{"type", "synthetic-spec"},
               {"digest", config_digest(spec)},
               {"seed", config.data.synthetic.seed},
               {"spec", spec},
               {"rows", data.samples.size()}};
  write_text(out_csv + ".spec.json", sidecar.dump(2) + "\n");
}

AblationResult run_ablate(const RunConfig& config, bool write_outputs) {
  config.validate();
  auto [train, eval] = load_datasets(config);

  const std::vector<Variant> variants = all_variants();
  const int seeds = config.ablation_seeds;
  const int n_runs = static_cast<int>(variants.size()) * seeds;
  std::vector<RunRecord> runs(n_runs);

  auto job_desc = [&](int i) {
    const Variant v = variants[i / seeds];
    const std::uint64_t seed = config.train.seed + static_cast<std::uint64_t>(i % seeds);
    return std::pair<Variant, std::uint64_t>(v, seed);
  };
  parallel_for(
      n_runs, config.jobs,
      [&](int i) {
        auto [variant, seed] = job_desc(i);
        RunConfig rc = config;
        rc.train.variant = variant;
        rc.train.seed = seed;
        runs[i] = train_and_eval(rc, train, eval, nullptr);
      },
      [&](int i) {
        auto [variant, seed] = job_desc(i);
        return std::string("ablation run variant=") + to_string(variant) +
               " seed=" + std::to_string(seed);
      });

  AblationResult result;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    AblationRow row;
    row.variant = variants[v];
    for (int s = 0; s < seeds; ++s) {
      const RunRecord& r = runs[v * seeds + s];
      row.seeds.push_back(r.seed);
      row.aucs.push_back(r.eval.auc);
      row.gaucs.push_back(r.eval.gauc);
      append_line(result.records_jsonl, json{{"type", "ablation_run"},
                                             {"digest", r.digest},
                                             {"seed", r.seed},
                                             {"variant", to_string(r.variant)},
                                             {"auc", r.eval.auc},
                                             {"gauc", r.eval.gauc},
                                             {"bce", r.eval.mean_bce}});
    }
    row.auc_mean = mean(row.aucs);
    row.auc_sd = sample_sd(row.aucs);
    row.gauc_mean = mean(row.gaucs);
    row.gauc_sd = sample_sd(row.gaucs);
    result.rows.push_back(std::move(row));
  }

  std::ostringstream table;
  char line[160];
  std::snprintf(line, sizeof(line), "%-16s %-18s %-18s %s\n", "variant", "gauc (mean+-sd)",
                "auc (mean+-sd)", "seeds");
  table << line;
  for (const AblationRow& row : result.rows) {
    std::snprintf(line, sizeof(line), "%-16s %.4f +- %.4f   %.4f +- %.4f   %d\n",
                  to_string(row.variant), row.gauc_mean, row.gauc_sd, row.auc_mean, row.auc_sd,
                  seeds);
    table << line;
  }
  result.table_text = table.str();

  if (write_outputs) {
    fs::create_directories(config.out_dir);
    write_text((fs::path(config.out_dir) / "ablation.jsonl").string(), result.records_jsonl);
    write_text((fs::path(config.out_dir) / "ablation_table.txt").string(), result.table_text);
  }
  return result;
}

SweepResult run_sweep_k(const RunConfig& config, bool write_outputs) {
  config.validate();
  auto [train, eval] = load_datasets(config);

  const int n_runs = static_cast<int>(config.sweep_k.size());
  SweepResult result;
  result.runs.resize(n_runs);
  parallel_for(
      n_runs, config.jobs,
      [&](int i) {
        RunConfig rc = config;
        rc.train.variant = Variant::kCesaa;
        rc.train.top_k = config.sweep_k[i];
        result.runs[i] = train_and_eval(rc, train, eval, nullptr);
      },
      [&](int i) { return "sweep run k=" + std::to_string(config.sweep_k[i]); });

  for (int i = 0; i < n_runs; ++i) {
    const RunRecord& r = result.runs[i];
    SweepRow row;
    row.k = config.sweep_k[i];
    row.auc = r.eval.auc;
    row.gauc = r.eval.gauc;
    row.mutual_information = r.eval.mutual_information.value_or(0.0);
    row.seed = r.seed;
    row.digest = r.digest;
    append_line(result.records_jsonl, json{{"type", "sweep_k"},
                                           {"digest", row.digest},
                                           {"seed", row.seed},
                                           {"k", row.k},
                                           {"auc", row.auc},
                                           {"gauc", row.gauc},
                                           {"i_de", row.mutual_information}});
    result.rows.push_back(std::move(row));
  }

  if (write_outputs) {
    fs::create_directories(config.out_dir);
    write_text((fs::path(config.out_dir) / "sweep_k.jsonl").string(), result.records_jsonl);
  }
  return result;
}

namespace {

enum class DataPart { kFull, kEvalSplit };

Dataset dataset_for_model(const RunConfig& config, const CesModel& model, DataPart part) {
  Dataset data;
  if (part == DataPart::kFull) {
    data = config.data.source == "synthetic" ? generate_synthetic(config.data.synthetic)
                                             : load_csv(config.data.csv_path);
  } else {
    auto [train, eval] = load_datasets(config);
    data = eval.samples.empty() ? std::move(train) : std::move(eval);
  }
  // Model embedding field 0 is the domain; data fields follow.
  const auto& vocabs = model.embedding.vocab_sizes;
  if (static_cast<int>(vocabs.size()) != data.n_fields() + 1 || vocabs[0] != data.n_domains)
    throw ConfigError("checkpoint/config mismatch: model expects " +
                      std::to_string(vocabs.size() - 1) + " fields over " +
                      std::to_string(vocabs[0]) + " domains, dataset has " +
                      std::to_string(data.n_fields()) + " fields over " +
                      std::to_string(data.n_domains) + " domains");
  for (int f = 0; f < data.n_fields(); ++f)
    if (data.vocab_sizes[f] > vocabs[1 + f])
      throw ConfigError("checkpoint/config mismatch: field f_" + std::to_string(f) +
                        " vocabulary " + std::to_string(data.vocab_sizes[f]) +
                        " exceeds the model's " + std::to_string(vocabs[1 + f]));
  return data;
}

}  // namespace

RoutingInspection run_inspect_routing(const RunConfig& config,
                                      const std::string& checkpoint_path) {
  LoadedModel lm = load_model(checkpoint_path);
  Dataset data = dataset_for_model(config, *lm.model, DataPart::kFull);

  RoutingInspection ri;
  ri.report = routing_report(*lm.model, data);
  ri.mutual_information =
      mutual_information(lm.jpm.values(), lm.jpm.n_domains(), lm.jpm.n_experts())
          .mutual_information;

  std::ostringstream table;
  table << "P(expert | domain), " << ri.report.n_experts << " experts\n";
  for (const auto& [domain, p] : ri.report.rows) {
    table << "domain " << domain << ":";
    char cell[32];
    for (double v : p) {
      std::snprintf(cell, sizeof(cell), " %.4f", v);
      table << cell;
    }
    table << "\n";
  }
  char mi_line[64];
  std::snprintf(mi_line, sizeof(mi_line), "I(D;E) = %.6f nats\n", ri.mutual_information);
  table << mi_line;
  ri.table_text = table.str();

  const json resolved = to_json(config);
  json record = routing_to_json(ri.report);
  record["type"] = "routing";
  record["digest"] = config_digest(resolved);
  record["seed"] = lm.config.seed;
  record["i_de"] = ri.mutual_information;
  append_line(ri.records_jsonl, record);
  return ri;
}

RunRecord run_evaluate(const RunConfig& config, const std::string& checkpoint_path) {
  LoadedModel lm = load_model(checkpoint_path);
  Dataset data = dataset_for_model(config, *lm.model, DataPart::kEvalSplit);

  RunRecord rec;
  rec.variant = lm.config.variant;
  rec.seed = lm.config.seed;
  const json resolved = to_json(config);
  rec.digest = config_digest(resolved);
  rec.eval = evaluate(*lm.model, data, config.group_key, &lm.jpm);
  json ev = eval_to_json(rec.eval);
  ev["type"] = "eval";
  ev["digest"] = rec.digest;
  ev["seed"] = rec.seed;
  ev["variant"] = to_string(rec.variant);
  append_line(rec.records_jsonl, ev);
  return rec;
}

// ---------------------------------------------------------------------------
// CLI

namespace {

struct CliCommon {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<std::string> out_dir;
  std::optional<int> jobs;
};

void add_common(CLI::App* cmd, CliCommon& c) {
  cmd->add_option("--config", c.config_path, "JSON config file");
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set train.lr=0.01");
  cmd->add_option("--seed", c.seed, "Override train.seed");
  cmd->add_option("--variant", c.variant, "Override train.variant");
  cmd->add_option("--out", c.out_dir, "Override out_dir");
  cmd->add_option("--jobs", c.jobs, "Parallel trainings for ablate/sweep-k");
}

RunConfig resolve_config(const CliCommon& c) {
  json doc = json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ConfigError("cannot open config file '" + c.config_path + "'");
    try {
      in >> doc;
    } catch (const json::exception& e) {
      throw ConfigError("config file '" + c.config_path + "' is not valid JSON: " +
                        std::string(e.what()));
    }
  }
  for (const std::string& o : c.overrides) apply_override(doc, o);
  if (c.seed) doc["train"]["seed"] = *c.seed;
  if (c.variant) doc["train"]["variant"] = *c.variant;
  if (c.out_dir) doc["out_dir"] = *c.out_dir;
  if (c.jobs) doc["jobs"] = *c.jobs;
  return parse_run_config(doc);
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Sparse conditional expert selection for multi-domain CTR prediction"};
  app.require_subcommand(1);

  CliCommon common;
  std::string gen_out = "data.csv";
  std::string checkpoint_path;

  CLI::App* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as CSV + sidecar");
  add_common(gen, common);
  gen->add_option("--out-csv", gen_out, "Output CSV path");

  CLI::App* train = app.add_subcommand("train", "Train one model, emit metrics + checkpoint");
  add_common(train, common);

  CLI::App* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint on the config's data");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "Run the ablation variants over several seeds");
  add_common(ablate, common);

  CLI::App* sweep = app.add_subcommand("sweep-k", "Train the full model per retained-expert count");
  add_common(sweep, common);

  CLI::App* inspect =
      app.add_subcommand("inspect-routing", "Print P(expert | domain) of a checkpoint");
  add_common(inspect, common);
  inspect->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = resolve_config(common);
      run_gen_data(cfg, gen_out);
      std::cout << "wrote " << gen_out << " and " << gen_out << ".spec.json\n";
    } else if (train->parsed()) {
      RunConfig cfg = resolve_config(common);
      RunRecord rec = run_train(cfg, /*write_outputs=*/true);
      std::cout << rec.records_jsonl;
      std::cout << "checkpoint: " << (fs::path(cfg.out_dir) / "checkpoint.bin").string() << "\n";
    } else if (eval_cmd->parsed()) {
      RunConfig cfg = resolve_config(common);
      RunRecord rec = run_evaluate(cfg, checkpoint_path);
      std::cout << rec.records_jsonl;
    } else if (ablate->parsed()) {
      RunConfig cfg = resolve_config(common);
      AblationResult res = run_ablate(cfg, /*write_outputs=*/true);
      std::cout << res.table_text;
    } else if (sweep->parsed()) {
      RunConfig cfg = resolve_config(common);
      SweepResult res = run_sweep_k(cfg, /*write_outputs=*/true);
      std::cout << res.records_jsonl;
    } else if (inspect->parsed()) {
      RunConfig cfg = resolve_config(common);
      RoutingInspection ri = run_inspect_routing(cfg, checkpoint_path);
      std::cout << ri.table_text;
      std::cout << ri.records_jsonl;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace cesaa
