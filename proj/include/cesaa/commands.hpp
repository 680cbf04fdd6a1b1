#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cesaa/config.hpp"
#include "cesaa/training.hpp"

namespace cesaa {

/// All outputs of one training run. records_jsonl holds the run's records
/// (config, one per epoch, final eval) as emitted, one JSON object per line.
struct RunRecord {
  Variant variant = Variant::kCesaa;
  std::uint64_t seed = 0;
  std::string digest;
  std::vector<EpochMetrics> epochs;
  EvalMetrics eval;
  std::string records_jsonl;
};

/// Materialize (train, eval) datasets from the config's data section. The
/// eval part is empty when eval_fraction is 0.
std::pair<Dataset, Dataset> load_datasets(const RunConfig& config);

/// Train + evaluate one run on the given datasets (eval falls back to train
/// when empty). Pure in the config and data: no filesystem access unless
/// checkpoint_path is given.
RunRecord train_and_eval(const RunConfig& config, const Dataset& train, const Dataset& eval,
                         const std::string* checkpoint_path);

/// Full `train` command: loads data, trains, writes metrics.jsonl and
/// checkpoint.bin under out_dir (when write_outputs).
RunRecord run_train(const RunConfig& config, bool write_outputs);

/// Writes the synthetic dataset as CSV plus a `<path>.spec.json` sidecar
/// carrying the generating spec; regenerating from the sidecar is
/// byte-identical.
void run_gen_data(const RunConfig& config, const std::string& out_csv);

struct AblationRow {
  Variant variant = Variant::kCesaa;
  std::vector<std::uint64_t> seeds;
  std::vector<double> aucs;
  std::vector<double> gaucs;
  double auc_mean = 0.0, auc_sd = 0.0;
  double gauc_mean = 0.0, gauc_sd = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // one per variant, fixed order
  std::string records_jsonl;
  std::string table_text;
};

/// Runs every ablation variant over ablation_seeds seeds on identical data.
AblationResult run_ablate(const RunConfig& config, bool write_outputs);

struct SweepRow {
  int k = 0;
  double auc = 0.0, gauc = 0.0;
  double mutual_information = 0.0;
  std::uint64_t seed = 0;
  std::string digest;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<RunRecord> runs;
  std::string records_jsonl;
};

/// Trains the full model once per k in sweep_k and emits a GAUC-vs-k series.
SweepResult run_sweep_k(const RunConfig& config, bool write_outputs);

struct RoutingInspection {
  RoutingReport report;
  double mutual_information = 0.0;
  std::string records_jsonl;
  std::string table_text;
};

/// Loads a checkpoint and reports P(expert | domain) plus I(D;E) over the
/// config's dataset.
RoutingInspection run_inspect_routing(const RunConfig& config, const std::string& checkpoint_path);

/// Loads a checkpoint and evaluates it on the config's eval split (the full
/// dataset when eval_fraction is 0).
RunRecord run_evaluate(const RunConfig& config, const std::string& checkpoint_path);

/// Command-line entry point; returns the process exit code
/// (0 ok, 2 config error, 3 data error, 4 numeric error, 1 other).
int cli_main(int argc, const char* const* argv);

}  // namespace cesaa
