#pragma once

#include <string>

#include <json.hpp>

#include "cesaa/data.hpp"
#include "cesaa/training.hpp"

namespace cesaa {

/// Where a run's samples come from: the synthetic generator or a CSV file,
/// plus the held-out fraction used for evaluation.
struct DataConfig {
  std::string source = "synthetic";  // "synthetic" | "csv"
  std::string csv_path;
  double eval_fraction = 0.2;
  SyntheticSpec synthetic;

  void validate() const;
};

/// Top-level run configuration. Parsing is strict: unknown keys are rejected,
/// and defaults are materialized into the resolved document so every emitted
/// record is reproducible from its config digest alone.
struct RunConfig {
  DataConfig data;
  TrainConfig train;
  GroupKey group_key = GroupKey::kGroup;
  std::string out_dir = "runs/out";
  int ablation_seeds = 3;
  std::vector<int> sweep_k = {1, 2, 3, 4};
  int jobs = 1;

  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

nlohmann::json to_json(const RunConfig& config);
nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const SyntheticSpec& spec);
TrainConfig train_config_from_json(const nlohmann::json& doc);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& doc);

/// `--set key.path=value` override applied to the raw document before
/// validation. Values are parsed as JSON when possible, else kept as strings.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// FNV-1a 64 over the canonical (sorted-key, compact) dump, as a hex string.
std::string config_digest(const nlohmann::json& resolved);

}  // namespace cesaa
