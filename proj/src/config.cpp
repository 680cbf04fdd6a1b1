#include "cesaa/config.hpp"

#include <cstdio>
#include <fstream>

namespace cesaa {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed,
                    const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown key '" + where + it.key() + "'");
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + where + key + "': " + e.what());
  }
}

std::vector<int> read_vocab(const json& obj, const std::string& where,
                            const std::vector<int>& fallback) {
  if (!obj.contains("vocab_size")) return fallback;
  const json& v = obj.at("vocab_size");
  int fields = obj.contains("fields") ? obj.at("fields").get<int>()
                                      : static_cast<int>(fallback.size());
  if (v.is_number_integer()) return std::vector<int>(fields, v.get<int>());
  if (v.is_array()) {
    auto sizes = v.get<std::vector<int>>();
    if (obj.contains("fields") && static_cast<int>(sizes.size()) != fields)
      throw ConfigError(where + "vocab_size array length " + std::to_string(sizes.size()) +
                        " does not match fields = " + std::to_string(fields));
    return sizes;
  }
  throw ConfigError(where + "vocab_size must be an integer or an array of integers");
}

}  // namespace

void DataConfig::validate() const {
  if (source != "synthetic" && source != "csv")
    throw ConfigError("data.source must be 'synthetic' or 'csv', got '" + source + "'");
  if (source == "csv" && csv_path.empty())
    throw ConfigError("data.source is 'csv' but data.csv_path is empty");
  if (eval_fraction < 0.0 || eval_fraction >= 1.0)
    throw ConfigError("data.eval_fraction must lie in [0, 1)");
  if (source == "synthetic") synthetic.validate();
}

void RunConfig::validate() const {
  data.validate();
  train.validate();
  if (ablation_seeds < 1) throw ConfigError("ablation.seeds must be >= 1");
  if (sweep_k.empty()) throw ConfigError("sweep.k_values must be non-empty");
  for (int k : sweep_k)
    if (k < 1 || k > train.n_experts)
      throw ConfigError("sweep.k_values entry " + std::to_string(k) + " outside [1, " +
                        std::to_string(train.n_experts) + "]");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
}

SyntheticSpec synthetic_spec_from_json(const json& doc) {
  reject_unknown(doc, {"domains", "fields", "vocab_size", "samples_per_domain", "conflict",
                       "noise_rate", "seed"},
                 "data.synthetic.");
  SyntheticSpec spec;
  read(doc, "domains", spec.domains, "data.synthetic.");
  spec.vocab_sizes = read_vocab(doc, "data.synthetic.", spec.vocab_sizes);
  if (doc.contains("fields")) {
    const int fields = doc.at("fields").get<int>();
    if (fields < 1) throw ConfigError("data.synthetic.fields must be >= 1");
    if (static_cast<int>(spec.vocab_sizes.size()) != fields)
      spec.vocab_sizes.assign(fields, spec.vocab_sizes.empty() ? 50 : spec.vocab_sizes.front());
  }
  read(doc, "samples_per_domain", spec.samples_per_domain, "data.synthetic.");
  read(doc, "conflict", spec.conflict, "data.synthetic.");
  read(doc, "noise_rate", spec.noise_rate, "data.synthetic.");
  read(doc, "seed", spec.seed, "data.synthetic.");
  return spec;
}

TrainConfig train_config_from_json(const json& doc) {
  reject_unknown(doc, {"epochs", "batch_size", "lr", "alpha", "ema_beta", "experts", "top_k",
                       "hidden", "embed_dim", "seed", "variant"},
                 "train.");
  TrainConfig cfg;
  read(doc, "epochs", cfg.epochs, "train.");
  read(doc, "batch_size", cfg.batch_size, "train.");
  read(doc, "lr", cfg.lr, "train.");
  read(doc, "alpha", cfg.alpha, "train.");
  read(doc, "ema_beta", cfg.ema_beta, "train.");
  read(doc, "experts", cfg.n_experts, "train.");
  read(doc, "top_k", cfg.top_k, "train.");
  read(doc, "hidden", cfg.hidden, "train.");
  read(doc, "embed_dim", cfg.embed_dim, "train.");
  read(doc, "seed", cfg.seed, "train.");
  if (doc.contains("variant")) cfg.variant = variant_from_string(doc.at("variant").get<std::string>());
  return cfg;
}

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
  reject_unknown(doc, {"data", "train", "metrics", "ablation", "sweep", "out_dir", "jobs"}, "");

  RunConfig cfg;
  if (doc.contains("data")) {
    const json& d = doc.at("data");
    reject_unknown(d, {"source", "csv_path", "eval_fraction", "synthetic"}, "data.");
    read(d, "source", cfg.data.source, "data.");
    read(d, "csv_path", cfg.data.csv_path, "data.");
    read(d, "eval_fraction", cfg.data.eval_fraction, "data.");
    if (d.contains("synthetic")) cfg.data.synthetic = synthetic_spec_from_json(d.at("synthetic"));
  }
  if (doc.contains("train")) cfg.train = train_config_from_json(doc.at("train"));
  if (doc.contains("metrics")) {
    const json& m = doc.at("metrics");
    reject_unknown(m, {"group_key"}, "metrics.");
    if (m.contains("group_key"))
      cfg.group_key = group_key_from_string(m.at("group_key").get<std::string>());
  }
  if (doc.contains("ablation")) {
    const json& a = doc.at("ablation");
    reject_unknown(a, {"seeds"}, "ablation.");
    read(a, "seeds", cfg.ablation_seeds, "ablation.");
  }
  if (doc.contains("sweep")) {
    const json& s = doc.at("sweep");
    reject_unknown(s, {"k_values"}, "sweep.");
    read(s, "k_values", cfg.sweep_k, "sweep.");
  }
  read(doc, "out_dir", cfg.out_dir, "");
  read(doc, "jobs", cfg.jobs, "");
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(doc);
}

json to_json(const SyntheticSpec& spec) {
  return json{{"domains", spec.domains},
              {"fields", spec.fields()},
              {"vocab_size", spec.vocab_sizes},
              {"samples_per_domain", spec.samples_per_domain},
              {"conflict", spec.conflict},
              {"noise_rate", spec.noise_rate},
              {"seed", spec.seed}};
}

json to_json(const TrainConfig& cfg) {
  return json{{"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"lr", cfg.lr},
              {"alpha", cfg.alpha},
              {"ema_beta", cfg.ema_beta},
              {"experts", cfg.n_experts},
              {"top_k", cfg.top_k},
              {"hidden", cfg.hidden},
              {"embed_dim", cfg.embed_dim},
              {"seed", cfg.seed},
              {"variant", to_string(cfg.variant)}};
}

json to_json(const RunConfig& cfg) {
  json data = {{"source", cfg.data.source},
               {"csv_path", cfg.data.csv_path},
               {"eval_fraction", cfg.data.eval_fraction},
               {"synthetic", to_json(cfg.data.synthetic)}};
  return json{{"data", data},
              {"train", to_json(cfg.train)},
              {"metrics", json{{"group_key", to_string(cfg.group_key)}}},
              {"ablation", json{{"seeds", cfg.ablation_seeds}}},
              {"sweep", json{{"k_values", cfg.sweep_k}}},
              {"out_dir", cfg.out_dir},
              {"jobs", cfg.jobs}};
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;  // keep unparseable values as strings

  json* cursor = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("--set: empty key segment in '" + path + "'");
    if (dot == std::string::npos) {
      (*cursor)[key] = value;
      return;
    }
    cursor = &(*cursor)[key];
    start = dot + 1;
  }
}

std::string config_digest(const json& resolved) {
  const std::string dump = resolved.dump();  // object keys are already sorted
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace cesaa
