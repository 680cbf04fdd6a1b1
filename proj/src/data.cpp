#include "cesaa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cesaa/rng.hpp"

namespace cesaa {

void Dataset::validate() const {
  if (n_domains <= 0) throw DataError("dataset: domain count must be positive");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.domain_id < 0 || s.domain_id >= n_domains)
      throw DataError("dataset: sample " + std::to_string(i) + " has domain " +
                      std::to_string(s.domain_id) + " outside [0, " + std::to_string(n_domains) +
                      ")");
    if (s.feature_ids.size() != vocab_sizes.size())
      throw DataError("dataset: sample " + std::to_string(i) + " has " +
                      std::to_string(s.feature_ids.size()) + " feature ids, expected " +
                      std::to_string(vocab_sizes.size()));
    for (int f = 0; f < n_fields(); ++f)
      if (s.feature_ids[f] < 0 || s.feature_ids[f] >= vocab_sizes[f])
        throw DataError("dataset: sample " + std::to_string(i) + " field f_" + std::to_string(f) +
                        " id " + std::to_string(s.feature_ids[f]) + " outside vocabulary of " +
                        std::to_string(vocab_sizes[f]));
    if (s.label != 0 && s.label != 1)
      throw DataError("dataset: sample " + std::to_string(i) + " label " +
                      std::to_string(s.label) + " is not binary");
  }
}

void SyntheticSpec::validate() const {
  if (domains < 1) throw ConfigError("synthetic spec: need at least one domain");
  if (vocab_sizes.empty()) throw ConfigError("synthetic spec: need at least one feature field");
  for (int v : vocab_sizes)
    if (v < 2) throw ConfigError("synthetic spec: vocabulary sizes must be >= 2");
  if (samples_per_domain < 2)
    throw ConfigError("synthetic spec: need at least 2 samples per domain");
  if (conflict < 0.0 || conflict > 1.0)
    throw ConfigError("synthetic spec: conflict must lie in [0, 1]");
  if (noise_rate < 0.0 || noise_rate > 1.0)
    throw ConfigError("synthetic spec: noise_rate must lie in [0, 1]");
}

namespace {

// Samples per group-id block inside one domain; sized so grouped metrics see
// a few dozen samples per group at desk scale.
constexpr int kGroupBlock = 50;

// Teacher weights are scaled so per-sample logits have standard deviation
// around 3: labels are mostly decided but not degenerate.
std::vector<std::vector<std::vector<double>>> draw_teacher(const SyntheticSpec& spec, Rng& rng) {
  const int f_count = spec.fields();
  const double sigma = 3.0 / std::sqrt(static_cast<double>(f_count));
  std::vector<std::vector<std::vector<double>>> w(spec.domains);
  for (int m = 0; m < spec.domains; ++m) {
    const bool negate_prev = m > 0 && rng.uniform() < spec.conflict;
    w[m].resize(f_count);
    if (negate_prev) {
      for (int f = 0; f < f_count; ++f) {
        w[m][f] = w[m - 1][f];
        for (double& x : w[m][f]) x = -x;
      }
    } else {
      for (int f = 0; f < f_count; ++f) {
        w[m][f].resize(spec.vocab_sizes[f]);
        for (double& x : w[m][f]) x = rng.normal() * sigma;
      }
    }
  }
  return w;
}

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

SyntheticTeacher synthetic_teacher(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng = Rng::derive(spec.seed, {0x7ea0u});
  return SyntheticTeacher{draw_teacher(spec, rng)};
}

double SyntheticTeacher::logit(int domain, const std::vector<int>& feature_ids) const {
  double z = 0.0;
  for (std::size_t f = 0; f < feature_ids.size(); ++f) z += weights[domain][f][feature_ids[f]];
  return z;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  // The teacher has its own stream so tests can rebuild it independently of
  // the sample draws.
  Rng teacher_rng = Rng::derive(spec.seed, {0x7ea0u});
  const auto weights = draw_teacher(spec, teacher_rng);
  Rng rng = Rng::derive(spec.seed, {0x5a3eu});

  Dataset data;
  data.n_domains = spec.domains;
  data.vocab_sizes = spec.vocab_sizes;
  data.samples.reserve(static_cast<std::size_t>(spec.domains) * spec.samples_per_domain);
  for (int m = 0; m < spec.domains; ++m) {
    for (int i = 0; i < spec.samples_per_domain; ++i) {
      Sample s;
      s.domain_id = m;
      s.group_id = static_cast<long long>(m) * 1000000 + i / kGroupBlock;
      s.feature_ids.resize(spec.fields());
      double logit = 0.0;
      for (int f = 0; f < spec.fields(); ++f) {
        s.feature_ids[f] = rng.uniform_int(spec.vocab_sizes[f]);
        logit += weights[m][f][s.feature_ids[f]];
      }
      s.label = rng.uniform() < stable_sigmoid(logit) ? 1 : 0;
      if (rng.uniform() < spec.noise_rate) s.label = 1 - s.label;
      data.samples.push_back(std::move(s));
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

int parse_int_cell(const std::string& cell, const std::string& column, std::size_t row) {
  if (cell.empty())
    throw DataError("csv row " + std::to_string(row) + ": empty " + column + " cell");
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(cell, &pos);
  } catch (const std::exception&) {
    throw DataError("csv row " + std::to_string(row) + ": non-integer " + column + " cell '" +
                    cell + "'");
  }
  if (pos != cell.size())
    throw DataError("csv row " + std::to_string(row) + ": non-integer " + column + " cell '" +
                    cell + "'");
  return static_cast<int>(v);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  cells.push_back(cur);
  return cells;
}

}  // namespace

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open csv file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw DataError("csv file '" + path + "' is empty");
  const auto header = split_line(line);
  if (header.size() < 3 || header[0] != "domain_id" || header[1] != "group_id" ||
      header.back() != "label")
    throw DataError("csv header must be domain_id,group_id,f_0,...,label; got '" + line + "'");
  const int n_fields = static_cast<int>(header.size()) - 3;
  for (int f = 0; f < n_fields; ++f)
    if (header[2 + f] != "f_" + std::to_string(f))
      throw DataError("csv header: expected column f_" + std::to_string(f) + ", got '" +
                      header[2 + f] + "'");
  if (schema.n_fields >= 0 && schema.n_fields != n_fields)
    throw DataError("csv has " + std::to_string(n_fields) + " feature columns, schema expects " +
                    std::to_string(schema.n_fields));

  Dataset data;
  data.vocab_sizes.assign(n_fields, 0);
  int max_domain = -1;
  std::size_t row = 0;  // 1-based data row index
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++row;
    const auto cells = split_line(line);
    if (cells.size() != header.size())
      throw DataError("csv row " + std::to_string(row) + ": expected " +
                      std::to_string(header.size()) + " cells, got " +
                      std::to_string(cells.size()));
    Sample s;
    s.domain_id = parse_int_cell(cells[0], "domain_id", row);
    if (s.domain_id < 0)
      throw DataError("csv row " + std::to_string(row) + ": negative domain_id");
    s.group_id = parse_int_cell(cells[1], "group_id", row);
    s.feature_ids.resize(n_fields);
    for (int f = 0; f < n_fields; ++f) {
      const int id = parse_int_cell(cells[2 + f], "f_" + std::to_string(f), row);
      if (id < 0) throw DataError("csv row " + std::to_string(row) + ": negative feature id");
      s.feature_ids[f] = id;
      data.vocab_sizes[f] = std::max(data.vocab_sizes[f], id + 1);
    }
    const int label = parse_int_cell(cells.back(), "label", row);
    if (label != 0 && label != 1)
      throw DataError("csv row " + std::to_string(row) + ": label " + std::to_string(label) +
                      " is not in {0, 1}");
    s.label = label;
    max_domain = std::max(max_domain, s.domain_id);
    data.samples.push_back(std::move(s));
  }
  if (data.samples.empty()) throw DataError("csv file '" + path + "' has no data rows");

  data.n_domains = schema.n_domains >= 0 ? schema.n_domains : max_domain + 1;
  if (!schema.vocab_sizes.empty()) {
    if (static_cast<int>(schema.vocab_sizes.size()) != n_fields)
      throw DataError("schema vocab_sizes has " + std::to_string(schema.vocab_sizes.size()) +
                      " entries for " + std::to_string(n_fields) + " fields");
    for (int f = 0; f < n_fields; ++f)
      if (schema.vocab_sizes[f] < data.vocab_sizes[f])
        throw DataError("schema vocabulary for f_" + std::to_string(f) + " (" +
                        std::to_string(schema.vocab_sizes[f]) + ") is smaller than observed ids");
    data.vocab_sizes = schema.vocab_sizes;
  }
  data.validate();
  return data;
}

void save_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "domain_id,group_id";
  for (int f = 0; f < data.n_fields(); ++f) out << ",f_" << f;
  out << ",label\n";
  for (const Sample& s : data.samples) {
    out << s.domain_id << ',' << s.group_id;
    for (int id : s.feature_ids) out << ',' << id;
    out << ',' << s.label << '\n';
  }
  if (!out) throw DataError("failed writing csv to '" + path + "'");
}

std::pair<Dataset, Dataset> split_train_eval(const Dataset& data, double eval_fraction,
                                             std::uint64_t seed) {
  if (eval_fraction < 0.0 || eval_fraction >= 1.0)
    throw ConfigError("eval_fraction must lie in [0, 1)");
  std::vector<int> order(data.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng = Rng::derive(seed, {0x59171u});
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);

  const std::size_t n_eval =
      static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(order.size())));
  Dataset train{data.n_domains, data.vocab_sizes, {}};
  Dataset eval{data.n_domains, data.vocab_sizes, {}};
  train.samples.reserve(order.size() - n_eval);
  eval.samples.reserve(n_eval);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_eval ? eval : train).samples.push_back(data.samples[order[i]]);
  }
  return {std::move(train), std::move(eval)};
}

}  // namespace cesaa
