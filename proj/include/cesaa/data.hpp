#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cesaa/common.hpp"

namespace cesaa {

/// One labeled impression: the domain it came from, one categorical id per
/// feature field, a group identity for grouped ranking metrics, and a binary
/// click label.
struct Sample {
  int domain_id = 0;
  std::vector<int> feature_ids;
  long long group_id = 0;
  int label = 0;
};

struct Dataset {
  int n_domains = 0;
  std::vector<int> vocab_sizes;  // per feature field
  std::vector<Sample> samples;

  int n_fields() const { return static_cast<int>(vocab_sizes.size()); }
  std::size_t size() const { return samples.size(); }
  void validate() const;
};

/// Recipe for the synthetic multi-domain generator. Each domain has a hidden
/// linear scoring rule over one-hot features; `conflict` is the probability
/// that a domain's rule is the negation of the previous domain's, which makes
/// a single pooled predictor fight itself across domains.
struct SyntheticSpec {
  int domains = 4;
  std::vector<int> vocab_sizes = {50, 50, 50, 50};
  int samples_per_domain = 5000;
  double conflict = 1.0;
  double noise_rate = 0.1;
  std::uint64_t seed = 1;

  int fields() const { return static_cast<int>(vocab_sizes.size()); }
  void validate() const;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

/// The generator's hidden per-domain scoring rules, exposed so tests can use
/// the Bayes-style per-domain predictor as an oracle.
struct SyntheticTeacher {
  std::vector<std::vector<std::vector<double>>> weights;  // [domain][field][id]
  double logit(int domain, const std::vector<int>& feature_ids) const;
};
SyntheticTeacher synthetic_teacher(const SyntheticSpec& spec);

/// Expected CSV layout: header `domain_id,group_id,f_0,...,f_{F-1},label`.
/// Unset fields (-1 / empty) are inferred from the data.
struct CsvSchema {
  int n_fields = -1;
  int n_domains = -1;
  std::vector<int> vocab_sizes;
};

Dataset load_csv(const std::string& path, const CsvSchema& schema = {});
void save_csv(const Dataset& data, const std::string& path);

/// Deterministic shuffled split; the second part holds ceil(n * eval_fraction)
/// samples. eval_fraction 0 gives an empty second part.
std::pair<Dataset, Dataset> split_train_eval(const Dataset& data, double eval_fraction,
                                             std::uint64_t seed);

}  // namespace cesaa
