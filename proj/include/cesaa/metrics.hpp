#pragma once

#include <map>
#include <span>
#include <vector>

#include "cesaa/common.hpp"

namespace cesaa {

/// AUC via the rank statistic, ties credited 0.5. Requires both classes.
double auc(std::span<const double> scores, std::span<const int> labels);

/// (group, score, label) triples for grouped ranking metrics.
struct GroupedScores {
  std::vector<long long> group;
  std::vector<double> score;
  std::vector<int> label;

  std::size_t size() const { return group.size(); }
};

struct GroupedAucResult {
  double value = 0.0;
  int groups_used = 0;
  int groups_excluded = 0;  // single-class groups, skipped but counted
};

/// Weighted mean of per-group AUCs. Groups whose labels are single-class are
/// excluded and counted. Weights default to 1 per group; whether groups are
/// users or queries is the caller's choice.
GroupedAucResult grouped_auc(const GroupedScores& gs,
                             const std::map<long long, double>* weights = nullptr);

struct RankedItem {
  int id = 0;
  double score = 0.0;
};

/// |top-N(candidates) ∩ top-K(targets)| / K, ties broken toward lower id.
double recall_at_n_k(std::span<const RankedItem> candidates, std::span<const RankedItem> targets,
                     int top_n, int top_k);

}  // namespace cesaa
