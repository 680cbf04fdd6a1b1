#include "cesaa/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <string>

namespace cesaa {

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ShapeError("auc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  if (scores.empty()) throw DataError("auc: empty input");

  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("auc: label " + std::to_string(y) + " is not binary");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw DataError("auc: undefined metric, only one class present");

  // Average ranks over score ties, then the Mann-Whitney statistic. Rank sums
  // stay half-integers, so this matches the pairwise win/tie count exactly.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

GroupedAucResult grouped_auc(const GroupedScores& gs,
                             const std::map<long long, double>* weights) {
  if (gs.score.size() != gs.group.size() || gs.label.size() != gs.group.size())
    throw ShapeError("grouped_auc: triple lists have unequal lengths");
  if (gs.group.empty()) throw DataError("grouped_auc: empty input");

  std::vector<std::size_t> order(gs.group.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return gs.group[a] < gs.group[b]; });

  GroupedAucResult result;
  double weighted_sum = 0.0, weight_total = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    const long long g = gs.group[order[i]];
    while (j < order.size() && gs.group[order[j]] == g) ++j;
    std::vector<double> s;
    std::vector<int> y;
    s.reserve(j - i);
    y.reserve(j - i);
    bool has_pos = false, has_neg = false;
    for (std::size_t t = i; t < j; ++t) {
      s.push_back(gs.score[order[t]]);
      y.push_back(gs.label[order[t]]);
      (y.back() == 1 ? has_pos : has_neg) = true;
    }
    if (has_pos && has_neg) {
      double w = 1.0;
      if (weights) {
        auto it = weights->find(g);
        if (it != weights->end()) w = it->second;
      }
      weighted_sum += w * auc(s, y);
      weight_total += w;
      ++result.groups_used;
    } else {
      ++result.groups_excluded;
    }
    i = j;
  }
  if (result.groups_used == 0)
    throw DataError("grouped_auc: no group contains both classes");
  result.value = weighted_sum / weight_total;
  return result;
}

namespace {

std::set<int> top_ids(std::span<const RankedItem> items, int k, const char* what) {
  if (k < 1 || k > static_cast<int>(items.size()))
    throw DataError(std::string("recall_at_n_k: requested top ") + std::to_string(k) + " of " +
                    std::to_string(items.size()) + " " + what);
  std::vector<RankedItem> sorted(items.begin(), items.end());
  std::sort(sorted.begin(), sorted.end(), [](const RankedItem& a, const RankedItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  std::set<int> ids;
  for (int i = 0; i < k; ++i) ids.insert(sorted[i].id);
  return ids;
}

}  // namespace

double recall_at_n_k(std::span<const RankedItem> candidates, std::span<const RankedItem> targets,
                     int top_n, int top_k) {
  const auto cand = top_ids(candidates, top_n, "candidates");
  const auto targ = top_ids(targets, top_k, "targets");
  int hit = 0;
  for (int id : targ) hit += cand.count(id) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(top_k);
}

}  // namespace cesaa
