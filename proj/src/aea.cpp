#include "cesaa/aea.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cesaa {

JointProbabilityMatrix::JointProbabilityMatrix(int n_domains, int n_experts, double beta)
    : m_(n_domains), n_(n_experts), beta_(beta) {
  if (m_ < 1 || n_ < 1)
    throw ConfigError("joint matrix: dimensions must be positive");
  if (beta_ < 0.0 || beta_ >= 1.0)
    throw ConfigError("joint matrix: beta must lie in [0, 1)");
  j_.assign(static_cast<std::size_t>(m_) * n_, 1.0 / (m_ * n_));
}

void JointProbabilityMatrix::ema_update(std::span<const double> contribution) {
  if (static_cast<int>(contribution.size()) != m_ * n_)
    throw ShapeError("ema_update: contribution has " + std::to_string(contribution.size()) +
                     " entries, expected " + std::to_string(m_ * n_));
  double csum = 0.0;
  for (double c : contribution) csum += c;
  if (std::abs(csum - 1.0) > 1e-6)
    throw NumericError("ema_update: contribution sums to " + std::to_string(csum));

  double total = 0.0;
  for (std::size_t i = 0; i < j_.size(); ++i) {
    j_[i] = beta_ * j_[i] + (1.0 - beta_) * contribution[i];
    total += j_[i];
  }
  for (auto& v : j_) v /= total;
}

void JointProbabilityMatrix::set_values(std::span<const double> values) {
  if (static_cast<int>(values.size()) != m_ * n_)
    throw ShapeError("joint matrix: wrong value count");
  j_.assign(values.begin(), values.end());
}

Tensor batch_joint_contribution(Tape& tape, std::span<const int> domains, Tensor gate_weights,
                                int n_domains) {
  const int b = gate_weights.rows();
  const int n = gate_weights.cols();
  if (static_cast<int>(domains.size()) != b)
    throw ShapeError("joint contribution: " + std::to_string(domains.size()) +
                     " domains for a batch of " + std::to_string(b));
  const auto wv = gate_weights.values();
  for (int i = 0; i < b; ++i) {
    if (domains[i] < 0 || domains[i] >= n_domains)
      throw DataError("joint contribution: domain index " + std::to_string(domains[i]) +
                      " out of range [0, " + std::to_string(n_domains) + ")");
    double rs = 0.0;
    for (int j = 0; j < n; ++j) rs += wv[static_cast<std::size_t>(i) * n + j];
    if (std::abs(rs - 1.0) > 1e-6)
      throw NumericError("joint contribution: gate row " + std::to_string(i) + " sums to " +
                         std::to_string(rs));
  }

  // C = (1/b) * onehot(domains)^T * W as a single constant-by-tracked matmul.
  std::vector<double> onehot_t(static_cast<std::size_t>(n_domains) * b, 0.0);
  for (int i = 0; i < b; ++i) onehot_t[static_cast<std::size_t>(domains[i]) * b + i] = 1.0;
  Tensor d_t = tape.constant({n_domains, b}, onehot_t);
  return tape.scale(tape.matmul(d_t, gate_weights), 1.0 / b);
}

Tensor effective_joint(Tape& tape, const JointProbabilityMatrix& jpm, Tensor contribution) {
  if (contribution.rows() != jpm.n_domains() || contribution.cols() != jpm.n_experts())
    throw ShapeError("effective joint: contribution " + to_string(contribution.shape()) +
                     " does not match " + std::to_string(jpm.n_domains()) + "x" +
                     std::to_string(jpm.n_experts()));
  std::vector<double> history(jpm.values());
  for (auto& v : history) v *= jpm.beta();
  Tensor hist = tape.constant({jpm.n_domains(), jpm.n_experts()}, history);
  return tape.add(hist, tape.scale(contribution, 1.0 - jpm.beta()));
}

MiStats mutual_information(std::span<const double> joint, int n_domains, int n_experts) {
  if (static_cast<int>(joint.size()) != n_domains * n_experts)
    throw ShapeError("mutual_information: matrix size mismatch");
  double total = 0.0;
  for (double v : joint) {
    if (v < 0.0)
      throw NumericError("mutual_information: negative entry " + std::to_string(v));
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6)
    throw NumericError("mutual_information: joint sums to " + std::to_string(total));

  MiStats stats;
  stats.p_domain.assign(n_domains, 0.0);
  stats.p_expert.assign(n_experts, 0.0);
  for (int i = 0; i < n_domains; ++i)
    for (int j = 0; j < n_experts; ++j) {
      const double v = joint[static_cast<std::size_t>(i) * n_experts + j];
      stats.p_domain[i] += v;
      stats.p_expert[j] += v;
    }

  double mi = 0.0;
  for (int i = 0; i < n_domains; ++i)
    for (int j = 0; j < n_experts; ++j) {
      const double v = joint[static_cast<std::size_t>(i) * n_experts + j];
      if (v < 1e-12) continue;  // 0 * log 0 := 0
      mi += v * std::log(v / (stats.p_domain[i] * stats.p_expert[j]));
    }
  stats.mutual_information = mi;

  stats.p_expert_given_domain.assign(joint.size(), 0.0);
  for (int i = 0; i < n_domains; ++i) {
    if (stats.p_domain[i] <= 0.0) continue;
    for (int j = 0; j < n_experts; ++j)
      stats.p_expert_given_domain[static_cast<std::size_t>(i) * n_experts + j] =
          joint[static_cast<std::size_t>(i) * n_experts + j] / stats.p_domain[i];
  }
  return stats;
}

Tensor mi_loss(Tape& tape, Tensor j_effective) {
  const int m = j_effective.rows();
  const int n = j_effective.cols();
  Tensor ones_col = tape.constant_fill({n, 1}, 1.0);
  Tensor ones_row = tape.constant_fill({1, m}, 1.0);
  Tensor p_domain = tape.matmul(j_effective, ones_col);   // M x 1 row sums
  Tensor p_expert = tape.matmul(ones_row, j_effective);   // 1 x N column sums
  Tensor indep = tape.matmul(p_domain, p_expert);         // M x N outer product
  Tensor log_ratio = tape.sub(tape.log_clamped(j_effective), tape.log_clamped(indep));
  return tape.neg(tape.sum_all(tape.mul(j_effective, log_ratio)));
}

RoutingReport routing_report(CesModel& model, const Dataset& data) {
  if (data.samples.empty()) throw DataError("routing_report: empty dataset");
  const int n = model.variant == Variant::kDnn ? 1 : model.gate->n_experts();
  std::vector<double> acc(static_cast<std::size_t>(data.n_domains) * n, 0.0);
  std::vector<bool> seen(data.n_domains, false);

  constexpr int kEvalBatch = 2048;
  Tape tape;
  std::vector<int> idx;
  for (std::size_t start = 0; start < data.samples.size(); start += kEvalBatch) {
    const std::size_t stop = std::min(data.samples.size(), start + kEvalBatch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), static_cast<int>(start));
    Batch batch = make_batch(data, idx);
    tape.reset();
    ForwardResult fwd = model_forward(tape, batch, model, nullptr, /*training=*/false);
    const auto wv = fwd.gate.weights.values();
    for (int i = 0; i < batch.size; ++i) {
      const int d = batch.domains[i];
      seen[d] = true;
      for (int j = 0; j < n; ++j)
        acc[static_cast<std::size_t>(d) * n + j] += wv[static_cast<std::size_t>(i) * n + j];
    }
  }
  tape.reset();

  RoutingReport report;
  report.n_experts = n;
  for (int d = 0; d < data.n_domains; ++d) {
    if (!seen[d]) continue;
    std::vector<double> row(acc.begin() + static_cast<std::size_t>(d) * n,
                            acc.begin() + static_cast<std::size_t>(d + 1) * n);
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    for (auto& v : row) v /= total;
    report.rows.emplace_back(d, std::move(row));
  }
  return report;
}

}  // namespace cesaa
