#pragma once

#include <span>
#include <utility>
#include <vector>

#include "cesaa/layers.hpp"
#include "cesaa/tensor.hpp"

namespace cesaa {

/// Exponential-moving-average estimate of the joint distribution
/// p(domain, expert), built from per-batch routing weights. The stored
/// history is detached: only the current batch contribution carries gradient
/// (see effective_joint).
class JointProbabilityMatrix {
 public:
  JointProbabilityMatrix(int n_domains, int n_experts, double beta);

  /// J <- beta * J + (1 - beta) * C, renormalized to sum exactly 1.
  /// C must be an M x N contribution summing to 1 (within 1e-6).
  void ema_update(std::span<const double> contribution);

  const std::vector<double>& values() const { return j_; }
  void set_values(std::span<const double> values);
  int n_domains() const { return m_; }
  int n_experts() const { return n_; }
  double beta() const { return beta_; }

 private:
  int m_, n_;
  double beta_;
  std::vector<double> j_;
};

struct MiStats {
  double mutual_information = 0.0;          // nats
  std::vector<double> p_domain;             // M, sums to 1
  std::vector<double> p_expert;             // N, sums to 1
  std::vector<double> p_expert_given_domain;  // M x N row-major
};

/// Mean outer product of domain one-hots with gate weight rows:
/// C[m][j] = (1/b) * sum over rows with domain m of weights[row][j].
/// Sums to 1 and stays in the gradient graph, so the loss below reaches the
/// gate parameters through it.
Tensor batch_joint_contribution(Tape& tape, std::span<const int> domains, Tensor gate_weights,
                                int n_domains);

/// beta * detach(J) + (1 - beta) * contribution, built on the tape.
Tensor effective_joint(Tape& tape, const JointProbabilityMatrix& jpm, Tensor contribution);

/// I(D;E) and the marginals of a plain (detached) joint matrix. Entries below
/// 1e-12 contribute zero; natural log.
MiStats mutual_information(std::span<const double> joint, int n_domains, int n_experts);

/// The trainable mutual-information loss: -I(D;E) of j_effective, with the
/// marginals recomputed inside the graph.
Tensor mi_loss(Tape& tape, Tensor j_effective);

/// Soft routing frequencies P(expert | domain) over a dataset, evaluation
/// mode. Domains with no samples are absent from the report rather than
/// zero rows.
struct RoutingReport {
  int n_experts = 0;
  std::vector<std::pair<int, std::vector<double>>> rows;  // (domain, normalized row)
};

RoutingReport routing_report(CesModel& model, const Dataset& data);

}  // namespace cesaa
