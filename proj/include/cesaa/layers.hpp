#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cesaa/data.hpp"
#include "cesaa/tensor.hpp"

namespace cesaa {

/// Which pieces of the architecture are active. Mirrors the ablation family:
/// the full model, the same model with the mutual-information loss and/or the
/// shared expert removed, the dense-gated mixture with and without that loss,
/// and a single-expert network.
enum class Variant {
  kCesaa,
  kCesaaNoAea,
  kCesaaNoShared,
  kCesaaNoBoth,
  kMmoe,
  kMmoeAea,
  kDnn,
};

const char* to_string(Variant v);
Variant variant_from_string(const std::string& s);
std::vector<Variant> all_variants();

bool variant_uses_aea(Variant v);
bool variant_has_shared(Variant v);
/// Dense softmax over all experts, no noise (the classic mixture baseline).
bool variant_dense_gate(Variant v);

/// A batch materialized for the model. Field 0 is always the domain
/// indicator; data feature fields follow in declaration order.
struct Batch {
  int size = 0;
  std::vector<std::vector<int>> field_ids;  // [field][row]
  std::vector<int> domains;                 // b
  std::vector<double> labels;               // b
  std::vector<long long> groups;            // b
};

Batch make_batch(const Dataset& data, std::span<const int> indices);

/// Per-field embedding tables. Output dim is n_fields * embed_dim, fixed per
/// model; lookups participate in gradient flow.
struct EmbeddingTable {
  int embed_dim = 0;
  std::vector<std::string> field_names;
  std::vector<int> vocab_sizes;
  std::vector<Parameter> tables;  // per field, vocab x embed_dim

  EmbeddingTable(std::vector<std::string> names, std::vector<int> vocabs, int embed_dim, Rng& rng);
  int n_fields() const { return static_cast<int>(vocab_sizes.size()); }
  int output_dim() const { return n_fields() * embed_dim; }
};

Tensor embed(Tape& tape, const Batch& batch, EmbeddingTable& table);

/// Fully connected stack, every layer bias + ReLU. Output dim is the last
/// hidden size. rows_evaluated counts per-sample forward work so sparse
/// routing is checkable as a property.
struct ExpertMlp {
  std::vector<Parameter> weights;
  std::vector<Parameter> biases;
  mutable std::uint64_t rows_evaluated = 0;

  ExpertMlp(const std::string& prefix, int input_dim, std::span<const int> hidden, Rng& rng);
  Tensor forward(Tape& tape, Tensor x) const;
  int output_dim() const { return weights.back().shape.cols; }
};

struct NoisyTopKGate {
  Parameter w_gate;   // input_dim x N
  Parameter w_noise;  // input_dim x N
  int top_k = 1;

  NoisyTopKGate(int input_dim, int n_experts, int top_k, Rng& rng);
  int n_experts() const { return w_gate.shape.cols; }
};

struct GateOutput {
  Tensor weights;                      // b x N, min(k, N) nonzeros per row, rows sum to 1
  Tensor raw_logits;                   // b x N noisy logits
  /// Softmax over all N logits. The joint-probability update trains against
  /// this row: the sparse weights have zero derivative once k = 1 (a single
  /// retained softmax entry is constantly 1), which would cut the router off
  /// from every loss. Equals `weights` when k = N.
  Tensor dense_probs;
  std::vector<std::vector<int>> topk;  // per row, ascending index order
};

/// Noisy top-k gating: logits x*Wg plus standard-normal noise scaled by
/// softplus(x*Wn) when noise is enabled, then softmax over the k largest
/// entries per row (ties broken toward the lower index). `fixed_noise`, when
/// given, replaces the rng draw (b x N row-major) so gradient checks can hold
/// the noise constant.
GateOutput gate_forward(Tape& tape, Tensor x, NoisyTopKGate& gate, Rng* rng, bool noise_enabled,
                        const std::vector<double>* fixed_noise = nullptr);

struct ModelConfig {
  Variant variant = Variant::kCesaa;
  int n_experts = 4;
  int top_k = 3;
  std::vector<int> hidden = {256, 128, 64};
  int embed_dim = 8;
  int n_domains = 0;
  std::vector<int> data_vocab_sizes;

  void validate() const;
};

/// The full model: embeddings (field 0 = domain indicator), N sparse experts,
/// the noisy top-k gate, an optional always-on shared expert with a two-way
/// fusion softmax, and a linear head into a sigmoid.
struct CesModel {
  Variant variant;
  EmbeddingTable embedding;
  std::vector<ExpertMlp> experts;
  std::optional<NoisyTopKGate> gate;     // absent for the single-expert variant
  std::optional<ExpertMlp> shared_expert;
  std::optional<Parameter> fusion_gate;  // input_dim x 2
  Parameter head_w;                      // (2*d_out or d_out) x 1
  Parameter head_b;                      // 1 x 1

  CesModel(const ModelConfig& config, Rng& rng);

  std::vector<Parameter*> parameters();
  std::uint64_t expert_rows_evaluated() const;
  void reset_eval_counters();
  int n_experts() const { return static_cast<int>(experts.size()); }
};

struct ForwardResult {
  Tensor yhat;  // b x 1 probabilities
  GateOutput gate;
};

/// Sparse mixture forward: only the experts retained by the gate run, each on
/// the row subset that selected it; the shared expert (when present) runs on
/// every row and is fused in by a softmax over [mixture, shared].
ForwardResult ces_forward(Tape& tape, const Batch& batch, CesModel& model, Rng* rng,
                          bool training, const std::vector<double>* fixed_gate_noise = nullptr);

/// Dense-gate baseline: identical to ces_forward with k = N, noise disabled
/// and no shared path.
ForwardResult mmoe_forward(Tape& tape, const Batch& batch, CesModel& model);

/// Dispatch by model variant (single-expert variant skips the gate).
ForwardResult model_forward(Tape& tape, const Batch& batch, CesModel& model, Rng* rng,
                            bool training,
                            const std::vector<double>* fixed_gate_noise = nullptr);

}  // namespace cesaa
