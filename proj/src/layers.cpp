#include "cesaa/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cesaa {

const char* to_string(Variant v) {
  switch (v) {
    case Variant::kCesaa: return "cesaa";
    case Variant::kCesaaNoAea: return "cesaa-no-aea";
    case Variant::kCesaaNoShared: return "cesaa-no-shared";
    case Variant::kCesaaNoBoth: return "cesaa-no-both";
    case Variant::kMmoe: return "mmoe";
    case Variant::kMmoeAea: return "mmoe-aea";
    case Variant::kDnn: return "dnn";
  }
  throw Error("unknown variant");
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants())
    if (s == to_string(v)) return v;
  throw ConfigError("unknown variant '" + s +
                    "' (expected cesaa, cesaa-no-aea, cesaa-no-shared, cesaa-no-both, mmoe, "
                    "mmoe-aea or dnn)");
}

std::vector<Variant> all_variants() {
  return {Variant::kCesaa,      Variant::kCesaaNoAea, Variant::kCesaaNoShared,
          Variant::kCesaaNoBoth, Variant::kMmoe,       Variant::kMmoeAea,
          Variant::kDnn};
}

bool variant_uses_aea(Variant v) {
  return v == Variant::kCesaa || v == Variant::kCesaaNoShared || v == Variant::kMmoeAea;
}

bool variant_has_shared(Variant v) {
  return v == Variant::kCesaa || v == Variant::kCesaaNoAea;
}

bool variant_dense_gate(Variant v) {
  return v == Variant::kMmoe || v == Variant::kMmoeAea;
}

// ---------------------------------------------------------------------------
// Batch

Batch make_batch(const Dataset& data, std::span<const int> indices) {
  Batch b;
  b.size = static_cast<int>(indices.size());
  b.field_ids.assign(1 + data.n_fields(), std::vector<int>(indices.size()));
  b.domains.resize(indices.size());
  b.labels.resize(indices.size());
  b.groups.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = data.samples[indices[i]];
    b.field_ids[0][i] = s.domain_id;  // field 0 is the domain indicator
    for (int f = 0; f < data.n_fields(); ++f) b.field_ids[1 + f][i] = s.feature_ids[f];
    b.domains[i] = s.domain_id;
    b.labels[i] = static_cast<double>(s.label);
    b.groups[i] = s.group_id;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Embedding

EmbeddingTable::EmbeddingTable(std::vector<std::string> names, std::vector<int> vocabs,
                               int embed_dim_, Rng& rng)
    : embed_dim(embed_dim_), field_names(std::move(names)), vocab_sizes(std::move(vocabs)) {
  if (field_names.size() != vocab_sizes.size())
    throw ConfigError("embedding: field name and vocabulary counts differ");
  if (embed_dim < 1) throw ConfigError("embedding: embed_dim must be positive");
  const double r = 0.5 / std::sqrt(static_cast<double>(embed_dim));
  tables.reserve(vocab_sizes.size());
  for (std::size_t f = 0; f < vocab_sizes.size(); ++f) {
    if (vocab_sizes[f] < 1)
      throw ConfigError("embedding: field " + field_names[f] + " has empty vocabulary");
    tables.push_back(Parameter::uniform("embed." + field_names[f],
                                        {vocab_sizes[f], embed_dim}, -r, r, rng));
  }
}

Tensor embed(Tape& tape, const Batch& batch, EmbeddingTable& table) {
  if (static_cast<int>(batch.field_ids.size()) != table.n_fields())
    throw ShapeError("embed: batch has " + std::to_string(batch.field_ids.size()) +
                     " fields, table has " + std::to_string(table.n_fields()));
  Tensor out;
  for (int f = 0; f < table.n_fields(); ++f) {
    const auto& ids = batch.field_ids[f];
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] < 0 || ids[i] >= table.vocab_sizes[f])
        throw DataError("embed: field " + table.field_names[f] + " row " + std::to_string(i) +
                        ": id " + std::to_string(ids[i]) + " outside vocabulary of " +
                        std::to_string(table.vocab_sizes[f]));
    Tensor t = tape.attach(table.tables[f]);
    Tensor rows = tape.embedding_lookup(t, ids);
    out = out.defined() ? tape.concat_cols(out, rows) : rows;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Expert MLP

ExpertMlp::ExpertMlp(const std::string& prefix, int input_dim, std::span<const int> hidden,
                     Rng& rng) {
  if (hidden.empty()) throw ConfigError("expert '" + prefix + "': needs at least one layer");
  int in = input_dim;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    if (hidden[l] < 1) throw ConfigError("expert '" + prefix + "': layer sizes must be positive");
    weights.push_back(
        Parameter::xavier(prefix + ".w" + std::to_string(l), {in, hidden[l]}, rng));
    // Small nonzero bias init: keeps relu pre-activations away from exactly
    // zero even when an entire previous layer row dies, which would otherwise
    // park a kink right at the finite-difference evaluation point.
    biases.push_back(
        Parameter::uniform(prefix + ".b" + std::to_string(l), {1, hidden[l]}, -0.05, 0.05, rng));
    in = hidden[l];
  }
}

Tensor ExpertMlp::forward(Tape& tape, Tensor x) const {
  rows_evaluated += static_cast<std::uint64_t>(x.rows());
  Tensor h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto& w = const_cast<Parameter&>(weights[l]);
    auto& b = const_cast<Parameter&>(biases[l]);
    h = tape.relu(tape.add_row_bias(tape.matmul(h, tape.attach(w)), tape.attach(b)));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Gate

NoisyTopKGate::NoisyTopKGate(int input_dim, int n_experts, int top_k_, Rng& rng)
    : w_gate(Parameter::xavier("gate.w", {input_dim, n_experts}, rng)),
      w_noise(Parameter::xavier("gate.noise_w", {input_dim, n_experts}, rng)),
      top_k(top_k_) {
  if (top_k < 1 || top_k > n_experts)
    throw ConfigError("gate: top_k " + std::to_string(top_k) + " outside [1, " +
                      std::to_string(n_experts) + "]");
}

namespace {

// Indices of the k largest entries of one row, ties toward the lower index;
// returned in ascending index order.
std::vector<int> argmax_k(std::span<const double> row, int k) {
  std::vector<int> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GateOutput gate_forward(Tape& tape, Tensor x, NoisyTopKGate& gate, Rng* rng, bool noise_enabled,
                        const std::vector<double>* fixed_noise) {
  const int b = x.rows();
  const int n = gate.n_experts();
  const int k = std::min(gate.top_k, n);

  Tensor logits = tape.matmul(x, tape.attach(gate.w_gate));
  if (noise_enabled) {
    Tensor noise_scale = tape.softplus(tape.matmul(x, tape.attach(gate.w_noise)));
    std::vector<double> eps;
    if (fixed_noise) {
      if (static_cast<int>(fixed_noise->size()) != b * n)
        throw ShapeError("gate: fixed noise has " + std::to_string(fixed_noise->size()) +
                         " entries, expected " + std::to_string(b * n));
      eps = *fixed_noise;
    } else {
      if (!rng) throw Error("gate: rng required when noise is enabled");
      eps.resize(static_cast<std::size_t>(b) * n);
      for (auto& e : eps) e = rng->normal();
    }
    Tensor eps_t = tape.constant({b, n}, eps);
    logits = tape.add(logits, tape.mul(eps_t, noise_scale));
  }

  GateOutput out;
  out.raw_logits = logits;
  out.topk.resize(b);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(b) * n, 0);
  const auto lv = logits.values();
  for (int i = 0; i < b; ++i) {
    out.topk[i] = argmax_k(lv.subspan(static_cast<std::size_t>(i) * n, n), k);
    for (int j : out.topk[i]) mask[static_cast<std::size_t>(i) * n + j] = 1;
  }
  out.weights = tape.masked_softmax(logits, std::move(mask));
  out.dense_probs =
      tape.masked_softmax(logits, std::vector<std::uint8_t>(static_cast<std::size_t>(b) * n, 1));
  return out;
}

// ---------------------------------------------------------------------------
// Model

void ModelConfig::validate() const {
  if (n_experts < 1) throw ConfigError("model: need at least one expert");
  if (top_k < 1 || top_k > n_experts)
    throw ConfigError("model: top_k " + std::to_string(top_k) + " outside [1, " +
                      std::to_string(n_experts) + "]");
  if (hidden.empty()) throw ConfigError("model: hidden sizes must be non-empty");
  if (embed_dim < 1) throw ConfigError("model: embed_dim must be positive");
  if (n_domains < 1) throw ConfigError("model: domain count must be positive");
  if (data_vocab_sizes.empty()) throw ConfigError("model: need at least one feature field");
}

namespace {

std::vector<std::string> model_field_names(const ModelConfig& c) {
  c.validate();
  std::vector<std::string> names = {"domain"};
  for (std::size_t f = 0; f < c.data_vocab_sizes.size(); ++f)
    names.push_back("f" + std::to_string(f));
  return names;
}

std::vector<int> model_vocabs(const ModelConfig& c) {
  std::vector<int> v = {c.n_domains};
  v.insert(v.end(), c.data_vocab_sizes.begin(), c.data_vocab_sizes.end());
  return v;
}

}  // namespace

CesModel::CesModel(const ModelConfig& config, Rng& rng)
    : variant(config.variant),
      embedding(model_field_names(config), model_vocabs(config), config.embed_dim, rng),
      head_w(Parameter::zeros("head.w", {1, 1})),  // re-initialized below
      head_b(Parameter::zeros("head.b", {1, 1})) {
  const int dim = embedding.output_dim();
  const int n = config.variant == Variant::kDnn ? 1 : config.n_experts;
  for (int i = 0; i < n; ++i)
    experts.emplace_back("expert" + std::to_string(i), dim, config.hidden, rng);
  const int d_out = experts.front().output_dim();

  if (config.variant != Variant::kDnn) {
    const int k = variant_dense_gate(config.variant) ? n : config.top_k;
    gate.emplace(dim, n, k, rng);
  }
  if (variant_has_shared(config.variant)) {
    shared_expert.emplace("shared", dim, config.hidden, rng);
    fusion_gate = Parameter::xavier("fusion.w", {dim, 2}, rng);
    head_w = Parameter::xavier("head.w", {2 * d_out, 1}, rng);
  } else {
    head_w = Parameter::xavier("head.w", {d_out, 1}, rng);
  }
}

std::vector<Parameter*> CesModel::parameters() {
  std::vector<Parameter*> ps;
  for (auto& t : embedding.tables) ps.push_back(&t);
  for (auto& e : experts) {
    for (auto& w : e.weights) ps.push_back(&w);
    for (auto& b : e.biases) ps.push_back(&b);
  }
  if (gate) {
    ps.push_back(&gate->w_gate);
    ps.push_back(&gate->w_noise);
  }
  if (shared_expert) {
    for (auto& w : shared_expert->weights) ps.push_back(&w);
    for (auto& b : shared_expert->biases) ps.push_back(&b);
  }
  if (fusion_gate) ps.push_back(&*fusion_gate);
  ps.push_back(&head_w);
  ps.push_back(&head_b);
  return ps;
}

std::uint64_t CesModel::expert_rows_evaluated() const {
  std::uint64_t total = 0;
  for (const auto& e : experts) total += e.rows_evaluated;
  if (shared_expert) total += shared_expert->rows_evaluated;
  return total;
}

void CesModel::reset_eval_counters() {
  for (auto& e : experts) e.rows_evaluated = 0;
  if (shared_expert) shared_expert->rows_evaluated = 0;
}

namespace {

struct ForwardMode {
  bool dense = false;      // keep every expert (k = N), used by the mmoe path
  bool noise = false;      // inject gating noise
  bool shared = false;     // run the shared expert + fusion
};

ForwardResult forward_impl(Tape& tape, const Batch& batch, CesModel& model, Rng* rng,
                           ForwardMode mode, const std::vector<double>* fixed_gate_noise) {
  Tensor x = embed(tape, batch, model.embedding);
  const int b = batch.size;

  ForwardResult result;
  Tensor mixture;
  if (model.variant == Variant::kDnn) {
    mixture = model.experts.front().forward(tape, x);
    result.gate.weights = tape.constant_fill({b, 1}, 1.0);
    result.gate.raw_logits = tape.constant_fill({b, 1}, 0.0);
    result.gate.dense_probs = result.gate.weights;
    result.gate.topk.assign(b, {0});
  } else {
    NoisyTopKGate& gate = *model.gate;
    const int saved_k = gate.top_k;
    if (mode.dense) gate.top_k = gate.n_experts();
    result.gate = gate_forward(tape, x, gate, rng, mode.noise, fixed_gate_noise);
    gate.top_k = saved_k;

    // Each expert runs only on the rows that retained it.
    const int n = gate.n_experts();
    std::vector<std::vector<int>> rows_per_expert(n);
    for (int i = 0; i < b; ++i)
      for (int j : result.gate.topk[i]) rows_per_expert[j].push_back(i);
    for (int j = 0; j < n; ++j) {
      const auto& rows = rows_per_expert[j];
      if (rows.empty()) continue;
      Tensor xj = tape.gather_rows(x, rows);
      Tensor hj = model.experts[j].forward(tape, xj);
      Tensor wj = tape.gather_rows(tape.select_col(result.gate.weights, j), rows);
      Tensor part = tape.scatter_rows(tape.scale_rows(hj, wj), rows, b);
      mixture = mixture.defined() ? tape.add(mixture, part) : part;
    }
  }

  Tensor fused = mixture;
  if (mode.shared) {
    Tensor sh = model.shared_expert->forward(tape, x);
    Tensor f = tape.masked_softmax(
        tape.matmul(x, tape.attach(*model.fusion_gate)),
        std::vector<std::uint8_t>(static_cast<std::size_t>(b) * 2, 1));
    fused = tape.concat_cols(tape.scale_rows(mixture, tape.select_col(f, 0)),
                             tape.scale_rows(sh, tape.select_col(f, 1)));
  }

  Tensor logit = tape.add_row_bias(tape.matmul(fused, tape.attach(model.head_w)),
                                   tape.attach(model.head_b));
  result.yhat = tape.sigmoid(logit);
  return result;
}

}  // namespace

ForwardResult ces_forward(Tape& tape, const Batch& batch, CesModel& model, Rng* rng,
                          bool training, const std::vector<double>* fixed_gate_noise) {
  ForwardMode mode;
  mode.dense = false;
  mode.noise = training && !variant_dense_gate(model.variant);
  mode.shared = variant_has_shared(model.variant);
  if (mode.shared && (!model.shared_expert || !model.fusion_gate))
    throw ConfigError("ces_forward: variant expects a shared expert the model lacks");
  return forward_impl(tape, batch, model, rng, mode, fixed_gate_noise);
}

ForwardResult mmoe_forward(Tape& tape, const Batch& batch, CesModel& model) {
  if (model.variant == Variant::kDnn)
    throw ConfigError("mmoe_forward: single-expert variant has no gate");
  ForwardMode mode;
  mode.dense = true;
  mode.noise = false;
  mode.shared = false;
  return forward_impl(tape, batch, model, nullptr, mode, nullptr);
}

ForwardResult model_forward(Tape& tape, const Batch& batch, CesModel& model, Rng* rng,
                            bool training, const std::vector<double>* fixed_gate_noise) {
  if (variant_dense_gate(model.variant)) return mmoe_forward(tape, batch, model);
  return ces_forward(tape, batch, model, rng, training, fixed_gate_noise);
}

}  // namespace cesaa
