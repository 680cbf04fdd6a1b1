#include "cesaa/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cesaa {

using detail::kInitStream;
using detail::kNoiseStream;
using detail::kShuffleStream;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (lr <= 0.0) throw ConfigError("train: lr must be positive");
  if (alpha < 0.0) throw ConfigError("train: alpha must be >= 0");
  if (ema_beta < 0.0 || ema_beta >= 1.0) throw ConfigError("train: ema_beta must lie in [0, 1)");
  if (n_experts < 1) throw ConfigError("train: n_experts must be >= 1");
  if (top_k < 1 || top_k > n_experts)
    throw ConfigError("train: top_k " + std::to_string(top_k) + " outside [1, " +
                      std::to_string(n_experts) + "]");
  if (hidden.empty()) throw ConfigError("train: hidden sizes must be non-empty");
  for (int h : hidden)
    if (h < 1) throw ConfigError("train: hidden sizes must be positive");
  if (embed_dim < 1) throw ConfigError("train: embed_dim must be >= 1");
}

ModelConfig TrainConfig::model_config(const Dataset& data) const {
  validate();
  ModelConfig mc;
  mc.variant = variant;
  mc.n_experts = n_experts;
  mc.top_k = top_k;
  mc.hidden = hidden;
  mc.embed_dim = embed_dim;
  mc.n_domains = data.n_domains;
  mc.data_vocab_sizes = data.vocab_sizes;
  return mc;
}

// ---------------------------------------------------------------------------
// Losses

Tensor bce_loss(Tape& tape, Tensor yhat, std::span<const double> labels) {
  const int b = yhat.rows();
  if (yhat.cols() != 1)
    throw ShapeError("bce: predictions must be b x 1, got " + to_string(yhat.shape()));
  if (static_cast<int>(labels.size()) != b)
    throw ShapeError("bce: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " predictions");
  for (double y : labels)
    if (y != 0.0 && y != 1.0)
      throw DataError("bce: label " + std::to_string(y) + " is not in {0, 1}");

  Tensor y = tape.constant({b, 1}, labels);
  Tensor ones = tape.constant_fill({b, 1}, 1.0);
  Tensor ll = tape.add(tape.mul(y, tape.log_clamped(yhat)),
                       tape.mul(tape.sub(ones, y), tape.log_clamped(tape.sub(ones, yhat))));
  return tape.scale(tape.sum_all(ll), -1.0 / b);
}

Tensor total_loss(Tape& tape, Tensor bce, std::optional<Tensor> mi, double alpha) {
  if (alpha < 0.0) throw ConfigError("total loss: alpha must be >= 0");
  if (!mi || alpha == 0.0) return bce;
  return tape.add(bce, tape.scale(*mi, alpha));
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), cfg_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.emplace_back(p->values.size(), 0.0);
    v_.emplace_back(p->values.size(), 0.0);
  }
}

void Adam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter* p = params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p->values.size(); ++j) {
      const double g = p->grad[j];
      if (!std::isfinite(g))
        throw NumericError("adam: non-finite gradient for parameter '" + p->name + "'");
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      p->values[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

GroupKey group_key_from_string(const std::string& s) {
  if (s == "group") return GroupKey::kGroup;
  if (s == "domain") return GroupKey::kDomain;
  throw ConfigError("unknown group key '" + s + "' (expected group or domain)");
}

const char* to_string(GroupKey k) { return k == GroupKey::kGroup ? "group" : "domain"; }

namespace {

double clamped_log(double x) { return std::log(std::max(x, Tape::kLogFloor)); }

}  // namespace

EvalMetrics evaluate(CesModel& model, const Dataset& data, GroupKey group_key,
                     const JointProbabilityMatrix* jpm) {
  if (data.samples.empty()) throw DataError("evaluate: empty dataset");
  const int n_experts = model.variant == Variant::kDnn ? 1 : model.gate->n_experts();

  GroupedScores gs;
  gs.group.reserve(data.size());
  gs.score.reserve(data.size());
  gs.label.reserve(data.size());
  std::vector<double> routing_acc(static_cast<std::size_t>(data.n_domains) * n_experts, 0.0);
  std::vector<bool> domain_seen(data.n_domains, false);
  double bce_sum = 0.0;

  constexpr int kEvalBatch = 2048;
  Tape tape;
  std::vector<int> idx;
  for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
    const std::size_t stop = std::min(data.size(), start + kEvalBatch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), static_cast<int>(start));
    Batch batch = make_batch(data, idx);
    tape.reset();
    ForwardResult fwd = model_forward(tape, batch, model, nullptr, /*training=*/false);
    const auto yv = fwd.yhat.values();
    const auto wv = fwd.gate.weights.values();
    for (int i = 0; i < batch.size; ++i) {
      const double score = yv[i];
      const int label = static_cast<int>(batch.labels[i]);
      gs.score.push_back(score);
      gs.label.push_back(label);
      gs.group.push_back(group_key == GroupKey::kGroup ? batch.groups[i]
                                                       : static_cast<long long>(batch.domains[i]));
      bce_sum -= label == 1 ? clamped_log(score) : clamped_log(1.0 - score);
      const int d = batch.domains[i];
      domain_seen[d] = true;
      for (int j = 0; j < n_experts; ++j)
        routing_acc[static_cast<std::size_t>(d) * n_experts + j] +=
            wv[static_cast<std::size_t>(i) * n_experts + j];
    }
  }
  tape.reset();

  EvalMetrics em;
  em.auc = auc(gs.score, gs.label);
  const GroupedAucResult ga = grouped_auc(gs);
  em.gauc = ga.value;
  em.gauc_groups_used = ga.groups_used;
  em.gauc_groups_excluded = ga.groups_excluded;
  em.mean_bce = bce_sum / static_cast<double>(data.size());
  if (jpm)
    em.mutual_information =
        mutual_information(jpm->values(), jpm->n_domains(), jpm->n_experts()).mutual_information;

  em.routing.n_experts = n_experts;
  for (int d = 0; d < data.n_domains; ++d) {
    if (!domain_seen[d]) continue;
    std::vector<double> row(routing_acc.begin() + static_cast<std::size_t>(d) * n_experts,
                            routing_acc.begin() + static_cast<std::size_t>(d + 1) * n_experts);
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    for (auto& v : row) v /= total;
    em.routing.rows.emplace_back(d, std::move(row));
  }
  return em;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

std::unique_ptr<CesModel> build_model(const TrainConfig& cfg, const Dataset& data) {
  if (data.samples.empty()) throw DataError("trainer: empty training dataset");
  Rng init_rng = Rng::derive(cfg.seed, {kInitStream});
  return std::make_unique<CesModel>(cfg.model_config(data), init_rng);
}

}  // namespace

Trainer::Trainer(const TrainConfig& config, const Dataset& train_data)
    : cfg_(config),
      data_(&train_data),
      model_(build_model(config, train_data)),
      jpm_(train_data.n_domains, config.variant == Variant::kDnn ? 1 : config.n_experts,
           config.ema_beta),
      adam_(model_->parameters(), AdamConfig{config.lr, 0.9, 0.999, 1e-8}),
      noise_rng_(Rng::derive(config.seed, {kNoiseStream})) {}

void Trainer::rebuild_permutation() {
  const std::size_t n = data_->samples.size();
  perm_.resize(n);
  std::iota(perm_.begin(), perm_.end(), 0);
  // The permutation is derived from (seed, epoch) alone, so resuming from a
  // checkpoint mid-epoch can rebuild it without replaying the stream.
  Rng shuffle_rng = Rng::derive(cfg_.seed, {kShuffleStream, static_cast<std::uint64_t>(epoch_)});
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm_[i - 1], perm_[shuffle_rng.uniform_int(static_cast<int>(i))]);
}

StepMetrics Trainer::step() {
  const std::size_t n = data_->samples.size();
  if (pos_ == 0) rebuild_permutation();
  const std::size_t take = std::min<std::size_t>(cfg_.batch_size, n - pos_);
  std::span<const int> idx(perm_.data() + pos_, take);
  Batch batch = make_batch(*data_, idx);

  tape_.reset();
  ForwardResult fwd = model_forward(tape_, batch, *model_, &noise_rng_, /*training=*/true);
  Tensor bce = bce_loss(tape_, fwd.yhat, batch.labels);
  // The joint estimate tracks the dense routing distribution; the sparse
  // weights stop carrying gradient at k = 1.
  Tensor contribution =
      batch_joint_contribution(tape_, batch.domains, fwd.gate.dense_probs, data_->n_domains);
  const bool aea = variant_uses_aea(cfg_.variant) && cfg_.alpha > 0.0;
  std::optional<Tensor> mi;
  if (aea) mi = mi_loss(tape_, effective_joint(tape_, jpm_, contribution));
  Tensor loss = total_loss(tape_, bce, mi, cfg_.alpha);
  tape_.backward(loss);
  adam_.step();

  // The EMA update always runs (reporting), but only through detached values.
  const auto cv = contribution.values();
  jpm_.ema_update(std::vector<double>(cv.begin(), cv.end()));

  StepMetrics sm;
  sm.bce = bce.value(0, 0);
  sm.mi_loss = mi ? mi->value(0, 0) : 0.0;
  sm.total = loss.value(0, 0);
  sm.aea_active = aea;
  sm.mutual_information =
      mutual_information(jpm_.values(), jpm_.n_domains(), jpm_.n_experts()).mutual_information;
  const auto wv = fwd.gate.weights.values();
  const int gate_cols = fwd.gate.weights.cols();
  double nonzeros = 0.0, max_sum = 0.0;
  for (int i = 0; i < batch.size; ++i) {
    double row_max = 0.0;
    for (int j = 0; j < gate_cols; ++j) {
      const double w = wv[static_cast<std::size_t>(i) * gate_cols + j];
      if (w != 0.0) nonzeros += 1.0;
      row_max = std::max(row_max, w);
    }
    max_sum += row_max;
  }
  sm.gate_nonzeros_mean = nonzeros / batch.size;
  sm.gate_max_weight_mean = max_sum / batch.size;

  pos_ += take;
  ++global_step_;
  if (pos_ >= n) {
    pos_ = 0;
    ++epoch_;
  }
  return sm;
}

EpochMetrics Trainer::run_epoch() {
  EpochMetrics em;
  em.epoch = epoch_;
  std::size_t samples = 0;
  do {
    const std::size_t n = data_->samples.size();
    const std::size_t take = std::min<std::size_t>(cfg_.batch_size, n - pos_);
    StepMetrics sm = step();
    const double w = static_cast<double>(take);
    em.bce += w * sm.bce;
    em.mi_loss += w * sm.mi_loss;
    em.total += w * sm.total;
    em.gate_nonzeros_mean += w * sm.gate_nonzeros_mean;
    em.mutual_information = sm.mutual_information;
    samples += take;
    ++em.steps;
  } while (!epoch_finished());
  em.bce /= static_cast<double>(samples);
  em.mi_loss /= static_cast<double>(samples);
  em.total /= static_cast<double>(samples);
  em.gate_nonzeros_mean /= static_cast<double>(samples);
  return em;
}

}  // namespace cesaa
