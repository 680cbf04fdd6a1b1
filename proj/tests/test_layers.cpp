#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cesaa/layers.hpp"
#include "cesaa/training.hpp"

using namespace cesaa;

namespace {

Dataset tiny_dataset(int n_domains, std::vector<int> vocabs, int n_samples, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.domains = n_domains;
  spec.vocab_sizes = std::move(vocabs);
  spec.samples_per_domain = std::max(2, n_samples / n_domains);
  spec.seed = seed;
  return generate_synthetic(spec);
}

Batch batch_of(const Dataset& data, int n) {
  std::vector<int> idx(std::min<std::size_t>(n, data.samples.size()));
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(data, idx);
}

// Sort-based oracle for the retained set: stable sort by value descending
// keeps lower indices first on ties.
std::set<int> topk_oracle(std::span<const double> row, int k) {
  std::vector<int> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return row[a] > row[b]; });
  return std::set<int>(idx.begin(), idx.begin() + k);
}

}  // namespace

TEST_CASE("embedding lookup rows and field order") {
  Rng rng(1);
  // one field, vocab 2, dim 2, known table
  EmbeddingTable table({"f0"}, {2}, 2, rng);
  table.tables[0].values = {1, 2, 3, 4};
  Batch batch;
  batch.size = 1;
  batch.field_ids = {{1}};
  Tape tape;
  Tensor out = embed(tape, batch, table);
  CHECK(out.value(0, 0) == 3.0);
  CHECK(out.value(0, 1) == 4.0);

  // two fields with dim 1 concatenate in declaration order
  EmbeddingTable two({"a", "b"}, {2, 2}, 1, rng);
  two.tables[0].values = {10, 11};
  two.tables[1].values = {20, 21};
  Batch b2;
  b2.size = 1;
  b2.field_ids = {{0}, {1}};
  tape.reset();
  Tensor o2 = embed(tape, b2, two);
  CHECK(o2.value(0, 0) == 10.0);
  CHECK(o2.value(0, 1) == 21.0);
  CHECK(two.output_dim() == 2);
}

TEST_CASE("embedding rejects out-of-vocabulary ids with field and row") {
  Rng rng(2);
  EmbeddingTable table({"color", "size"}, {3, 5}, 2, rng);
  Batch batch;
  batch.size = 2;
  batch.field_ids = {{0, 1}, {4, 7}};
  Tape tape;
  CHECK_THROWS_WITH_AS(embed(tape, batch, table), doctest::Contains("size"), DataError);
  CHECK_THROWS_WITH_AS(embed(tape, batch, table), doctest::Contains("row 1"), DataError);
}

TEST_CASE("embedding gradient lands on looked-up rows only") {
  Rng rng(3);
  EmbeddingTable table({"f0"}, {4}, 3, rng);
  Batch batch;
  batch.size = 2;
  batch.field_ids = {{2, 2}};
  Tape tape;
  Tensor out = embed(tape, batch, table);
  tape.backward(tape.sum_all(out));
  for (int v = 0; v < 4; ++v)
    for (int e = 0; e < 3; ++e)
      CHECK(table.tables[0].grad[static_cast<std::size_t>(v) * 3 + e] == (v == 2 ? 2.0 : 0.0));
}

TEST_CASE("gate with noise off reproduces the hand softmax over retained entries") {
  Rng rng(4);
  NoisyTopKGate gate(4, 4, 2, rng);
  // identity-ish weights so logits equal the input row
  gate.w_gate.values.assign(16, 0.0);
  for (int i = 0; i < 4; ++i) gate.w_gate.values[static_cast<std::size_t>(i) * 4 + i] = 1.0;
  Tape tape;
  Tensor x = tape.leaf({1, 4}, std::vector<double>{0.1, 0.5, 0.3, 0.2}, false);
  GateOutput out = gate_forward(tape, x, gate, nullptr, /*noise_enabled=*/false);
  const double hi = std::exp(0.2) / (1.0 + std::exp(0.2));
  CHECK(out.topk[0] == std::vector<int>{1, 2});
  CHECK(out.weights.value(0, 0) == 0.0);
  CHECK(out.weights.value(0, 1) == doctest::Approx(hi).epsilon(1e-12));
  CHECK(out.weights.value(0, 2) == doctest::Approx(1.0 - hi).epsilon(1e-12));
  CHECK(out.weights.value(0, 3) == 0.0);
}

TEST_CASE("gate k=N is a dense softmax; k=1 is one-hot at the argmax") {
  Rng rng(5);
  Tape tape;
  std::vector<double> xv(3 * 6);
  for (auto& v : xv) v = rng.uniform(-2.0, 2.0);
  Tensor x = tape.leaf({3, 6}, xv, false);

  NoisyTopKGate dense(6, 4, 4, rng);
  GateOutput all = gate_forward(tape, x, dense, nullptr, false);
  for (int i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 4; ++j) {
      CHECK(all.weights.value(i, j) > 0.0);
      sum += all.weights.value(i, j);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }

  NoisyTopKGate single(6, 4, 1, rng);
  GateOutput one = gate_forward(tape, x, single, nullptr, false);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(one.topk[i].size() == 1);
    const int j = one.topk[i][0];
    CHECK(one.weights.value(i, j) == 1.0);
    const auto row = one.raw_logits.values().subspan(static_cast<std::size_t>(i) * 4, 4);
    for (int other = 0; other < 4; ++other)
      CHECK(row[j] >= row[other]);
  }
}

TEST_CASE("gate retained sets match the sort-based oracle over random inputs") {
  Rng rng(6);
  Rng noise_rng(7);
  NoisyTopKGate gate(5, 4, 3, rng);
  Tape tape;
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> xv(4 * 5);
    for (auto& v : xv) v = rng.uniform(-2.0, 2.0);
    tape.reset();
    Tensor x = tape.leaf({4, 5}, xv, false);
    GateOutput out = gate_forward(tape, x, gate, &noise_rng, /*noise_enabled=*/true);
    for (int i = 0; i < 4; ++i) {
      const auto row = out.raw_logits.values().subspan(static_cast<std::size_t>(i) * 4, 4);
      const auto oracle = topk_oracle(row, 3);
      CHECK(std::set<int>(out.topk[i].begin(), out.topk[i].end()) == oracle);
      int nonzeros = 0;
      double sum = 0.0;
      for (int j = 0; j < 4; ++j) {
        if (out.weights.value(i, j) != 0.0) ++nonzeros;
        sum += out.weights.value(i, j);
      }
      CHECK(nonzeros == 3);
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("gate ties break toward the lower expert index") {
  Rng rng(8);
  NoisyTopKGate gate(2, 4, 2, rng);
  // duplicate columns make exact ties: logits = [x0, x0, x1, x1]
  gate.w_gate.values = {1, 1, 0, 0,
                        0, 0, 1, 1};
  Tape tape;
  Tensor x = tape.leaf({2, 2}, std::vector<double>{3.0, 3.0, -1.0, 2.0}, false);
  GateOutput out = gate_forward(tape, x, gate, nullptr, false);
  // row 0: all four logits equal 3 -> keep {0, 1}
  CHECK(out.topk[0] == std::vector<int>{0, 1});
  // row 1: logits [-1, -1, 2, 2] -> keep {2, 3}
  CHECK(out.topk[1] == std::vector<int>{2, 3});
  CHECK(out.weights.value(0, 0) == doctest::Approx(0.5));
  CHECK(out.weights.value(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("gate validates k and noise configuration") {
  Rng rng(9);
  CHECK_THROWS_AS(NoisyTopKGate(3, 2, 5, rng), ConfigError);
  CHECK_THROWS_AS(NoisyTopKGate(3, 2, 0, rng), ConfigError);
  NoisyTopKGate gate(3, 2, 1, rng);
  Tape tape;
  Tensor x = tape.leaf({1, 3}, std::vector<double>{1, 2, 3}, false);
  CHECK_THROWS_AS(gate_forward(tape, x, gate, nullptr, /*noise_enabled=*/true), Error);
}

TEST_CASE("noise perturbs logits through the softplus scale and fixed draws pin it") {
  Rng rng(10);
  NoisyTopKGate gate(3, 2, 2, rng);
  Tape tape;
  Tensor x = tape.leaf({1, 3}, std::vector<double>{0.5, -0.2, 1.0}, false);
  GateOutput clean = gate_forward(tape, x, gate, nullptr, false);
  const std::vector<double> eps = {1.0, -1.0};
  GateOutput noisy = gate_forward(tape, x, gate, nullptr, true, &eps);
  // scale = softplus(x * w_noise), recomputed by hand
  for (int j = 0; j < 2; ++j) {
    double z = 0.0;
    for (int i = 0; i < 3; ++i)
      z += x.value(0, i) * gate.w_noise.values[static_cast<std::size_t>(i) * 2 + j];
    const double scale = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    const double expect = clean.raw_logits.value(0, j) + eps[j] * scale;
    CHECK(noisy.raw_logits.value(0, j) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("expert mlp shape, relu stack and row counting") {
  Rng rng(11);
  std::vector<int> hidden = {8, 4};
  ExpertMlp mlp("e", 5, hidden, rng);
  CHECK(mlp.output_dim() == 4);
  Tape tape;
  std::vector<double> xv(3 * 5, 0.5);
  Tensor out = mlp.forward(tape, tape.leaf({3, 5}, xv, false));
  CHECK(out.rows() == 3);
  CHECK(out.cols() == 4);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) CHECK(out.value(i, j) >= 0.0);  // relu output
  CHECK(mlp.rows_evaluated == 3);
  mlp.forward(tape, tape.leaf({2, 5}, std::vector<double>(10, 0.1), false));
  CHECK(mlp.rows_evaluated == 5);
}

TEST_CASE("ces_forward: degenerate single-expert config reduces to a plain dnn") {
  Rng rng(12);
  ModelConfig mc;
  mc.variant = Variant::kCesaaNoBoth;
  mc.n_experts = 1;
  mc.top_k = 1;
  mc.hidden = {6, 4};
  mc.embed_dim = 3;
  mc.n_domains = 2;
  mc.data_vocab_sizes = {5, 5};
  CesModel ces(mc, rng);

  Rng rng2(12);
  ModelConfig dc = mc;
  dc.variant = Variant::kDnn;
  CesModel dnn(dc, rng2);
  // same init stream order for embedding + the single expert
  dnn.head_w.values = ces.head_w.values;
  dnn.head_b.values = ces.head_b.values;

  Dataset data = tiny_dataset(2, {5, 5}, 20, 13);
  Batch batch = batch_of(data, 8);
  Tape t1, t2;
  ForwardResult a = ces_forward(t1, batch, ces, nullptr, /*training=*/false);
  ForwardResult b = model_forward(t2, batch, dnn, nullptr, /*training=*/false);
  for (int i = 0; i < batch.size; ++i)
    CHECK(a.yhat.value(i, 0) == doctest::Approx(b.yhat.value(i, 0)).epsilon(1e-15));
}

TEST_CASE("zero head weights and bias give yhat = 0.5 everywhere") {
  Rng rng(14);
  ModelConfig mc;
  mc.variant = Variant::kCesaa;
  mc.n_experts = 3;
  mc.top_k = 2;
  mc.hidden = {6, 4};
  mc.embed_dim = 3;
  mc.n_domains = 2;
  mc.data_vocab_sizes = {4};
  CesModel model(mc, rng);
  std::fill(model.head_w.values.begin(), model.head_w.values.end(), 0.0);
  std::fill(model.head_b.values.begin(), model.head_b.values.end(), 0.0);

  Dataset data = tiny_dataset(2, {4}, 12, 15);
  Batch batch = batch_of(data, 6);
  Tape tape;
  ForwardResult out = ces_forward(tape, batch, model, nullptr, false);
  for (int i = 0; i < batch.size; ++i) CHECK(out.yhat.value(i, 0) == 0.5);
}

TEST_CASE("only retained experts run: rows evaluated = b*k + b(shared)") {
  Rng rng(16);
  ModelConfig mc;
  mc.variant = Variant::kCesaa;
  mc.n_experts = 4;
  mc.top_k = 2;
  mc.hidden = {6, 4};
  mc.embed_dim = 3;
  mc.n_domains = 3;
  mc.data_vocab_sizes = {6, 6};
  CesModel model(mc, rng);
  Dataset data = tiny_dataset(3, {6, 6}, 33, 17);
  Batch batch = batch_of(data, 30);

  Rng noise(18);
  for (int k = 1; k <= 4; ++k) {
    model.gate->top_k = k;
    model.reset_eval_counters();
    Tape tape;
    ces_forward(tape, batch, model, &noise, /*training=*/true);
    CHECK(model.expert_rows_evaluated() ==
          static_cast<std::uint64_t>(batch.size) * k + batch.size);
  }
}

TEST_CASE("evaluation mode is deterministic: two passes agree bitwise") {
  Rng rng(19);
  ModelConfig mc;
  mc.variant = Variant::kCesaa;
  mc.n_experts = 4;
  mc.top_k = 3;
  mc.hidden = {8, 4};
  mc.embed_dim = 4;
  mc.n_domains = 2;
  mc.data_vocab_sizes = {7};
  CesModel model(mc, rng);
  Dataset data = tiny_dataset(2, {7}, 16, 20);
  Batch batch = batch_of(data, 10);
  Tape t1, t2;
  ForwardResult a = ces_forward(t1, batch, model, nullptr, false);
  ForwardResult b = ces_forward(t2, batch, model, nullptr, false);
  for (int i = 0; i < batch.size; ++i) CHECK(a.yhat.value(i, 0) == b.yhat.value(i, 0));
}

TEST_CASE("mmoe equals ces with k=N, noise off, no shared path, same parameters") {
  Rng rng(21);
  ModelConfig mc;
  mc.variant = Variant::kCesaaNoBoth;
  mc.n_experts = 3;
  mc.top_k = 3;  // dense retention
  mc.hidden = {6, 4};
  mc.embed_dim = 3;
  mc.n_domains = 2;
  mc.data_vocab_sizes = {5, 4};
  CesModel model(mc, rng);
  Dataset data = tiny_dataset(2, {5, 4}, 24, 22);
  Batch batch = batch_of(data, 20);

  Tape t1, t2;
  ForwardResult ces = ces_forward(t1, batch, model, nullptr, /*training=*/false);
  ForwardResult moe = mmoe_forward(t2, batch, model);
  for (int i = 0; i < batch.size; ++i) {
    CHECK(ces.yhat.value(i, 0) == moe.yhat.value(i, 0));  // bit-identical
    for (int j = 0; j < 3; ++j)
      CHECK(ces.gate.weights.value(i, j) == moe.gate.weights.value(i, j));
  }
}

TEST_CASE("mmoe gate rows are dense and normalized; dnn has no gate") {
  Rng rng(23);
  ModelConfig mc;
  mc.variant = Variant::kMmoe;
  mc.n_experts = 4;
  mc.top_k = 2;  // ignored by the dense path
  mc.hidden = {6, 4};
  mc.embed_dim = 3;
  mc.n_domains = 2;
  mc.data_vocab_sizes = {5};
  CesModel model(mc, rng);
  Dataset data = tiny_dataset(2, {5}, 10, 24);
  Batch batch = batch_of(data, 8);
  Tape tape;
  ForwardResult out = model_forward(tape, batch, model, nullptr, true);
  for (int i = 0; i < batch.size; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 4; ++j) {
      CHECK(out.gate.weights.value(i, j) > 0.0);
      sum += out.gate.weights.value(i, j);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
  CHECK_THROWS_AS([&] {
    ModelConfig dc = mc;
    dc.variant = Variant::kDnn;
    Rng r(1);
    CesModel dnn(dc, r);
    Tape t;
    mmoe_forward(t, batch, dnn);
  }(), ConfigError);
}

TEST_CASE("full model gradients match finite differences with the noise draw fixed") {
  Rng rng(25);
  ModelConfig mc;
  mc.variant = Variant::kCesaa;
  mc.n_experts = 4;
  mc.top_k = 3;
  mc.hidden = {8, 8};
  mc.embed_dim = 4;
  mc.n_domains = 3;
  mc.data_vocab_sizes = {5, 6};
  CesModel model(mc, rng);
  Dataset data = tiny_dataset(3, {5, 6}, 9, 26);
  Batch batch = batch_of(data, 8);

  Rng noise_rng(27);
  std::vector<double> noise(static_cast<std::size_t>(batch.size) * mc.n_experts);
  for (auto& e : noise) e = noise_rng.normal();

  std::vector<Parameter*> params = model.parameters();
  Tape tape;
  auto f = [&](Tape& t) {
    ForwardResult fwd = ces_forward(t, batch, model, nullptr, /*training=*/true, &noise);
    return bce_loss(t, fwd.yhat, batch.labels);
  };
  FdResult r = fd_check(tape, f, params, 1e-5);
  CHECK_MESSAGE(r.max_rel_err < 1e-5, "worst=", r.worst_param, "[", r.worst_index,
                "] analytic=", r.analytic, " numeric=", r.numeric);
}
