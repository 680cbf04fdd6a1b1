#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cesaa/common.hpp"
#include "cesaa/rng.hpp"

namespace cesaa {

class Tape;

struct Shape {
  int rows = 0;
  int cols = 0;
  bool operator==(const Shape&) const = default;
  int count() const { return rows * cols; }
};

std::string to_string(const Shape& s);

/// A named, persistent model parameter. Values live outside any tape and
/// survive across training steps; grad is overwritten by each backward pass
/// through the tape the parameter was attached to.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;

  Parameter(std::string name, Shape shape, std::vector<double> values);

  static Parameter zeros(std::string name, Shape shape);
  static Parameter full(std::string name, Shape shape, double value);
  /// Glorot/Xavier uniform init over fan_in + fan_out.
  static Parameter xavier(std::string name, Shape shape, Rng& rng);
  static Parameter uniform(std::string name, Shape shape, double lo, double hi, Rng& rng);
};

/// Handle to a node on a Tape. Cheap to copy; identity is (tape, node id).
/// Handles are invalidated by Tape::reset().
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  Shape shape() const;
  int rows() const { return shape().rows; }
  int cols() const { return shape().cols; }
  bool tracked() const;

  double value(int r, int c) const;
  std::span<const double> values() const;
  double grad(int r, int c) const;
  std::span<const double> grad_values() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id, std::uint64_t gen) : tape_(tape), id_(id), gen_(gen) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t gen_ = 0;
};

/// Reverse-mode autodiff tape over dense row-major 2-D double tensors.
///
/// Ops are recorded in forward execution order; backward() walks the records
/// strictly in reverse and accumulates gradients additively, so a tensor
/// consumed by several ops receives the sum of all contributions. Ops whose
/// output is unreachable from the loss are skipped entirely during the
/// reverse pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  // Movable so owners (e.g. a trainer) can be returned from factories; any
  // outstanding Tensor handles are tied to the old address and must be gone.
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Drop all nodes and op records; invalidates outstanding Tensor handles.
  void reset();

  Tensor leaf(Shape shape, std::span<const double> values, bool tracked);
  Tensor constant(Shape shape, std::span<const double> values);
  Tensor constant_fill(Shape shape, double value);

  /// Tracked leaf bound to a parameter: backward() writes d(loss)/d(param)
  /// into param.grad.
  Tensor attach(Parameter& param);

  /// Propagate gradients from a scalar loss to every tracked tensor and
  /// bound parameter. May be called once per reset cycle.
  void backward(Tensor loss);

  // --- recorded operations ---
  Tensor matmul(Tensor a, Tensor b);
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor neg(Tensor a);
  Tensor relu(Tensor a);
  Tensor sigmoid(Tensor a);
  Tensor softplus(Tensor a);
  /// ln(max(x, 1e-12)); below the floor the derivative is 0.
  Tensor log_clamped(Tensor a);
  /// a + bias broadcast over rows; bias is 1 x n. The only broadcast op.
  Tensor add_row_bias(Tensor a, Tensor bias);
  /// Multiply by a compile-time-constant scalar.
  Tensor scale(Tensor a, double c);
  /// Row i of a multiplied by scalar s(i, 0); s is b x 1.
  Tensor scale_rows(Tensor a, Tensor s);
  Tensor select_col(Tensor a, int col);
  Tensor concat_cols(Tensor a, Tensor b);
  /// out[r] = a[rows[r]]; duplicate indices allowed (grads accumulate).
  Tensor gather_rows(Tensor a, std::span<const int> rows);
  /// Inverse of gather: out has out_rows rows, out[rows[r]] += a[r].
  Tensor scatter_rows(Tensor a, std::span<const int> rows, int out_rows);
  /// out[i] = table[ids[i]]; gradient scatters into the table rows.
  Tensor embedding_lookup(Tensor table, std::span<const int> ids);
  /// Row-wise softmax over entries where mask is nonzero; masked entries are
  /// exactly 0 in the output and receive no gradient.
  Tensor masked_softmax(Tensor logits, std::vector<std::uint8_t> mask);
  /// Sum of all entries, as a 1x1 tensor.
  Tensor sum_all(Tensor a);

  static constexpr double kLogFloor = 1e-12;

 private:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool tracked = false;
    bool reachable = false;  // set during backward when a grad lands here
  };
  struct OpRecord {
    std::size_t out;
    std::vector<std::size_t> parents;
    std::function<void(Tape&)> backward;
  };

  friend class Tensor;

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t new_node(Shape shape, bool tracked);
  Tensor handle(std::size_t id) { return Tensor(this, id, generation_); }
  void check_owned(Tensor t, const char* op) const;
  void check_same(Tensor a, Tensor b, const char* op) const;
  Tensor unary(Tensor a, const char* op, const std::function<double(double)>& f,
               const std::function<double(double, double, double)>& df);

  std::vector<Node> nodes_;
  std::vector<OpRecord> ops_;
  std::vector<std::pair<Parameter*, std::size_t>> bindings_;
  std::uint64_t generation_ = 1;
  bool backward_done_ = false;
};

/// Finite-difference gradient verification. Runs f once to get analytic
/// gradients for every parameter in params, then central differences with
/// step h per parameter entry. f must be deterministic (fix any noise draw
/// as an input) and must attach exactly the given parameters.
struct FdResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

FdResult fd_check(Tape& tape, const std::function<Tensor(Tape&)>& f,
                  std::span<Parameter* const> params, double h);

}  // namespace cesaa
