#include "cesaa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cesaa {

std::string to_string(const Shape& s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

// ---------------------------------------------------------------------------
// Parameter

Parameter::Parameter(std::string name_, Shape shape_, std::vector<double> values_)
    : name(std::move(name_)), shape(shape_), values(std::move(values_)),
      grad(values.size(), 0.0) {
  if (shape.rows <= 0 || shape.cols <= 0)
    throw ShapeError("parameter '" + name + "': shape " + to_string(shape) + " is empty");
  if (static_cast<int>(values.size()) != shape.count())
    throw ShapeError("parameter '" + name + "': " + std::to_string(values.size()) +
                     " values for shape " + to_string(shape));
}

Parameter Parameter::zeros(std::string name, Shape shape) {
  return Parameter(std::move(name), shape, std::vector<double>(shape.count(), 0.0));
}

Parameter Parameter::full(std::string name, Shape shape, double value) {
  return Parameter(std::move(name), shape, std::vector<double>(shape.count(), value));
}

Parameter Parameter::xavier(std::string name, Shape shape, Rng& rng) {
  const double r = std::sqrt(6.0 / (shape.rows + shape.cols));
  return uniform(std::move(name), shape, -r, r, rng);
}

Parameter Parameter::uniform(std::string name, Shape shape, double lo, double hi, Rng& rng) {
  std::vector<double> v(shape.count());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Parameter(std::move(name), shape, std::move(v));
}

// ---------------------------------------------------------------------------
// Tensor accessors

Shape Tensor::shape() const { return tape_->node(id_).shape; }

bool Tensor::tracked() const { return tape_->node(id_).tracked; }

double Tensor::value(int r, int c) const {
  const auto& n = tape_->node(id_);
  return n.values[static_cast<std::size_t>(r) * n.shape.cols + c];
}

std::span<const double> Tensor::values() const { return tape_->node(id_).values; }

double Tensor::grad(int r, int c) const {
  const auto& n = tape_->node(id_);
  return n.grad[static_cast<std::size_t>(r) * n.shape.cols + c];
}

std::span<const double> Tensor::grad_values() const { return tape_->node(id_).grad; }

// ---------------------------------------------------------------------------
// Tape basics

void Tape::reset() {
  nodes_.clear();
  ops_.clear();
  bindings_.clear();
  backward_done_ = false;
  ++generation_;
}

std::size_t Tape::new_node(Shape shape, bool tracked) {
  if (shape.rows <= 0 || shape.cols <= 0)
    throw ShapeError("tensor shape " + to_string(shape) + " is empty");
  Node n;
  n.shape = shape;
  n.values.assign(static_cast<std::size_t>(shape.count()), 0.0);
  n.grad.assign(static_cast<std::size_t>(shape.count()), 0.0);
  n.tracked = tracked;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

void Tape::check_owned(Tensor t, const char* op) const {
  if (t.tape_ != this || t.gen_ != generation_)
    throw Error(std::string(op) + ": tensor does not belong to the active tape");
}

void Tape::check_same(Tensor a, Tensor b, const char* op) const {
  check_owned(a, op);
  check_owned(b, op);
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
}

Tensor Tape::leaf(Shape shape, std::span<const double> values, bool tracked) {
  if (static_cast<int>(values.size()) != shape.count())
    throw ShapeError("leaf: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  const std::size_t id = new_node(shape, tracked);
  std::copy(values.begin(), values.end(), nodes_[id].values.begin());
  return handle(id);
}

Tensor Tape::constant(Shape shape, std::span<const double> values) {
  return leaf(shape, values, false);
}

Tensor Tape::constant_fill(Shape shape, double value) {
  const std::size_t id = new_node(shape, false);
  std::fill(nodes_[id].values.begin(), nodes_[id].values.end(), value);
  return handle(id);
}

Tensor Tape::attach(Parameter& param) {
  Tensor t = leaf(param.shape, param.values, true);
  bindings_.emplace_back(&param, t.id());
  return t;
}

void Tape::backward(Tensor loss) {
  check_owned(loss, "backward");
  if (backward_done_) throw Error("backward: already run on this tape; reset first");
  if (!(loss.shape() == Shape{1, 1}))
    throw Error("backward: loss must be a 1x1 scalar, got " + to_string(loss.shape()));
  if (!loss.tracked()) throw Error("backward: loss does not depend on any tracked tensor");

  Node& root = node(loss.id());
  root.grad[0] = 1.0;
  root.reachable = true;

  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (!nodes_[it->out].reachable) continue;  // no path from the loss
    it->backward(*this);
    for (std::size_t p : it->parents) nodes_[p].reachable = true;
  }

  for (auto& [param, id] : bindings_) std::fill(param->grad.begin(), param->grad.end(), 0.0);
  for (auto& [param, id] : bindings_) {
    const auto& g = nodes_[id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) param->grad[i] += g[i];
  }
  backward_done_ = true;
}

// ---------------------------------------------------------------------------
// Ops

Tensor Tape::matmul(Tensor a, Tensor b) {
  check_owned(a, "matmul");
  check_owned(b, "matmul");
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.cols != sb.rows)
    throw ShapeError("matmul: inner dimensions disagree: " + to_string(sa) + " * " +
                     to_string(sb));
  const int m = sa.rows, k = sa.cols, n = sb.cols;
  const bool tracked = a.tracked() || b.tracked();
  const std::size_t out = new_node({m, n}, tracked);
  {
    const double* av = nodes_[a.id()].values.data();
    const double* bv = nodes_[b.id()].values.data();
    double* ov = nodes_[out].values.data();
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const double aik = av[i * k + kk];
        if (aik == 0.0) continue;
        const double* brow = bv + static_cast<std::size_t>(kk) * n;
        double* orow = ov + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
  }
  if (tracked) {
    const std::size_t ia = a.id(), ib = b.id();
    ops_.push_back({out, {ia, ib}, [out, ia, ib, m, k, n](Tape& tp) {
                      const double* g = tp.nodes_[out].grad.data();
                      if (tp.nodes_[ia].tracked) {
                        // dA = dC * B^T
                        const double* bv = tp.nodes_[ib].values.data();
                        double* da = tp.nodes_[ia].grad.data();
                        for (int i = 0; i < m; ++i)
                          for (int kk = 0; kk < k; ++kk) {
                            double acc = 0.0;
                            const double* grow = g + static_cast<std::size_t>(i) * n;
                            const double* brow = bv + static_cast<std::size_t>(kk) * n;
                            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            da[i * k + kk] += acc;
                          }
                      }
                      if (tp.nodes_[ib].tracked) {
                        // dB = A^T * dC
                        const double* av = tp.nodes_[ia].values.data();
                        double* db = tp.nodes_[ib].grad.data();
                        for (int i = 0; i < m; ++i) {
                          const double* grow = g + static_cast<std::size_t>(i) * n;
                          for (int kk = 0; kk < k; ++kk) {
                            const double aik = av[i * k + kk];
                            if (aik == 0.0) continue;
                            double* drow = db + static_cast<std::size_t>(kk) * n;
                            for (int j = 0; j < n; ++j) drow[j] += aik * grow[j];
                          }
                        }
                      }
                    }});
  }
  return handle(out);
}

Tensor Tape::add(Tensor a, Tensor b) {
  check_same(a, b, "add");
  const bool tracked = a.tracked() || b.tracked();
  const std::size_t out = new_node(a.shape(), tracked);
  const auto& av = nodes_[a.id()].values;
  const auto& bv = nodes_[b.id()].values;
  auto& ov = nodes_[out].values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (tracked) {
    const std::size_t ia = a.id(), ib = b.id();
    ops_.push_back({out, {ia, ib}, [out, ia, ib](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      if (tp.nodes_[ia].tracked) {
                        auto& da = tp.nodes_[ia].grad;
                        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                      }
                      if (tp.nodes_[ib].tracked) {
                        auto& db = tp.nodes_[ib].grad;
                        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                      }
                    }});
  }
  return handle(out);
}

Tensor Tape::sub(Tensor a, Tensor b) { return add(a, neg(b)); }

Tensor Tape::mul(Tensor a, Tensor b) {
  check_same(a, b, "mul");
  const bool tracked = a.tracked() || b.tracked();
  const std::size_t out = new_node(a.shape(), tracked);
  const auto& av = nodes_[a.id()].values;
  const auto& bv = nodes_[b.id()].values;
  auto& ov = nodes_[out].values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (tracked) {
    const std::size_t ia = a.id(), ib = b.id();
    ops_.push_back({out, {ia, ib}, [out, ia, ib](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      const auto& av = tp.nodes_[ia].values;
                      const auto& bv = tp.nodes_[ib].values;
                      if (tp.nodes_[ia].tracked) {
                        auto& da = tp.nodes_[ia].grad;
                        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
                      }
                      if (tp.nodes_[ib].tracked) {
                        auto& db = tp.nodes_[ib].grad;
                        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
                      }
                    }});
  }
  return handle(out);
}

Tensor Tape::unary(Tensor a, const char* op, const std::function<double(double)>& f,
                   const std::function<double(double, double, double)>& df) {
  check_owned(a, op);
  const bool tracked = a.tracked();
  const std::size_t out = new_node(a.shape(), tracked);
  const auto& av = nodes_[a.id()].values;
  auto& ov = nodes_[out].values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i]);
  if (tracked) {
    const std::size_t ia = a.id();
    ops_.push_back({out, {ia}, [out, ia, df](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      const auto& x = tp.nodes_[ia].values;
                      const auto& y = tp.nodes_[out].values;
                      auto& da = tp.nodes_[ia].grad;
                      for (std::size_t i = 0; i < g.size(); ++i) da[i] += df(x[i], y[i], g[i]);
                    }});
  }
  return handle(out);
}

Tensor Tape::neg(Tensor a) {
  return unary(a, "neg", [](double x) { return -x; },
               [](double, double, double g) { return -g; });
}

Tensor Tape::relu(Tensor a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor Tape::sigmoid(Tensor a) {
  auto sig = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary(a, "sigmoid", sig,
               [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor Tape::softplus(Tensor a) {
  // Overflow-safe form max(x, 0) + ln(1 + exp(-|x|)).
  auto sp = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); };
  auto dsp = [](double x, double, double g) {
    const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return g * s;
  };
  return unary(a, "softplus", sp, dsp);
}

Tensor Tape::log_clamped(Tensor a) {
  return unary(a, "log", [](double x) { return std::log(std::max(x, kLogFloor)); },
               [](double x, double, double g) { return x >= kLogFloor ? g / x : 0.0; });
}

Tensor Tape::add_row_bias(Tensor a, Tensor bias) {
  check_owned(a, "add_row_bias");
  check_owned(bias, "add_row_bias");
  const Shape sa = a.shape(), sb = bias.shape();
  if (sb.rows != 1 || sb.cols != sa.cols)
    throw ShapeError("add_row_bias: bias " + to_string(sb) + " does not match " + to_string(sa));
  const bool tracked = a.tracked() || bias.tracked();
  const std::size_t out = new_node(sa, tracked);
  const auto& av = nodes_[a.id()].values;
  const auto& bv = nodes_[bias.id()].values;
  auto& ov = nodes_[out].values;
  for (int i = 0; i < sa.rows; ++i)
    for (int j = 0; j < sa.cols; ++j)
      ov[static_cast<std::size_t>(i) * sa.cols + j] =
          av[static_cast<std::size_t>(i) * sa.cols + j] + bv[j];
  if (tracked) {
    const std::size_t ia = a.id(), ib = bias.id();
    const int rows = sa.rows, cols = sa.cols;
    ops_.push_back({out, {ia, ib}, [out, ia, ib, rows, cols](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      if (tp.nodes_[ia].tracked) {
                        auto& da = tp.nodes_[ia].grad;
                        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                      }
                      if (tp.nodes_[ib].tracked) {
                        auto& db = tp.nodes_[ib].grad;
                        for (int i = 0; i < rows; ++i)
                          for (int j = 0; j < cols; ++j)
                            db[j] += g[static_cast<std::size_t>(i) * cols + j];
                      }
                    }});
  }
  return handle(out);
}

Tensor Tape::scale(Tensor a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; },
               [c](double, double, double g) { return c * g; });
}

Tensor Tape::scale_rows(Tensor a, Tensor s) {
  check_owned(a, "scale_rows");
  check_owned(s, "scale_rows");
  const Shape sa = a.shape(), ss = s.shape();
  if (ss.rows != sa.rows || ss.cols != 1)
    throw ShapeError("scale_rows: scale " + to_string(ss) + " does not match " + to_string(sa));
  const bool tracked = a.tracked() || s.tracked();
  const std::size_t out = new_node(sa, tracked);
  const auto& av = nodes_[a.id()].values;
  const auto& sv = nodes_[s.id()].values;
  auto& ov = nodes_[out].values;
  for (int i = 0; i < sa.rows; ++i)
    for (int j = 0; j < sa.cols; ++j)
      ov[static_cast<std::size_t>(i) * sa.cols + j] =
          av[static_cast<std::size_t>(i) * sa.cols + j] * sv[i];
  if (tracked) {
    const std::size_t ia = a.id(), is = s.id();
    const int rows = sa.rows, cols = sa.cols;
    ops_.push_back({out, {ia, is}, [out, ia, is, rows, cols](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      const auto& av = tp.nodes_[ia].values;
                      const auto& sv = tp.nodes_[is].values;
                      if (tp.nodes_[ia].tracked) {
                        auto& da = tp.nodes_[ia].grad;
                        for (int i = 0; i < rows; ++i)
                          for (int j = 0; j < cols; ++j)
                            da[static_cast<std::size_t>(i) * cols + j] +=
                                g[static_cast<std::size_t>(i) * cols + j] * sv[i];
                      }
                      if (tp.nodes_[is].tracked) {
                        auto& ds = tp.nodes_[is].grad;
                        for (int i = 0; i < rows; ++i) {
                          double acc = 0.0;
                          for (int j = 0; j < cols; ++j)
                            acc += g[static_cast<std::size_t>(i) * cols + j] *
                                   av[static_cast<std::size_t>(i) * cols + j];
                          ds[i] += acc;
                        }
                      }
                    }});
  }
  return handle(out);
}

Tensor Tape::select_col(Tensor a, int col) {
  check_owned(a, "select_col");
  const Shape sa = a.shape();
  if (col < 0 || col >= sa.cols)
    throw ShapeError("select_col: column " + std::to_string(col) + " out of range for " +
                     to_string(sa));
  const bool tracked = a.tracked();
  const std::size_t out = new_node({sa.rows, 1}, tracked);
  const auto& av = nodes_[a.id()].values;
  auto& ov = nodes_[out].values;
  for (int i = 0; i < sa.rows; ++i) ov[i] = av[static_cast<std::size_t>(i) * sa.cols + col];
  if (tracked) {
    const std::size_t ia = a.id();
    const int rows = sa.rows, cols = sa.cols;
    ops_.push_back({out, {ia}, [out, ia, rows, cols, col](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      auto& da = tp.nodes_[ia].grad;
                      for (int i = 0; i < rows; ++i)
                        da[static_cast<std::size_t>(i) * cols + col] += g[i];
                    }});
  }
  return handle(out);
}

Tensor Tape::concat_cols(Tensor a, Tensor b) {
  check_owned(a, "concat_cols");
  check_owned(b, "concat_cols");
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.rows != sb.rows)
    throw ShapeError("concat_cols: row counts differ: " + to_string(sa) + " vs " + to_string(sb));
  const bool tracked = a.tracked() || b.tracked();
  const std::size_t out = new_node({sa.rows, sa.cols + sb.cols}, tracked);
  const auto& av = nodes_[a.id()].values;
  const auto& bv = nodes_[b.id()].values;
  auto& ov = nodes_[out].values;
  const int oc = sa.cols + sb.cols;
  for (int i = 0; i < sa.rows; ++i) {
    for (int j = 0; j < sa.cols; ++j)
      ov[static_cast<std::size_t>(i) * oc + j] = av[static_cast<std::size_t>(i) * sa.cols + j];
    for (int j = 0; j < sb.cols; ++j)
      ov[static_cast<std::size_t>(i) * oc + sa.cols + j] =
          bv[static_cast<std::size_t>(i) * sb.cols + j];
  }
  if (tracked) {
    const std::size_t ia = a.id(), ib = b.id();
    const int rows = sa.rows, ca = sa.cols, cb = sb.cols;
    ops_.push_back({out, {ia, ib}, [out, ia, ib, rows, ca, cb](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      const int oc = ca + cb;
                      if (tp.nodes_[ia].tracked) {
                        auto& da = tp.nodes_[ia].grad;
                        for (int i = 0; i < rows; ++i)
                          for (int j = 0; j < ca; ++j)
                            da[static_cast<std::size_t>(i) * ca + j] +=
                                g[static_cast<std::size_t>(i) * oc + j];
                      }
                      if (tp.nodes_[ib].tracked) {
                        auto& db = tp.nodes_[ib].grad;
                        for (int i = 0; i < rows; ++i)
                          for (int j = 0; j < cb; ++j)
                            db[static_cast<std::size_t>(i) * cb + j] +=
                                g[static_cast<std::size_t>(i) * oc + ca + j];
                      }
                    }});
  }
  return handle(out);
}

Tensor Tape::gather_rows(Tensor a, std::span<const int> rows) {
  check_owned(a, "gather_rows");
  const Shape sa = a.shape();
  if (rows.empty()) throw ShapeError("gather_rows: empty row list");
  for (int r : rows)
    if (r < 0 || r >= sa.rows)
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " +
                       to_string(sa));
  const bool tracked = a.tracked();
  const std::size_t out = new_node({static_cast<int>(rows.size()), sa.cols}, tracked);
  const auto& av = nodes_[a.id()].values;
  auto& ov = nodes_[out].values;
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(av.begin() + static_cast<std::size_t>(rows[r]) * sa.cols, sa.cols,
                ov.begin() + r * sa.cols);
  if (tracked) {
    const std::size_t ia = a.id();
    std::vector<int> idx(rows.begin(), rows.end());
    const int cols = sa.cols;
    ops_.push_back({out, {ia}, [out, ia, idx = std::move(idx), cols](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      auto& da = tp.nodes_[ia].grad;
                      for (std::size_t r = 0; r < idx.size(); ++r)
                        for (int j = 0; j < cols; ++j)
                          da[static_cast<std::size_t>(idx[r]) * cols + j] += g[r * cols + j];
                    }});
  }
  return handle(out);
}

Tensor Tape::scatter_rows(Tensor a, std::span<const int> rows, int out_rows) {
  check_owned(a, "scatter_rows");
  const Shape sa = a.shape();
  if (static_cast<int>(rows.size()) != sa.rows)
    throw ShapeError("scatter_rows: " + std::to_string(rows.size()) + " indices for " +
                     to_string(sa));
  for (int r : rows)
    if (r < 0 || r >= out_rows)
      throw ShapeError("scatter_rows: row " + std::to_string(r) + " out of range for " +
                       std::to_string(out_rows) + " output rows");
  const bool tracked = a.tracked();
  const std::size_t out = new_node({out_rows, sa.cols}, tracked);
  const auto& av = nodes_[a.id()].values;
  auto& ov = nodes_[out].values;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int j = 0; j < sa.cols; ++j)
      ov[static_cast<std::size_t>(rows[r]) * sa.cols + j] += av[r * sa.cols + j];
  if (tracked) {
    const std::size_t ia = a.id();
    std::vector<int> idx(rows.begin(), rows.end());
    const int cols = sa.cols;
    ops_.push_back({out, {ia}, [out, ia, idx = std::move(idx), cols](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      auto& da = tp.nodes_[ia].grad;
                      for (std::size_t r = 0; r < idx.size(); ++r)
                        for (int j = 0; j < cols; ++j)
                          da[r * cols + j] += g[static_cast<std::size_t>(idx[r]) * cols + j];
                    }});
  }
  return handle(out);
}

Tensor Tape::embedding_lookup(Tensor table, std::span<const int> ids) {
  check_owned(table, "embedding_lookup");
  const Shape st = table.shape();
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  for (int id : ids)
    if (id < 0 || id >= st.rows)
      throw DataError("embedding_lookup: id " + std::to_string(id) + " out of range for " +
                      std::to_string(st.rows) + " rows");
  const bool tracked = table.tracked();
  const std::size_t out = new_node({static_cast<int>(ids.size()), st.cols}, tracked);
  const auto& tv = nodes_[table.id()].values;
  auto& ov = nodes_[out].values;
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::size_t>(ids[i]) * st.cols, st.cols,
                ov.begin() + i * st.cols);
  if (tracked) {
    const std::size_t it = table.id();
    std::vector<int> idx(ids.begin(), ids.end());
    const int cols = st.cols;
    ops_.push_back({out, {it}, [out, it, idx = std::move(idx), cols](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      auto& dt = tp.nodes_[it].grad;
                      for (std::size_t i = 0; i < idx.size(); ++i)
                        for (int j = 0; j < cols; ++j)
                          dt[static_cast<std::size_t>(idx[i]) * cols + j] += g[i * cols + j];
                    }});
  }
  return handle(out);
}

Tensor Tape::masked_softmax(Tensor logits, std::vector<std::uint8_t> mask) {
  check_owned(logits, "masked_softmax");
  const Shape s = logits.shape();
  if (static_cast<int>(mask.size()) != s.count())
    throw ShapeError("masked_softmax: mask size " + std::to_string(mask.size()) +
                     " does not match " + to_string(s));
  const bool tracked = logits.tracked();
  const std::size_t out = new_node(s, tracked);
  const auto& lv = nodes_[logits.id()].values;
  auto& ov = nodes_[out].values;
  for (int i = 0; i < s.rows; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * s.cols;
    double mx = -std::numeric_limits<double>::infinity();
    int retained = 0;
    for (int j = 0; j < s.cols; ++j)
      if (mask[base + j]) {
        mx = std::max(mx, lv[base + j]);
        ++retained;
      }
    if (retained == 0)
      throw ShapeError("masked_softmax: invalid mask: row " + std::to_string(i) +
                       " has no retained entries");
    double denom = 0.0;
    for (int j = 0; j < s.cols; ++j)
      if (mask[base + j]) {
        ov[base + j] = std::exp(lv[base + j] - mx);
        denom += ov[base + j];
      }
    for (int j = 0; j < s.cols; ++j) ov[base + j] = mask[base + j] ? ov[base + j] / denom : 0.0;
  }
  if (tracked) {
    const std::size_t il = logits.id();
    const int rows = s.rows, cols = s.cols;
    ops_.push_back({out, {il}, [out, il, rows, cols, mask = std::move(mask)](Tape& tp) {
                      const auto& g = tp.nodes_[out].grad;
                      const auto& y = tp.nodes_[out].values;
                      auto& dl = tp.nodes_[il].grad;
                      for (int i = 0; i < rows; ++i) {
                        const std::size_t base = static_cast<std::size_t>(i) * cols;
                        double dot = 0.0;
                        for (int j = 0; j < cols; ++j)
                          if (mask[base + j]) dot += g[base + j] * y[base + j];
                        for (int j = 0; j < cols; ++j)
                          if (mask[base + j])
                            dl[base + j] += y[base + j] * (g[base + j] - dot);
                      }
                    }});
  }
  return handle(out);
}

Tensor Tape::sum_all(Tensor a) {
  check_owned(a, "sum_all");
  const bool tracked = a.tracked();
  const std::size_t out = new_node({1, 1}, tracked);
  const auto& av = nodes_[a.id()].values;
  nodes_[out].values[0] = std::accumulate(av.begin(), av.end(), 0.0);
  if (tracked) {
    const std::size_t ia = a.id();
    ops_.push_back({out, {ia}, [out, ia](Tape& tp) {
                      const double g = tp.nodes_[out].grad[0];
                      auto& da = tp.nodes_[ia].grad;
                      for (auto& d : da) d += g;
                    }});
  }
  return handle(out);
}

// ---------------------------------------------------------------------------
// Finite differences

FdResult fd_check(Tape& tape, const std::function<Tensor(Tape&)>& f,
                  std::span<Parameter* const> params, double h) {
  if (h <= 0.0) throw Error("fd_check: h must be positive");

  auto eval = [&](const char* where) {
    tape.reset();
    Tensor loss = f(tape);
    if (!(loss.shape() == Shape{1, 1}))
      throw Error("fd_check: f must return a 1x1 scalar, got " + to_string(loss.shape()));
    const double v = loss.value(0, 0);
    if (!std::isfinite(v))
      throw NumericError(std::string("fd_check: non-finite loss during ") + where);
    return loss;
  };

  Tensor loss = eval("analytic pass");
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) analytic.push_back(p->grad);

  FdResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    for (std::size_t i = 0; i < p->values.size(); ++i) {
      const double orig = p->values[i];
      p->values[i] = orig + h;
      const double fp = eval("forward evaluation").value(0, 0);
      p->values[i] = orig - h;
      const double fm = eval("forward evaluation").value(0, 0);
      p->values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      if (!std::isfinite(numeric))
        throw NumericError("fd_check: non-finite difference at parameter '" + p->name + "'[" +
                           std::to_string(i) + "]");
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = p->name;
        result.worst_index = static_cast<int>(i);
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  tape.reset();
  return result;
}

}  // namespace cesaa
