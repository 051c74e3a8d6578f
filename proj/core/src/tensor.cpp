#include "fsdg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace fsdg {

namespace {

std::atomic<Precision> g_precision{Precision::F64};
thread_local Tape* t_active_tape = nullptr;

void round_f32(std::vector<double>& values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  throw ShapeError(os.str());
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const char* what) {
  std::ostringstream os;
  os << op << ": " << what << " (got " << shape_str(a) << ")";
  throw ShapeError(os.str());
}

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values) {
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("tensor: value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  for (auto d : shape)
    if (d <= 0) throw ShapeError("tensor: nonpositive dimension in " + shape_str(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  return node;
}

using NodePtr = std::shared_ptr<detail::Node>;

// rows/cols view of the last axis; leading axes flattened
std::pair<std::int64_t, std::int64_t> rows_cols(const Shape& s) {
  if (s.empty()) return {1, 1};
  std::int64_t cols = s.back();
  std::int64_t rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return {rows, cols};
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void set_precision(Precision p) { g_precision.store(p); }
Precision precision() { return g_precision.load(); }

Tape* active_tape() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) {
  t_active_tape = &tape;
}
TapeScope::~TapeScope() { t_active_tape = previous_; }

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return constant(std::move(shape), 0.0); }

Tensor Tensor::constant(Shape shape, double value) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)), value);
  return Tensor(new_node(std::move(shape), std::move(v)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(new_node(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::param(Shape shape, std::vector<double> values, std::string name) {
  Tensor t(new_node(std::move(shape), std::move(values)));
  t.node_->requires_grad = true;
  t.node_->needs_grad = true;
  t.node_->name = std::move(name);
  return t;
}

double Tensor::value() const {
  if (size() != 1) throw ShapeError("value(): tensor is not scalar, shape " + shape_str(shape()));
  return node_->values[0];
}

// ---- op plumbing ------------------------------------------------------------

Tensor make_op(const char* op, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs,
               std::function<void(const detail::Node&)> backward) {
  if (precision() == Precision::F32) round_f32(values);
  auto node = new_node(std::move(shape), std::move(values));
  if (t_active_tape != nullptr) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.needs_grad();
    if (needs) {
      node->needs_grad = true;
      t_active_tape->record(node, std::move(backward), op);
    }
  }
  return Tensor(node);
}

void Tape::record(std::shared_ptr<detail::Node> out,
                  std::function<void(const detail::Node&)> backward, const char* op) {
  entries_.push_back({std::move(out), std::move(backward), op});
}

void Tape::clear() { entries_.clear(); }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (entries_.empty()) throw ConfigError("backward: tape is empty");
  // Intermediates restart from zero on every call; leaves keep accumulating,
  // so calling backward twice doubles exactly the leaf gradients.
  for (auto& e : entries_) {
    if (!e.out->requires_grad) {
      e.out->ensure_grad();
      std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
    }
  }
  auto loss_node = loss.node();
  loss_node->ensure_grad();
  loss_node->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
    it->backward(*it->out);
}

void backward(const Tensor& loss) {
  if (t_active_tape == nullptr) throw ConfigError("backward: no active tape");
  t_active_tape->backward(loss);
}

namespace {

void accumulate(const NodePtr& n, const double* delta, std::size_t count) {
  if (!n->needs_grad) return;
  n->ensure_grad();
  for (std::size_t i = 0; i < count; ++i) n->grad[i] += delta[i];
}

}  // namespace

// ---- elementwise ops --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
    auto an = a.node(), bn = b.node();
    return make_op("add", a.shape(), std::move(out), {a, b},
                   [an, bn](const detail::Node& o) {
                     accumulate(an, o.grad.data(), o.grad.size());
                     accumulate(bn, o.grad.data(), o.grad.size());
                   });
  }
  if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) {
    const std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.values());
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        out[static_cast<std::size_t>(i * n + j)] += b.at(j);
    auto an = a.node(), bn = b.node();
    return make_op("add", a.shape(), std::move(out), {a, b},
                   [an, bn, m, n](const detail::Node& o) {
                     accumulate(an, o.grad.data(), o.grad.size());
                     if (bn->needs_grad) {
                       bn->ensure_grad();
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t j = 0; j < n; ++j)
                           bn->grad[static_cast<std::size_t>(j)] +=
                               o.grad[static_cast<std::size_t>(i * n + j)];
                     }
                   });
  }
  shape_fail("add", a.shape(), b.shape());
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_op("sub", a.shape(), std::move(out), {a, b},
                 [an, bn](const detail::Node& o) {
                   accumulate(an, o.grad.data(), o.grad.size());
                   if (bn->needs_grad) {
                     bn->ensure_grad();
                     for (std::size_t i = 0; i < o.grad.size(); ++i)
                       bn->grad[i] -= o.grad[i];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_op("mul", a.shape(), std::move(out), {a, b},
                 [an, bn](const detail::Node& o) {
                   if (an->needs_grad) {
                     an->ensure_grad();
                     for (std::size_t i = 0; i < o.grad.size(); ++i)
                       an->grad[i] += o.grad[i] * bn->values[i];
                   }
                   if (bn->needs_grad) {
                     bn->ensure_grad();
                     for (std::size_t i = 0; i < o.grad.size(); ++i)
                       bn->grad[i] += o.grad[i] * an->values[i];
                   }
                 });
}

Tensor affine(const Tensor& t, double scale, double shift) {
  std::vector<double> out(t.values());
  for (double& v : out) v = scale * v + shift;
  auto tn = t.node();
  return make_op("affine", t.shape(), std::move(out), {t},
                 [tn, scale](const detail::Node& o) {
                   if (tn->needs_grad) {
                     tn->ensure_grad();
                     for (std::size_t i = 0; i < o.grad.size(); ++i)
                       tn->grad[i] += scale * o.grad[i];
                   }
                 });
}

Tensor neg(const Tensor& t) { return affine(t, -1.0, 0.0); }

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  // normalize to 2-D and remember which axes to drop
  const bool a_vec = a.rank() == 1;
  const bool b_vec = b.rank() == 1;
  if (a.rank() > 2 || b.rank() > 2 || a.rank() == 0 || b.rank() == 0)
    shape_fail("matmul", a.shape(), b.shape());
  const std::int64_t m = a_vec ? 1 : a.dim(0);
  const std::int64_t k = a_vec ? a.dim(0) : a.dim(1);
  const std::int64_t k2 = b_vec ? b.dim(0) : b.dim(0);
  const std::int64_t n = b_vec ? 1 : b.dim(1);
  if (k != k2) shape_fail("matmul", a.shape(), b.shape());

  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i * k + p)];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }

  Shape out_shape;
  if (!a_vec) out_shape.push_back(m);
  if (!b_vec) out_shape.push_back(n);
  if (a_vec && b_vec) out_shape = {};  // dot product -> scalar

  auto an = a.node(), bn = b.node();
  return make_op("matmul", std::move(out_shape), std::move(out), {a, b},
                 [an, bn, m, n, k](const detail::Node& o) {
                   // dA = dC B^T ; dB = A^T dC
                   if (an->needs_grad) {
                     an->ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i)
                       for (std::int64_t p = 0; p < k; ++p) {
                         double acc = 0.0;
                         const double* grow = o.grad.data() + i * n;
                         const double* brow = bn->values.data() + p * n;
                         for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                         an->grad[static_cast<std::size_t>(i * k + p)] += acc;
                       }
                   }
                   if (bn->needs_grad) {
                     bn->ensure_grad();
                     for (std::int64_t p = 0; p < k; ++p)
                       for (std::int64_t i = 0; i < m; ++i) {
                         const double aip = an->values[static_cast<std::size_t>(i * k + p)];
                         if (aip == 0.0) continue;
                         const double* grow = o.grad.data() + i * n;
                         double* brow = bn->grad.data() + p * n;
                         for (std::int64_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                       }
                   }
                 });
}

// ---- structural ops -----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<double> out;
  std::vector<std::int64_t> offsets;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 1) shape_fail("concat", p.shape(), "expects 1-D inputs");
    offsets.push_back(total);
    total += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_op("concat", {total}, std::move(out), parts,
                 [nodes, offsets](const detail::Node& o) {
                   for (std::size_t i = 0; i < nodes.size(); ++i) {
                     auto& n = nodes[i];
                     if (!n->needs_grad) continue;
                     n->ensure_grad();
                     const double* src = o.grad.data() + offsets[i];
                     for (std::size_t j = 0; j < n->values.size(); ++j)
                       n->grad[j] += src[j];
                   }
                 });
}

Tensor slice(const Tensor& t, std::int64_t start, std::int64_t len) {
  if (t.rank() != 1) shape_fail("slice", t.shape(), "expects a 1-D input");
  if (start < 0 || len <= 0 || start + len > t.dim(0))
    shape_fail("slice", t.shape(), "range out of bounds");
  std::vector<double> out(t.values().begin() + start, t.values().begin() + start + len);
  auto tn = t.node();
  return make_op("slice", {len}, std::move(out), {t},
                 [tn, start](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   for (std::size_t j = 0; j < o.grad.size(); ++j)
                     tn->grad[static_cast<std::size_t>(start) + j] += o.grad[j];
                 });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no inputs");
  const std::int64_t n = rows.front().rank() == 1 ? rows.front().dim(0) : -1;
  if (n < 0) shape_fail("stack_rows", rows.front().shape(), "expects 1-D rows");
  std::vector<double> out;
  out.reserve(rows.size() * static_cast<std::size_t>(n));
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.dim(0) != n) shape_fail("stack_rows", rows.front().shape(), r.shape());
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  std::vector<NodePtr> nodes;
  for (const auto& r : rows) nodes.push_back(r.node());
  return make_op("stack_rows", {static_cast<std::int64_t>(rows.size()), n}, std::move(out),
                 rows, [nodes, n](const detail::Node& o) {
                   for (std::size_t i = 0; i < nodes.size(); ++i) {
                     auto& r = nodes[i];
                     if (!r->needs_grad) continue;
                     r->ensure_grad();
                     const double* src = o.grad.data() + static_cast<std::int64_t>(i) * n;
                     for (std::int64_t j = 0; j < n; ++j)
                       r->grad[static_cast<std::size_t>(j)] += src[j];
                   }
                 });
}

// ---- nonlinearities ------------------------------------------------------------

Tensor sigmoid(const Tensor& t) {
  std::vector<double> out(t.values());
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  auto tn = t.node();
  return make_op("sigmoid", t.shape(), std::move(out), {t},
                 [tn](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   for (std::size_t i = 0; i < o.grad.size(); ++i) {
                     const double y = o.values[i];
                     tn->grad[i] += o.grad[i] * y * (1.0 - y);
                   }
                 });
}

Tensor tanh(const Tensor& t) {
  std::vector<double> out(t.values());
  for (double& v : out) v = std::tanh(v);
  auto tn = t.node();
  return make_op("tanh", t.shape(), std::move(out), {t},
                 [tn](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   for (std::size_t i = 0; i < o.grad.size(); ++i) {
                     const double y = o.values[i];
                     tn->grad[i] += o.grad[i] * (1.0 - y * y);
                   }
                 });
}

Tensor exp(const Tensor& t) {
  std::vector<double> out(t.values());
  for (double& v : out) v = std::exp(v);
  auto tn = t.node();
  return make_op("exp", t.shape(), std::move(out), {t},
                 [tn](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                     tn->grad[i] += o.grad[i] * o.values[i];
                 });
}

Tensor softmax(const Tensor& t) {
  const auto [rows, cols] = rows_cols(t.shape());
  std::vector<double> out(t.values());
  for (std::int64_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    double mx = row[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::int64_t j = 0; j < cols; ++j) row[j] /= z;
  }
  auto tn = t.node();
  const std::int64_t R = rows, C = cols;
  return make_op("softmax", t.shape(), std::move(out), {t},
                 [tn, R, C](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   for (std::int64_t r = 0; r < R; ++r) {
                     const double* y = o.values.data() + r * C;
                     const double* g = o.grad.data() + r * C;
                     double dot = 0.0;
                     for (std::int64_t j = 0; j < C; ++j) dot += y[j] * g[j];
                     double* out_g = tn->grad.data() + r * C;
                     for (std::int64_t j = 0; j < C; ++j)
                       out_g[j] += y[j] * (g[j] - dot);
                   }
                 });
}

Tensor log_softmax(const Tensor& t) {
  const auto [rows, cols] = rows_cols(t.shape());
  std::vector<double> out(t.values());
  for (std::int64_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    double mx = row[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::int64_t j = 0; j < cols; ++j) row[j] -= lz;
  }
  auto tn = t.node();
  const std::int64_t R = rows, C = cols;
  return make_op("log_softmax", t.shape(), std::move(out), {t},
                 [tn, R, C](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   for (std::int64_t r = 0; r < R; ++r) {
                     const double* y = o.values.data() + r * C;
                     const double* g = o.grad.data() + r * C;
                     double gsum = 0.0;
                     for (std::int64_t j = 0; j < C; ++j) gsum += g[j];
                     double* out_g = tn->grad.data() + r * C;
                     for (std::int64_t j = 0; j < C; ++j)
                       out_g[j] += g[j] - std::exp(y[j]) * gsum;
                   }
                 });
}

// ---- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  auto tn = t.node();
  return make_op("sum", {}, {acc}, {t},
                 [tn](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   for (double& g : tn->grad) g += o.grad[0];
                 });
}

Tensor mean(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(t.size());
  auto tn = t.node();
  return make_op("mean", {}, {acc * inv}, {t},
                 [tn, inv](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   for (double& g : tn->grad) g += o.grad[0] * inv;
                 });
}

// ---- lookup / losses ---------------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) shape_fail("embedding_lookup", table.shape(), "table must be 2-D");
  const std::int64_t V = table.dim(0), E = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  std::vector<double> out;
  out.reserve(ids.size() * static_cast<std::size_t>(E));
  for (int id : ids) {
    if (id < 0 || id >= V)
      throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                       " out of range for table " + shape_str(table.shape()));
    const double* row = table.values().data() + static_cast<std::int64_t>(id) * E;
    out.insert(out.end(), row, row + E);
  }
  auto tn = table.node();
  return make_op("embedding_lookup", {static_cast<std::int64_t>(ids.size()), E},
                 std::move(out), {table},
                 [tn, ids, E](const detail::Node& o) {
                   if (!tn->needs_grad) return;
                   tn->ensure_grad();
                   // row-sparse accumulation: only looked-up rows are touched
                   for (std::size_t i = 0; i < ids.size(); ++i) {
                     double* dst = tn->grad.data() + static_cast<std::int64_t>(ids[i]) * E;
                     const double* src = o.grad.data() + static_cast<std::int64_t>(i) * E;
                     for (std::int64_t j = 0; j < E; ++j) dst[j] += src[j];
                   }
                 });
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& mask) {
  if (logits.rank() != 2) shape_fail("masked_cross_entropy", logits.shape(), "logits must be 2-D");
  const std::int64_t T = logits.dim(0), V = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != T ||
      static_cast<std::int64_t>(mask.size()) != T)
    shape_fail("masked_cross_entropy", logits.shape(), "targets/mask length must match rows");
  // forward: stable log-softmax per row, pick target
  std::vector<double> logp(static_cast<std::size_t>(T * V));
  double loss = 0.0;
  for (std::int64_t t = 0; t < T; ++t) {
    const int tgt = targets[static_cast<std::size_t>(t)];
    if (tgt < 0 || tgt >= V)
      throw ShapeError("masked_cross_entropy: target " + std::to_string(tgt) +
                       " out of range for logits " + shape_str(logits.shape()));
    const double* row = logits.values().data() + t * V;
    double mx = row[0];
    for (std::int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::int64_t j = 0; j < V; ++j)
      logp[static_cast<std::size_t>(t * V + j)] = row[j] - lz;
    loss -= mask[static_cast<std::size_t>(t)] *
            logp[static_cast<std::size_t>(t * V + tgt)];
  }
  auto ln = logits.node();
  auto logp_ptr = std::make_shared<std::vector<double>>(std::move(logp));
  return make_op("masked_cross_entropy", {}, {loss}, {logits},
                 [ln, targets, mask, logp_ptr, T, V](const detail::Node& o) {
                   if (!ln->needs_grad) return;
                   ln->ensure_grad();
                   const double g = o.grad[0];
                   for (std::int64_t t = 0; t < T; ++t) {
                     const double m = mask[static_cast<std::size_t>(t)];
                     if (m == 0.0) continue;
                     double* dst = ln->grad.data() + t * V;
                     const double* lp = logp_ptr->data() + t * V;
                     const int tgt = targets[static_cast<std::size_t>(t)];
                     for (std::int64_t j = 0; j < V; ++j)
                       dst[j] += g * m * std::exp(lp[j]);
                     dst[tgt] -= g * m;
                   }
                 });
}

namespace {
constexpr double kKlFloor = 1e-12;  // log() clamp; documented in the header
}

Tensor categorical_kl(const Tensor& p, const Tensor& q) {
  require_same_shape("categorical_kl", p, q);
  const auto [rows, cols] = rows_cols(p.shape());
  double acc = 0.0;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < cols; ++j) {
      const double pv = p.at(r * cols + j);
      const double qv = q.at(r * cols + j);
      if (pv <= 0.0) continue;  // 0 * log 0 = 0
      acc += pv * (std::log(std::max(pv, kKlFloor)) - std::log(std::max(qv, kKlFloor)));
    }
  auto pn = p.node(), qn = q.node();
  return make_op("categorical_kl", {}, {acc}, {p, q},
                 [pn, qn](const detail::Node& o) {
                   const double g = o.grad[0];
                   for (std::size_t i = 0; i < pn->values.size(); ++i) {
                     const double pv = std::max(pn->values[i], kKlFloor);
                     const double qv = std::max(qn->values[i], kKlFloor);
                     if (pn->needs_grad) {
                       pn->ensure_grad();
                       pn->grad[i] += g * (std::log(pv) - std::log(qv) + 1.0);
                     }
                     if (qn->needs_grad) {
                       qn->ensure_grad();
                       qn->grad[i] -= g * pv / qv;
                     }
                   }
                 });
}

Tensor l2_distance(const Tensor& a, const Tensor& b) {
  require_same_shape("l2_distance", a, b);
  double ss = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    ss += d * d;
  }
  const double dist = std::sqrt(ss);
  auto an = a.node(), bn = b.node();
  return make_op("l2_distance", {}, {dist}, {a, b},
                 [an, bn, dist](const detail::Node& o) {
                   const double denom = std::max(dist, 1e-12);
                   const double g = o.grad[0] / denom;
                   for (std::size_t i = 0; i < an->values.size(); ++i) {
                     const double d = an->values[i] - bn->values[i];
                     if (an->needs_grad) {
                       an->ensure_grad();
                       an->grad[i] += g * d;
                     }
                     if (bn->needs_grad) {
                       bn->ensure_grad();
                       bn->grad[i] -= g * d;
                     }
                   }
                 });
}

Tensor detach(const Tensor& t) {
  return Tensor::from(t.shape(), t.values());
}

std::vector<int> argmax_rows(const Tensor& t) {
  const auto [rows, cols] = rows_cols(t.shape());
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    int best = 0;
    double bv = t.at(r * cols);
    for (std::int64_t j = 1; j < cols; ++j) {
      const double v = t.at(r * cols + j);
      if (v > bv) {  // strict: ties break to the lowest index
        bv = v;
        best = static_cast<int>(j);
      }
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

// ---- grad_check -------------------------------------------------------------------

GradCheckResult grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& point, double h, double tolerance) {
  if (h <= 0.0) throw ConfigError("grad_check: h must be positive");
  GradCheckResult result;

  // leaf copies of the point so gradients land somewhere we own
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point) leaves.push_back(Tensor::param(p.shape(), p.values()));

  double base;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = f(leaves);
    if (out.size() != 1) throw ShapeError("grad_check: function must return a scalar");
    base = out.value();
    tape.backward(out);
  }
  if (!std::isfinite(base)) result.finite = false;

  auto eval = [&](std::size_t which, std::int64_t idx, double v) {
    const double saved = leaves[which].values()[static_cast<std::size_t>(idx)];
    leaves[which].values_mut()[static_cast<std::size_t>(idx)] = v;
    const Tensor out = f(leaves);  // no tape: forward only
    leaves[which].values_mut()[static_cast<std::size_t>(idx)] = saved;
    return out.value();
  };

  for (std::size_t which = 0; which < leaves.size(); ++which) {
    auto& leaf = leaves[which];
    for (std::int64_t idx = 0; idx < leaf.size(); ++idx) {
      const double x = leaf.values()[static_cast<std::size_t>(idx)];
      const double fp = eval(which, idx, x + h);
      const double fm = eval(which, idx, x - h);
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = leaf.grad()[static_cast<std::size_t>(idx)];
      const double denom = std::max({std::fabs(analytic) + std::fabs(numeric), 1e-8});
      const double rel = std::fabs(analytic - numeric) / denom;
      GradCheckEntry entry{which, idx, analytic, numeric, rel};
      result.entries.push_back(entry);
      if (!std::isfinite(analytic) || !std::isfinite(numeric)) result.finite = false;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst = entry;
      }
    }
  }
  result.passed = result.finite && result.max_rel_err <= tolerance;
  return result;
}

}  // namespace fsdg
