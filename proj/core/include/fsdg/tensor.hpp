#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fsdg/errors.hpp"
#include "fsdg/rng.hpp"

namespace fsdg {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Global arithmetic mode. F64 is the test/oracle mode; F32 rounds every op
// output through IEEE single precision (the checkpoint storage type) for
// training-speed parity experiments. Affects new values only.
enum class Precision { F64, F32 };
void set_precision(Precision p);
Precision precision();

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated on demand, same size as values
  bool requires_grad = false;  // user-marked leaf (parameter)
  bool needs_grad = false;     // leaf or downstream of one
  std::string name;            // set for parameters; used in diagnostics
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};
}  // namespace detail

// Value-semantic handle onto an immutable tensor value. Values are never
// mutated once produced by an op; parameters are updated in place by the
// optimizer between steps, outside any live tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor constant(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // requires_grad leaf
  static Tensor param(Shape shape, std::vector<double> values,
                      std::string name = "");

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }

  const std::vector<double>& values() const { return node_->values; }
  double value() const;  // scalar tensors only
  double at(std::int64_t i) const { return node_->values[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool needs_grad() const { return node_->needs_grad; }
  const std::string& name() const { return node_->name; }

  const std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // In-place access for the optimizer and for checkpoint loading. Caller
  // must guarantee no live tape references the old values.
  std::vector<double>& values_mut() { return node_->values; }
  std::vector<double>& grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
  friend class Tape;
  friend Tensor make_op(const char* op, Shape shape, std::vector<double> values,
                        const std::vector<Tensor>& inputs,
                        std::function<void()> backward);
};

// Ordered record of executed ops. Record order is topological by
// construction: an op is recorded only after its inputs exist.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return entries_.size(); }
  void clear();

  // Runs reverse accumulation from `loss`. Leaf (requires_grad) gradients
  // accumulate additively across calls; intermediate gradients are
  // recomputed from scratch on every call.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    std::shared_ptr<detail::Node> out;
    std::function<void()> backward;
    const char* op;
  };
  std::vector<Entry> entries_;
  friend Tensor make_op(const char* op, Shape shape, std::vector<double> values,
                        const std::vector<Tensor>& inputs,
                        std::function<void()> backward);
};

// RAII scope making `tape` the active tape for the current thread. With no
// active tape, ops still compute values but produce constants (no history),
// which is the inference / frozen-encoder mode.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Backward through the active tape.
void backward(const Tensor& loss);

// ---- ops ----------------------------------------------------------------
// All ops validate input shapes and throw ShapeError naming the op and the
// offending shapes. Outputs are recorded on the active tape when any input
// needs gradients.

Tensor add(const Tensor& a, const Tensor& b);  // same shape, or [m,n] + [n]
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor affine(const Tensor& t, double scale, double shift);
Tensor neg(const Tensor& t);
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]; [k]x[k,n]; [m,k]x[k]
Tensor concat(const std::vector<Tensor>& parts);  // 1-D concatenation
Tensor slice(const Tensor& t, std::int64_t start, std::int64_t len);  // 1-D
Tensor stack_rows(const std::vector<Tensor>& rows);  // k x [n] -> [k,n]
Tensor sigmoid(const Tensor& t);
Tensor tanh(const Tensor& t);
Tensor exp(const Tensor& t);
Tensor softmax(const Tensor& t);      // along last axis
Tensor log_softmax(const Tensor& t);  // along last axis
Tensor sum(const Tensor& t);   // -> scalar
Tensor mean(const Tensor& t);  // -> scalar
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
// Sum over rows of -log softmax(logits[t])[targets[t]] * mask[t].
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& mask);
// Sum over rows of KL(p_row || q_row) in nats; inputs are probabilities.
Tensor categorical_kl(const Tensor& p, const Tensor& q);
// sqrt(sum((a-b)^2)); gradient guarded at distance 0.
Tensor l2_distance(const Tensor& a, const Tensor& b);
Tensor detach(const Tensor& t);

// argmax along the last axis, ties to the lowest index (not differentiable)
std::vector<int> argmax_rows(const Tensor& t);

// ---- gradient checking ---------------------------------------------------

struct GradCheckEntry {
  std::size_t input;
  std::int64_t index;
  double analytic;
  double numeric;
  double rel_err;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool finite = true;
  bool passed = false;
  GradCheckEntry worst{};
  std::vector<GradCheckEntry> entries;  // one per checked coordinate
};

// Central finite differences against reverse-mode gradients. `f` must be a
// pure function of the given points (fix any noise before calling).
GradCheckResult grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& point, double h = 1e-5, double tolerance = 1e-4);

}  // namespace fsdg
