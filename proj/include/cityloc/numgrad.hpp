#pragma once

// Dense float64 arrays with tape-based reverse-mode differentiation.
//
// A Tape records every operation of one forward pass. DiffArray is a cheap
// handle (tape pointer + node index). Arrays created with Tape::constant do
// not participate in differentiation and report no node id. Once a tape is
// discarded all of its handles are dangling.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cityloc::ng {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Row-major float64 storage with an explicit shape (rank 1 or 2).
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> values);

  static Array scalar(double v) { return Array({1}, {v}); }
  static Array matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Array vector(std::initializer_list<double> values);
  static Array vector(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  // Rank-1 arrays behave as a single row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool all_finite() const;
  bool operator==(const Array& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

class DiffArray {
 public:
  DiffArray() = default;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;

  /// Absent for constants.
  std::optional<std::size_t> node_id() const;
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }

 private:
  friend class Tape;
  DiffArray(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Gradients of one backward pass, indexed by node id.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Array> grads) : grads_(std::move(grads)) {}

  /// Gradient w.r.t. `x` (zeros of x's shape when x did not influence the output).
  Array of(const DiffArray& x) const;
  const Array* find(std::size_t node_id) const;

 private:
  std::vector<Array> grads_;
};

class Tape {
 public:
  // Receives the output gradient and accumulates into the input gradients
  // (same order as the recorded inputs; null entries need no gradient).
  using BackwardFn = std::function<void(const Array& grad_out, std::span<Array*> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  DiffArray variable(Array value);
  DiffArray constant(Array value);
  DiffArray record(Array value, std::vector<DiffArray> inputs, BackwardFn backward);

  const Array& value(std::size_t index) const { return nodes_[index].value; }
  bool requires_grad(std::size_t index) const { return nodes_[index].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar output; each node is visited exactly once.
  Gradients backward(const DiffArray& output) const;

 private:
  struct Node {
    Array value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise -----------------------------------------------------------

enum class ElementwiseOp { kAdd, kSub, kMul, kNeg, kExp, kLog, kRelu, kScale, kDivide, kSqrt };

/// Generic entry point. Binary ops take `b` with the same shape as `a` or a
/// single element; kScale uses `constant`.
DiffArray elementwise(ElementwiseOp op, const DiffArray& a,
                      const std::optional<DiffArray>& b = std::nullopt, double constant = 1.0);

DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray div(const DiffArray& a, const DiffArray& b);
DiffArray neg(const DiffArray& a);
DiffArray exp(const DiffArray& a);
DiffArray log(const DiffArray& a);
DiffArray relu(const DiffArray& a);
DiffArray sqrt(const DiffArray& a);
DiffArray scale(const DiffArray& a, double factor);
DiffArray add_scalar(const DiffArray& a, double c);

// ---- reductions --------------------------------------------------------------

enum class ReduceOp { kSum, kMean, kMax };
inline constexpr int kAllAxes = -1;

/// axis 0 reduces over rows (one result per column), axis 1 over columns
/// (one result per row), kAllAxes to a single element. Max routes its
/// gradient to the lowest index among ties.
DiffArray reduce(ReduceOp op, const DiffArray& a, int axis = kAllAxes);
DiffArray sum(const DiffArray& a, int axis = kAllAxes);
DiffArray mean(const DiffArray& a, int axis = kAllAxes);
DiffArray max(const DiffArray& a, int axis = kAllAxes);

// ---- matrix ------------------------------------------------------------------

DiffArray matmul(const DiffArray& a, const DiffArray& b);
DiffArray transpose(const DiffArray& a);
DiffArray reshape(const DiffArray& a, Shape shape);
/// m×n plus a length-n row vector broadcast over rows.
DiffArray add_rowvec(const DiffArray& a, const DiffArray& v);
DiffArray mul_rowvec(const DiffArray& a, const DiffArray& v);
DiffArray concat_cols(std::span<const DiffArray> parts);
DiffArray concat_rows(std::span<const DiffArray> parts);
DiffArray slice_cols(const DiffArray& a, std::size_t begin, std::size_t count);
DiffArray slice_rows(const DiffArray& a, std::size_t begin, std::size_t count);
DiffArray element(const DiffArray& a, std::size_t r, std::size_t c);

// ---- row-wise normalizers ----------------------------------------------------

DiffArray softmax_rows(const DiffArray& a);
/// Optional mask (same shape, nonzero = keep) removes entries from the
/// normalizer; masked outputs are 0 and receive no gradient.
DiffArray log_softmax_rows(const DiffArray& a, const Array* mask = nullptr);
DiffArray l2_normalize_rows(const DiffArray& a);
DiffArray layer_norm_rows(const DiffArray& x, const DiffArray& gain, const DiffArray& bias,
                          double eps = 1e-5);

// ---- segmented (batched) ops -------------------------------------------------

/// Segment s covers rows [offsets[s], offsets[s+1]); offsets start at 0 and end at rows.
using Offsets = std::vector<std::size_t>;

/// Rows of `a` picked by index (repeats allowed); gradients scatter-add back.
DiffArray gather_rows(const DiffArray& a, const std::vector<std::size_t>& indices);
/// Column-wise max within each segment, one output row per segment. Empty
/// segments are rejected; ties route the gradient to the first row.
DiffArray segment_max(const DiffArray& a, const Offsets& offsets);
/// Scaled dot-product attention, heads split along columns: query rows of
/// segment s attend only to key/value rows of segment s.
DiffArray segment_attention(const DiffArray& q, const DiffArray& k, const DiffArray& v,
                            const Offsets& q_offsets, const Offsets& kv_offsets, std::size_t heads);

// ---- verification ------------------------------------------------------------

using ScalarFn = std::function<DiffArray(Tape&, std::span<const DiffArray>)>;

/// max over coordinates of |analytic - central difference| / max(1, |central difference|),
/// taken over every coordinate of every input.
double grad_check(const ScalarFn& f, std::span<const Array> inputs, double h = 1e-5);
double grad_check(const std::function<DiffArray(Tape&, const DiffArray&)>& f, const Array& x,
                  double h = 1e-5);

}  // namespace cityloc::ng
