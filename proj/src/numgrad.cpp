#include "cityloc/numgrad.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

namespace cityloc::ng {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Array& a) {
  return ConstMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                  static_cast<Eigen::Index>(a.cols()));
}

MutMap as_mat(Array& a) {
  return MutMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                static_cast<Eigen::Index>(a.cols()));
}

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

Tape& tape_of(const DiffArray& a) {
  if (a.tape() == nullptr) throw std::logic_error("DiffArray is not attached to a tape");
  return *a.tape();
}

Tape& common_tape(const DiffArray& a, const DiffArray& b) {
  if (a.tape() != b.tape()) throw std::logic_error("operands live on different tapes");
  return tape_of(a);
}

void require_rank2(const DiffArray& a, const char* op) {
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 array, got " + shape_str(a.shape()));
  }
}

Array zeros_like(const Array& a) { return Array(a.shape(), 0.0); }

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Array -------------------------------------------------------------------

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {
  if (shape_.empty() || shape_.size() > 2) throw ShapeError("Array rank must be 1 or 2");
}

Array::Array(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_.empty() || shape_.size() > 2) throw ShapeError("Array rank must be 1 or 2");
  if (product(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Array Array::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> v;
  std::size_t n = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != n) throw ShapeError("ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Array({rows.size(), n}, std::move(v));
}

Array Array::vector(std::initializer_list<double> values) {
  return Array({values.size()}, std::vector<double>(values));
}

Array Array::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Array({n}, std::move(values));
}

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---- DiffArray / Gradients ------------------------------------------------------

const Array& DiffArray::value() const { return tape_of(*this).value(index_); }

double DiffArray::item() const {
  const Array& v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(v.shape()));
  return v[0];
}

std::optional<std::size_t> DiffArray::node_id() const {
  if (tape_ == nullptr || !tape_->requires_grad(index_)) return std::nullopt;
  return index_;
}

bool DiffArray::requires_grad() const { return tape_ && tape_->requires_grad(index_); }

Array Gradients::of(const DiffArray& x) const {
  if (auto id = x.node_id()) {
    if (const Array* g = find(*id)) return *g;
  }
  return zeros_like(x.value());
}

const Array* Gradients::find(std::size_t node_id) const {
  if (node_id >= grads_.size() || grads_[node_id].size() == 0) return nullptr;
  return &grads_[node_id];
}

// ---- Tape ------------------------------------------------------------------------

DiffArray Tape::variable(Array value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return DiffArray(this, nodes_.size() - 1);
}

DiffArray Tape::constant(Array value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, true});
  return DiffArray(this, nodes_.size() - 1);
}

DiffArray Tape::record(Array value, std::vector<DiffArray> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.tape() != this) throw std::logic_error("input recorded on a different tape");
    node.requires_grad = node.requires_grad || requires_grad(in.index());
  }
  if (node.requires_grad) {
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) node.inputs.push_back(in.index());
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return DiffArray(this, nodes_.size() - 1);
}

Gradients Tape::backward(const DiffArray& output) const {
  if (output.tape() != this) throw std::logic_error("backward: output belongs to another tape");
  const Array& out = nodes_[output.index()].value;
  if (out.size() != 1) {
    throw ShapeError("backward requires a scalar output, got " + shape_str(out.shape()));
  }
  std::vector<Array> grads(nodes_.size());
  if (!nodes_[output.index()].requires_grad) return Gradients(std::move(grads));
  grads[output.index()] = Array(out.shape(), 1.0);

  std::vector<Array*> sinks;
  for (std::size_t i = output.index() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.requires_grad || node.is_leaf || grads[i].size() == 0) continue;
    sinks.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (grads[in].size() == 0) grads[in] = zeros_like(nodes_[in].value);
      sinks[k] = &grads[in];
    }
    node.backward(grads[i], sinks);
    grads[i] = Array();
  }
  return Gradients(std::move(grads));
}

// ---- elementwise -------------------------------------------------------------

namespace {

void check_binary(const DiffArray& a, const DiffArray& b, const char* op) {
  if (a.shape() != b.shape() && b.value().size() != 1) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not broadcast-compatible");
  }
}

// Accumulates a per-element partial into the gradient of `b`, which may be a
// broadcast scalar.
inline void acc_b(Array* gb, std::size_t i, double v) {
  if (gb->size() == 1) {
    (*gb)[0] += v;
  } else {
    (*gb)[i] += v;
  }
}

inline double bval(const Array& b, std::size_t i) { return b.size() == 1 ? b[0] : b[i]; }

}  // namespace

DiffArray add(const DiffArray& a, const DiffArray& b) {
  check_binary(a, b, "add");
  Tape& t = common_tape(a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bval(bv, i);
  return t.record(std::move(out), {a, b}, [](const Array& g, std::span<Array*> gi) {
    if (gi[0]) as_mat(*gi[0]) += as_mat(g);
    if (gi[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) acc_b(gi[1], i, g[i]);
    }
  });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
  check_binary(a, b, "sub");
  Tape& t = common_tape(a, b);
  const Array& bv = b.value();
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bval(bv, i);
  return t.record(std::move(out), {a, b}, [](const Array& g, std::span<Array*> gi) {
    if (gi[0]) as_mat(*gi[0]) += as_mat(g);
    if (gi[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) acc_b(gi[1], i, -g[i]);
    }
  });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
  check_binary(a, b, "mul");
  Tape& t = common_tape(a, b);
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  const Array& bv = b.value();
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bval(bv, i);
  return t.record(std::move(out), {a, b}, [&t, ai, bi](const Array& g, std::span<Array*> gi) {
    const Array& av = t.value(ai);
    const Array& bv = t.value(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gi[0]) (*gi[0])[i] += g[i] * bval(bv, i);
      if (gi[1]) acc_b(gi[1], i, g[i] * av[i]);
    }
  });
}

DiffArray div(const DiffArray& a, const DiffArray& b) {
  check_binary(a, b, "divide");
  Tape& t = common_tape(a, b);
  const Array& bv = b.value();
  for (double v : bv.values()) {
    if (v == 0.0) throw DomainError("divide: zero divisor");
  }
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bval(bv, i);
  return t.record(std::move(out), {a, b}, [&t, ai, bi](const Array& g, std::span<Array*> gi) {
    const Array& av = t.value(ai);
    const Array& bv = t.value(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = bval(bv, i);
      if (gi[0]) (*gi[0])[i] += g[i] / d;
      if (gi[1]) acc_b(gi[1], i, -g[i] * av[i] / (d * d));
    }
  });
}

DiffArray neg(const DiffArray& a) { return scale(a, -1.0); }

DiffArray scale(const DiffArray& a, double factor) {
  Array out = a.value();
  for (double& v : out.values()) v *= factor;
  return tape_of(a).record(std::move(out), {a}, [factor](const Array& g, std::span<Array*> gi) {
    as_mat(*gi[0]) += factor * as_mat(g);
  });
}

DiffArray add_scalar(const DiffArray& a, double c) {
  Array out = a.value();
  for (double& v : out.values()) v += c;
  return tape_of(a).record(std::move(out), {a}, [](const Array& g, std::span<Array*> gi) {
    as_mat(*gi[0]) += as_mat(g);
  });
}

DiffArray exp(const DiffArray& a) {
  Array out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  auto y = std::make_shared<Array>(out);
  return tape_of(a).record(std::move(out), {a}, [y](const Array& g, std::span<Array*> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * (*y)[i];
  });
}

DiffArray log(const DiffArray& a) {
  Tape& t = tape_of(a);
  const std::size_t ai = a.index();
  Array out = a.value();
  for (double& v : out.values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
    v = std::log(v);
  }
  return t.record(std::move(out), {a}, [&t, ai](const Array& g, std::span<Array*> gi) {
    const Array& x = t.value(ai);
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] / x[i];
  });
}

DiffArray sqrt(const DiffArray& a) {
  Tape& t = tape_of(a);
  Array out = a.value();
  for (double& v : out.values()) {
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
    v = std::sqrt(v);
  }
  auto y = std::make_shared<Array>(out);
  // d/dx sqrt(x) is unbounded at 0; that point gets a zero partial.
  return t.record(std::move(out), {a}, [y](const Array& g, std::span<Array*> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*y)[i] > 0.0) (*gi[0])[i] += g[i] * 0.5 / (*y)[i];
    }
  });
}

DiffArray relu(const DiffArray& a) {
  Tape& t = tape_of(a);
  const std::size_t ai = a.index();
  Array out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return t.record(std::move(out), {a}, [&t, ai](const Array& g, std::span<Array*> gi) {
    const Array& x = t.value(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) (*gi[0])[i] += g[i];
    }
  });
}

DiffArray elementwise(ElementwiseOp op, const DiffArray& a, const std::optional<DiffArray>& b,
                      double constant) {
  auto need_b = [&]() -> const DiffArray& {
    if (!b) throw ShapeError("binary elementwise op requires a second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::kAdd: return add(a, need_b());
    case ElementwiseOp::kSub: return sub(a, need_b());
    case ElementwiseOp::kMul: return mul(a, need_b());
    case ElementwiseOp::kDivide: return div(a, need_b());
    case ElementwiseOp::kNeg: return neg(a);
    case ElementwiseOp::kExp: return exp(a);
    case ElementwiseOp::kLog: return log(a);
    case ElementwiseOp::kRelu: return relu(a);
    case ElementwiseOp::kSqrt: return sqrt(a);
    case ElementwiseOp::kScale: return scale(a, constant);
  }
  throw std::logic_error("unknown elementwise op");
}

// ---- reductions ----------------------------------------------------------------

DiffArray reduce(ReduceOp op, const DiffArray& a, int axis) {
  const Array& x = a.value();
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (axis != kAllAxes && axis != 0 && axis != 1) {
    throw ShapeError("reduce: invalid axis " + std::to_string(axis));
  }
  const std::size_t extent = axis == kAllAxes ? m * n : (axis == 0 ? m : n);
  if (extent == 0) throw ShapeError("reduce over an empty axis of " + shape_str(x.shape()));

  // Output slot and position-within-slice for each input element.
  const std::size_t out_n = axis == kAllAxes ? 1 : (axis == 0 ? n : m);
  auto slot = [axis, n](std::size_t r, std::size_t c) -> std::size_t {
    return axis == kAllAxes ? 0 : (axis == 0 ? c : r);
  };
  (void)n;

  Array out({out_n}, 0.0);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::kMax) {
    argmax.assign(out_n, std::numeric_limits<std::size_t>::max());
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const std::size_t s = slot(r, c);
        const std::size_t idx = r * n + c;
        // Traversal is in increasing index order, so strict '>' keeps the lowest index.
        if (argmax[s] == std::numeric_limits<std::size_t>::max() || x[idx] > out[s]) {
          out[s] = x[idx];
          argmax[s] = idx;
        }
      }
    }
    return tape_of(a).record(std::move(out), {a},
                             [argmax = std::move(argmax)](const Array& g, std::span<Array*> gi) {
                               for (std::size_t s = 0; s < argmax.size(); ++s) {
                                 (*gi[0])[argmax[s]] += g[s];
                               }
                             });
  }

  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[slot(r, c)] += x[r * n + c];
  }
  const double factor = op == ReduceOp::kMean ? 1.0 / static_cast<double>(extent) : 1.0;
  if (factor != 1.0) {
    for (double& v : out.values()) v *= factor;
  }
  return tape_of(a).record(std::move(out), {a},
                           [m, n, axis, factor](const Array& g, std::span<Array*> gi) {
                             Array& gx = *gi[0];
                             for (std::size_t r = 0; r < m; ++r) {
                               for (std::size_t c = 0; c < n; ++c) {
                                 const std::size_t s =
                                     axis == kAllAxes ? 0 : (axis == 0 ? c : r);
                                 gx[r * n + c] += factor * g[s];
                               }
                             }
                           });
}

DiffArray sum(const DiffArray& a, int axis) { return reduce(ReduceOp::kSum, a, axis); }
DiffArray mean(const DiffArray& a, int axis) { return reduce(ReduceOp::kMean, a, axis); }
DiffArray max(const DiffArray& a, int axis) { return reduce(ReduceOp::kMax, a, axis); }

// ---- matrix ------------------------------------------------------------------

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tape& t = common_tape(a, b);
  Array out({a.rows(), b.cols()});
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value());
  const std::size_t ai = a.index();
  const std::size_t bi = b.index();
  return t.record(std::move(out), {a, b}, [&t, ai, bi](const Array& g, std::span<Array*> gi) {
    if (gi[0]) as_mat(*gi[0]).noalias() += as_mat(g) * as_mat(t.value(bi)).transpose();
    if (gi[1]) as_mat(*gi[1]).noalias() += as_mat(t.value(ai)).transpose() * as_mat(g);
  });
}

DiffArray transpose(const DiffArray& a) {
  require_rank2(a, "transpose");
  Array out({a.cols(), a.rows()});
  as_mat(out) = as_mat(a.value()).transpose();
  return tape_of(a).record(std::move(out), {a}, [](const Array& g, std::span<Array*> gi) {
    as_mat(*gi[0]) += as_mat(g).transpose();
  });
}

DiffArray reshape(const DiffArray& a, Shape shape) {
  if (product(shape) != a.value().size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Array out(std::move(shape), a.value().values());
  return tape_of(a).record(std::move(out), {a}, [](const Array& g, std::span<Array*> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
  });
}

DiffArray add_rowvec(const DiffArray& a, const DiffArray& v) {
  if (v.value().size() != a.cols()) {
    throw ShapeError("add_rowvec: " + shape_str(v.shape()) + " does not broadcast over rows of " +
                     shape_str(a.shape()));
  }
  Tape& t = common_tape(a, v);
  Array out = a.value();
  const std::size_t n = a.cols();
  for (std::size_t r = 0, i = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c, ++i) out[i] += v.value()[c];
  }
  return t.record(std::move(out), {a, v}, [n](const Array& g, std::span<Array*> gi) {
    if (gi[0]) as_mat(*gi[0]) += as_mat(g);
    if (gi[1]) {
      Array& gv = *gi[1];
      for (std::size_t i = 0; i < g.size(); i += n) {
        for (std::size_t c = 0; c < n; ++c) gv[c] += g[i + c];
      }
    }
  });
}

DiffArray mul_rowvec(const DiffArray& a, const DiffArray& v) {
  if (v.value().size() != a.cols()) {
    throw ShapeError("mul_rowvec: " + shape_str(v.shape()) + " does not broadcast over rows of " +
                     shape_str(a.shape()));
  }
  Tape& t = common_tape(a, v);
  Array out = a.value();
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= v.value()[i % n];
  const std::size_t ai = a.index();
  const std::size_t vi = v.index();
  return t.record(std::move(out), {a, v}, [&t, ai, vi, n](const Array& g, std::span<Array*> gi) {
    const Array& av = t.value(ai);
    const Array& vv = t.value(vi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gi[0]) (*gi[0])[i] += g[i] * vv[i % n];
      if (gi[1]) (*gi[1])[i % n] += g[i] * av[i];
    }
  });
}

DiffArray concat_cols(std::span<const DiffArray> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row counts differ (" + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()) + ")");
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  Array out({m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    as_mat(out).middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(p.cols())) =
        as_mat(p.value());
    off += p.cols();
  }
  Tape& t = tape_of(parts[0]);
  std::vector<DiffArray> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), std::move(inputs),
                  [widths = std::move(widths)](const Array& g, std::span<Array*> gi) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < widths.size(); ++k) {
                      if (gi[k]) {
                        as_mat(*gi[k]) += as_mat(g).middleCols(static_cast<Eigen::Index>(off),
                                                              static_cast<Eigen::Index>(widths[k]));
                      }
                      off += widths[k];
                    }
                  });
}

DiffArray concat_rows(std::span<const DiffArray> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::size_t> heights;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw ShapeError("concat_rows: column counts differ (" + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()) + ")");
    }
    heights.push_back(p.rows());
    total += p.rows();
  }
  std::vector<double> values;
  values.reserve(total * n);
  for (const auto& p : parts) {
    values.insert(values.end(), p.value().values().begin(), p.value().values().end());
  }
  Tape& t = tape_of(parts[0]);
  std::vector<DiffArray> inputs(parts.begin(), parts.end());
  return t.record(Array({total, n}, std::move(values)), std::move(inputs),
                  [heights = std::move(heights), n](const Array& g, std::span<Array*> gi) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < heights.size(); ++k) {
                      const std::size_t len = heights[k] * n;
                      if (gi[k]) {
                        for (std::size_t i = 0; i < len; ++i) (*gi[k])[i] += g[off + i];
                      }
                      off += len;
                    }
                  });
}

DiffArray slice_cols(const DiffArray& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " +
                     shape_str(a.shape()));
  }
  Array out({a.rows(), count});
  as_mat(out) = as_mat(a.value()).middleCols(static_cast<Eigen::Index>(begin),
                                             static_cast<Eigen::Index>(count));
  return tape_of(a).record(std::move(out), {a}, [begin, count](const Array& g, std::span<Array*> gi) {
    as_mat(*gi[0]).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
        as_mat(g);
  });
}

DiffArray slice_rows(const DiffArray& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " +
                     shape_str(a.shape()));
  }
  const std::size_t n = a.cols();
  std::vector<double> values(a.value().values().begin() + static_cast<std::ptrdiff_t>(begin * n),
                             a.value().values().begin() +
                                 static_cast<std::ptrdiff_t>((begin + count) * n));
  return tape_of(a).record(Array({count, n}, std::move(values)), {a},
                           [begin, n](const Array& g, std::span<Array*> gi) {
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               (*gi[0])[begin * n + i] += g[i];
                             }
                           });
}

DiffArray element(const DiffArray& a, std::size_t r, std::size_t c) {
  if (r >= a.rows() || c >= a.cols()) {
    throw ShapeError("element (" + std::to_string(r) + ", " + std::to_string(c) +
                     ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t idx = r * a.cols() + c;
  return tape_of(a).record(Array::scalar(a.value()[idx]), {a},
                           [idx](const Array& g, std::span<Array*> gi) { (*gi[0])[idx] += g[0]; });
}

// ---- row-wise normalizers ----------------------------------------------------

DiffArray softmax_rows(const DiffArray& a) {
  const Array& x = a.value();
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  Array y = x;
  for (std::size_t r = 0; r < m; ++r) {
    double* row = y.data().data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      row[c] = std::exp(row[c] - mx);
      s += row[c];
    }
    for (std::size_t c = 0; c < n; ++c) row[c] /= s;
  }
  auto ys = std::make_shared<Array>(y);
  return tape_of(a).record(std::move(y), {a}, [ys, m, n](const Array& g, std::span<Array*> gi) {
    const Array& yv = *ys;
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * yv[r * n + c];
      for (std::size_t c = 0; c < n; ++c) {
        (*gi[0])[r * n + c] += yv[r * n + c] * (g[r * n + c] - dot);
      }
    }
  });
}

DiffArray log_softmax_rows(const DiffArray& a, const Array* mask) {
  const Array& x = a.value();
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (mask && mask->size() != x.size()) {
    throw ShapeError("log_softmax_rows: mask " + shape_str(mask->shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  auto keep = [mask](std::size_t i) { return mask == nullptr || (*mask)[i] != 0.0; };
  Array y(x.shape(), 0.0);
  auto probs = std::make_shared<Array>(x.shape(), 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (keep(r * n + c)) mx = std::max(mx, x[r * n + c]);
    }
    if (!std::isfinite(mx)) throw ShapeError("log_softmax_rows: row has no unmasked entries");
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (keep(r * n + c)) s += std::exp(x[r * n + c] - mx);
    }
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t i = r * n + c;
      if (!keep(i)) continue;
      y[i] = x[i] - lse;
      (*probs)[i] = std::exp(y[i]);
    }
  }
  std::shared_ptr<Array> mask_copy = mask ? std::make_shared<Array>(*mask) : nullptr;
  return tape_of(a).record(
      std::move(y), {a}, [probs, mask_copy, m, n](const Array& g, std::span<Array*> gi) {
        for (std::size_t r = 0; r < m; ++r) {
          double gs = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            const std::size_t i = r * n + c;
            if (!mask_copy || (*mask_copy)[i] != 0.0) gs += g[i];
          }
          for (std::size_t c = 0; c < n; ++c) {
            const std::size_t i = r * n + c;
            if (mask_copy && (*mask_copy)[i] == 0.0) continue;
            (*gi[0])[i] += g[i] - (*probs)[i] * gs;
          }
        }
      });
}

DiffArray l2_normalize_rows(const DiffArray& a) {
  const Array& x = a.value();
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  Array y = x;
  auto norms = std::make_shared<std::vector<double>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += x[r * n + c] * x[r * n + c];
    const double nr = std::sqrt(ss);
    if (nr == 0.0) throw DomainError("l2_normalize_rows: zero row " + std::to_string(r));
    (*norms)[r] = nr;
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] /= nr;
  }
  auto ys = std::make_shared<Array>(y);
  return tape_of(a).record(std::move(y), {a},
                           [ys, norms, m, n](const Array& g, std::span<Array*> gi) {
                             for (std::size_t r = 0; r < m; ++r) {
                               double dot = 0.0;
                               for (std::size_t c = 0; c < n; ++c) {
                                 dot += g[r * n + c] * (*ys)[r * n + c];
                               }
                               const double inv = 1.0 / (*norms)[r];
                               for (std::size_t c = 0; c < n; ++c) {
                                 const std::size_t i = r * n + c;
                                 (*gi[0])[i] += (g[i] - (*ys)[i] * dot) * inv;
                               }
                             }
                           });
}

DiffArray layer_norm_rows(const DiffArray& x, const DiffArray& gain, const DiffArray& bias,
                          double eps) {
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw ShapeError("layer_norm_rows: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tape& t = common_tape(x, gain);
  common_tape(x, bias);
  const Array& xv = x.value();
  auto xhat = std::make_shared<Array>(xv.shape(), 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  Array y(xv.shape(), 0.0);
  const Array& gv = gain.value();
  const Array& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xv[r * n + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = xv[r * n + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t i = r * n + c;
      (*xhat)[i] = (xv[i] - mu) * is;
      y[i] = (*xhat)[i] * gv[c] + bv[c];
    }
  }
  const std::size_t gi_idx = gain.index();
  return t.record(std::move(y), {x, gain, bias},
                  [&t, xhat, inv_std, gi_idx, m, n](const Array& g, std::span<Array*> gi) {
                    const Array& gv = t.value(gi_idx);
                    std::vector<double> gxh(n);
                    for (std::size_t r = 0; r < m; ++r) {
                      double mean_g = 0.0;
                      double mean_gx = 0.0;
                      for (std::size_t c = 0; c < n; ++c) {
                        const std::size_t i = r * n + c;
                        gxh[c] = g[i] * gv[c];
                        mean_g += gxh[c];
                        mean_gx += gxh[c] * (*xhat)[i];
                        if (gi[1]) (*gi[1])[c] += g[i] * (*xhat)[i];
                        if (gi[2]) (*gi[2])[c] += g[i];
                      }
                      if (!gi[0]) continue;
                      mean_g /= static_cast<double>(n);
                      mean_gx /= static_cast<double>(n);
                      for (std::size_t c = 0; c < n; ++c) {
                        const std::size_t i = r * n + c;
                        (*gi[0])[i] +=
                            (*inv_std)[r] * (gxh[c] - mean_g - (*xhat)[i] * mean_gx);
                      }
                    }
                  });
}

// ---- segmented (batched) ops ---------------------------------------------------

namespace {

void check_offsets(const Offsets& off, std::size_t rows, const char* op) {
  if (off.empty() || off.front() != 0 || off.back() != rows ||
      !std::is_sorted(off.begin(), off.end())) {
    throw ShapeError(std::string(op) + ": offsets do not partition " + std::to_string(rows) +
                     " rows");
  }
}

}  // namespace

DiffArray gather_rows(const DiffArray& a, const std::vector<std::size_t>& indices) {
  require_rank2(a, "gather_rows");
  const std::size_t n = a.cols();
  const Array& av = a.value();
  Array out({indices.size(), n});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= a.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(indices[r]) + " out of range for " +
                       shape_str(a.shape()));
    }
    std::copy_n(av.values().begin() + static_cast<std::ptrdiff_t>(indices[r] * n), n,
                out.values().begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return tape_of(a).record(std::move(out), {a}, [indices, n](const Array& g, std::span<Array*> gi) {
    for (std::size_t r = 0; r < indices.size(); ++r) {
      for (std::size_t c = 0; c < n; ++c) (*gi[0])[indices[r] * n + c] += g[r * n + c];
    }
  });
}

DiffArray segment_max(const DiffArray& a, const Offsets& offsets) {
  require_rank2(a, "segment_max");
  check_offsets(offsets, a.rows(), "segment_max");
  const std::size_t segs = offsets.size() - 1;
  const std::size_t n = a.cols();
  const Array& av = a.value();
  Array out({segs, n});
  auto arg = std::make_shared<std::vector<std::size_t>>(segs * n);
  for (std::size_t s = 0; s < segs; ++s) {
    if (offsets[s] == offsets[s + 1]) {
      throw ShapeError("segment_max: segment " + std::to_string(s) + " is empty");
    }
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t best = offsets[s];
      for (std::size_t r = offsets[s] + 1; r < offsets[s + 1]; ++r) {
        if (av[r * n + c] > av[best * n + c]) best = r;
      }
      (*arg)[s * n + c] = best;
      out[s * n + c] = av[best * n + c];
    }
  }
  return tape_of(a).record(std::move(out), {a}, [arg, n](const Array& g, std::span<Array*> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[(*arg)[i] * n + i % n] += g[i];
  });
}

DiffArray segment_attention(const DiffArray& q, const DiffArray& k, const DiffArray& v,
                            const Offsets& q_offsets, const Offsets& kv_offsets,
                            std::size_t heads) {
  require_rank2(q, "segment_attention");
  require_rank2(k, "segment_attention");
  require_rank2(v, "segment_attention");
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw ShapeError("segment_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()) + " are incompatible");
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("segment_attention: width " + std::to_string(d) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  check_offsets(q_offsets, q.rows(), "segment_attention");
  check_offsets(kv_offsets, k.rows(), "segment_attention");
  if (q_offsets.size() != kv_offsets.size()) {
    throw ShapeError("segment_attention: query and key segment counts differ");
  }
  Tape& t = common_tape(q, k);
  common_tape(q, v);
  const std::size_t segs = q_offsets.size() - 1;
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index w = static_cast<Eigen::Index>(dh);

  // Attention weights per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMat>>(segs * heads);
  Array out(q.shape(), 0.0);
  ConstMap Q = as_mat(q.value());
  ConstMap K = as_mat(k.value());
  ConstMap V = as_mat(v.value());
  MutMap O = as_mat(out);
  for (std::size_t s = 0; s < segs; ++s) {
    const auto q0 = static_cast<Eigen::Index>(q_offsets[s]);
    const auto nq = static_cast<Eigen::Index>(q_offsets[s + 1] - q_offsets[s]);
    const auto k0 = static_cast<Eigen::Index>(kv_offsets[s]);
    const auto nk = static_cast<Eigen::Index>(kv_offsets[s + 1] - kv_offsets[s]);
    if (nq == 0) continue;
    if (nk == 0) {
      throw ShapeError("segment_attention: segment " + std::to_string(s) + " has queries but no keys");
    }
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      RowMat scores = Q.block(q0, c0, nq, w) * K.block(k0, c0, nk, w).transpose() * inv_sqrt;
      for (Eigen::Index r = 0; r < nq; ++r) {
        const double mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      O.block(q0, c0, nq, w).noalias() = scores * V.block(k0, c0, nk, w);
      (*probs)[s * heads + h] = std::move(scores);
    }
  }
  const std::size_t qi = q.index(), ki = k.index(), vi = v.index();
  return t.record(
      std::move(out), {q, k, v},
      [&t, probs, q_offsets, kv_offsets, heads, dh, inv_sqrt, qi, ki, vi](const Array& g,
                                                                       std::span<Array*> gi) {
        ConstMap Q = as_mat(t.value(qi));
        ConstMap K = as_mat(t.value(ki));
        ConstMap V = as_mat(t.value(vi));
        ConstMap G = as_mat(g);
        const Eigen::Index w = static_cast<Eigen::Index>(dh);
        for (std::size_t s = 0; s + 1 < q_offsets.size(); ++s) {
          const auto q0 = static_cast<Eigen::Index>(q_offsets[s]);
          const auto nq = static_cast<Eigen::Index>(q_offsets[s + 1] - q_offsets[s]);
          const auto k0 = static_cast<Eigen::Index>(kv_offsets[s]);
          const auto nk = static_cast<Eigen::Index>(kv_offsets[s + 1] - kv_offsets[s]);
          if (nq == 0) continue;
          for (std::size_t h = 0; h < heads; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h * dh);
            const RowMat& A = (*probs)[s * heads + h];
            const auto Gb = G.block(q0, c0, nq, w);
            if (gi[2]) as_mat(*gi[2]).block(k0, c0, nk, w).noalias() += A.transpose() * Gb;
            if (!gi[0] && !gi[1]) continue;
            RowMat dA = Gb * V.block(k0, c0, nk, w).transpose();
            Eigen::VectorXd rs = (dA.array() * A.array()).rowwise().sum();
            RowMat dS = (A.array() * (dA.colwise() - rs).array()) * inv_sqrt;
            if (gi[0]) as_mat(*gi[0]).block(q0, c0, nq, w).noalias() += dS * K.block(k0, c0, nk, w);
            if (gi[1]) {
              as_mat(*gi[1]).block(k0, c0, nk, w).noalias() += dS.transpose() * Q.block(q0, c0, nq, w);
            }
          }
        }
      });
}

// ---- verification ------------------------------------------------------------

double grad_check(const ScalarFn& f, std::span<const Array> inputs, double h) {
  std::vector<Array> grads;
  {
    Tape tape;
    std::vector<DiffArray> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    DiffArray out = f(tape, vars);
    Gradients g = tape.backward(out);
    for (const auto& v : vars) grads.push_back(g.of(v));
  }
  auto eval = [&](const std::vector<Array>& xs) {
    Tape tape;
    std::vector<DiffArray> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return f(tape, vars).item();
  };
  std::vector<Array> work(inputs.begin(), inputs.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + h;
      const double fp = eval(work);
      work[k][i] = orig - h;
      const double fm = eval(work);
      work[k][i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::abs(grads[k][i] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double grad_check(const std::function<DiffArray(Tape&, const DiffArray&)>& f, const Array& x,
                  double h) {
  std::vector<Array> xs{x};
  return grad_check([&f](Tape& t, std::span<const DiffArray> v) { return f(t, v[0]); }, xs, h);
}

}  // namespace cityloc::ng
