#include "miam/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace miam::ad {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kRowSoftmax: return "row_softmax";
    case OpKind::kMaskedRowSoftmax: return "masked_row_softmax";
    case OpKind::kRelu: return "relu";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kMeanOverAxis: return "mean_over_axis";
    case OpKind::kSum: return "sum";
    case OpKind::kConcat: return "concat_last_axis";
    case OpKind::kSplit: return "split_last_axis";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kMul: return "elementwise_mul";
    case OpKind::kLog: return "log";
    case OpKind::kPower: return "power";
    case OpKind::kReshape: return "reshape";
    case OpKind::kCustom: return "custom";
  }
  return "unknown";
}

// Tensor --------------------------------------------------------------------

template <class Real>
Tensor<Real>::Tensor(Shape shape, Real fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  if (shape_.size() > 3) throw ShapeError("tensor rank above 3: " + shape_string(shape_));
}

template <class Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 3) throw ShapeError("tensor rank above 3: " + shape_string(shape_));
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("tensor data has " + std::to_string(data_.size()) +
                     " elements, shape " + shape_string(shape_) + " needs " +
                     std::to_string(shape_size(shape_)));
  }
}

template <class Real>
std::size_t Tensor<Real>::rows() const {
  return rank() >= 2 ? shape_[rank() - 2] : 1;
}

template <class Real>
std::size_t Tensor<Real>::cols() const {
  return rank() >= 1 ? shape_.back() : 1;
}

template <class Real>
std::size_t Tensor<Real>::batch() const {
  return rank() == 3 ? shape_[0] : 1;
}

template <class Real>
Real Tensor<Real>::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on tensor of shape " + shape_string(shape_));
  }
  return data_[0];
}

template <class Real>
void Tensor<Real>::fill(Real v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <class Real>
bool Tensor<Real>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](Real v) { return std::isfinite(v); });
}

template <class Real>
Tensor<Real> Tensor<Real>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

// Tape ----------------------------------------------------------------------

template <class Real>
Var<Real> Tape<Real>::constant(Tensor<Real> value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <class Real>
Var<Real> Tape<Real>::variable(Tensor<Real> value) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <class Real>
Var<Real> Tape<Real>::record(OpKind kind, Tensor<Real> value,
                             std::vector<std::size_t> inputs,
                             std::function<void(Tape&, const Node&)> backward) {
  if (backward_done_) throw ContractError("tape is closed after backward()");
  if (options_.check_finite && !value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + to_string(kind));
  }
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw ContractError("op input refers to a future node");
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <class Real>
Tensor<Real> Tape<Real>::grad(Var<Real> v) const {
  const auto& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor<Real>(n.value.shape(), Real(0));
  return n.grad;
}

template <class Real>
Tensor<Real>* Tape<Real>::grad_sink(std::size_t id) {
  auto& n = nodes_.at(id);
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() != n.value.size()) n.grad = Tensor<Real>(n.value.shape(), Real(0));
  return &n.grad;
}

template <class Real>
void Tape<Real>::backward(Var<Real> loss) {
  if (loss.tape != this) throw ContractError("loss belongs to another tape");
  auto& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_string(root.value.shape()));
  }
  if (backward_done_) throw ContractError("backward() already ran on this tape");
  backward_done_ = true;
  if (!root.requires_grad) return;
  root.grad = Tensor<Real>(root.value.shape(), Real(1));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    if (options_.flip_backward_sign && *options_.flip_backward_sign == n.kind) {
      for (auto& g : n.grad.data()) g = -g;
    }
    n.backward(*this, n);
  }
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) +
                   " and " + shape_string(b));
}

// C[n x m] += op(A) * op(B). A is n x k (or k x n when ta), B is k x m (or
// m x k when tb). Row-major throughout.
template <class Real>
void gemm(bool ta, bool tb, std::size_t n, std::size_t m, std::size_t k,
          const Real* a, const Real* b, Real* c) {
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Idx = Eigen::Index;
  const auto N = static_cast<Idx>(n), M = static_cast<Idx>(m), K = static_cast<Idx>(k);
  Eigen::Map<Mat> C(c, N, M);
  Eigen::Map<const Mat> A(a, ta ? K : N, ta ? N : K);
  Eigen::Map<const Mat> B(b, tb ? M : K, tb ? K : M);
  if (!ta && !tb) C.noalias() += A * B;
  else if (!ta) C.noalias() += A * B.transpose();
  else if (!tb) C.noalias() += A.transpose() * B;
  else C.noalias() += A.transpose() * B.transpose();
}

template <class Real>
void check_same_tape(const char* op, Var<Real> a, Var<Real> b) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw ContractError(std::string(op) + ": operands live on different tapes");
  }
}

template <class Real>
bool is_row_broadcast(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (b.size() != a.cols()) return false;
  if (b.rank() == 1) return true;
  return b.rank() == 2 && b.dim(0) == 1;
}

template <class Real, class F, class G>
Var<Real> unary(OpKind kind, Var<Real> a, F forward, G derivative) {
  const auto& x = a.value();
  Tensor<Real> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  const std::size_t in = a.id;
  return a.tape->record(kind, std::move(y), {in},
      [in, derivative](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        auto* gx = t.grad_sink(in);
        if (!gx) return;
        const auto& xv = t.value(in);
        for (std::size_t i = 0; i < xv.size(); ++i) {
          (*gx)[i] += self.grad[i] * derivative(xv[i], self.value[i]);
        }
      });
}

}  // namespace

// Ops -----------------------------------------------------------------------

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  check_same_tape("matmul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2) shape_fail("matmul", av.shape(), bv.shape());
  const std::size_t k = av.cols();
  if (bv.rows() != k) shape_fail("matmul", av.shape(), bv.shape());
  const std::size_t m = bv.cols();
  const bool shared = bv.rank() == 2;
  if (!shared && (av.rank() != 3 || av.dim(0) != bv.dim(0))) {
    shape_fail("matmul", av.shape(), bv.shape());
  }
  Shape out_shape = av.shape();
  out_shape.back() = m;
  Tensor<Real> c(out_shape);
  const std::size_t nb = shared ? 1 : av.batch();
  const std::size_t n = shared ? av.size() / k : av.rows();
  for (std::size_t b_i = 0; b_i < nb; ++b_i) {
    gemm<Real>(false, false, n, m, k, av.data().data() + b_i * n * k,
               bv.data().data() + b_i * k * m, c.data().data() + b_i * n * m);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(OpKind::kMatMul, std::move(c), {ia, ib},
      [ia, ib, nb, n, m, k](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        const auto& A = t.value(ia);
        const auto& B = t.value(ib);
        if (auto* ga = t.grad_sink(ia)) {
          for (std::size_t b_i = 0; b_i < nb; ++b_i)
            gemm<Real>(false, true, n, k, m, self.grad.data().data() + b_i * n * m,
                       B.data().data() + b_i * k * m, ga->data().data() + b_i * n * k);
        }
        if (auto* gb = t.grad_sink(ib)) {
          for (std::size_t b_i = 0; b_i < nb; ++b_i)
            gemm<Real>(true, false, k, m, n, A.data().data() + b_i * n * k,
                       self.grad.data().data() + b_i * n * m, gb->data().data() + b_i * k * m);
        }
      });
}

template <class Real>
Var<Real> transpose(Var<Real> a) {
  const auto& x = a.value();
  if (x.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_string(x.shape()));
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  const std::size_t nb = x.batch(), r = x.rows(), c = x.cols();
  Tensor<Real> y(s);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) y[(b * c + j) * r + i] = x[(b * r + i) * c + j];
  const std::size_t in = a.id;
  return a.tape->record(OpKind::kTranspose, std::move(y), {in},
      [in, nb, r, c](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              (*g)[(b * r + i) * c + j] += self.grad[(b * c + j) * r + i];
      });
}

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  check_same_tape("add", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  const bool same = x.shape() == y.shape();
  const bool bcast = !same && is_row_broadcast(x, y);
  if (!same && !bcast) shape_fail("add", x.shape(), y.shape());
  Tensor<Real> z = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += same ? y[i] : y[i % c];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(OpKind::kAdd, std::move(z), {ia, ib},
      [ia, ib, same, c](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        if (auto* ga = t.grad_sink(ia))
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
        if (auto* gb = t.grad_sink(ib)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            (*gb)[same ? i : i % c] += self.grad[i];
        }
      });
}

template <class Real>
Var<Real> scale(Var<Real> a, double s) {
  const Real k = static_cast<Real>(s);
  return unary<Real>(OpKind::kScale, a, [k](Real x) { return k * x; },
                     [k](Real, Real) { return k; });
}

namespace {

template <class Real>
Var<Real> softmax_impl(Var<Real> a, const std::uint8_t* key_valid, OpKind kind) {
  const auto& x = a.value();
  const std::size_t nb = x.batch(), r = x.rows(), c = x.cols();
  Tensor<Real> y(x.shape());
  for (std::size_t b = 0; b < nb; ++b) {
    const std::uint8_t* valid = key_valid ? key_valid + b * c : nullptr;
    for (std::size_t i = 0; i < r; ++i) {
      const Real* xi = x.data().data() + (b * r + i) * c;
      Real* yi = y.data().data() + (b * r + i) * c;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < c; ++j)
        if (!valid || valid[j]) mx = std::max(mx, xi[j]);
      if (mx == -std::numeric_limits<Real>::infinity()) continue;  // no valid key
      Real total = 0;
      for (std::size_t j = 0; j < c; ++j) {
        if (valid && !valid[j]) continue;
        yi[j] = std::exp(xi[j] - mx);
        total += yi[j];
      }
      for (std::size_t j = 0; j < c; ++j) yi[j] /= total;
    }
  }
  const std::size_t in = a.id;
  return a.tape->record(kind, std::move(y), {in},
      [in, nb, r, c](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        for (std::size_t row = 0; row < nb * r; ++row) {
          const Real* yi = self.value.data().data() + row * c;
          const Real* gy = self.grad.data().data() + row * c;
          Real dot = 0;
          for (std::size_t j = 0; j < c; ++j) dot += yi[j] * gy[j];
          Real* gx = g->data().data() + row * c;
          for (std::size_t j = 0; j < c; ++j) gx[j] += yi[j] * (gy[j] - dot);
        }
      });
}

}  // namespace

template <class Real>
Var<Real> row_softmax(Var<Real> a) {
  return softmax_impl<Real>(a, nullptr, OpKind::kRowSoftmax);
}

template <class Real>
Var<Real> masked_row_softmax(Var<Real> a, std::span<const std::uint8_t> key_valid) {
  const auto& x = a.value();
  if (key_valid.size() != x.batch() * x.cols()) {
    throw ShapeError("masked_row_softmax: key mask of length " +
                     std::to_string(key_valid.size()) + " for logits " +
                     shape_string(x.shape()));
  }
  return softmax_impl<Real>(a, key_valid.data(), OpKind::kMaskedRowSoftmax);
}

template <class Real>
Var<Real> relu(Var<Real> a) {
  return unary<Real>(OpKind::kRelu, a, [](Real x) { return x > 0 ? x : Real(0); },
                     [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

template <class Real>
Var<Real> leaky_relu(Var<Real> a, double slope) {
  const Real s = static_cast<Real>(slope);
  return unary<Real>(OpKind::kLeakyRelu, a, [s](Real x) { return x > 0 ? x : s * x; },
                     [s](Real x, Real) { return x > 0 ? Real(1) : s; });
}

template <class Real>
Var<Real> sigmoid(Var<Real> a) {
  return unary<Real>(OpKind::kSigmoid, a,
      [](Real x) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Var<Real> mean_over_axis(Var<Real> a, std::size_t axis) {
  const auto& x = a.value();
  if (axis >= x.rank()) {
    throw ShapeError("mean_over_axis: axis " + std::to_string(axis) +
                     " out of range for " + shape_string(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  Tensor<Real> y(out_shape);
  const Real inv = n ? Real(1) / static_cast<Real>(n) : Real(0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += x[(o * n + k) * inner + i];
  for (auto& v : y.data()) v *= inv;
  const std::size_t in = a.id;
  return a.tape->record(OpKind::kMeanOverAxis, std::move(y), {in},
      [in, outer, n, inner, inv](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i)
              (*g)[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
      });
}

template <class Real>
Var<Real> sum(Var<Real> a) {
  const auto& x = a.value();
  Real total = 0;
  for (auto v : x.data()) total += v;
  const std::size_t in = a.id;
  return a.tape->record(OpKind::kSum, Tensor<Real>(Shape{}, std::vector<Real>{total}), {in},
      [in](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        const Real gy = self.grad[0];
        for (auto& v : g->data()) v += gy;
      });
}

template <class Real>
Var<Real> concat_last_axis(std::span<const Var<Real>> parts) {
  if (parts.empty()) throw ShapeError("concat_last_axis: no inputs");
  const auto& first = parts[0].value();
  Shape lead = first.shape();
  lead.pop_back();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_same_tape("concat_last_axis", parts[0], p);
    Shape ps = p.value().shape();
    const std::size_t w = ps.back();
    ps.pop_back();
    if (ps != lead) shape_fail("concat_last_axis", first.shape(), p.value().shape());
    widths.push_back(w);
    ids.push_back(p.id);
    total += w;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<Real> y(out_shape);
  const std::size_t rows = shape_size(lead);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * widths[k], widths[k],
                  y.data().data() + r * total + offset);
    offset += widths[k];
  }
  return parts[0].tape->record(OpKind::kConcat, std::move(y), ids,
      [ids, widths, rows, total](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (auto* g = t.grad_sink(ids[k])) {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < widths[k]; ++j)
                (*g)[r * widths[k] + j] += self.grad[r * total + off + j];
          }
          off += widths[k];
        }
      });
}

template <class Real>
std::vector<Var<Real>> split_last_axis(Var<Real> a, std::span<const std::size_t> widths) {
  const auto& x = a.value();
  const std::size_t total = x.cols();
  if (x.rank() == 0 ||
      std::accumulate(widths.begin(), widths.end(), std::size_t{0}) != total) {
    throw ShapeError("split_last_axis: widths do not sum to last axis of " +
                     shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / total;
  // Slice everything before recording: record() may reallocate the node
  // storage that `x` refers to.
  std::vector<Tensor<Real>> parts;
  std::size_t offset = 0;
  for (auto w : widths) {
    Shape s = x.shape();
    s.back() = w;
    Tensor<Real> y(s);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(x.data().data() + r * total + offset, w, y.data().data() + r * w);
    parts.push_back(std::move(y));
    offset += w;
  }
  std::vector<Var<Real>> out;
  offset = 0;
  const std::size_t in = a.id;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const std::size_t w = widths[p];
    out.push_back(a.tape->record(OpKind::kSplit, std::move(parts[p]), {in},
        [in, rows, total, offset, w](Tape<Real>& t, const typename Tape<Real>::Node& self) {
          auto* g = t.grad_sink(in);
          if (!g) return;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) (*g)[r * total + offset + j] += self.grad[r * w + j];
        }));
    offset += w;
  }
  return out;
}

template <class Real>
Var<Real> layer_norm(Var<Real> a, double eps) {
  const auto& x = a.value();
  const std::size_t c = x.cols();
  const std::size_t rows = c ? x.size() / c : 0;
  Tensor<Real> y(x.shape());
  std::vector<Real> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xi = x.data().data() + r * c;
    Real mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<Real>(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<Real>(c);
    const Real is = Real(1) / std::sqrt(var + static_cast<Real>(eps));
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] = (xi[j] - mu) * is;
  }
  const std::size_t in = a.id;
  return a.tape->record(OpKind::kLayerNorm, std::move(y), {in},
      [in, rows, c, inv_std = std::move(inv_std)](Tape<Real>& t,
                                                  const typename Tape<Real>::Node& self) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* yi = self.value.data().data() + r * c;
          const Real* gy = self.grad.data().data() + r * c;
          Real mean_g = 0, mean_gy = 0;
          for (std::size_t j = 0; j < c; ++j) {
            mean_g += gy[j];
            mean_gy += gy[j] * yi[j];
          }
          mean_g /= static_cast<Real>(c);
          mean_gy /= static_cast<Real>(c);
          for (std::size_t j = 0; j < c; ++j)
            (*g)[r * c + j] += inv_std[r] * (gy[j] - mean_g - yi[j] * mean_gy);
        }
      });
}

template <class Real>
Var<Real> elementwise_mul(Var<Real> a, Var<Real> b) {
  check_same_tape("elementwise_mul", a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  const bool same = x.shape() == y.shape();
  const bool bcast = !same && is_row_broadcast(x, y);
  if (!same && !bcast) shape_fail("elementwise_mul", x.shape(), y.shape());
  const std::size_t c = x.cols();
  Tensor<Real> z(x.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * (same ? y[i] : y[i % c]);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(OpKind::kMul, std::move(z), {ia, ib},
      [ia, ib, same, c](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        const auto& xv = t.value(ia);
        const auto& yv = t.value(ib);
        if (auto* ga = t.grad_sink(ia))
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            (*ga)[i] += self.grad[i] * (same ? yv[i] : yv[i % c]);
        if (auto* gb = t.grad_sink(ib))
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            (*gb)[same ? i : i % c] += self.grad[i] * xv[i];
      });
}

template <class Real>
Var<Real> log(Var<Real> a) {
  return unary<Real>(OpKind::kLog, a, [](Real x) { return std::log(x); },
                     [](Real x, Real) { return Real(1) / x; });
}

template <class Real>
Var<Real> power(Var<Real> a, double exponent) {
  const Real p = static_cast<Real>(exponent);
  return unary<Real>(OpKind::kPower, a, [p](Real x) { return std::pow(x, p); },
                     [p](Real x, Real) { return p * std::pow(x, p - Real(1)); });
}

template <class Real>
Var<Real> reshape(Var<Real> a, Shape shape) {
  const auto& x = a.value();
  if (shape_size(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  const std::size_t in = a.id;
  return a.tape->record(OpKind::kReshape, x.reshaped(std::move(shape)), {in},
      [in](Tape<Real>& t, const typename Tape<Real>::Node& self) {
        auto* g = t.grad_sink(in);
        if (!g) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
      });
}

#define MIAM_INSTANTIATE(Real)                                                        \
  template class Tensor<Real>;                                                        \
  template class Tape<Real>;                                                          \
  template Var<Real> matmul(Var<Real>, Var<Real>);                                    \
  template Var<Real> transpose(Var<Real>);                                            \
  template Var<Real> add(Var<Real>, Var<Real>);                                       \
  template Var<Real> scale(Var<Real>, double);                                        \
  template Var<Real> row_softmax(Var<Real>);                                          \
  template Var<Real> masked_row_softmax(Var<Real>, std::span<const std::uint8_t>);    \
  template Var<Real> relu(Var<Real>);                                                 \
  template Var<Real> leaky_relu(Var<Real>, double);                                   \
  template Var<Real> sigmoid(Var<Real>);                                              \
  template Var<Real> mean_over_axis(Var<Real>, std::size_t);                          \
  template Var<Real> sum(Var<Real>);                                                  \
  template Var<Real> concat_last_axis(std::span<const Var<Real>>);                    \
  template std::vector<Var<Real>> split_last_axis(Var<Real>, std::span<const std::size_t>); \
  template Var<Real> layer_norm(Var<Real>, double);                                   \
  template Var<Real> elementwise_mul(Var<Real>, Var<Real>);                           \
  template Var<Real> log(Var<Real>);                                                  \
  template Var<Real> power(Var<Real>, double);                                        \
  template Var<Real> reshape(Var<Real>, Shape);

MIAM_INSTANTIATE(float)
MIAM_INSTANTIATE(double)

#undef MIAM_INSTANTIATE

}  // namespace miam::ad
