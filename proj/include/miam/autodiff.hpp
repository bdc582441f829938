#pragma once

// Dense tensor engine with a reverse-mode tape. Tensors have rank 0..3; ops
// that work on matrices treat the last two axes as the matrix and any leading
// axis as a batch.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miam/errors.hpp"

namespace miam::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

template <class Real>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rows/cols of the trailing matrix, and how many such matrices.
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t batch() const;

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }
  Real& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  const Real& at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
  Real& at(std::size_t b, std::size_t i, std::size_t j) {
    return data_[(b * rows() + i) * cols() + j];
  }
  const Real& at(std::size_t b, std::size_t i, std::size_t j) const {
    return data_[(b * rows() + i) * cols() + j];
  }

  Real item() const;
  void fill(Real v);
  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kMatMul,
  kTranspose,
  kAdd,
  kScale,
  kRowSoftmax,
  kMaskedRowSoftmax,
  kRelu,
  kLeakyRelu,
  kSigmoid,
  kMeanOverAxis,
  kSum,
  kConcat,
  kSplit,
  kLayerNorm,
  kMul,
  kLog,
  kPower,
  kReshape,
  kCustom,
};

const char* to_string(OpKind kind);

template <class Real>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <class Real>
struct TapeOptions {
  /// Check every forward output for NaN/Inf.
#ifdef NDEBUG
  bool check_finite = false;
#else
  bool check_finite = true;
#endif
  /// Fault injection for self-tests: negate the incoming gradient of every
  /// node of this kind during backward.
  std::optional<OpKind> flip_backward_sign;
};

template <class Real>
class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    Tensor<Real> value;
    Tensor<Real> grad;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    // Reads this node's grad, accumulates into input grads via grad_sink().
    std::function<void(Tape&, const Node&)> backward;
  };

  Tape() = default;
  explicit Tape(TapeOptions<Real> options) : options_(std::move(options)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Real> constant(Tensor<Real> value);
  /// Leaf whose gradient is collected by backward().
  Var<Real> variable(Tensor<Real> value);

  /// Appends an op node. `backward` may be empty for non-differentiable ops.
  Var<Real> record(OpKind kind, Tensor<Real> value,
                   std::vector<std::size_t> inputs,
                   std::function<void(Tape&, const Node&)> backward);

  const Tensor<Real>& value(Var<Real> v) const { return nodes_.at(v.id).value; }
  const Tensor<Real>& value(std::size_t id) const { return nodes_.at(id).value; }
  /// Gradient after backward(); zeros when the node received none.
  Tensor<Real> grad(Var<Real> v) const;
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Accumulator for input `id`, lazily zero-initialised; nullptr when the
  /// node does not require a gradient.
  Tensor<Real>* grad_sink(std::size_t id);

  /// Seeds d(loss)/d(loss) = 1 and propagates in reverse topological order.
  void backward(Var<Real> loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const TapeOptions<Real>& options() const { return options_; }

 private:
  std::vector<Node> nodes_;
  TapeOptions<Real> options_;
  bool backward_done_ = false;
};

template <class Real>
const Tensor<Real>& Var<Real>::value() const {
  return tape->value(*this);
}

// Forward ops ---------------------------------------------------------------

/// [..,n,k] x [k,m] (shared right operand) or [B,n,k] x [B,k,m].
template <class Real> Var<Real> matmul(Var<Real> a, Var<Real> b);
/// Swaps the last two axes.
template <class Real> Var<Real> transpose(Var<Real> a);
/// Same shape, or `b` a length-cols row vector broadcast over rows.
template <class Real> Var<Real> add(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> scale(Var<Real> a, double s);
template <class Real> Var<Real> row_softmax(Var<Real> a);
/// Softmax over the last axis restricted to `key_valid` (one flag per
/// (batch, key)). Masked keys get exactly zero; a row with no valid key is
/// all zeros.
template <class Real>
Var<Real> masked_row_softmax(Var<Real> a, std::span<const std::uint8_t> key_valid);
template <class Real> Var<Real> relu(Var<Real> a);
template <class Real> Var<Real> leaky_relu(Var<Real> a, double slope);
template <class Real> Var<Real> sigmoid(Var<Real> a);
/// Mean along `axis`; the axis is removed from the shape.
template <class Real> Var<Real> mean_over_axis(Var<Real> a, std::size_t axis);
/// Sum of all elements, as a scalar.
template <class Real> Var<Real> sum(Var<Real> a);
template <class Real> Var<Real> concat_last_axis(std::span<const Var<Real>> parts);
template <class Real>
std::vector<Var<Real>> split_last_axis(Var<Real> a, std::span<const std::size_t> widths);
/// Normalises each row over the last axis to zero mean, unit variance.
template <class Real> Var<Real> layer_norm(Var<Real> a, double eps);
/// Hadamard product; `b` may be a row vector broadcast over rows.
template <class Real> Var<Real> elementwise_mul(Var<Real> a, Var<Real> b);
template <class Real> Var<Real> log(Var<Real> a);
template <class Real> Var<Real> power(Var<Real> a, double exponent);
template <class Real> Var<Real> reshape(Var<Real> a, Shape shape);

}  // namespace miam::ad
