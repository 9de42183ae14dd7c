#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmt/errors.hpp"

namespace cmt {

using Index = std::int64_t;
using Shape = std::vector<Index>;

std::string to_string(const Shape& shape);

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

/// Dense row-major n-dimensional array. Every extent is >= 1 and the element
/// count equals the product of extents. A default-constructed tensor is the
/// empty sentinel (rank 0, no storage) used for absent optional parameters.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(static_cast<std::size_t>(shape_size(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (static_cast<Index>(data_.size()) != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> data)
      : Tensor(std::move(shape), std::vector<Scalar>(data)) {}

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const {
    return shape_.at(static_cast<std::size_t>(axis < 0 ? axis + rank() : axis));
  }
  Index size() const { return static_cast<Index>(data_.size()); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  template <typename... I>
  Scalar& operator()(I... idx) {
    return data_[static_cast<std::size_t>(offset({static_cast<Index>(idx)...}))];
  }
  template <typename... I>
  const Scalar& operator()(I... idx) const {
    return data_[static_cast<std::size_t>(offset({static_cast<Index>(idx)...}))];
  }

  Index offset(std::initializer_list<Index> idx) const {
    Index off = 0;
    std::size_t a = 0;
    for (Index i : idx) off = off * shape_[a++] + i;
    return off;
  }

  ArrayMap<Scalar> array() { return ArrayMap<Scalar>(data(), size()); }
  ConstArrayMap<Scalar> array() const { return ConstArrayMap<Scalar>(data(), size()); }

  /// Row-major matrix view; rows * cols must equal size().
  MatrixMap<Scalar> matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap<Scalar>(data(), rows, cols);
  }
  ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap<Scalar>(data(), rows, cols);
  }
  /// [prod(leading extents), last extent] view: the token view of [N,H,W,d].
  MatrixMap<Scalar> rows() { return matrix(size() / dim(-1), dim(-1)); }
  ConstMatrixMap<Scalar> rows() const { return matrix(size() / dim(-1), dim(-1)); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("reshape " + to_string(shape_) + " -> " + to_string(shape) +
                           " changes element count");
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (Index e : shape_) {
      if (e < 1) throw DimensionError("tensor extents must be >= 1, got " + to_string(shape_));
    }
  }
  void check_view(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw DimensionError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " of tensor " + to_string(shape_));
    }
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  return x.reshaped(std::move(shape));
}

/// out.shape[i] = x.shape[axes[i]].
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<Index>& axes);

std::vector<Index> inverse_permutation(const std::vector<Index>& axes);

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor<Scalar> out(a.shape());
  out.array() = a.array() + b.array();
  return out;
}

template <typename Scalar>
Tensor<Scalar>& operator+=(Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  a.array() += b.array();
  return a;
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("compare: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (a.size() == 0) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

/// max |a-b| / max(|b|, floor) over elements.
template <typename Scalar>
double max_rel_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b, double floor = 1e-6) {
  if (a.shape() != b.shape()) {
    throw DimensionError("compare: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double ref = static_cast<double>(b[i]);
    const double err = std::abs(static_cast<double>(a[i]) - ref) / std::max(std::abs(ref), floor);
    worst = std::max(worst, err);
  }
  return worst;
}

/// max |a-b| over max |b|: error relative to the reference's scale, so
/// near-zero entries of a well-scaled tensor do not dominate.
template <typename Scalar, typename Ref>
double rel_error(const Tensor<Scalar>& a, const Tensor<Ref>& ref) {
  if (a.shape() != ref.shape()) {
    throw DimensionError("compare: " + to_string(a.shape()) + " vs " + to_string(ref.shape()));
  }
  double err = 0.0;
  double scale = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    err = std::max(err, std::abs(static_cast<double>(a[i]) - static_cast<double>(ref[i])));
    scale = std::max(scale, std::abs(static_cast<double>(ref[i])));
  }
  return err / std::max(scale, 1e-30);
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& x) {
  return x.size() == 0 || x.array().isFinite().all();
}

}  // namespace cmt
