// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "umseg/common.hpp"

namespace umseg {

/// Tensor extents. Volumes are channel-first {C, X, Y, Z}; storage is
/// first-spatial-axis fastest with channels outermost, so a volume tensor is
/// a column-major (voxels x channels) matrix.
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense tensor with explicit shape and no broadcasting.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(Vector::Zero(shape_size(shape_))) {}
  Tensor(Shape shape, Vector values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_))
      throw ValidationError("tensor value count " + std::to_string(values_.size()) +
                            " does not match shape " + shape_string(shape_));
  }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.values_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index extent(std::size_t axis) const { return shape_.at(axis); }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return values_.size(); }
  bool empty() const { return values_.size() == 0; }

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }
  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  /// Voxel count of a channel-first volume tensor.
  Index voxels() const { return rank() <= 1 ? 1 : size() / shape_[0]; }
  Dims3 spatial() const { return Dims3(shape_.at(1), shape_.at(2), shape_.at(3)); }

  /// (voxels x channels) view of a channel-first volume.
  MatrixMap channels() { return MatrixMap(data(), voxels(), shape_.at(0)); }
  ConstMatrixMap channels() const { return ConstMatrixMap(data(), voxels(), shape_.at(0)); }

  /// Reinterprets the same values under a new shape of equal size.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), values_); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, values_.template cast<Other>());
  }

  bool all_finite() const { return values_.allFinite(); }

 private:
  Shape shape_;
  Vector values_;
};

inline Shape volume_shape(Index channels, const Dims3& d) { return {channels, d[0], d[1], d[2]}; }

}  // namespace umseg
