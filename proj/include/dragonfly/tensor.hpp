#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

#include "dragonfly/errors.hpp"

namespace dragonfly {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_size(const Shape& shape);

/// Dense row-major n-dimensional array. Image batches use the N x C x H x W layout.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, Storage values);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return shape_.empty(); }

  Storage& values() noexcept { return values_; }
  const Storage& values() const noexcept { return values_; }
  Scalar* data() noexcept { return values_.data(); }
  const Scalar* data() const noexcept { return values_.data(); }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  Scalar& at(Index i, Index j) { return values_[i * shape_[1] + j]; }
  Scalar at(Index i, Index j) const { return values_[i * shape_[1] + j]; }
  Scalar& at(Index n, Index c, Index h, Index w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Row-major view with `rows * cols == size()`.
  MatrixMap matrix(Index rows, Index cols);
  ConstMatrixMap matrix(Index rows, Index cols) const;
  /// Rank-2 view; higher ranks fold trailing axes into columns.
  MatrixMap matrix() { return matrix(shape_.empty() ? 0 : shape_[0], shape_.empty() ? 0 : size() / shape_[0]); }
  ConstMatrixMap matrix() const {
    return matrix(shape_.empty() ? 0 : shape_[0], shape_.empty() ? 0 : size() / shape_[0]);
  }

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, values_.template cast<To>().eval());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.values_ == b.values_).all();
  }

 private:
  Shape shape_;
  Storage values_;
};

/// On-disk element type codes of the DFT1 format.
enum class DType : std::uint8_t { Float32 = 1, Float64 = 2, Int32 = 3 };

template <typename Scalar>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::Float32; }
template <>
constexpr DType dtype_of<double>() { return DType::Float64; }
template <>
constexpr DType dtype_of<std::int32_t>() { return DType::Int32; }

/// DFT1 layout: "DFT1", u8 dtype, u8 rank, rank x u32 LE extents, raw LE values.
template <typename Scalar>
void write_tensor(std::ostream& out, const Tensor<Scalar>& tensor);
template <typename Scalar>
void write_tensor(const std::filesystem::path& path, const Tensor<Scalar>& tensor);

/// Reads any DFT1 dtype and converts to `Scalar`.
template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& in, const std::string& origin = "<stream>");
template <typename Scalar>
Tensor<Scalar> read_tensor(const std::filesystem::path& path);

}  // namespace dragonfly
