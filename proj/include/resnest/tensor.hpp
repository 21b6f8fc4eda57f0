#ifndef RESNEST_TENSOR_HPP
#define RESNEST_TENSOR_HPP

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace resnest {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised for shape, divisibility and parameter-range violations.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Mode { train, eval };

struct Pair {
  Index h = 1;
  Index w = 1;
  constexpr Pair() = default;
  constexpr Pair(Index both) : h(both), w(both) {}  // NOLINT(google-explicit-constructor)
  constexpr Pair(Index h_, Index w_) : h(h_), w(w_) {}
  friend constexpr bool operator==(const Pair&, const Pair&) = default;
};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape);

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ConfigError(message);
}

/// Dense row-major array of rank 1 to 4. Rank-4 tensors are N x C x H x W.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = Vector::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Scalar fill) : Tensor(std::move(shape)) { data_.setConstant(fill); }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : Tensor(std::move(shape)) {
    require(static_cast<Index>(values.size()) == size(),
            "tensor initializer has " + std::to_string(values.size()) + " values for shape " +
                to_string(shape_));
    std::copy(values.begin(), values.end(), data_.data());
  }

  Tensor(Shape shape, Vector values) : shape_(std::move(shape)), data_(std::move(values)) {
    validate_shape();
    require(data_.size() == shape_size(shape_), "tensor data length does not match shape " +
                                                    to_string(shape_));
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& operator()(Index n, Index c) { return data_[n * shape_[1] + c]; }
  Scalar operator()(Index n, Index c) const { return data_[n * shape_[1] + c]; }

  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Row-major matrix view over a contiguous block of the flat data.
  MatrixMap matrix(Index rows, Index cols, Index offset = 0) {
    return MatrixMap(data_.data() + offset, rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols, Index offset = 0) const {
    return ConstMatrixMap(data_.data() + offset, rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    require(shape_size(shape) == size(), "cannot reshape " + to_string(shape_) + " to " +
                                             to_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>().eval());
  }

  void fill(Scalar value) { data_.setConstant(value); }
  void set_zero() { data_.setZero(); }

  Tensor& operator+=(const Tensor& other) {
    require(shape_ == other.shape_, "tensor add shape mismatch " + to_string(shape_) + " vs " +
                                        to_string(other.shape_));
    data_ += other.data_;
    return *this;
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  void validate_shape() const {
    require(!shape_.empty() && shape_.size() <= 4,
            "tensor rank must be 1..4, got " + std::to_string(shape_.size()));
    for (Index extent : shape_) {
      require(extent >= 1, "tensor extents must be >= 1, got " + to_string(shape_));
    }
  }

  Shape shape_;
  Vector data_;
};

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require(a.shape() == b.shape(),
          "max_abs_diff shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return (a.vec() - b.vec()).cwiseAbs().maxCoeff();
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace resnest

#endif  // RESNEST_TENSOR_HPP
