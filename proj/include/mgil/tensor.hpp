#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace mgil {

/// Raised when an operation's preconditions do not hold (shape, geometry,
/// argument domain). The message names the offending dimension or value.
class ContractViolation : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// An op received NaN or infinity where it needs finite input.
class NonFiniteInput : public ContractViolation {
public:
  using ContractViolation::ContractViolation;
};

/// Batch x channels x height x width.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense rank-4 tensor in N,C,H,W row-major order with an optional gradient
/// buffer of identical length.
template <typename Scalar>
class Tensor {
public:
  using value_type = Scalar;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using ArrayMap = Eigen::Map<Array>;
  using ConstArrayMap = Eigen::Map<const Array>;
  /// Buffers start on Eigen's maximum alignment. Vectorized Eigen reductions
  /// peel elements up to the first aligned address, so a fixed base alignment
  /// keeps every result independent of where the heap placed the tensor.
  using Storage = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, const std::vector<Scalar>& data) : shape_(shape), data_(data.begin(), data.end()) {
    if (data_.size() != shape_.size()) {
      throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }

  ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstArrayMap array() const {
    return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  Scalar operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  /// Pointer to the contiguous H x W plane of (n, c).
  Scalar* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const Scalar* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  bool has_grad() const { return !grad_.empty(); }
  void ensure_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), Scalar(0));
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), Scalar(0)); }
  void drop_grad() { grad_.clear(); }
  std::span<Scalar> grad() { return grad_; }
  std::span<const Scalar> grad() const { return grad_; }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same shape, same values, reinterpreted in another scalar type. Gradient
  /// buffers are not carried over.
  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return Tensor<Other>(shape_, std::move(out));
  }

private:
  Shape shape_;
  Storage data_;
  Storage grad_;
};

/// Shape and every value agree bit for bit.
template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

void require(bool condition, const std::string& message);

extern template bool bitwise_equal(const Tensor<float>&, const Tensor<float>&);
extern template bool bitwise_equal(const Tensor<double>&, const Tensor<double>&);
extern template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
extern template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace mgil
