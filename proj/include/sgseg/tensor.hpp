#ifndef SGSEG_TENSOR_HPP
#define SGSEG_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sgseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

// Dense row-major float tensor, last axis fastest. Images and feature maps use
// channels x height x width.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_volume(shape_)) {
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " +
                                  shape_string(shape_));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 and rank-3 element access.
  float& at(std::size_t y, std::size_t x) { return data_[y * shape_[1] + x]; }
  float at(std::size_t y, std::size_t x) const {
    return data_[y * shape_[1] + x];
  }
  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  // Contiguous view of channel c of a rank-3 tensor.
  std::span<float> channel(std::size_t c) {
    const std::size_t plane = shape_[1] * shape_[2];
    return std::span<float>(data_).subspan(c * plane, plane);
  }
  std::span<const float> channel(std::size_t c) const {
    const std::size_t plane = shape_[1] * shape_[2];
    return std::span<const float>(data_).subspan(c * plane, plane);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_volume(shape) != data_.size()) {
      throw std::invalid_argument("cannot reshape " + shape_string(shape_) +
                                  " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw std::invalid_argument("tensor dimensions must be >= 1, got " +
                                    shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

// Value plus accumulated gradient of identical shape.
struct GradPair {
  explicit GradPair(Tensor v) : value(std::move(v)), grad(value.shape()) {}
  Tensor value;
  Tensor grad;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* name) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(name) + " must have rank " +
                                std::to_string(rank) + ", got shape " +
                                shape_string(t.shape()));
  }
}

}  // namespace detail

#ifndef NDEBUG
#define SGSEG_CHECK_FINITE(t)                                              \
  do {                                                                     \
    if (!(t).all_finite())                                                 \
      throw std::logic_error(std::string("non-finite value produced in ") + \
                             __func__);                                    \
  } while (0)
#else
#define SGSEG_CHECK_FINITE(t) \
  do {                        \
  } while (0)
#endif

}  // namespace sgseg

#endif  // SGSEG_TENSOR_HPP
