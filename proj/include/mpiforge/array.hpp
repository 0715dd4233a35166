#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpiforge {

// Dense row-major array of doubles with a runtime shape. The last axis is
// contiguous. Every volumetric quantity in the library is one of these with a
// documented axis order.
class Array {
 public:
  Array() = default;
  explicit Array(std::vector<std::size_t> shape, double fill = 0.0);

  [[nodiscard]] const std::vector<std::size_t>& shape() const { return shape_; }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  [[nodiscard]] std::size_t rank() const { return shape_.size(); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] double* data() { return data_.data(); }
  [[nodiscard]] const double* data() const { return data_.data(); }
  [[nodiscard]] std::span<double> values() { return data_; }
  [[nodiscard]] std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <class... Index>
  double& operator()(Index... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <class... Index>
  double operator()(Index... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  // Row-major offset of a full index tuple.
  [[nodiscard]] std::size_t offset(std::initializer_list<std::size_t> idx) const;

  // Number of elements in one slice along the leading axis.
  [[nodiscard]] std::size_t stride0() const;

  void fill(double v);
  [[nodiscard]] bool same_shape(const Array& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Array&, const Array&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

inline void require(bool condition, const std::string& message) {
  if (!condition) throw std::domain_error(message);
}

}  // namespace mpiforge
