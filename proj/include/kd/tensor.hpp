#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape);

/// Dense row-major array of 64-bit floats.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) { check(); }
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    check();
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor filled(Shape s, double value) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = value;
    return t;
  }
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t last_dim() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return shape.empty() ? 1 : numel() / shape.back(); }

  double item() const {
    if (data.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  std::span<double> row(std::size_t r) { return {data.data() + r * last_dim(), last_dim()}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * last_dim(), last_dim()};
  }

 private:
  void check() const {
    for (std::size_t extent : shape) {
      if (extent == 0) throw std::invalid_argument("tensor extents must be positive: " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
  }
};

/// Integer token matrix, usually [N, L].
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<std::int32_t> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size()) {
      throw std::invalid_argument("token data length does not match shape " + shape_str(shape));
    }
  }

  std::size_t numel() const { return data.size(); }
  std::int32_t at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
};

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace kd
