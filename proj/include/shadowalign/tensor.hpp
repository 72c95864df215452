#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace shadowalign {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float32 tensor. No batch dimension: every op in the library
// works on a single record.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.0f);
  Tensor(Shape s, std::vector<float> values);

  static Tensor vector(std::initializer_list<float> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool empty() const { return data.empty(); }

  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  std::span<float> values() { return data; }
  std::span<const float> values() const { return data; }

  bool all_finite() const;
  Tensor reshaped(Shape s) const;
};

// Bitwise equality of shape and payload (distinguishes -0.0f and 0.0f).
bool bit_equal(const Tensor& a, const Tensor& b);

float max_abs_diff(const Tensor& a, const Tensor& b);
double squared_distance(std::span<const float> a, std::span<const float> b);

}  // namespace shadowalign
