#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gtc/common.hpp"

namespace gtc {

int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense row-major float32 tensor.  The grad buffer is allocated lazily by the
// compute graph; values and grad always share the shape.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> values;
  bool requires_grad = false;
  std::vector<float> grad;

  Tensor() = default;
  // zero-filled tensor of the given shape
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float v);
  static Tensor from(std::vector<int> shape, std::vector<float> v);
  static Tensor scalar(float v);

  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[size_t(i)]; }
  int64_t numel() const { return int64_t(values.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  float item() const;  // scalar access, throws unless numel()==1

  void ensure_grad();  // allocate zero-filled grad if absent
  void zero_grad();
  bool all_finite() const;
};

}  // namespace gtc
