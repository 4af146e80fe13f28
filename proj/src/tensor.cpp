#include "gtc/tensor.hpp"

#include <cmath>
#include <sstream>

namespace gtc {

int64_t numel_of(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    GTC_CHECK(d > 0, ShapeError, "tensor dims must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape) { *this = zeros(std::move(shape)); }

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  int64_t n = numel_of(shape);
  t.shape = std::move(shape);
  t.values.assign(size_t(n), 0.0f);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float v) {
  Tensor t = zeros(std::move(shape));
  for (auto& x : t.values) x = v;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> v) {
  int64_t n = numel_of(shape);
  GTC_CHECK(n == int64_t(v.size()), ShapeError,
            "value count " + std::to_string(v.size()) + " does not match shape " + shape_str(shape));
  Tensor t;
  t.shape = std::move(shape);
  t.values = std::move(v);
  return t;
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

float Tensor::item() const {
  GTC_CHECK(numel() == 1, ShapeError, "item() on non-scalar tensor " + shape_str(shape));
  return values[0];
}

void Tensor::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0f);
}

void Tensor::zero_grad() {
  for (auto& g : grad) g = 0.0f;
}

bool Tensor::all_finite() const {
  for (float v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace gtc
