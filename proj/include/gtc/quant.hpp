#pragma once

#include <cstdint>
#include <vector>

#include "gtc/rng.hpp"
#include "gtc/tensor.hpp"

namespace gtc {

// Default width of the zero band: |w| below this quantizes to zero.
inline constexpr float kDefaultEpsZero = 0x1.0p-24f;

// Per-layer quantizer parameters.  theta1 shifts the log-domain code, theta2
// scales it; both are trained jointly with the weights.
struct QuantParams {
  float theta1 = 0.0f;
  float theta2 = 1.0f;
  float eps_zero = kDefaultEpsZero;
};

// Elementwise quantization of one tensor: sign in {-1,0,+1} and an integer
// exponent per entry (exponent meaningful only where sign != 0).
struct QuantizedLayer {
  std::vector<int> shape;
  std::vector<int8_t> sign;
  std::vector<int32_t> exponent;
  int32_t min_exp = 0;      // m over nonzero entries
  int32_t max_exp = 0;      // M over nonzero entries
  int bits = 1;             // 1 + ceil(log2(M - m + 1)); 1 when all zero
  bool all_zero = false;

  int64_t numel() const { return int64_t(sign.size()); }
  // sign * 2^exponent per entry, exact powers of two
  Tensor dequantize() const;
};

// 0 when |w| < eps (strict), else the sign of w
int signum_eps(float w, float eps);

// log-domain code q(w) = theta1 + theta2*log2|w|; caller guarantees w != 0
float q_transform(float w, const QuantParams& p);

// round half away from zero
int32_t round_half_away(float q);

// one weight -> (sign, exponent); exponent valid only when sign != 0
void quantize_weight(float w, const QuantParams& p, int8_t* sign, int32_t* exponent);

// stochastic rounding variant: floor(q)+1 with probability frac(q)
void quantize_weight_stochastic(float w, const QuantParams& p, SeededRng& rng,
                                int8_t* sign, int32_t* exponent);

// whole tensor + range scan; min/max ignore zero-sign entries
QuantizedLayer quantize_tensor(const Tensor& w, const QuantParams& p);

// range stats of the union of several quantized tensors (e.g. weights+bias
// of one layer, which share QuantParams and one bit width)
struct BitRange {
  int32_t min_exp = 0;
  int32_t max_exp = 0;
  int bits = 1;
  bool all_zero = false;
};
BitRange merge_ranges(const std::vector<const QuantizedLayer*>& parts);

// sum over layers of 2^bits
double bit_cost(const std::vector<int>& bits_per_layer);

// gradients of the quantized value wrt (w, theta1, theta2) through the
// straight-through estimator; wq is the dequantized value at w
struct QuantGrad {
  float dw = 0.0f;
  float dtheta1 = 0.0f;
  float dtheta2 = 0.0f;
};
QuantGrad grad_quantize(float w, float wq, const QuantParams& p);

// pm baseline: exponent = round(log2|w|), identical to quantize with theta=(0,1)
QuantizedLayer pm_quantize(const Tensor& w, float eps_zero = kDefaultEpsZero);

}  // namespace gtc
