#include "gtc/quant.hpp"

#include <cmath>

namespace gtc {

namespace {
constexpr double kLn2 = 0.6931471805599453;
// guard llround against UB on wild theta values; exponents this large are
// already far outside anything exportable
constexpr float kExpClamp = 1.0e7f;
}  // namespace

int signum_eps(float w, float eps) {
  if (std::fabs(w) < eps) return 0;
  return std::signbit(w) ? -1 : 1;
}

float q_transform(float w, const QuantParams& p) {
  return p.theta1 + p.theta2 * std::log2(std::fabs(w));
}

int32_t round_half_away(float q) {
  if (std::isnan(q)) return 0;  // diverged runs are caught by finiteness checks
  if (q > kExpClamp) q = kExpClamp;
  if (q < -kExpClamp) q = -kExpClamp;
  return int32_t(std::llround(q));  // llround ties go away from zero
}

void quantize_weight(float w, const QuantParams& p, int8_t* sign, int32_t* exponent) {
  const int s = signum_eps(w, p.eps_zero);
  *sign = int8_t(s);
  *exponent = s == 0 ? 0 : round_half_away(q_transform(w, p));
}

void quantize_weight_stochastic(float w, const QuantParams& p, SeededRng& rng,
                                int8_t* sign, int32_t* exponent) {
  const int s = signum_eps(w, p.eps_zero);
  *sign = int8_t(s);
  if (s == 0) {
    *exponent = 0;
    return;
  }
  float q = q_transform(w, p);
  if (q > kExpClamp) q = kExpClamp;
  if (q < -kExpClamp) q = -kExpClamp;
  const float lo = std::floor(q);
  const float frac = q - lo;
  *exponent = int32_t(lo) + (rng.uniform() < double(frac) ? 1 : 0);
}

Tensor QuantizedLayer::dequantize() const {
  Tensor t = Tensor::zeros(shape);
  for (size_t i = 0; i < sign.size(); ++i)
    if (sign[i] != 0) t.values[i] = float(sign[i]) * std::ldexp(1.0f, exponent[i]);
  return t;
}

namespace {
// shared scan: fills range stats from (sign, exponent) arrays
void scan_range(const std::vector<int8_t>& sign, const std::vector<int32_t>& exponent,
                int32_t* mn, int32_t* mx, bool* all_zero) {
  bool seen = false;
  int32_t lo = 0, hi = 0;
  for (size_t i = 0; i < sign.size(); ++i) {
    if (sign[i] == 0) continue;
    if (!seen) {
      lo = hi = exponent[i];
      seen = true;
    } else {
      if (exponent[i] < lo) lo = exponent[i];
      if (exponent[i] > hi) hi = exponent[i];
    }
  }
  *all_zero = !seen;
  *mn = seen ? lo : 0;
  *mx = seen ? hi : 0;
}

int bits_for_range(int32_t mn, int32_t mx, bool all_zero) {
  if (all_zero) return 1;  // sign bit only
  return 1 + ceil_log2(uint64_t(int64_t(mx) - int64_t(mn) + 1));
}
}  // namespace

QuantizedLayer quantize_tensor(const Tensor& w, const QuantParams& p) {
  GTC_CHECK(p.eps_zero > 0.0f, NumericError, "eps_zero must be positive");
  QuantizedLayer q;
  q.shape = w.shape;
  const size_t n = w.values.size();
  q.sign.resize(n);
  q.exponent.resize(n);
  for (size_t i = 0; i < n; ++i)
    quantize_weight(w.values[i], p, &q.sign[i], &q.exponent[i]);
  scan_range(q.sign, q.exponent, &q.min_exp, &q.max_exp, &q.all_zero);
  q.bits = bits_for_range(q.min_exp, q.max_exp, q.all_zero);
  return q;
}

BitRange merge_ranges(const std::vector<const QuantizedLayer*>& parts) {
  BitRange r;
  bool seen = false;
  for (const QuantizedLayer* part : parts) {
    if (part->all_zero) continue;
    if (!seen) {
      r.min_exp = part->min_exp;
      r.max_exp = part->max_exp;
      seen = true;
    } else {
      r.min_exp = std::min(r.min_exp, part->min_exp);
      r.max_exp = std::max(r.max_exp, part->max_exp);
    }
  }
  r.all_zero = !seen;
  r.bits = bits_for_range(r.min_exp, r.max_exp, r.all_zero);
  return r;
}

double bit_cost(const std::vector<int>& bits_per_layer) {
  double total = 0.0;
  for (int b : bits_per_layer) total += std::ldexp(1.0, b);
  return total;
}

QuantGrad grad_quantize(float w, float wq, const QuantParams& p) {
  QuantGrad g;
  if (wq == 0.0f || w == 0.0f) return g;  // zero band: no gradient
  const float l2w = std::log2(std::fabs(w));
  g.dw = wq * p.theta2 / w;
  g.dtheta1 = wq * float(kLn2);
  g.dtheta2 = wq * float(kLn2) * l2w;
  return g;
}

QuantizedLayer pm_quantize(const Tensor& w, float eps_zero) {
  QuantizedLayer q;
  q.shape = w.shape;
  const size_t n = w.values.size();
  q.sign.resize(n);
  q.exponent.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const int s = signum_eps(w.values[i], eps_zero);
    q.sign[i] = int8_t(s);
    q.exponent[i] = s == 0 ? 0 : round_half_away(std::log2(std::fabs(w.values[i])));
  }
  scan_range(q.sign, q.exponent, &q.min_exp, &q.max_exp, &q.all_zero);
  q.bits = bits_for_range(q.min_exp, q.max_exp, q.all_zero);
  return q;
}

}  // namespace gtc
