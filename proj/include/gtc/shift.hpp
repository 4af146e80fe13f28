#pragma once

// Multiplication-free inference: every dense/conv weight and every folded
// batchnorm scale is a signed power of two, so each product becomes an
// addition to the float32 exponent field. Outputs are bit-identical to the
// float student path whenever no shift saturates or flushes.

#include <bit>
#include <cstdint>
#include <vector>

#include "gtc/model.hpp"
#include "gtc/tensor.hpp"

namespace gtc {

struct OpCounter {
  uint64_t multiplies = 0;  // stays zero inside the engine
  uint64_t shifts = 0;      // exponent additions (nonzero-sign weights)
  uint64_t additions = 0;   // accumulator and bias/shift additions
  uint64_t sign_flips = 0;  // negative-weight applications
  uint64_t saturated = 0;   // results clamped to the largest finite value
  uint64_t flushed = 0;     // results (or subnormal inputs) flushed to zero
};

// x times (sign * 2^k) on the float32 bit pattern: zero-sign weights yield a
// zero carrying x's sign, nonzero signs add k to the exponent field. The
// result equals the float product bit for bit while x is finite and the
// shifted exponent stays in the normal range; out-of-range results saturate
// to the largest finite value or flush to signed zero and are counted.
inline float shift_multiply(float x, int8_t sign, int32_t k, OpCounter* ctr) {
  const uint32_t bits = std::bit_cast<uint32_t>(x);
  if (sign == 0) return std::bit_cast<float>(bits & 0x80000000u);
  ++ctr->shifts;
  if (sign < 0) ++ctr->sign_flips;
  const uint32_t e = (bits >> 23) & 0xFFu;
  uint32_t out;
  if (e == 0xFFu) {
    out = bits;  // inf stays inf under any scaling
  } else if (e == 0u) {
    if ((bits & 0x007FFFFFu) == 0u) {
      out = bits;  // signed zero stays
    } else {
      ++ctr->flushed;  // subnormal input: below the engine's range
      out = bits & 0x80000000u;
    }
  } else {
    const int32_t eb = int32_t(e) + k;
    if (eb >= 0xFF) {
      ++ctr->saturated;
      out = (bits & 0x80000000u) | 0x7F7FFFFFu;
    } else if (eb <= 0) {
      ++ctr->flushed;
      out = bits & 0x80000000u;
    } else {
      out = (bits & 0x807FFFFFu) | (uint32_t(eb) << 23);
    }
  }
  if (sign < 0) out ^= 0x80000000u;
  return std::bit_cast<float>(out);
}

// Per-element sign and exponent shift of one parameter tensor.
struct ShiftCoef {
  std::vector<int8_t> sign;
  std::vector<int32_t> shift;
};

// One layer of the export: geometry reused from the network description,
// shift coefficients for its multiplicative parameters, and plain float
// addends (quantized biases, folded batchnorm shifts).
struct ShiftLayer {
  LayerSpec spec;
  ShiftCoef w;
  std::vector<float> add;
};

struct ShiftModel {
  std::vector<int> input_shape;
  std::vector<ShiftLayer> layers;
  // Classifiers drop the trailing softmax and emit logits; the float
  // comparison path does the same. Argmax is unaffected.
  bool drop_trailing_softmax = true;
};

struct ShiftVae {
  ShiftModel encoder, mean_head, decoder;  // eval latent is the mean
};

// Quantizes every parameter under its layer's theta and folds batchnorm into
// a power-of-two scale plus a float shift. Throws NumericError when any
// exponent shift leaves [-126, 126].
ShiftModel export_shift_model(const Model& m);
ShiftVae export_shift_vae(const VaeModel& m);

Tensor shift_forward(const ShiftModel& sm, const Tensor& x, OpCounter* ctr);
Tensor shift_forward_vae(const ShiftVae& sv, const Tensor& x, OpCounter* ctr);

// Analytic multiply count of one float forward pass over a batch of n
// examples (dense, conv, and batchnorm scale multiplies; additions excluded).
int64_t float_multiply_count(const Model& m, int64_t n);
int64_t float_multiply_count_vae(const VaeModel& m, int64_t n);

struct BenchReport {
  OpCounter counter;          // one engine pass over the batch
  double wall_ns_per_pass = 0.0;
  int64_t float_multiplies = 0;
  int64_t float_bytes = 0;  // 4 bytes per stored float-model tensor entry
  int64_t gtcq_bytes = 0;   // serialized quantized model, headers included
  double size_ratio = 0.0;
};

// Runs the engine against the float student path on one batch, requires
// bit-identical outputs and zero multiplies, then times `repeats` passes.
BenchReport run_bench(const Model& m, const Tensor& x, int repeats);
BenchReport run_bench_vae(const VaeModel& m, const Tensor& x, int repeats);

std::string bench_json(const BenchReport& r);

}  // namespace gtc
