#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>

#include "gtc/model.hpp"
#include "gtc/rng.hpp"
#include "gtc/shift.hpp"
#include "oracles.hpp"

using namespace gtc;

namespace {
bool bit_equal(float a, float b) {
  return std::bit_cast<uint32_t>(a) == std::bit_cast<uint32_t>(b);
}

Tensor rand_images(uint64_t seed, std::vector<int> shape) {
  oracle::Mix mx(seed);
  return oracle::rand_tensor(&mx, std::move(shape), 0.0f, 1.0f);
}
}  // namespace

TEST_CASE("exponent-add equals float multiply across magnitudes and signs") {
  oracle::Mix mx(800);
  OpCounter ctr;
  int checked = 0;
  for (int trial = 0; trial < 200000; ++trial) {
    const int k = mx.below(121) - 60;
    float x = mx.rangef(-8.0f, 8.0f) * std::ldexp(1.0f, mx.below(21) - 10);
    const int8_t sign = int8_t(mx.below(2) == 0 ? 1 : -1);
    const float w = float(sign) * std::ldexp(1.0f, k);
    const float want = x * w;
    // keep to cases where the float product itself is a normal number
    if (std::fpclassify(want) != FP_NORMAL || std::fpclassify(x) != FP_NORMAL)
      continue;
    const float got = shift_multiply(x, sign, k, &ctr);
    if (!bit_equal(got, want)) {
      CAPTURE(x);
      CAPTURE(k);
      CAPTURE(int(sign));
      REQUIRE(bit_equal(got, want));
    }
    ++checked;
  }
  CHECK(checked > 150000);
  CHECK(ctr.multiplies == 0);
  CHECK(ctr.shifts == uint64_t(checked));
}

TEST_CASE("zero-sign weights produce a zero carrying the input sign") {
  OpCounter ctr;
  CHECK(bit_equal(shift_multiply(3.5f, 0, 99, &ctr), 0.0f));
  CHECK(bit_equal(shift_multiply(-3.5f, 0, 99, &ctr), -0.0f));
  CHECK(ctr.shifts == 0);  // zero weights are not shifts
  CHECK(ctr.flushed == 0);
  // matches the float product's zero sign convention
  CHECK(bit_equal(3.5f * 0.0f, 0.0f));
  CHECK(bit_equal(-3.5f * 0.0f, -0.0f));
}

TEST_CASE("overflowing shifts saturate to the largest finite value") {
  OpCounter ctr;
  const float big = 1e30f;
  const float got = shift_multiply(big, 1, 100, &ctr);
  CHECK(got == std::numeric_limits<float>::max());
  CHECK(ctr.saturated == 1);
  const float gotn = shift_multiply(-big, 1, 100, &ctr);
  CHECK(gotn == -std::numeric_limits<float>::max());
  CHECK(ctr.saturated == 2);
}

TEST_CASE("underflowing shifts flush to signed zero") {
  OpCounter ctr;
  const float tiny = 1e-30f;
  CHECK(bit_equal(shift_multiply(tiny, 1, -100, &ctr), 0.0f));
  CHECK(bit_equal(shift_multiply(-tiny, 1, -100, &ctr), -0.0f));
  CHECK(ctr.flushed == 2);
  // subnormal inputs are below the engine's range and flush too
  const float sub = std::ldexp(1.0f, -140);
  REQUIRE(std::fpclassify(sub) == FP_SUBNORMAL);
  CHECK(bit_equal(shift_multiply(sub, 1, 3, &ctr), 0.0f));
  CHECK(ctr.flushed == 3);
}

TEST_CASE("zeros and infinities pass through scaling") {
  OpCounter ctr;
  CHECK(bit_equal(shift_multiply(0.0f, 1, 17, &ctr), 0.0f));
  CHECK(bit_equal(shift_multiply(-0.0f, 1, 17, &ctr), -0.0f));
  CHECK(bit_equal(shift_multiply(0.0f, -1, 17, &ctr), -0.0f));
  const float inf = std::numeric_limits<float>::infinity();
  CHECK(shift_multiply(inf, 1, -5, &ctr) == inf);
  CHECK(shift_multiply(inf, -1, 5, &ctr) == -inf);
}

TEST_CASE("negative signs count as sign flips") {
  OpCounter ctr;
  CHECK(shift_multiply(2.0f, -1, 1, &ctr) == -4.0f);
  CHECK(shift_multiply(-2.0f, -1, 0, &ctr) == 2.0f);
  CHECK(ctr.sign_flips == 2);
  CHECK(ctr.shifts == 2);
}

TEST_CASE("exported network forward is bit-identical to the float student") {
  Model m = build_lenet_small(0.25f);
  SeededRng rng(812);
  init_params(&m, rng, 0.0f, 1.0f);
  m.eps_zero = 0.02f;
  const Tensor x = rand_images(813, {4, 1, 28, 28});

  const ShiftModel sm = export_shift_model(m);
  OpCounter ctr;
  const Tensor got = shift_forward(sm, x, &ctr);
  const Tensor want = eval_forward(m, x, true, /*skip_final_softmax=*/true);
  REQUIRE(got.shape == want.shape);
  REQUIRE(std::memcmp(got.values.data(), want.values.data(),
                      got.values.size() * sizeof(float)) == 0);
  CHECK(ctr.multiplies == 0);
  CHECK(ctr.shifts > 0);
  CHECK(ctr.additions > 0);
}

TEST_CASE("vae export runs multiplication-free and matches the float path") {
  VaeModel v = build_vae(0.1f);
  SeededRng rng(821);
  init_params(&v, rng, 0.0f, 1.0f);
  for (Model* p : v.parts()) p->eps_zero = 0.02f;
  const Tensor x = rand_images(822, {3, 1, 28, 28});

  const ShiftVae sv = export_shift_vae(v);
  OpCounter ctr;
  const Tensor got = shift_forward_vae(sv, x, &ctr);
  const Tensor want = eval_forward_vae(v, x, true);
  REQUIRE(got.shape == want.shape);
  REQUIRE(std::memcmp(got.values.data(), want.values.data(),
                      got.values.size() * sizeof(float)) == 0);
  CHECK(ctr.multiplies == 0);
}

TEST_CASE("export rejects shifts outside the safe exponent range") {
  Model m = build_mlp({1, 1, 4}, {3}, 2);
  SeededRng rng(830);
  init_params(&m, rng, 0.0f, 1.0f);
  m.slots[0].theta1.values[0] = 500.0f;  // codes way out of range
  CHECK_THROWS_AS(export_shift_model(m), NumericError);
}

TEST_CASE("analytic multiply count matches the float layer shapes") {
  Model m = build_lenet_small(0.25f);
  SeededRng rng(840);
  init_params(&m, rng, 0.0f, 1.0f);
  const int64_t n = 3;
  // conv1: 4 filters over 24x24 out, col width 25; conv2: 9 filters over 8x8,
  // col width 100; fc1 144->32; fc2 32->10
  const uint64_t want = uint64_t(n) * (uint64_t(4 * 24 * 24) * 25 +
                                       uint64_t(9 * 8 * 8) * 100 + 144 * 32 + 32 * 10);
  CHECK(float_multiply_count(m, n) == want);
}

TEST_CASE("engine shift count equals the float multiply count minus zeros") {
  Model m = build_lenet_small(0.25f);
  SeededRng rng(850);
  init_params(&m, rng, 0.0f, 1.0f);
  m.eps_zero = 0.05f;
  const ShiftModel sm = export_shift_model(m);
  uint64_t zero_frac_num = 0, zero_frac_den = 0;
  for (const ShiftLayer& l : sm.layers)
    for (int8_t s : l.w.sign) {
      zero_frac_num += s == 0;
      ++zero_frac_den;
    }
  REQUIRE(zero_frac_den > 0);

  const Tensor x = rand_images(851, {2, 1, 28, 28});
  OpCounter ctr;
  (void)shift_forward(sm, x, &ctr);
  const uint64_t applications = float_multiply_count(m, 2);
  CHECK(ctr.shifts <= applications);
  // every zero-sign weight application is skipped, everything else shifts
  CHECK(ctr.shifts > 0);
  if (zero_frac_num == 0) CHECK(ctr.shifts == applications);
}

TEST_CASE("bench report checks equality internally and reports sizes") {
  Model m = build_lenet_small(0.25f);
  SeededRng rng(860);
  init_params(&m, rng, 0.0f, 1.0f);
  m.eps_zero = 0.02f;
  const Tensor x = rand_images(861, {2, 1, 28, 28});
  const BenchReport r = run_bench(m, x, 2);
  CHECK(r.counter.multiplies == 0);
  CHECK(r.float_multiplies == float_multiply_count(m, 2));
  CHECK(r.float_bytes == m.param_count() * 4);
  CHECK(r.gtcq_bytes > 0);
  CHECK(r.size_ratio == doctest::Approx(double(r.float_bytes) / double(r.gtcq_bytes)));
  CHECK(r.wall_ns_per_pass > 0.0);

  const std::string j = bench_json(r);
  CHECK(j.find("\"multiplies\": 0") != std::string::npos);
  CHECK(j.find("\"sizes\"") != std::string::npos);
  CHECK(j.find("\"wall_ns_per_pass\"") != std::string::npos);
}
