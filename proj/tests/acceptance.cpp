// Acceptance suite: twelve numbered checks, one PASS/FAIL line each.
// Usage: acceptance [N...]  — run the given checks (default: all).
// Exit status is nonzero when any selected check fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gtc/config.hpp"
#include "gtc/data.hpp"
#include "gtc/graph.hpp"
#include "gtc/io.hpp"
#include "gtc/model.hpp"
#include "gtc/quant.hpp"
#include "gtc/rng.hpp"
#include "gtc/shift.hpp"
#include "gtc/train.hpp"
#include "oracles.hpp"

#ifndef GTC_TEST_REPO_ROOT
#define GTC_TEST_REPO_ROOT "."
#endif

using namespace gtc;

namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

Result ok() { return {true, ""}; }
Result ok(std::string detail) { return {true, std::move(detail)}; }
Result fail(std::string detail) { return {false, std::move(detail)}; }

std::string root_dir;  // per-invocation scratch root, set in main

// ---------------------------------------------------------------------------
// Desk-run configuration shared by checks 5, 6, and 12. Learning-rate and
// coupling weights follow the published classifier recipe (adam, 1e-4,
// 0.8/0.04); the quantizer's free knobs (zero band and theta start) are tuned
// so the reported widths settle early at this reduced scale.

constexpr const char* kDeskEps = "0.02";
constexpr const char* kDeskTheta1 = "-1.6";
constexpr const char* kDeskTheta2 = "0.5";

std::string mnist_dir_for_desk() {
  if (const char* env = std::getenv("GTC_MNIST_DIR");
      env != nullptr && env[0] != '\0')
    return env;
  const std::string dir = root_dir + "/mnist-idx";
  if (!std::filesystem::exists(dir + "/train-images-idx3-ubyte")) {
    const std::string asset =
        std::string(GTC_TEST_REPO_ROOT) + "/assets/digits8x8.bin";
    expand_digits_to_idx(asset, dir, 10000, 2000, 1);
  }
  return dir;
}

Config desk_classifier_cfg(const std::string& out_tag) {
  Config c;
  c.set("model", "lenet");
  c.set("model_scale", "0.5");
  c.set("dataset", "mnist");
  c.set("mnist_dir", mnist_dir_for_desk());
  c.set("train_count", "10000");
  c.set("test_count", "2000");
  c.set("iters", "5000");
  c.set("lr", "0.0001");
  c.set("lambda1", "0.8");
  c.set("lambda2", "0.04");
  c.set("optimizer", "adam");
  c.set("batch_size", "256");
  c.set("seed", "1");
  c.set("eps_zero", kDeskEps);
  c.set("theta1_init", kDeskTheta1);
  c.set("theta2_init", kDeskTheta2);
  c.set("log_every", "50");
  c.set("eval_every", "500");
  c.set("eval_batch", "500");
  c.set("out_dir", root_dir + "/" + out_tag);
  c.validate();
  return c;
}

std::optional<TrainOutput> desk_run_cache;
double desk_run_minutes = 0.0;

const TrainOutput& desk_run() {
  if (!desk_run_cache) {
    const auto t0 = std::chrono::steady_clock::now();
    desk_run_cache = run_training(desk_classifier_cfg("desk-run1"));
    const auto t1 = std::chrono::steady_clock::now();
    desk_run_minutes = std::chrono::duration<double>(t1 - t0).count() / 60.0;
  }
  return *desk_run_cache;
}

// Layer widths constant over the last half of the logged iterations.
Result tail_stable_bits(const std::vector<MetricsRecord>& records,
                        int64_t iters) {
  const int64_t half = iters / 2;
  std::vector<std::set<int>> seen;
  for (const MetricsRecord& r : records) {
    if (r.iter <= half) continue;
    if (seen.empty()) seen.resize(r.bits.size());
    for (size_t l = 0; l < r.bits.size(); ++l) seen[l].insert(r.bits[size_t(l)]);
  }
  if (seen.empty()) return fail("no logged rows in the final half");
  for (size_t l = 0; l < seen.size(); ++l)
    if (seen[l].size() != 1) {
      std::ostringstream os;
      os << "layer " << l + 1 << " widths varied over the final half: {";
      bool first = true;
      for (int b : seen[l]) {
        if (!first) os << ",";
        os << b;
        first = false;
      }
      os << "}";
      return fail(os.str());
    }
  return ok();
}

// ---------------------------------------------------------------------------
// 1. Worked-example exactness

Result check_worked_example() {
  Tensor w({2, 4});
  w.values = {2.5f, 1.0f, 1.3f, 0.75f, 1.0f, -2.5f, -1.2f, -0.9f};
  QuantParams p;
  p.theta1 = -1.0f;
  p.theta2 = -3.5f;
  const QuantizedLayer q = quantize_tensor(w, p);
  const std::vector<int8_t> want_sign = {1, 1, 1, 1, 1, -1, -1, -1};
  const std::vector<int32_t> want_exp = {-6, -1, -2, 0, -1, -6, -2, 0};
  for (size_t i = 0; i < 8; ++i) {
    if (q.sign[i] != want_sign[i])
      return fail("sign mismatch at entry " + std::to_string(i));
    if (q.exponent[i] != want_exp[i])
      return fail("exponent mismatch at entry " + std::to_string(i) + ": got " +
                  std::to_string(q.exponent[i]));
  }
  if (q.bits != 4) return fail("layer width " + std::to_string(q.bits) + " != 4");
  return ok("all eight codes and the 4-bit width match");
}

// ---------------------------------------------------------------------------
// 2. Ternary degeneration at theta = (0, 0)

Result check_ternary() {
  oracle::Mix mx(2026);
  QuantParams p;
  p.theta1 = 0.0f;
  p.theta2 = 0.0f;
  p.eps_zero = 0.05f;
  for (int trial = 0; trial < 300; ++trial) {
    Tensor w({97});
    for (float& v : w.values) v = mx.rangef(-20.0f, 20.0f);
    w.values[size_t(trial % 97)] = 0.0f;
    const QuantizedLayer q = quantize_tensor(w, p);
    const Tensor d = q.dequantize();
    for (size_t i = 0; i < d.values.size(); ++i) {
      const float v = d.values[i];
      if (v != 0.0f && v != 1.0f && v != -1.0f)
        return fail("value " + std::to_string(v) + " outside {-1,0,+1}");
      if (q.sign[i] != 0 && q.exponent[i] != 0)
        return fail("nonzero exponent under the all-zero parameters");
    }
  }
  return ok("300 random tensors landed in {-1,0,+1} * 2^0");
}

// ---------------------------------------------------------------------------
// 3. Shift/multiply equivalence

Result check_shift_equivalence() {
  oracle::Mix mx(2027);
  OpCounter ctr;
  int64_t checked = 0;
  int64_t trials = 0;
  while (checked < 1000000) {
    if (++trials > 20000000) return fail("could not draw enough normal-range cases");
    const int k = mx.below(121) - 60;
    const float x = mx.rangef(-8.0f, 8.0f) * std::ldexp(1.0f, mx.below(41) - 20);
    const int8_t sign = int8_t(mx.below(2) == 0 ? 1 : -1);
    const float w = float(sign) * std::ldexp(1.0f, k);
    const float want = x * w;
    if (std::fpclassify(x) != FP_NORMAL || std::fpclassify(want) != FP_NORMAL)
      continue;
    const float got = shift_multiply(x, sign, k, &ctr);
    if (std::bit_cast<uint32_t>(got) != std::bit_cast<uint32_t>(want)) {
      std::ostringstream os;
      os << "mismatch: x=" << x << " k=" << k << " sign=" << int(sign);
      return fail(os.str());
    }
    ++checked;
  }

  Model m = build_lenet_small(0.5f);
  SeededRng rng(303);
  init_params(&m, rng, 0.0f, 1.0f);
  m.eps_zero = 0.02f;
  oracle::Mix mi(304);
  const Tensor x = oracle::rand_tensor(&mi, {8, 1, 28, 28}, 0.0f, 1.0f);
  const ShiftModel sm = export_shift_model(m);
  OpCounter fctr;
  const Tensor got = shift_forward(sm, x, &fctr);
  const Tensor want = eval_forward(m, x, true, true);
  if (got.shape != want.shape) return fail("network output shape mismatch");
  if (std::memcmp(got.values.data(), want.values.data(),
                  got.values.size() * sizeof(float)) != 0)
    return fail("network forward not bit-identical");
  return ok("1e6 scalar products and the network forward are bit-identical");
}

// ---------------------------------------------------------------------------
// 4. Zero multiplications in weight application

Result check_zero_multiplies() {
  Model m = build_lenet_small(0.5f);
  SeededRng rng(404);
  init_params(&m, rng, 0.0f, 1.0f);
  oracle::Mix mi(405);
  const Tensor x = oracle::rand_tensor(&mi, {4, 1, 28, 28}, 0.0f, 1.0f);
  OpCounter c1;
  (void)shift_forward(export_shift_model(m), x, &c1);
  if (c1.multiplies != 0)
    return fail("classifier pass used " + std::to_string(c1.multiplies) +
                " multiplications");
  if (c1.shifts == 0) return fail("classifier pass reported no shifts");

  VaeModel v = build_vae(0.25f);
  SeededRng rng2(406);
  init_params(&v, rng2, 0.0f, 1.0f);
  OpCounter c2;
  (void)shift_forward_vae(export_shift_vae(v), x, &c2);
  if (c2.multiplies != 0)
    return fail("vae pass used " + std::to_string(c2.multiplies) +
                " multiplications");
  return ok("0 multiplications across both full forward passes");
}

// ---------------------------------------------------------------------------
// 5. Desk-scale MNIST learning

Result check_desk_mnist() {
  const TrainOutput& out = desk_run();
  const double t = out.summary.teacher_metric;
  const double s = out.summary.student_metric;
  const double avg = out.summary.avg_bits;
  std::ostringstream os;
  os << "teacher " << t << "%, student " << s << "%, avg bits " << avg << ", "
     << int(desk_run_minutes + 0.5) << " min";
  if (s < t - 2.5) return fail(os.str() + " — student more than 2.5 below teacher");
  if (s < 95.0) return fail(os.str() + " — student below 95%");
  if (avg > 3.0) return fail(os.str() + " — avg bits above 3");
  if (desk_run_minutes > 30.0) return fail(os.str() + " — run exceeded 30 minutes");
  return ok(os.str());
}

// ---------------------------------------------------------------------------
// 6. Width stability over the final half of the desk run

Result check_bit_stability() {
  const TrainOutput& out = desk_run();
  const Result r = tail_stable_bits(out.records, out.summary.iters);
  if (!r.pass) return r;
  return ok("every layer's width constant over the final 2500 iterations");
}

// ---------------------------------------------------------------------------
// 7. Bit-penalty monotonicity

Result check_lambda2_monotonicity() {
  std::vector<double> avg;
  for (const char* l2 : {"0", "1e-5", "1e-3"}) {
    Config c = desk_classifier_cfg(std::string("mono-l2-") + l2);
    c.set("lambda2", l2);
    c.set("iters", "2000");
    const TrainOutput out = run_training(c);
    avg.push_back(out.summary.avg_bits);
  }
  std::ostringstream os;
  os << "avg bits at {0, 1e-5, 1e-3}: " << avg[0] << ", " << avg[1] << ", "
     << avg[2];
  if (avg[1] > avg[0] + 0.25) return fail(os.str() + " — rose at 1e-5");
  if (avg[2] > avg[1] + 0.25) return fail(os.str() + " — rose at 1e-3");
  return ok(os.str());
}

// ---------------------------------------------------------------------------
// 8. Gradient correctness of the joint objective (smooth surrogate)

struct SmallNet {
  Model m;
  Tensor x;
  std::vector<int> labels;
};

SmallNet make_small_net() {
  SmallNet s;
  Model& m = s.m;
  m.input_shape = {1, 1, 8};
  const auto add_dense = [&](const char* name, int in, int out) {
    ParamSlot slot;
    slot.name = name;
    slot.W = Tensor::zeros({out, in});
    slot.b = Tensor::zeros({out});
    slot.theta1 = Tensor::scalar(0.0f);
    slot.theta2 = Tensor::scalar(1.0f);
    m.layers.push_back(Dense{in, out});
    m.slot_of.push_back(int(m.slots.size()));
    m.slots.push_back(std::move(slot));
  };
  m.layers.push_back(Flatten{});
  m.slot_of.push_back(-1);
  add_dense("fc1", 8, 6);
  m.layers.push_back(Activation{Act::tanh});
  m.slot_of.push_back(-1);
  add_dense("fc2", 6, 3);
  m.layers.push_back(Activation{Act::softmax});
  m.slot_of.push_back(-1);
  m.eps_zero = 1e-3f;

  SeededRng rng(808);
  init_params(&m, rng, 0.15f, 0.85f);
  // Bound every parameter away from the zero band and separate each layer's
  // extreme log-magnitudes, so no probe crosses a band edge or flips which
  // element holds a group extreme.
  oracle::Mix mx(809);
  for (ParamSlot& slot : m.slots) {
    for (float& v : slot.W.values)
      v = (mx.below(2) == 0 ? 1.0f : -1.0f) * mx.rangef(0.08f, 0.9f);
    for (float& v : slot.b.values) v = mx.rangef(0.2f, 0.6f);
    std::vector<float*> all;
    for (float& v : slot.W.values) all.push_back(&v);
    for (float& v : slot.b.values) all.push_back(&v);
    const auto log_mag = [](const float* p) { return std::log2(std::fabs(*p)); };
    std::sort(all.begin(), all.end(),
              [&](const float* a, const float* b) { return log_mag(a) < log_mag(b); });
    if (log_mag(all[1]) - log_mag(all[0]) < 0.1f) *all[0] *= 0.84f;
    const size_t n = all.size();
    if (log_mag(all[n - 1]) - log_mag(all[n - 2]) < 0.1f) *all[n - 1] *= 1.19f;
  }
  s.x = oracle::rand_tensor(&mx, {4, 1, 1, 8}, 0.0f, 1.0f);
  for (int i = 0; i < 4; ++i) s.labels.push_back(mx.below(3));
  return s;
}

// Parameters packed per slot as [W..., b..., theta1, theta2] for probing.
std::vector<double> pack_params(const Model& m) {
  std::vector<double> p;
  for (const ParamSlot& slot : m.slots) {
    for (float v : slot.W.values) p.push_back(double(v));
    for (float v : slot.b.values) p.push_back(double(v));
    p.push_back(double(slot.theta1.values[0]));
    p.push_back(double(slot.theta2.values[0]));
  }
  return p;
}

double smoothq_d(double w, double t1, double t2, double eps) {
  const double a = std::fabs(w);
  if (a < eps) return 0.0;
  return (w < 0.0 ? -1.0 : 1.0) * std::exp2(t1 + t2 * std::log2(a));
}

// The full joint objective recomputed in double precision, so central
// differences carry no single-precision noise floor.
double objective_d(const SmallNet& s, const std::vector<double>& P,
                   double* parts = nullptr) {
  const double eps = 1e-3;
  const double* W1 = &P[0];
  const double* b1 = &P[48];
  const double t11 = P[54], t21 = P[55];
  const double* W2 = &P[56];
  const double* b2 = &P[74];
  const double t12 = P[77], t22 = P[78];

  double Wq1[48], bq1[6], Wq2[18], bq2[3];
  for (int i = 0; i < 48; ++i) Wq1[i] = smoothq_d(W1[i], t11, t21, eps);
  for (int i = 0; i < 6; ++i) bq1[i] = smoothq_d(b1[i], t11, t21, eps);
  for (int i = 0; i < 18; ++i) Wq2[i] = smoothq_d(W2[i], t12, t22, eps);
  for (int i = 0; i < 3; ++i) bq2[i] = smoothq_d(b2[i], t12, t22, eps);

  const auto forward = [&](const double* w1, const double* c1, const double* w2,
                           const double* c2, int n, double* logits) {
    const float* x = &s.x.values[size_t(n) * 8];
    double h[6];
    for (int j = 0; j < 6; ++j) {
      double acc = c1[j];
      for (int k = 0; k < 8; ++k) acc += double(x[k]) * w1[j * 8 + k];
      h[j] = std::tanh(acc);
    }
    for (int c = 0; c < 3; ++c) {
      double acc = c2[c];
      for (int j = 0; j < 6; ++j) acc += h[j] * w2[c * 6 + j];
      logits[c] = acc;
    }
  };

  double ce = 0.0, distill = 0.0;
  for (int n = 0; n < 4; ++n) {
    double lt[3], ls[3];
    forward(W1, b1, W2, b2, n, lt);
    forward(Wq1, bq1, Wq2, bq2, n, ls);
    const double mt = std::max({lt[0], lt[1], lt[2]});
    const double lset =
        mt + std::log(std::exp(lt[0] - mt) + std::exp(lt[1] - mt) +
                      std::exp(lt[2] - mt));
    ce += lset - lt[s.labels[size_t(n)]];
    const double ms = std::max({ls[0], ls[1], ls[2]});
    const double lses =
        ms + std::log(std::exp(ls[0] - ms) + std::exp(ls[1] - ms) +
                      std::exp(ls[2] - ms));
    for (int c = 0; c < 3; ++c)
      distill -= std::exp(lt[c] - lset) * (ls[c] - lses);
  }
  ce /= 4.0;
  distill /= 4.0;

  // per layer: twice the continuous code range plus one
  const auto layer_cost = [&](const double* w, int nw, const double* c, int nc,
                              double t1, double t2) {
    double mn = 0.0, mx = 0.0;
    bool seen = false;
    const auto visit = [&](double v) {
      if (std::fabs(v) < eps) return;
      const double code = t1 + t2 * std::log2(std::fabs(v));
      if (!seen || code > mx) mx = code;
      if (!seen || code < mn) mn = code;
      seen = true;
    };
    for (int i = 0; i < nw; ++i) visit(w[i]);
    for (int i = 0; i < nc; ++i) visit(c[i]);
    return seen ? 2.0 * (mx - mn + 1.0) : 0.0;
  };
  const double bits = layer_cost(W1, 48, b1, 6, t11, t21) +
                      layer_cost(W2, 18, b2, 3, t12, t22);

  if (parts != nullptr) {
    parts[0] = ce;
    parts[1] = distill;
    parts[2] = bits;
  }
  return ce + 0.8 * distill + 0.04 * bits;
}

Result check_gradients() {
  SmallNet s = make_small_net();
  Model& m = s.m;

  // reference gradients from one reverse sweep
  Tape tape;
  ModelBinding bind = bind_params(tape, m, true, true);
  ForwardOptions teacher_opt;
  teacher_opt.training = true;
  teacher_opt.skip_final_softmax = true;
  const NodeId xn = tape.constant(s.x);
  const ForwardBuild tf = forward_model(tape, m, bind, xn, teacher_opt);
  const NodeId tce = tape.ce_with_logits(tf.logits, s.labels);
  ForwardOptions student_opt = teacher_opt;
  student_opt.student = true;
  student_opt.qmode = QuantMode::smooth;
  const ForwardBuild sf = forward_model(tape, m, bind, xn, student_opt);
  const NodeId tp = tape.softmax_rows(tf.logits);
  const NodeId sl = tape.log_softmax_rows(sf.logits);
  const NodeId d = tape.mul_scalar(tape.sum_all(tape.mul(tp, sl)),
                                   -1.0f / float(s.x.dim(0)));
  std::vector<std::vector<NodeId>> groups;
  for (const auto& qp : sf.qpairs) groups.push_back({qp[0], qp[1]});
  const NodeId bits = tape.bit_cost(groups);
  const NodeId total =
      tape.add(tce, tape.add(tape.mul_scalar(d, 0.8f), tape.mul_scalar(bits, 0.04f)));
  tape.backward(total);

  // sanity: the double mirror evaluates to the same objective
  const std::vector<double> P0 = pack_params(m);
  if (!oracle::close(double(tape.val(total).item()), objective_d(s, P0), 1e-4,
                     1e-5)) {
    double mp[3] = {0, 0, 0};
    const double mv = objective_d(s, P0, mp);
    std::ostringstream os;
    os << "double-precision mirror disagrees with the tape forward: tape "
       << tape.val(total).item() << " vs mirror " << mv << " (ce "
       << tape.val(tce).item() << "/" << mp[0] << ", distill "
       << tape.val(d).item() << "/" << mp[1] << ", bits "
       << tape.val(bits).item() << "/" << mp[2] << ")";
    return fail(os.str());
  }

  const double h = 1e-3;
  int checked = 0;
  size_t off = 0;
  for (size_t si = 0; si < m.slots.size(); ++si) {
    const std::vector<float>& gw = tape.grad(bind.W[si]);
    const std::vector<float>& gb = tape.grad(bind.b[si]);
    const std::vector<float>& g1 = tape.grad(bind.th1[si]);
    const std::vector<float>& g2 = tape.grad(bind.th2[si]);
    std::vector<std::pair<std::string, float>> grads;
    for (size_t i = 0; i < gw.size(); ++i)
      grads.push_back({m.slots[si].name + ".W[" + std::to_string(i) + "]", gw[i]});
    for (size_t i = 0; i < gb.size(); ++i)
      grads.push_back({m.slots[si].name + ".b[" + std::to_string(i) + "]", gb[i]});
    grads.push_back({m.slots[si].name + ".theta1", g1[0]});
    grads.push_back({m.slots[si].name + ".theta2", g2[0]});
    for (const auto& [label, g] : grads) {
      std::vector<double> P = P0;
      P[off] += h;
      const double fp = objective_d(s, P);
      P[off] = P0[off] - h;
      const double fm = objective_d(s, P);
      const double fd = (fp - fm) / (2.0 * h);
      if (!oracle::close(double(g), fd, 1e-3, 1e-5)) {
        std::ostringstream os;
        os << label << ": grad " << g << " vs fd " << fd;
        return fail(os.str());
      }
      ++checked;
      ++off;
    }
  }
  return ok(std::to_string(checked) + " partial derivatives within 1e-3 relative");
}

// ---------------------------------------------------------------------------
// 9. Nearest-power baseline == identity-parameter quantizer

Result check_pm_equivalence() {
  oracle::Mix mx(909);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor w({211});
    for (float& v : w.values) v = mx.rangef(-6.0f, 6.0f);
    if (trial % 3 == 0) w.values[size_t(trial)] = 0.0f;
    QuantParams p;
    p.theta1 = 0.0f;
    p.theta2 = 1.0f;
    const QuantizedLayer a = quantize_tensor(w, p);
    const QuantizedLayer b = pm_quantize(w);
    if (a.sign != b.sign) return fail("sign arrays differ on trial " + std::to_string(trial));
    for (size_t i = 0; i < a.sign.size(); ++i)
      if (a.sign[i] != 0 && a.exponent[i] != b.exponent[i])
        return fail("exponent arrays differ on trial " + std::to_string(trial));
    if (a.bits != b.bits || a.min_exp != b.min_exp || a.max_exp != b.max_exp)
      return fail("range stats differ on trial " + std::to_string(trial));
  }
  return ok("identical codes on 100 random tensors");
}

// ---------------------------------------------------------------------------
// 10. Serialization: bijection and compression

Result check_serialization() {
  oracle::Mix mx(1010);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + mx.below(300);
    const int spread = mx.below(14);
    GtcqEntry e;
    e.name = "layer" + std::to_string(trial);
    e.theta1 = mx.rangef(-3.0f, 3.0f);
    e.theta2 = mx.rangef(-3.0f, 3.0f);
    QuantizedLayer& q = e.layer;
    q.shape = {n};
    q.sign.resize(size_t(n));
    q.exponent.resize(size_t(n));
    bool seen = false;
    for (int i = 0; i < n; ++i) {
      const int r = mx.below(8);
      if (r == 0) {
        q.sign[size_t(i)] = 0;
        q.exponent[size_t(i)] = 0;
        continue;
      }
      q.sign[size_t(i)] = r % 2 == 0 ? 1 : -1;
      q.exponent[size_t(i)] = int32_t(mx.below(2 * spread + 1)) - spread;
      if (!seen) {
        q.min_exp = q.max_exp = q.exponent[size_t(i)];
        seen = true;
      } else {
        q.min_exp = std::min(q.min_exp, q.exponent[size_t(i)]);
        q.max_exp = std::max(q.max_exp, q.exponent[size_t(i)]);
      }
    }
    q.all_zero = !seen;
    if (!seen) {
      q.min_exp = q.max_exp = 0;
      q.bits = 1;
    } else {
      q.bits = 1 + ceil_log2(uint64_t(int64_t(q.max_exp) - q.min_exp + 1));
    }

    const std::string bytes = encode_gtcq({e});
    const std::vector<GtcqEntry> back = decode_gtcq(bytes);
    if (back.size() != 1) return fail("entry count changed in round trip");
    const QuantizedLayer& r2 = back[0].layer;
    if (r2.sign != q.sign || r2.bits != q.bits || r2.min_exp != q.min_exp ||
        r2.max_exp != q.max_exp || r2.all_zero != q.all_zero ||
        r2.shape != q.shape)
      return fail("field mismatch in round trip on trial " + std::to_string(trial));
    for (size_t i = 0; i < q.sign.size(); ++i)
      if (q.sign[i] != 0 && r2.exponent[i] != q.exponent[i])
        return fail("exponent mismatch in round trip on trial " + std::to_string(trial));
    if (encode_gtcq(back) != bytes) return fail("re-encoding changed the bytes");
  }

  // compression: one-level layers (width 1, one code bit) at 1e4 parameters
  std::vector<GtcqEntry> small;
  oracle::Mix mz(1011);
  for (int layer = 0; layer < 3; ++layer) {
    GtcqEntry e;
    e.name = "fc" + std::to_string(layer);
    QuantizedLayer& q = e.layer;
    const int n = 10000;
    q.shape = {100, 100};
    q.sign.resize(size_t(n));
    q.exponent.resize(size_t(n));
    for (int i = 0; i < n; ++i) {
      q.sign[size_t(i)] = mz.below(2) == 0 ? 1 : -1;
      q.exponent[size_t(i)] = -3;
    }
    q.min_exp = q.max_exp = -3;
    q.bits = 1;
    q.all_zero = false;
    small.push_back(std::move(e));
  }
  const CompressionReport cr = compression_report(small);
  std::ostringstream os;
  os << "1000 exact round trips; whole-file ratio " << cr.file_ratio
     << "x at width 1";
  if (cr.file_ratio < 12.0) return fail(os.str() + " — below 12x");
  return ok(os.str());
}

// ---------------------------------------------------------------------------
// 11. VAE desk run

Result check_vae_desk() {
  Config c;
  c.set("model", "vae");
  c.set("model_scale", "0.5");
  c.set("dataset", "mnist");
  c.set("mnist_dir", mnist_dir_for_desk());
  c.set("train_count", "10000");
  c.set("test_count", "2000");
  c.set("iters", "3000");
  c.set("lr", "0.001");
  c.set("lambda1", "3.0");
  c.set("lambda2", "0.04");
  c.set("optimizer", "adam");
  c.set("batch_size", "64");
  c.set("seed", "1");
  c.set("eps_zero", kDeskEps);
  c.set("theta1_init", kDeskTheta1);
  c.set("theta2_init", kDeskTheta2);
  c.set("log_every", "50");
  c.set("eval_every", "500");
  c.set("eval_batch", "500");
  c.set("out_dir", root_dir + "/vae-desk");
  c.validate();
  const TrainOutput out = run_training(c);
  const double t = out.summary.teacher_metric;
  const double s = out.summary.student_metric;
  std::ostringstream os;
  os << "teacher BCE " << t << ", student BCE " << s;
  if (!(std::fabs(s - t) <= 0.10 * t))
    return fail(os.str() + " — student further than 10% relative");
  const Result stable = tail_stable_bits(out.records, out.summary.iters);
  if (!stable.pass) return stable;
  return ok(os.str() + "; widths stable over the final half");
}

// ---------------------------------------------------------------------------
// 12. Determinism of the desk run

Result check_determinism() {
  (void)desk_run();  // first run under desk-run1
  run_training(desk_classifier_cfg("desk-run2"));
  const std::string m1 = read_file(root_dir + "/desk-run1/metrics.csv");
  const std::string m2 = read_file(root_dir + "/desk-run2/metrics.csv");
  if (m1 != m2) return fail("metrics files differ between identical runs");
  const std::string g1 = read_file(root_dir + "/desk-run1/model.gtcq");
  const std::string g2 = read_file(root_dir + "/desk-run2/model.gtcq");
  if (g1 != g2) return fail("quantized models differ between identical runs");
  return ok("metrics and quantized model byte-identical across reruns");
}

struct Criterion {
  int number;
  const char* title;
  std::function<Result()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> cs = {
      {1, "worked-example exactness", check_worked_example},
      {2, "ternary degeneration", check_ternary},
      {3, "shift/multiply equivalence", check_shift_equivalence},
      {4, "zero-multiply forward", check_zero_multiplies},
      {5, "desk-scale digit learning", check_desk_mnist},
      {6, "bit-width convergence", check_bit_stability},
      {7, "bit-penalty monotonicity", check_lambda2_monotonicity},
      {8, "gradient correctness", check_gradients},
      {9, "nearest-power baseline equivalence", check_pm_equivalence},
      {10, "serialization round trip and compression", check_serialization},
      {11, "vae desk run", check_vae_desk},
      {12, "desk-run determinism", check_determinism},
  };
  return cs;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  std::string tag = "all";
  if (!wanted.empty()) {
    tag.clear();
    for (int n : wanted) tag += (tag.empty() ? "" : "-") + std::to_string(n);
  }
  root_dir = (std::filesystem::temp_directory_path() /
              ("gtc-acceptance-" + tag))
                 .string();
  std::filesystem::remove_all(root_dir);
  std::filesystem::create_directories(root_dir);

  int failures = 0;
  for (const Criterion& c : criteria()) {
    if (!wanted.empty() && wanted.count(c.number) == 0) continue;
    Result r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = fail(std::string("exception: ") + e.what());
    }
    printf("%s criterion %2d: %s%s%s\n", r.pass ? "PASS" : "FAIL", c.number,
           c.title, r.detail.empty() ? "" : " — ", r.detail.c_str());
    fflush(stdout);
    failures += !r.pass;
  }
  return failures == 0 ? 0 : 1;
}
