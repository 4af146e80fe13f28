#include "gtc/shift.hpp"

#include <chrono>
#include <cstring>
#include <functional>

#include "gtc/io.hpp"
#include "gtc/ops.hpp"
#include "gtc/train.hpp"

#include "json.hpp"

namespace gtc {

namespace {

ShiftCoef coef_of(const QuantizedLayer& q, const std::string& lname) {
  ShiftCoef c;
  c.sign = q.sign;
  c.shift = q.exponent;
  for (size_t i = 0; i < c.sign.size(); ++i) {
    if (c.sign[i] == 0) {
      c.shift[i] = 0;
      continue;
    }
    GTC_CHECK(c.shift[i] >= -126 && c.shift[i] <= 126, NumericError,
              "layer '" + lname + "' needs exponent shift " +
                  std::to_string(c.shift[i]) + ", outside [-126, 126]");
  }
  return c;
}

int64_t shape_count(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

}  // namespace

ShiftModel export_shift_model(const Model& m) {
  ShiftModel sm;
  sm.input_shape = m.input_shape;
  for (size_t li = 0; li < m.layers.size(); ++li) {
    const LayerSpec& ls = m.layers[li];
    ShiftLayer sl;
    sl.spec = ls;
    const int si = m.slot_of[li];
    if (std::holds_alternative<Dense>(ls) || std::holds_alternative<Conv2d>(ls)) {
      const ParamSlot& s = m.slots[size_t(si)];
      const QuantParams p{s.theta1.item(), s.theta2.item(), m.eps_zero};
      sl.w = coef_of(quantize_tensor(s.W, p), s.name);
      sl.add = quantize_tensor(s.b, p).dequantize().values;
    } else if (std::holds_alternative<BatchNorm>(ls)) {
      const ParamSlot& s = m.slots[size_t(si)];
      const FoldedBn f = fold_bn(s, m.bn_eps, /*quantize_scale=*/true, m.eps_zero);
      sl.w = coef_of(f.scale_q, s.name);
      sl.add = f.shift;
    }
    sm.layers.push_back(std::move(sl));
  }
  return sm;
}

ShiftVae export_shift_vae(const VaeModel& m) {
  ShiftVae sv;
  sv.encoder = export_shift_model(m.encoder);
  sv.mean_head = export_shift_model(m.mean_head);
  sv.decoder = export_shift_model(m.decoder);
  return sv;
}

Tensor shift_forward(const ShiftModel& sm, const Tensor& x, OpCounter* ctr) {
  Tensor cur = x;
  const size_t L = sm.layers.size();
  for (size_t li = 0; li < L; ++li) {
    const ShiftLayer& sl = sm.layers[li];
    const bool last = li + 1 == L;
    if (const Dense* dn = std::get_if<Dense>(&sl.spec)) {
      GTC_CHECK(cur.rank() == 2 && cur.dim(1) == dn->in, ShapeError,
                "dense layer input mismatch: " + shape_str(cur.shape));
      const int rows = cur.dim(0), k = dn->in, nout = dn->out;
      Tensor yv = Tensor::zeros({rows, nout});
      for (int i = 0; i < rows; ++i) {
        const float* arow = &cur.values[size_t(i) * k];
        float* crow = &yv.values[size_t(i) * nout];
        for (int j = 0; j < nout; ++j) {
          const int8_t* srow = &sl.w.sign[size_t(j) * k];
          const int32_t* krow = &sl.w.shift[size_t(j) * k];
          float acc = 0.0f;
          for (int kk = 0; kk < k; ++kk)
            acc += shift_multiply(arow[kk], srow[kk], krow[kk], ctr);
          crow[j] = acc;
        }
      }
      ctr->additions += uint64_t(rows) * uint64_t(nout) * uint64_t(k);
      for (int i = 0; i < rows; ++i) {
        float* crow = &yv.values[size_t(i) * nout];
        for (int j = 0; j < nout; ++j) crow[j] += sl.add[size_t(j)];
      }
      ctr->additions += uint64_t(rows) * uint64_t(nout);
      cur = std::move(yv);
    } else if (const Conv2d* cv = std::get_if<Conv2d>(&sl.spec)) {
      const ops::Conv2dDims d = ops::conv2d_dims(
          cur.shape, {cv->out_ch, cv->in_ch, cv->kh, cv->kw}, cv->stride, cv->pad);
      Tensor yv = Tensor::zeros({d.n, d.f, d.oh, d.ow});
      std::vector<float> col(size_t(d.oh) * d.ow * d.col_w);
      const int64_t plane = int64_t(d.oh) * d.ow;
      for (int n = 0; n < d.n; ++n) {
        ops::im2col(&cur.values[size_t(n) * d.c * d.h * d.w], d, col.data());
        float* yb = &yv.values[size_t(n) * d.f * plane];
        for (int f = 0; f < d.f; ++f) {
          const int8_t* srow = &sl.w.sign[size_t(f) * d.col_w];
          const int32_t* krow = &sl.w.shift[size_t(f) * d.col_w];
          float* yrow = yb + int64_t(f) * plane;
          for (int64_t p = 0; p < plane; ++p) {
            const float* patch = &col[size_t(p) * d.col_w];
            float acc = 0.0f;
            for (int64_t q = 0; q < d.col_w; ++q)
              acc += shift_multiply(patch[q], srow[q], krow[q], ctr);
            yrow[p] = acc;
          }
        }
      }
      ctr->additions += uint64_t(d.n) * uint64_t(d.f) * uint64_t(plane) *
                        uint64_t(d.col_w);
      for (int n = 0; n < d.n; ++n)
        for (int ch = 0; ch < d.f; ++ch) {
          const float b = sl.add[size_t(ch)];
          float* base = &yv.values[(size_t(n) * d.f + ch) * plane];
          for (int64_t p = 0; p < plane; ++p) base[p] += b;
        }
      ctr->additions += uint64_t(d.n) * uint64_t(d.f) * uint64_t(plane);
      cur = std::move(yv);
    } else if (std::holds_alternative<BatchNorm>(sl.spec)) {
      GTC_CHECK(cur.rank() == 4, ShapeError, "batchnorm wants [n,c,h,w]");
      const int n = cur.dim(0), ch = cur.dim(1);
      const int64_t hw = int64_t(cur.dim(2)) * cur.dim(3);
      for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < ch; ++cc) {
          const int8_t sgn = sl.w.sign[size_t(cc)];
          const int32_t k = sl.w.shift[size_t(cc)];
          const float sh = sl.add[size_t(cc)];
          float* base = &cur.values[(size_t(i) * ch + cc) * hw];
          for (int64_t p = 0; p < hw; ++p)
            base[p] = shift_multiply(base[p], sgn, k, ctr) + sh;
        }
      ctr->additions += uint64_t(n) * uint64_t(ch) * uint64_t(hw);
    } else if (const MaxPool* p = std::get_if<MaxPool>(&sl.spec)) {
      cur = ops::maxpool2d(cur, p->k, p->stride);
    } else if (const Activation* a = std::get_if<Activation>(&sl.spec)) {
      switch (a->kind) {
        case Act::relu:
          cur = ops::relu(cur);
          break;
        case Act::tanh:
          cur = ops::tanh_t(cur);
          break;
        case Act::sigmoid:
          cur = ops::sigmoid(cur);
          break;
        case Act::softmax:
          if (!(last && sm.drop_trailing_softmax)) cur = ops::softmax(cur, 1);
          break;
      }
    } else if (std::holds_alternative<Dropout>(sl.spec)) {
      // identity at inference
    } else {  // Flatten
      Tensor flat = cur;
      flat.shape = {cur.dim(0), int(cur.numel() / cur.dim(0))};
      cur = std::move(flat);
    }
  }
  return cur;
}

Tensor shift_forward_vae(const ShiftVae& sv, const Tensor& x, OpCounter* ctr) {
  const Tensor h = shift_forward(sv.encoder, x, ctr);
  const Tensor mu = shift_forward(sv.mean_head, h, ctr);
  return shift_forward(sv.decoder, mu, ctr);
}

int64_t float_multiply_count(const Model& m, int64_t n) {
  std::vector<int> shape = m.input_shape;
  int64_t mults = 0;
  for (const LayerSpec& ls : m.layers) {
    if (const Dense* d = std::get_if<Dense>(&ls)) {
      mults += n * int64_t(d->in) * d->out;
      shape = {d->out};
    } else if (const Conv2d* c = std::get_if<Conv2d>(&ls)) {
      const ops::Conv2dDims dd =
          ops::conv2d_dims({1, shape[0], shape[1], shape[2]},
                           {c->out_ch, c->in_ch, c->kh, c->kw}, c->stride, c->pad);
      mults += n * int64_t(dd.f) * dd.oh * dd.ow * dd.col_w;
      shape = {dd.f, dd.oh, dd.ow};
    } else if (std::holds_alternative<BatchNorm>(ls)) {
      mults += n * shape_count(shape);
    } else if (const MaxPool* p = std::get_if<MaxPool>(&ls)) {
      shape = {shape[0], (shape[1] - p->k) / p->stride + 1,
               (shape[2] - p->k) / p->stride + 1};
    } else if (std::holds_alternative<Flatten>(ls)) {
      shape = {int(shape_count(shape))};
    }
  }
  return mults;
}

int64_t float_multiply_count_vae(const VaeModel& m, int64_t n) {
  // Evaluation path only: encoder, mean head, decoder.
  return float_multiply_count(m.encoder, n) + float_multiply_count(m.mean_head, n) +
         float_multiply_count(m.decoder, n);
}

namespace {

BenchReport finish_bench(BenchReport r, int repeats,
                         const std::function<Tensor(OpCounter*)>& pass) {
  OpCounter scratch;
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < repeats; ++i) {
    scratch = OpCounter{};
    const Tensor t = pass(&scratch);
    (void)t;
  }
  const auto t1 = std::chrono::steady_clock::now();
  const double ns =
      double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
  r.wall_ns_per_pass = repeats > 0 ? ns / double(repeats) : 0.0;
  r.size_ratio =
      r.gtcq_bytes > 0 ? double(r.float_bytes) / double(r.gtcq_bytes) : 0.0;
  return r;
}

void check_match(const Tensor& ref, const Tensor& got, const OpCounter& ctr) {
  GTC_CHECK(ref.shape == got.shape, NumericError,
            "engine output shape differs from the float student path");
  const bool same = std::memcmp(ref.values.data(), got.values.data(),
                                ref.values.size() * sizeof(float)) == 0;
  GTC_CHECK(same, NumericError,
            "shift engine output is not bit-identical to the float student path");
  GTC_CHECK(ctr.multiplies == 0, NumericError, "engine executed multiplies");
}

}  // namespace

BenchReport run_bench(const Model& m, const Tensor& x, int repeats) {
  BenchReport r;
  const ShiftModel sm = export_shift_model(m);
  const Tensor ref = eval_forward(m, x, /*student=*/true, /*skip_final_softmax=*/true);
  const Tensor got = shift_forward(sm, x, &r.counter);
  check_match(ref, got, r.counter);
  r.float_multiplies = float_multiply_count(m, x.dim(0));
  r.float_bytes = m.param_count() * 4;
  r.gtcq_bytes = int64_t(encode_gtcq(collect_gtcq(m)).size());
  return finish_bench(std::move(r), repeats,
                      [&](OpCounter* c) { return shift_forward(sm, x, c); });
}

BenchReport run_bench_vae(const VaeModel& m, const Tensor& x, int repeats) {
  BenchReport r;
  const ShiftVae sv = export_shift_vae(m);
  const Tensor ref = eval_forward_vae(m, x, /*student=*/true);
  const Tensor got = shift_forward_vae(sv, x, &r.counter);
  check_match(ref, got, r.counter);
  r.float_multiplies = float_multiply_count_vae(m, x.dim(0));
  r.float_bytes = m.param_count() * 4;
  r.gtcq_bytes = int64_t(encode_gtcq(collect_gtcq(m)).size());
  return finish_bench(std::move(r), repeats,
                      [&](OpCounter* c) { return shift_forward_vae(sv, x, c); });
}

std::string bench_json(const BenchReport& r) {
  nlohmann::ordered_json j;
  j["engine"]["multiplies"] = r.counter.multiplies;
  j["engine"]["shifts"] = r.counter.shifts;
  j["engine"]["adds"] = r.counter.additions;
  j["engine"]["sign_flips"] = r.counter.sign_flips;
  j["engine"]["saturated"] = r.counter.saturated;
  j["engine"]["flushed"] = r.counter.flushed;
  j["engine"]["wall_ns_per_pass"] = r.wall_ns_per_pass;
  j["float"]["multiplies"] = r.float_multiplies;
  j["sizes"]["float_bytes"] = r.float_bytes;
  j["sizes"]["gtcq_bytes"] = r.gtcq_bytes;
  j["sizes"]["ratio"] = r.size_ratio;
  return j.dump(2) + "\n";
}

}  // namespace gtc
