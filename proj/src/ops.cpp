#include "gtc/ops.hpp"

#include <cmath>
#include <cstring>

namespace gtc::ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  GTC_CHECK(a.rank() == 2 && b.rank() == 2, ShapeError, "matmul wants rank-2 operands");
  GTC_CHECK(a.dim(1) == b.dim(0), ShapeError,
            "matmul inner dims " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c = Tensor::zeros({m, n});
  // i-k-j order: every c[i][j] still accumulates in ascending k
  for (int i = 0; i < m; ++i) {
    const float* arow = &a.values[size_t(i) * k];
    float* crow = &c.values[size_t(i) * n];
    for (int kk = 0; kk < k; ++kk) {
      const float aik = arow[kk];
      const float* brow = &b.values[size_t(kk) * n];
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  GTC_CHECK(a.rank() == 2 && b.rank() == 2, ShapeError, "matmul_nt wants rank-2 operands");
  GTC_CHECK(a.dim(1) == b.dim(1), ShapeError,
            "matmul_nt inner dims " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const float* arow = &a.values[size_t(i) * k];
    float* crow = &c.values[size_t(i) * n];
    for (int j = 0; j < n; ++j) {
      const float* brow = &b.values[size_t(j) * k];
      float acc = 0.0f;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = acc;
    }
  }
  return c;
}

Conv2dDims conv2d_dims(const std::vector<int>& xs, const std::vector<int>& ws,
                       int stride, int pad) {
  GTC_CHECK(xs.size() == 4 && ws.size() == 4, ShapeError, "conv2d wants [n,c,h,w] and [f,c,kh,kw]");
  GTC_CHECK(stride >= 1 && pad >= 0, ShapeError, "conv2d bad stride/pad");
  Conv2dDims d;
  d.n = xs[0]; d.c = xs[1]; d.h = xs[2]; d.w = xs[3];
  d.f = ws[0]; d.kh = ws[2]; d.kw = ws[3];
  GTC_CHECK(ws[1] == d.c, ShapeError, "conv2d channel mismatch");
  d.stride = stride;
  d.pad = pad;
  const int eh = d.h + 2 * pad - d.kh;
  const int ew = d.w + 2 * pad - d.kw;
  GTC_CHECK(eh >= 0 && ew >= 0, ShapeError, "conv2d kernel larger than padded input");
  GTC_CHECK(eh % stride == 0 && ew % stride == 0, ShapeError,
            "conv2d output size not integral for " + shape_str(xs));
  d.oh = eh / stride + 1;
  d.ow = ew / stride + 1;
  d.col_w = int64_t(d.c) * d.kh * d.kw;
  return d;
}

void im2col(const float* x, const Conv2dDims& d, float* col) {
  // row per output position, inner order (c, kh, kw) ascending
  for (int oh = 0; oh < d.oh; ++oh) {
    for (int ow = 0; ow < d.ow; ++ow) {
      float* row = col + (int64_t(oh) * d.ow + ow) * d.col_w;
      int64_t p = 0;
      const int ih0 = oh * d.stride - d.pad;
      const int iw0 = ow * d.stride - d.pad;
      for (int c = 0; c < d.c; ++c) {
        const float* plane = x + int64_t(c) * d.h * d.w;
        for (int kh = 0; kh < d.kh; ++kh) {
          const int ih = ih0 + kh;
          for (int kw = 0; kw < d.kw; ++kw, ++p) {
            const int iw = iw0 + kw;
            row[p] = (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w)
                         ? plane[int64_t(ih) * d.w + iw]
                         : 0.0f;
          }
        }
      }
    }
  }
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  const Conv2dDims d = conv2d_dims(x.shape, w.shape, stride, pad);
  Tensor y = Tensor::zeros({d.n, d.f, d.oh, d.ow});
  std::vector<float> col(size_t(d.oh) * d.ow * d.col_w);
  const int64_t plane = int64_t(d.oh) * d.ow;
  for (int n = 0; n < d.n; ++n) {
    im2col(&x.values[size_t(n) * d.c * d.h * d.w], d, col.data());
    float* yb = &y.values[size_t(n) * d.f * plane];
    for (int f = 0; f < d.f; ++f) {
      const float* wrow = &w.values[size_t(f) * d.col_w];
      float* yrow = yb + int64_t(f) * plane;
      for (int64_t p = 0; p < plane; ++p) {
        const float* crow = &col[size_t(p) * d.col_w];
        float acc = 0.0f;
        for (int64_t q = 0; q < d.col_w; ++q) acc += wrow[q] * crow[q];
        yrow[p] = acc;
      }
    }
  }
  return y;
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 const Tensor& mu, const Tensor& var, float eps) {
  GTC_CHECK(x.rank() == 4, ShapeError, "batchnorm wants [n,c,h,w]");
  const int c = x.dim(1);
  GTC_CHECK(gamma.numel() == c && beta.numel() == c && mu.numel() == c && var.numel() == c,
            ShapeError, "batchnorm parameter size mismatch");
  for (float v : var.values) GTC_CHECK(v >= 0.0f, NumericError, "batchnorm negative variance");
  Tensor y = Tensor::zeros(x.shape);
  const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
  for (int n = 0; n < x.dim(0); ++n) {
    for (int ch = 0; ch < c; ++ch) {
      const float s = gamma.values[ch] / std::sqrt(var.values[ch] + eps);
      const float m = mu.values[ch];
      const float b = beta.values[ch];
      const float* xs = &x.values[(size_t(n) * c + ch) * hw];
      float* ys = &y.values[(size_t(n) * c + ch) * hw];
      for (int64_t i = 0; i < hw; ++i) ys[i] = s * (xs[i] - m) + b;
    }
  }
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  y.requires_grad = false;
  y.grad.clear();
  for (auto& v : y.values) v = v > 0.0f ? v : 0.0f;
  return y;
}

Tensor tanh_t(const Tensor& x) {
  Tensor y = x;
  y.requires_grad = false;
  y.grad.clear();
  for (auto& v : y.values) v = std::tanh(v);
  return y;
}

float sigmoid_scalar(float v) {
  // split on sign to avoid exp overflow
  if (v >= 0.0f) {
    const float e = std::exp(-v);
    return 1.0f / (1.0f + e);
  }
  const float e = std::exp(v);
  return e / (1.0f + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  y.requires_grad = false;
  y.grad.clear();
  for (auto& v : y.values) v = sigmoid_scalar(v);
  return y;
}

Tensor softmax(const Tensor& x, int axis) {
  GTC_CHECK(axis >= 0 && axis < x.rank(), ShapeError, "softmax axis out of range");
  const int k = x.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor y = Tensor::zeros(x.shape);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * k * inner + in;
      float mx = x.values[size_t(base)];
      for (int j = 1; j < k; ++j) mx = std::max(mx, x.values[size_t(base + j * inner)]);
      float sum = 0.0f;
      for (int j = 0; j < k; ++j) {
        const float e = std::exp(x.values[size_t(base + j * inner)] - mx);
        y.values[size_t(base + j * inner)] = e;
        sum += e;
      }
      for (int j = 0; j < k; ++j) y.values[size_t(base + j * inner)] /= sum;
    }
  }
  return y;
}

Tensor maxpool2d(const Tensor& x, int k, int stride) {
  GTC_CHECK(x.rank() == 4, ShapeError, "maxpool2d wants [n,c,h,w]");
  GTC_CHECK(k >= 1 && stride >= 1, ShapeError, "maxpool2d bad window/stride");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  GTC_CHECK(h >= k && w >= k, ShapeError, "maxpool2d window larger than input");
  const int oh = (h - k) / stride + 1;
  const int ow = (w - k) / stride + 1;
  Tensor y = Tensor::zeros({n, c, oh, ow});
  for (int nn = 0; nn < n; ++nn) {
    for (int ch = 0; ch < c; ++ch) {
      const float* plane = &x.values[(size_t(nn) * c + ch) * h * w];
      float* out = &y.values[(size_t(nn) * c + ch) * oh * ow];
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          float best = plane[int64_t(i * stride) * w + j * stride];
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) {
              const float v = plane[int64_t(i * stride + a) * w + (j * stride + b)];
              if (v > best) best = v;
            }
          out[int64_t(i) * ow + j] = best;
        }
      }
    }
  }
  return y;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  GTC_CHECK(x.rank() == 2 && b.rank() == 1 && x.dim(1) == b.dim(0), ShapeError,
            "add_rowvec shape mismatch " + shape_str(x.shape) + " + " + shape_str(b.shape));
  Tensor y = x;
  y.requires_grad = false;
  y.grad.clear();
  const int n = x.dim(0), d = x.dim(1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) y.values[size_t(i) * d + j] += b.values[size_t(j)];
  return y;
}

}  // namespace gtc::ops
