#pragma once

#include <vector>

#include "gtc/tensor.hpp"

// Forward kernels shared by the training graph and the inference engines.
// Every reduction accumulates in ascending index order into one accumulator,
// so repeated runs (and the shift engine, which mirrors these loops) are
// bit-identical.
namespace gtc::ops {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// [m,k] x [n,k] -> [m,n]; b holds row-major rows that act as columns.
// Dense layers store weights [out, in] and use this form.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

struct Conv2dDims {
  int n, c, h, w;       // input
  int f, kh, kw;        // filters
  int stride, pad;
  int oh, ow;           // output spatial
  int64_t col_w;        // c*kh*kw
};

// Validates shapes; throws ShapeError when the output size is not integral.
Conv2dDims conv2d_dims(const std::vector<int>& xshape, const std::vector<int>& wshape,
                       int stride, int pad);

// Expand one image [c,h,w] into [oh*ow, c*kh*kw] patch rows (zero padding).
void im2col(const float* x, const Conv2dDims& d, float* col);

// x [n,c,h,w], w [f,c,kh,kw] -> [n,f,oh,ow]
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);

// (gamma/sigma)*(x-mu)+beta per channel, sigma = sqrt(var+eps).
// x [n,c,h,w]; gamma/beta/mu/var are [c].
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 const Tensor& mu, const Tensor& var, float eps);

Tensor relu(const Tensor& x);
Tensor tanh_t(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// softmax along one axis; rows are processed with a max-shift for stability
Tensor softmax(const Tensor& x, int axis);

// max pooling, window k, given stride, no padding; output dims floor
Tensor maxpool2d(const Tensor& x, int k, int stride);

Tensor add_rowvec(const Tensor& x, const Tensor& b);  // [n,d] + [d]

float sigmoid_scalar(float v);

}  // namespace gtc::ops
