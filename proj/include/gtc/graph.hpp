#pragma once

#include <cstdint>
#include <vector>

#include "gtc/quant.hpp"
#include "gtc/rng.hpp"
#include "gtc/tensor.hpp"

namespace gtc {

using NodeId = int32_t;

enum class QuantMode {
  rounded,  // production path: integer exponents
  smooth    // round/ceil replaced by identity, for finite-difference checks
};

enum class OpKind : uint8_t {
  Leaf, Constant,
  MatMul, MatMulNT, Conv2d,
  Add, Sub, Mul, Div, Neg, Exp, Square, SqrtShift, MulScalar, AddScalar,
  AddRowVec, ScaleChannels, AddChannels, SubChannels, ChannelMean,
  Relu, Tanh, Sigmoid, SoftmaxRows, LogSoftmaxRows,
  MaxPool2d, Dropout, Reshape,
  RowSum, MeanAll, SumAll,
  CeWithLogits, Bce,
  Quantize, BitCost
};

// Per-layer info recorded by the bit-cost node: the exponent range of the
// layer's codes and where the extremes live (for the surrogate gradient).
struct BitGroupInfo {
  std::vector<NodeId> qnodes;
  bool all_zero = true;
  int bits = 1;          // discrete width (rounded mode)
  double range = 1.0;    // M - m + 1 (discrete or smooth)
  double value = 2.0;    // 2^bits contribution to the cost
  double scale = 0.0;    // d(2^bits)/d(range) via the straight-through rule
  NodeId max_q = -1; int64_t max_i = -1; float max_w = 0.0f;
  NodeId min_q = -1; int64_t min_i = -1; float min_w = 0.0f;
};

struct Node {
  OpKind kind = OpKind::Leaf;
  NodeId a = -1, b = -1, c = -1;
  Tensor out;
  int i0 = 0, i1 = 0;
  float f0 = 0.0f;
  std::vector<int32_t> iaux;          // labels, argmax indices, exponents
  std::vector<int8_t> saux;           // quantize signs
  std::vector<float> faux;            // masks, cached probabilities
  std::vector<BitGroupInfo> groups;   // bit-cost only
  QuantMode qmode = QuantMode::rounded;
  bool req = false;                   // any ancestor requires grad
};

// Reverse-mode tape.  Operations append records in execution order; backward
// walks them once in reverse.  All gradient accumulation is ascending-index,
// single-threaded, so identical graphs give bit-identical gradients.
class Tape {
 public:
  NodeId leaf(const Tensor& t);
  NodeId constant(Tensor t);

  const Tensor& val(NodeId id) const { return nodes_[size_t(id)].out; }
  const Node& node(NodeId id) const { return nodes_[size_t(id)]; }
  size_t size() const { return nodes_.size(); }

  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_nt(NodeId a, NodeId b);
  NodeId conv2d(NodeId x, NodeId w, int stride, int pad);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId neg(NodeId x);
  NodeId exp(NodeId x);
  NodeId square(NodeId x);
  NodeId sqrt_shift(NodeId x, float eps);
  NodeId mul_scalar(NodeId x, float s);
  NodeId add_scalar(NodeId x, float s);

  NodeId add_rowvec(NodeId x, NodeId b);
  NodeId scale_channels(NodeId x, NodeId s);
  NodeId add_channels(NodeId x, NodeId b);
  NodeId sub_channels(NodeId x, NodeId m);
  NodeId channel_mean(NodeId x);

  NodeId relu(NodeId x);
  NodeId tanh_t(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId softmax_rows(NodeId x);
  NodeId log_softmax_rows(NodeId x);

  NodeId maxpool2d(NodeId x, int k, int stride);
  NodeId dropout(NodeId x, std::vector<float> mask, float scale);
  NodeId reshape(NodeId x, std::vector<int> shape);

  NodeId row_sum(NodeId x);
  NodeId mean_all(NodeId x);
  NodeId sum_all(NodeId x);

  NodeId ce_with_logits(NodeId logits, const std::vector<int>& labels);
  NodeId bce(NodeId pred, NodeId target);

  // w quantized elementwise with theta read from scalar nodes th1/th2;
  // gradients flow into all three via the straight-through estimator
  NodeId quantize(NodeId w, NodeId th1, NodeId th2, float eps_zero, QuantMode mode,
                  bool stochastic = false, SeededRng* rng = nullptr);

  // sum over groups of 2^bits; each group lists the quantize nodes whose
  // codes share one layer range (weights + bias)
  NodeId bit_cost(const std::vector<std::vector<NodeId>>& groups);
  const std::vector<BitGroupInfo>& bit_cost_groups(NodeId id) const;

  // seed d(root)=1 and sweep; root must be scalar; throws if run twice
  void backward(NodeId root);

  bool has_grad(NodeId id) const;
  const std::vector<float>& grad(NodeId id) const;

 private:
  NodeId push(Node n);
  std::vector<float>& g(NodeId id);
  void accum(NodeId id, const float* src, size_t n);  // honors req flag
  void backward_node(NodeId id);

  std::vector<Node> nodes_;
  std::vector<std::vector<float>> grads_;
  bool ran_backward_ = false;
  static const std::vector<float> empty_grad_;
};

}  // namespace gtc
