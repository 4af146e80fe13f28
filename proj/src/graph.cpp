#include "gtc/graph.hpp"

#include <cmath>
#include <cstring>

#include "gtc/ops.hpp"

namespace gtc {

namespace {
constexpr float kLn2f = 0.69314718f;
constexpr float kBceClamp = 1e-7f;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  GTC_CHECK(a.same_shape(b), ShapeError,
            std::string(op) + " shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

void check_chan_pair(const Tensor& x, const Tensor& v, const char* op) {
  GTC_CHECK(x.rank() == 4, ShapeError, std::string(op) + " wants [n,c,h,w]");
  GTC_CHECK(v.rank() == 1 && v.dim(0) == x.dim(1), ShapeError,
            std::string(op) + " channel vector mismatch");
}
}  // namespace

const std::vector<float> Tape::empty_grad_;

NodeId Tape::push(Node n) {
  // propagate the requires-grad flag from parents
  if (!n.req) {
    for (NodeId p : {n.a, n.b, n.c})
      if (p >= 0 && nodes_[size_t(p)].req) n.req = true;
  }
  nodes_.push_back(std::move(n));
  return NodeId(nodes_.size() - 1);
}

NodeId Tape::leaf(const Tensor& t) {
  Node n;
  n.kind = OpKind::Leaf;
  n.out = t;
  n.req = t.requires_grad;
  return push(std::move(n));
}

NodeId Tape::constant(Tensor t) {
  Node n;
  n.kind = OpKind::Constant;
  t.requires_grad = false;
  n.out = std::move(t);
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  Node n;
  n.kind = OpKind::MatMul;
  n.a = a; n.b = b;
  n.out = ops::matmul(val(a), val(b));
  return push(std::move(n));
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
  Node n;
  n.kind = OpKind::MatMulNT;
  n.a = a; n.b = b;
  n.out = ops::matmul_nt(val(a), val(b));
  return push(std::move(n));
}

NodeId Tape::conv2d(NodeId x, NodeId w, int stride, int pad) {
  Node n;
  n.kind = OpKind::Conv2d;
  n.a = x; n.b = w;
  n.i0 = stride; n.i1 = pad;
  n.out = ops::conv2d(val(x), val(w), stride, pad);
  return push(std::move(n));
}

#define GTC_EW2(NAME, KIND, EXPR)                               \
  NodeId Tape::NAME(NodeId a, NodeId b) {                       \
    check_same_shape(val(a), val(b), #NAME);                    \
    Node n;                                                     \
    n.kind = OpKind::KIND;                                      \
    n.a = a; n.b = b;                                           \
    n.out = Tensor::zeros(val(a).shape);                        \
    const auto& av = val(a).values;                             \
    const auto& bv = val(b).values;                             \
    for (size_t i = 0; i < av.size(); ++i)                      \
      n.out.values[i] = EXPR;                                   \
    return push(std::move(n));                                  \
  }

GTC_EW2(add, Add, av[i] + bv[i])
GTC_EW2(sub, Sub, av[i] - bv[i])
GTC_EW2(mul, Mul, av[i] * bv[i])
GTC_EW2(div, Div, av[i] / bv[i])
#undef GTC_EW2

#define GTC_EW1(NAME, KIND, EXPR)                               \
  NodeId Tape::NAME(NodeId x) {                                 \
    Node n;                                                     \
    n.kind = OpKind::KIND;                                      \
    n.a = x;                                                    \
    n.out = Tensor::zeros(val(x).shape);                        \
    const auto& xv = val(x).values;                             \
    for (size_t i = 0; i < xv.size(); ++i)                      \
      n.out.values[i] = EXPR;                                   \
    return push(std::move(n));                                  \
  }

GTC_EW1(neg, Neg, -xv[i])
GTC_EW1(exp, Exp, std::exp(xv[i]))
GTC_EW1(square, Square, xv[i] * xv[i])
GTC_EW1(relu, Relu, xv[i] > 0.0f ? xv[i] : 0.0f)
GTC_EW1(tanh_t, Tanh, std::tanh(xv[i]))
GTC_EW1(sigmoid, Sigmoid, ops::sigmoid_scalar(xv[i]))
#undef GTC_EW1

NodeId Tape::sqrt_shift(NodeId x, float eps) {
  Node n;
  n.kind = OpKind::SqrtShift;
  n.a = x;
  n.f0 = eps;
  n.out = Tensor::zeros(val(x).shape);
  const auto& xv = val(x).values;
  for (size_t i = 0; i < xv.size(); ++i) n.out.values[i] = std::sqrt(xv[i] + eps);
  return push(std::move(n));
}

NodeId Tape::mul_scalar(NodeId x, float s) {
  Node n;
  n.kind = OpKind::MulScalar;
  n.a = x;
  n.f0 = s;
  n.out = Tensor::zeros(val(x).shape);
  const auto& xv = val(x).values;
  for (size_t i = 0; i < xv.size(); ++i) n.out.values[i] = xv[i] * s;
  return push(std::move(n));
}

NodeId Tape::add_scalar(NodeId x, float s) {
  Node n;
  n.kind = OpKind::AddScalar;
  n.a = x;
  n.f0 = s;
  n.out = Tensor::zeros(val(x).shape);
  const auto& xv = val(x).values;
  for (size_t i = 0; i < xv.size(); ++i) n.out.values[i] = xv[i] + s;
  return push(std::move(n));
}

NodeId Tape::add_rowvec(NodeId x, NodeId b) {
  Node n;
  n.kind = OpKind::AddRowVec;
  n.a = x; n.b = b;
  n.out = ops::add_rowvec(val(x), val(b));
  return push(std::move(n));
}

NodeId Tape::scale_channels(NodeId x, NodeId s) {
  check_chan_pair(val(x), val(s), "scale_channels");
  Node n;
  n.kind = OpKind::ScaleChannels;
  n.a = x; n.b = s;
  const Tensor& xv = val(x);
  const Tensor& sv = val(s);
  n.out = Tensor::zeros(xv.shape);
  const int c = xv.dim(1);
  const int64_t hw = int64_t(xv.dim(2)) * xv.dim(3);
  for (int nn = 0; nn < xv.dim(0); ++nn)
    for (int ch = 0; ch < c; ++ch) {
      const float sc = sv.values[size_t(ch)];
      const size_t base = (size_t(nn) * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) n.out.values[base + i] = xv.values[base + i] * sc;
    }
  return push(std::move(n));
}

NodeId Tape::add_channels(NodeId x, NodeId b) {
  check_chan_pair(val(x), val(b), "add_channels");
  Node n;
  n.kind = OpKind::AddChannels;
  n.a = x; n.b = b;
  const Tensor& xv = val(x);
  const Tensor& bv = val(b);
  n.out = Tensor::zeros(xv.shape);
  const int c = xv.dim(1);
  const int64_t hw = int64_t(xv.dim(2)) * xv.dim(3);
  for (int nn = 0; nn < xv.dim(0); ++nn)
    for (int ch = 0; ch < c; ++ch) {
      const float bc = bv.values[size_t(ch)];
      const size_t base = (size_t(nn) * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) n.out.values[base + i] = xv.values[base + i] + bc;
    }
  return push(std::move(n));
}

NodeId Tape::sub_channels(NodeId x, NodeId m) {
  check_chan_pair(val(x), val(m), "sub_channels");
  Node n;
  n.kind = OpKind::SubChannels;
  n.a = x; n.b = m;
  const Tensor& xv = val(x);
  const Tensor& mv = val(m);
  n.out = Tensor::zeros(xv.shape);
  const int c = xv.dim(1);
  const int64_t hw = int64_t(xv.dim(2)) * xv.dim(3);
  for (int nn = 0; nn < xv.dim(0); ++nn)
    for (int ch = 0; ch < c; ++ch) {
      const float mc = mv.values[size_t(ch)];
      const size_t base = (size_t(nn) * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) n.out.values[base + i] = xv.values[base + i] - mc;
    }
  return push(std::move(n));
}

NodeId Tape::channel_mean(NodeId x) {
  const Tensor& xv = val(x);
  GTC_CHECK(xv.rank() == 4, ShapeError, "channel_mean wants [n,c,h,w]");
  Node n;
  n.kind = OpKind::ChannelMean;
  n.a = x;
  const int c = xv.dim(1);
  const int64_t hw = int64_t(xv.dim(2)) * xv.dim(3);
  n.out = Tensor::zeros({c});
  const float inv = 1.0f / float(int64_t(xv.dim(0)) * hw);
  for (int ch = 0; ch < c; ++ch) {
    float acc = 0.0f;
    for (int nn = 0; nn < xv.dim(0); ++nn) {
      const size_t base = (size_t(nn) * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) acc += xv.values[base + i];
    }
    n.out.values[size_t(ch)] = acc * inv;
  }
  return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId x) {
  GTC_CHECK(val(x).rank() == 2, ShapeError, "softmax_rows wants [n,k]");
  Node n;
  n.kind = OpKind::SoftmaxRows;
  n.a = x;
  n.out = ops::softmax(val(x), 1);
  return push(std::move(n));
}

NodeId Tape::log_softmax_rows(NodeId x) {
  const Tensor& xv = val(x);
  GTC_CHECK(xv.rank() == 2, ShapeError, "log_softmax_rows wants [n,k]");
  Node n;
  n.kind = OpKind::LogSoftmaxRows;
  n.a = x;
  n.out = Tensor::zeros(xv.shape);
  const int rows = xv.dim(0), k = xv.dim(1);
  for (int i = 0; i < rows; ++i) {
    const float* row = &xv.values[size_t(i) * k];
    float mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    float sum = 0.0f;
    for (int j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const float lse = mx + std::log(sum);
    for (int j = 0; j < k; ++j) n.out.values[size_t(i) * k + j] = row[j] - lse;
  }
  return push(std::move(n));
}

NodeId Tape::maxpool2d(NodeId x, int k, int stride) {
  const Tensor& xv = val(x);
  GTC_CHECK(xv.rank() == 4, ShapeError, "maxpool2d wants [n,c,h,w]");
  GTC_CHECK(k >= 1 && stride >= 1, ShapeError, "maxpool2d bad window/stride");
  const int nn = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  GTC_CHECK(h >= k && w >= k, ShapeError, "maxpool2d window larger than input");
  const int oh = (h - k) / stride + 1;
  const int ow = (w - k) / stride + 1;
  Node n;
  n.kind = OpKind::MaxPool2d;
  n.a = x;
  n.i0 = k; n.i1 = stride;
  n.out = Tensor::zeros({nn, c, oh, ow});
  n.iaux.resize(size_t(nn) * c * oh * ow);  // argmax within the input plane
  for (int b = 0; b < nn; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float* plane = &xv.values[(size_t(b) * c + ch) * h * w];
      const size_t obase = (size_t(b) * c + ch) * oh * ow;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          int32_t arg = int32_t(int64_t(i * stride) * w + j * stride);
          float best = plane[arg];
          for (int a = 0; a < k; ++a)
            for (int bb = 0; bb < k; ++bb) {
              const int32_t pos = int32_t(int64_t(i * stride + a) * w + (j * stride + bb));
              if (plane[pos] > best) {  // strict: first max wins
                best = plane[pos];
                arg = pos;
              }
            }
          n.out.values[obase + size_t(i) * ow + j] = best;
          n.iaux[obase + size_t(i) * ow + j] = arg;
        }
    }
  return push(std::move(n));
}

NodeId Tape::dropout(NodeId x, std::vector<float> mask, float scale) {
  const Tensor& xv = val(x);
  GTC_CHECK(mask.size() == xv.values.size(), ShapeError, "dropout mask size mismatch");
  Node n;
  n.kind = OpKind::Dropout;
  n.a = x;
  n.f0 = scale;
  n.out = Tensor::zeros(xv.shape);
  for (size_t i = 0; i < mask.size(); ++i) n.out.values[i] = xv.values[i] * mask[i] * scale;
  n.faux = std::move(mask);
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId x, std::vector<int> shape) {
  const Tensor& xv = val(x);
  GTC_CHECK(numel_of(shape) == xv.numel(), ShapeError,
            "reshape " + shape_str(xv.shape) + " -> " + shape_str(shape) + " changes element count");
  Node n;
  n.kind = OpKind::Reshape;
  n.a = x;
  n.out.shape = std::move(shape);
  n.out.values = xv.values;
  return push(std::move(n));
}

NodeId Tape::row_sum(NodeId x) {
  const Tensor& xv = val(x);
  GTC_CHECK(xv.rank() == 2, ShapeError, "row_sum wants [n,d]");
  Node n;
  n.kind = OpKind::RowSum;
  n.a = x;
  const int rows = xv.dim(0), d = xv.dim(1);
  n.out = Tensor::zeros({rows});
  for (int i = 0; i < rows; ++i) {
    float acc = 0.0f;
    for (int j = 0; j < d; ++j) acc += xv.values[size_t(i) * d + j];
    n.out.values[size_t(i)] = acc;
  }
  return push(std::move(n));
}

NodeId Tape::mean_all(NodeId x) {
  Node n;
  n.kind = OpKind::MeanAll;
  n.a = x;
  const auto& xv = val(x).values;
  float acc = 0.0f;
  for (float v : xv) acc += v;
  n.out = Tensor::scalar(acc / float(xv.size()));
  return push(std::move(n));
}

NodeId Tape::sum_all(NodeId x) {
  Node n;
  n.kind = OpKind::SumAll;
  n.a = x;
  const auto& xv = val(x).values;
  float acc = 0.0f;
  for (float v : xv) acc += v;
  n.out = Tensor::scalar(acc);
  return push(std::move(n));
}

NodeId Tape::ce_with_logits(NodeId logits, const std::vector<int>& labels) {
  const Tensor& lv = val(logits);
  GTC_CHECK(lv.rank() == 2, ShapeError, "ce_with_logits wants [n,k] logits");
  const int rows = lv.dim(0), k = lv.dim(1);
  GTC_CHECK(int(labels.size()) == rows, ShapeError, "ce_with_logits label count mismatch");
  Node n;
  n.kind = OpKind::CeWithLogits;
  n.a = logits;
  n.iaux.assign(labels.begin(), labels.end());
  n.faux.resize(size_t(rows) * k);  // cached softmax for backward
  float loss = 0.0f;
  for (int i = 0; i < rows; ++i) {
    GTC_CHECK(labels[size_t(i)] >= 0 && labels[size_t(i)] < k, ShapeError,
              "class index out of range");
    const float* row = &lv.values[size_t(i) * k];
    float mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    float sum = 0.0f;
    for (int j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const float lse = mx + std::log(sum);
    for (int j = 0; j < k; ++j) n.faux[size_t(i) * k + j] = std::exp(row[j] - lse);
    loss += lse - row[labels[size_t(i)]];
  }
  n.out = Tensor::scalar(loss / float(rows));
  return push(std::move(n));
}

NodeId Tape::bce(NodeId pred, NodeId target) {
  check_same_shape(val(pred), val(target), "bce");
  Node n;
  n.kind = OpKind::Bce;
  n.a = pred; n.b = target;
  const auto& pv = val(pred).values;
  const auto& tv = val(target).values;
  float acc = 0.0f;
  for (size_t i = 0; i < pv.size(); ++i) {
    float p = pv[i];
    if (p < kBceClamp) p = kBceClamp;
    if (p > 1.0f - kBceClamp) p = 1.0f - kBceClamp;
    acc += -(tv[i] * std::log(p) + (1.0f - tv[i]) * std::log(1.0f - p));
  }
  n.out = Tensor::scalar(acc / float(pv.size()));
  return push(std::move(n));
}

NodeId Tape::quantize(NodeId w, NodeId th1, NodeId th2, float eps_zero, QuantMode mode,
                      bool stochastic, SeededRng* rng) {
  GTC_CHECK(val(th1).numel() == 1 && val(th2).numel() == 1, ShapeError,
            "quantize wants scalar theta nodes");
  GTC_CHECK(!stochastic || mode == QuantMode::rounded, ConfigError,
            "stochastic rounding only applies to the rounded mode");
  Node n;
  n.kind = OpKind::Quantize;
  n.a = w; n.b = th1; n.c = th2;
  n.f0 = eps_zero;
  n.qmode = mode;
  const Tensor& wv = val(w);
  QuantParams p{val(th1).item(), val(th2).item(), eps_zero};
  n.out = Tensor::zeros(wv.shape);
  const size_t cnt = wv.values.size();
  n.saux.resize(cnt);
  if (mode == QuantMode::rounded) {
    n.iaux.resize(cnt);
    for (size_t i = 0; i < cnt; ++i) {
      int8_t s;
      int32_t e;
      if (stochastic)
        quantize_weight_stochastic(wv.values[i], p, *rng, &s, &e);
      else
        quantize_weight(wv.values[i], p, &s, &e);
      n.saux[i] = s;
      n.iaux[i] = e;
      if (s != 0) n.out.values[i] = float(s) * std::ldexp(1.0f, e);
    }
  } else {
    for (size_t i = 0; i < cnt; ++i) {
      const int s = signum_eps(wv.values[i], eps_zero);
      n.saux[i] = int8_t(s);
      if (s != 0) n.out.values[i] = float(s) * std::exp2(q_transform(wv.values[i], p));
    }
  }
  return push(std::move(n));
}

NodeId Tape::bit_cost(const std::vector<std::vector<NodeId>>& groups) {
  GTC_CHECK(!groups.empty(), ShapeError, "bit_cost wants at least one group");
  Node n;
  n.kind = OpKind::BitCost;
  double total = 0.0;
  for (const auto& grp : groups) {
    GTC_CHECK(!grp.empty(), ShapeError, "bit_cost group is empty");
    BitGroupInfo gi;
    gi.qnodes = grp;
    const QuantMode mode = nodes_[size_t(grp[0])].qmode;
    bool seen = false;
    if (mode == QuantMode::rounded) {
      int64_t mn = 0, mx = 0;
      for (NodeId qid : grp) {
        const Node& qn = nodes_[size_t(qid)];
        GTC_CHECK(qn.kind == OpKind::Quantize, ShapeError, "bit_cost group member is not a quantize node");
        GTC_CHECK(qn.qmode == mode, ShapeError, "bit_cost mixed quantize modes");
        if (qn.req) n.req = true;
        const auto& wvals = nodes_[size_t(qn.a)].out.values;
        for (size_t i = 0; i < qn.saux.size(); ++i) {
          if (qn.saux[i] == 0) continue;
          const int64_t e = qn.iaux[i];
          if (!seen || e > mx) { mx = e; gi.max_q = qid; gi.max_i = int64_t(i); gi.max_w = wvals[i]; }
          if (!seen || e < mn) { mn = e; gi.min_q = qid; gi.min_i = int64_t(i); gi.min_w = wvals[i]; }
          seen = true;
        }
      }
      gi.all_zero = !seen;
      if (seen) {
        gi.range = double(mx - mn + 1);
        gi.bits = 1 + ceil_log2(uint64_t(mx - mn + 1));
        gi.value = std::ldexp(1.0, gi.bits);
        gi.scale = gi.value / gi.range;
      }
    } else {
      double mn = 0.0, mx = 0.0;
      for (NodeId qid : grp) {
        const Node& qn = nodes_[size_t(qid)];
        GTC_CHECK(qn.kind == OpKind::Quantize, ShapeError, "bit_cost group member is not a quantize node");
        GTC_CHECK(qn.qmode == mode, ShapeError, "bit_cost mixed quantize modes");
        if (qn.req) n.req = true;
        QuantParams p{val(qn.b).item(), val(qn.c).item(), qn.f0};
        const auto& wvals = nodes_[size_t(qn.a)].out.values;
        for (size_t i = 0; i < qn.saux.size(); ++i) {
          if (qn.saux[i] == 0) continue;
          const double q = double(q_transform(wvals[i], p));
          if (!seen || q > mx) { mx = q; gi.max_q = qid; gi.max_i = int64_t(i); gi.max_w = wvals[i]; }
          if (!seen || q < mn) { mn = q; gi.min_q = qid; gi.min_i = int64_t(i); gi.min_w = wvals[i]; }
          seen = true;
        }
      }
      gi.all_zero = !seen;
      if (seen) {
        gi.range = mx - mn + 1.0;
        gi.value = 2.0 * gi.range;  // 2^(1 + log2(range))
        gi.scale = 2.0;
        gi.bits = 1 + ceil_log2(uint64_t(std::llround(std::max(1.0, std::ceil(gi.range)))));
      }
    }
    total += gi.value;
    n.groups.push_back(std::move(gi));
  }
  n.out = Tensor::scalar(float(total));
  return push(std::move(n));
}

const std::vector<BitGroupInfo>& Tape::bit_cost_groups(NodeId id) const {
  GTC_CHECK(nodes_[size_t(id)].kind == OpKind::BitCost, ShapeError, "not a bit_cost node");
  return nodes_[size_t(id)].groups;
}

std::vector<float>& Tape::g(NodeId id) {
  auto& v = grads_[size_t(id)];
  if (v.size() != nodes_[size_t(id)].out.values.size())
    v.assign(nodes_[size_t(id)].out.values.size(), 0.0f);
  return v;
}

void Tape::accum(NodeId id, const float* src, size_t cnt) {
  if (id < 0 || !nodes_[size_t(id)].req) return;
  auto& dst = g(id);
  for (size_t i = 0; i < cnt; ++i) dst[i] += src[i];
}

bool Tape::has_grad(NodeId id) const {
  return ran_backward_ && !grads_[size_t(id)].empty();
}

const std::vector<float>& Tape::grad(NodeId id) const {
  GTC_CHECK(ran_backward_, Error, "grad() before backward()");
  const auto& v = grads_[size_t(id)];
  return v.empty() ? empty_grad_ : v;
}

void Tape::backward(NodeId root) {
  GTC_CHECK(!ran_backward_, Error, "backward() ran twice on one tape");
  GTC_CHECK(val(root).numel() == 1, ShapeError, "backward root must be scalar");
  ran_backward_ = true;
  grads_.assign(nodes_.size(), {});
  g(root).assign(1, 1.0f);
  for (NodeId id = root; id >= 0; --id) {
    if (grads_[size_t(id)].empty()) continue;
    if (!nodes_[size_t(id)].req) continue;
    backward_node(id);
  }
}

void Tape::backward_node(NodeId id) {
  Node& n = nodes_[size_t(id)];
  const std::vector<float>& u = grads_[size_t(id)];
  const auto parent_vals = [&](NodeId p) -> const std::vector<float>& {
    return nodes_[size_t(p)].out.values;
  };
  const auto parent_req = [&](NodeId p) { return p >= 0 && nodes_[size_t(p)].req; };

  switch (n.kind) {
    case OpKind::Leaf:
    case OpKind::Constant:
      break;

    case OpKind::MatMul: {
      const Tensor& a = nodes_[size_t(n.a)].out;
      const Tensor& b = nodes_[size_t(n.b)].out;
      const int m = a.dim(0), k = a.dim(1), c = b.dim(1);
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            float acc = 0.0f;
            for (int j = 0; j < c; ++j)
              acc += u[size_t(i) * c + j] * b.values[size_t(kk) * c + j];
            da[size_t(i) * k + kk] += acc;
          }
      }
      if (parent_req(n.b)) {
        auto& db = g(n.b);
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const float aik = a.values[size_t(i) * k + kk];
            for (int j = 0; j < c; ++j)
              db[size_t(kk) * c + j] += aik * u[size_t(i) * c + j];
          }
      }
      break;
    }

    case OpKind::MatMulNT: {
      const Tensor& a = nodes_[size_t(n.a)].out;
      const Tensor& b = nodes_[size_t(n.b)].out;
      const int m = a.dim(0), k = a.dim(1), c = b.dim(0);
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            float acc = 0.0f;
            for (int j = 0; j < c; ++j)
              acc += u[size_t(i) * c + j] * b.values[size_t(j) * k + kk];
            da[size_t(i) * k + kk] += acc;
          }
      }
      if (parent_req(n.b)) {
        auto& db = g(n.b);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < c; ++j) {
            const float uij = u[size_t(i) * c + j];
            for (int kk = 0; kk < k; ++kk)
              db[size_t(j) * k + kk] += uij * a.values[size_t(i) * k + kk];
          }
      }
      break;
    }

    case OpKind::Conv2d: {
      const Tensor& x = nodes_[size_t(n.a)].out;
      const Tensor& w = nodes_[size_t(n.b)].out;
      const ops::Conv2dDims d = ops::conv2d_dims(x.shape, w.shape, n.i0, n.i1);
      const int64_t plane = int64_t(d.oh) * d.ow;
      std::vector<float> col(size_t(plane) * d.col_w);
      std::vector<float> dcol;
      const bool need_dx = parent_req(n.a);
      const bool need_dw = parent_req(n.b);
      if (need_dx) dcol.resize(size_t(plane) * d.col_w);
      for (int nn = 0; nn < d.n; ++nn) {
        ops::im2col(&x.values[size_t(nn) * d.c * d.h * d.w], d, col.data());
        const float* ub = &u[size_t(nn) * d.f * plane];
        if (need_dw) {
          auto& dw = g(n.b);
          for (int f = 0; f < d.f; ++f) {
            const float* urow = ub + int64_t(f) * plane;
            float* dwrow = &dw[size_t(f) * d.col_w];
            for (int64_t p = 0; p < plane; ++p) {
              const float uv = urow[p];
              const float* crow = &col[size_t(p) * d.col_w];
              for (int64_t q = 0; q < d.col_w; ++q) dwrow[q] += uv * crow[q];
            }
          }
        }
        if (need_dx) {
          std::fill(dcol.begin(), dcol.end(), 0.0f);
          for (int f = 0; f < d.f; ++f) {
            const float* urow = ub + int64_t(f) * plane;
            const float* wrow = &w.values[size_t(f) * d.col_w];
            for (int64_t p = 0; p < plane; ++p) {
              const float uv = urow[p];
              float* drow = &dcol[size_t(p) * d.col_w];
              for (int64_t q = 0; q < d.col_w; ++q) drow[q] += uv * wrow[q];
            }
          }
          // col2im scatter, ascending (p, c, kh, kw)
          auto& dx = g(n.a);
          float* dxb = &dx[size_t(nn) * d.c * d.h * d.w];
          for (int oh = 0; oh < d.oh; ++oh)
            for (int ow = 0; ow < d.ow; ++ow) {
              const float* drow = &dcol[(size_t(oh) * d.ow + ow) * d.col_w];
              const int ih0 = oh * d.stride - d.pad;
              const int iw0 = ow * d.stride - d.pad;
              int64_t p = 0;
              for (int ch = 0; ch < d.c; ++ch)
                for (int kh = 0; kh < d.kh; ++kh) {
                  const int ih = ih0 + kh;
                  for (int kw = 0; kw < d.kw; ++kw, ++p) {
                    const int iw = iw0 + kw;
                    if (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w)
                      dxb[(int64_t(ch) * d.h + ih) * d.w + iw] += drow[p];
                  }
                }
            }
        }
      }
      break;
    }

    case OpKind::Add:
      accum(n.a, u.data(), u.size());
      accum(n.b, u.data(), u.size());
      break;

    case OpKind::Sub: {
      accum(n.a, u.data(), u.size());
      if (parent_req(n.b)) {
        auto& db = g(n.b);
        for (size_t i = 0; i < u.size(); ++i) db[i] -= u[i];
      }
      break;
    }

    case OpKind::Mul: {
      const auto& av = parent_vals(n.a);
      const auto& bv = parent_vals(n.b);
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i) da[i] += u[i] * bv[i];
      }
      if (parent_req(n.b)) {
        auto& db = g(n.b);
        for (size_t i = 0; i < u.size(); ++i) db[i] += u[i] * av[i];
      }
      break;
    }

    case OpKind::Div: {
      const auto& av = parent_vals(n.a);
      const auto& bv = parent_vals(n.b);
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i) da[i] += u[i] / bv[i];
      }
      if (parent_req(n.b)) {
        auto& db = g(n.b);
        for (size_t i = 0; i < u.size(); ++i) db[i] -= u[i] * av[i] / (bv[i] * bv[i]);
      }
      break;
    }

    case OpKind::Neg: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i) da[i] -= u[i];
      }
      break;
    }

    case OpKind::Exp: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i) da[i] += u[i] * n.out.values[i];
      }
      break;
    }

    case OpKind::Square: {
      const auto& av = parent_vals(n.a);
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i) da[i] += u[i] * 2.0f * av[i];
      }
      break;
    }

    case OpKind::SqrtShift: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i) da[i] += u[i] * 0.5f / n.out.values[i];
      }
      break;
    }

    case OpKind::MulScalar: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i) da[i] += u[i] * n.f0;
      }
      break;
    }

    case OpKind::AddScalar:
      accum(n.a, u.data(), u.size());
      break;

    case OpKind::AddRowVec: {
      accum(n.a, u.data(), u.size());
      if (parent_req(n.b)) {
        const Tensor& x = nodes_[size_t(n.a)].out;
        const int rows = x.dim(0), d = x.dim(1);
        auto& db = g(n.b);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < d; ++j) db[size_t(j)] += u[size_t(i) * d + j];
      }
      break;
    }

    case OpKind::ScaleChannels: {
      const Tensor& x = nodes_[size_t(n.a)].out;
      const auto& sv = parent_vals(n.b);
      const int c = x.dim(1);
      const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
      if (parent_req(n.a)) {
        auto& dx = g(n.a);
        for (int nn = 0; nn < x.dim(0); ++nn)
          for (int ch = 0; ch < c; ++ch) {
            const float sc = sv[size_t(ch)];
            const size_t base = (size_t(nn) * c + ch) * hw;
            for (int64_t i = 0; i < hw; ++i) dx[base + i] += u[base + i] * sc;
          }
      }
      if (parent_req(n.b)) {
        auto& ds = g(n.b);
        for (int nn = 0; nn < x.dim(0); ++nn)
          for (int ch = 0; ch < c; ++ch) {
            const size_t base = (size_t(nn) * c + ch) * hw;
            float acc = 0.0f;
            for (int64_t i = 0; i < hw; ++i) acc += u[base + i] * x.values[base + i];
            ds[size_t(ch)] += acc;
          }
      }
      break;
    }

    case OpKind::AddChannels:
    case OpKind::SubChannels: {
      accum(n.a, u.data(), u.size());
      if (parent_req(n.b)) {
        const Tensor& x = nodes_[size_t(n.a)].out;
        const int c = x.dim(1);
        const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
        const float sgn = n.kind == OpKind::AddChannels ? 1.0f : -1.0f;
        auto& db = g(n.b);
        for (int nn = 0; nn < x.dim(0); ++nn)
          for (int ch = 0; ch < c; ++ch) {
            const size_t base = (size_t(nn) * c + ch) * hw;
            float acc = 0.0f;
            for (int64_t i = 0; i < hw; ++i) acc += u[base + i];
            db[size_t(ch)] += sgn * acc;
          }
      }
      break;
    }

    case OpKind::ChannelMean: {
      if (parent_req(n.a)) {
        const Tensor& x = nodes_[size_t(n.a)].out;
        const int c = x.dim(1);
        const int64_t hw = int64_t(x.dim(2)) * x.dim(3);
        const float inv = 1.0f / float(int64_t(x.dim(0)) * hw);
        auto& dx = g(n.a);
        for (int nn = 0; nn < x.dim(0); ++nn)
          for (int ch = 0; ch < c; ++ch) {
            const float uv = u[size_t(ch)] * inv;
            const size_t base = (size_t(nn) * c + ch) * hw;
            for (int64_t i = 0; i < hw; ++i) dx[base + i] += uv;
          }
      }
      break;
    }

    case OpKind::Relu: {
      const auto& av = parent_vals(n.a);
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i)
          if (av[i] > 0.0f) da[i] += u[i];
      }
      break;
    }

    case OpKind::Tanh: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i)
          da[i] += u[i] * (1.0f - n.out.values[i] * n.out.values[i]);
      }
      break;
    }

    case OpKind::Sigmoid: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i)
          da[i] += u[i] * n.out.values[i] * (1.0f - n.out.values[i]);
      }
      break;
    }

    case OpKind::SoftmaxRows: {
      if (parent_req(n.a)) {
        const int rows = n.out.dim(0), k = n.out.dim(1);
        auto& dx = g(n.a);
        for (int i = 0; i < rows; ++i) {
          const float* y = &n.out.values[size_t(i) * k];
          const float* ur = &u[size_t(i) * k];
          float dot = 0.0f;
          for (int j = 0; j < k; ++j) dot += ur[j] * y[j];
          for (int j = 0; j < k; ++j) dx[size_t(i) * k + j] += y[j] * (ur[j] - dot);
        }
      }
      break;
    }

    case OpKind::LogSoftmaxRows: {
      if (parent_req(n.a)) {
        const int rows = n.out.dim(0), k = n.out.dim(1);
        auto& dx = g(n.a);
        for (int i = 0; i < rows; ++i) {
          const float* y = &n.out.values[size_t(i) * k];
          const float* ur = &u[size_t(i) * k];
          float usum = 0.0f;
          for (int j = 0; j < k; ++j) usum += ur[j];
          for (int j = 0; j < k; ++j)
            dx[size_t(i) * k + j] += ur[j] - std::exp(y[j]) * usum;
        }
      }
      break;
    }

    case OpKind::MaxPool2d: {
      if (parent_req(n.a)) {
        const Tensor& x = nodes_[size_t(n.a)].out;
        const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const int oh = n.out.dim(2), ow = n.out.dim(3);
        auto& dx = g(n.a);
        for (int b = 0; b < x.dim(0); ++b)
          for (int ch = 0; ch < c; ++ch) {
            const size_t obase = (size_t(b) * c + ch) * oh * ow;
            const size_t ibase = (size_t(b) * c + ch) * h * w;
            for (int64_t i = 0; i < int64_t(oh) * ow; ++i)
              dx[ibase + size_t(n.iaux[obase + i])] += u[obase + i];
          }
      }
      break;
    }

    case OpKind::Dropout: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (size_t i = 0; i < u.size(); ++i) da[i] += u[i] * n.faux[i] * n.f0;
      }
      break;
    }

    case OpKind::Reshape:
      accum(n.a, u.data(), u.size());
      break;

    case OpKind::RowSum: {
      if (parent_req(n.a)) {
        const Tensor& x = nodes_[size_t(n.a)].out;
        const int rows = x.dim(0), d = x.dim(1);
        auto& dx = g(n.a);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < d; ++j) dx[size_t(i) * d + j] += u[size_t(i)];
      }
      break;
    }

    case OpKind::MeanAll: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        const float uv = u[0] / float(da.size());
        for (auto& v : da) v += uv;
      }
      break;
    }

    case OpKind::SumAll: {
      if (parent_req(n.a)) {
        auto& da = g(n.a);
        for (auto& v : da) v += u[0];
      }
      break;
    }

    case OpKind::CeWithLogits: {
      if (parent_req(n.a)) {
        const int rows = nodes_[size_t(n.a)].out.dim(0);
        const int k = nodes_[size_t(n.a)].out.dim(1);
        const float uv = u[0] / float(rows);
        auto& dx = g(n.a);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < k; ++j) {
            float gval = n.faux[size_t(i) * k + j];
            if (j == n.iaux[size_t(i)]) gval -= 1.0f;
            dx[size_t(i) * k + j] += uv * gval;
          }
      }
      break;
    }

    case OpKind::Bce: {
      const auto& pv = parent_vals(n.a);
      const auto& tv = parent_vals(n.b);
      const float uv = u[0] / float(pv.size());
      const bool need_dp = parent_req(n.a);
      const bool need_dt = parent_req(n.b);
      for (size_t i = 0; i < pv.size(); ++i) {
        float p = pv[i];
        const bool clamped = p < kBceClamp || p > 1.0f - kBceClamp;
        if (p < kBceClamp) p = kBceClamp;
        if (p > 1.0f - kBceClamp) p = 1.0f - kBceClamp;
        if (need_dp && !clamped)
          g(n.a)[i] += uv * (p - tv[i]) / (p * (1.0f - p));
        if (need_dt)
          g(n.b)[i] += uv * (std::log(1.0f - p) - std::log(p));
      }
      break;
    }

    case OpKind::Quantize: {
      const auto& wv = parent_vals(n.a);
      const float th2 = nodes_[size_t(n.c)].out.values[0];
      const bool need_dw = parent_req(n.a);
      const bool need_d1 = parent_req(n.b);
      const bool need_d2 = parent_req(n.c);
      float acc1 = 0.0f, acc2 = 0.0f;
      for (size_t i = 0; i < wv.size(); ++i) {
        if (n.saux[i] == 0) continue;  // zero band: no gradient
        const float wq = n.out.values[i];
        const float uv = u[i];
        if (need_dw) g(n.a)[i] += uv * wq * th2 / wv[i];
        const float base = uv * wq * kLn2f;
        acc1 += base;
        acc2 += base * std::log2(std::fabs(wv[i]));
      }
      if (need_d1) g(n.b)[0] += acc1;
      if (need_d2) g(n.c)[0] += acc2;
      break;
    }

    case OpKind::BitCost: {
      const float uv = u[0];
      for (const BitGroupInfo& gi : n.groups) {
        if (gi.all_zero) continue;
        const Node& qmax = nodes_[size_t(gi.max_q)];
        const Node& qmin = nodes_[size_t(gi.min_q)];
        const float th2 = nodes_[size_t(qmax.c)].out.values[0];
        const float sc = float(gi.scale) * uv;
        // The range is max minus min of the transformed exponents, so the offset
        // parameter shifts both ends equally and receives no gradient here.
        if (qmax.c == qmin.c) {
          if (parent_req(qmax.c)) {
            const float d2 =
                std::log2(std::fabs(gi.max_w)) - std::log2(std::fabs(gi.min_w));
            g(qmax.c)[0] += sc * d2;
          }
        } else {
          if (parent_req(qmax.c)) g(qmax.c)[0] += sc * std::log2(std::fabs(gi.max_w));
          if (parent_req(qmin.c)) g(qmin.c)[0] -= sc * std::log2(std::fabs(gi.min_w));
        }
        if (parent_req(qmax.a))
          g(qmax.a)[size_t(gi.max_i)] += sc * th2 / (gi.max_w * kLn2f);
        if (parent_req(qmin.a)) {
          const float th2m = nodes_[size_t(qmin.c)].out.values[0];
          g(qmin.a)[size_t(gi.min_i)] -= sc * th2m / (gi.min_w * kLn2f);
        }
      }
      break;
    }
  }
}

}  // namespace gtc
