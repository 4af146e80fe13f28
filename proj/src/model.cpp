#include "gtc/model.hpp"

#include <cmath>

#include "gtc/ops.hpp"

namespace gtc {

namespace {

int scaled(int base, float scale) {
  return int(std::ceil(double(base) * double(scale)));
}

Tensor scalar_param(float v) {
  Tensor t = Tensor::scalar(v);
  return t;
}

void push_layer(Model* m, LayerSpec spec, int slot) {
  m->layers.push_back(std::move(spec));
  m->slot_of.push_back(slot);
}

int add_dense(Model* m, std::string name, int in, int out) {
  ParamSlot s;
  s.name = std::move(name);
  s.W = Tensor::zeros({out, in});
  s.b = Tensor::zeros({out});
  s.theta1 = scalar_param(0.0f);
  s.theta2 = scalar_param(1.0f);
  m->slots.push_back(std::move(s));
  push_layer(m, Dense{in, out}, int(m->slots.size()) - 1);
  return int(m->slots.size()) - 1;
}

int add_conv(Model* m, std::string name, int in_ch, int out_ch, int k, int stride,
             int pad) {
  ParamSlot s;
  s.name = std::move(name);
  s.W = Tensor::zeros({out_ch, in_ch, k, k});
  s.b = Tensor::zeros({out_ch});
  s.theta1 = scalar_param(0.0f);
  s.theta2 = scalar_param(1.0f);
  m->slots.push_back(std::move(s));
  push_layer(m, Conv2d{in_ch, out_ch, k, k, stride, pad}, int(m->slots.size()) - 1);
  return int(m->slots.size()) - 1;
}

int add_bn(Model* m, std::string name, int ch) {
  ParamSlot s;
  s.name = std::move(name);
  s.is_bn = true;
  s.W = Tensor::full({ch}, 1.0f);  // gamma
  s.b = Tensor::zeros({ch});       // beta
  s.running_mean = Tensor::zeros({ch});
  s.running_var = Tensor::full({ch}, 1.0f);
  s.theta1 = scalar_param(0.0f);
  s.theta2 = scalar_param(1.0f);
  m->slots.push_back(std::move(s));
  push_layer(m, BatchNorm{ch}, int(m->slots.size()) - 1);
  return int(m->slots.size()) - 1;
}

}  // namespace

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const ParamSlot& s : slots) {
    n += s.W.numel() + s.b.numel();
    if (s.is_bn) n += s.running_mean.numel() + s.running_var.numel();
  }
  return n;
}

std::vector<int> Model::quant_slots() const {
  std::vector<int> out;
  for (size_t i = 0; i < slots.size(); ++i)
    if (!slots[i].is_bn) out.push_back(int(i));
  return out;
}

std::vector<std::string> Model::quant_slot_names() const {
  std::vector<std::string> out;
  for (int i : quant_slots()) out.push_back(slots[size_t(i)].name);
  return out;
}

int64_t VaeModel::param_count() const {
  int64_t n = 0;
  for (const Model* p : parts()) n += p->param_count();
  return n;
}

std::vector<std::string> VaeModel::quant_slot_names() const {
  std::vector<std::string> out;
  for (const Model* p : parts())
    for (const std::string& n : p->quant_slot_names()) out.push_back(n);
  return out;
}

Model build_lenet_small(float scale) {
  GTC_CHECK(scale > 0.0f && scale <= 1.0f, ConfigError,
            "model scale must be in (0, 1]");
  Model m;
  m.input_shape = {1, 28, 28};
  const int c1 = scaled(16, scale);
  const int c2 = scaled(36, scale);
  const int f1 = scaled(128, scale);
  add_conv(&m, "conv1", 1, c1, 5, 1, 0);   // 28 -> 24
  push_layer(&m, MaxPool{2, 2}, -1);       // 24 -> 12
  push_layer(&m, Activation{Act::relu}, -1);
  add_conv(&m, "conv2", c1, c2, 5, 1, 0);  // 12 -> 8
  push_layer(&m, MaxPool{2, 2}, -1);       // 8 -> 4
  push_layer(&m, Activation{Act::relu}, -1);
  push_layer(&m, Flatten{}, -1);
  add_dense(&m, "fc1", c2 * 4 * 4, f1);
  push_layer(&m, Activation{Act::relu}, -1);
  add_dense(&m, "fc2", f1, 10);
  push_layer(&m, Activation{Act::softmax}, -1);
  return m;
}

Model build_vgg16() {
  Model m;
  m.input_shape = {3, 32, 32};
  // Configuration D: 13 conv layers; pools close the five blocks.
  const int widths[13] = {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
  const bool pool_after[13] = {false, true, false, true, false, false, true,
                               false, false, true, false, false, true};
  int in_ch = 3;
  int conv_n = 0, bn_n = 0;
  for (int i = 0; i < 13; ++i) {
    ++conv_n;
    ++bn_n;
    add_conv(&m, "conv" + std::to_string(conv_n), in_ch, widths[i], 3, 1, 1);
    add_bn(&m, "bn" + std::to_string(bn_n), widths[i]);
    push_layer(&m, Activation{Act::relu}, -1);
    if ((i + 1) % 2 == 0 && i + 1 <= 12) push_layer(&m, Dropout{0.4f}, -1);
    if (pool_after[i]) push_layer(&m, MaxPool{2, 2}, -1);
    in_ch = widths[i];
  }
  push_layer(&m, Flatten{}, -1);
  add_dense(&m, "fc1", 512, 4096);
  push_layer(&m, Activation{Act::relu}, -1);
  add_dense(&m, "fc2", 4096, 4096);
  push_layer(&m, Activation{Act::relu}, -1);
  add_dense(&m, "fc3", 4096, 10);
  push_layer(&m, Activation{Act::softmax}, -1);
  return m;
}

Model build_mlp(const std::vector<int>& input_shape, const std::vector<int>& hidden,
                int classes) {
  GTC_CHECK(!input_shape.empty() && classes >= 2, ConfigError, "bad mlp sizes");
  Model m;
  m.input_shape = input_shape;
  int64_t in = 1;
  for (int d : input_shape) in *= d;
  if (input_shape.size() > 1) push_layer(&m, Flatten{}, -1);
  int fc_n = 0;
  for (int width : hidden) {
    ++fc_n;
    add_dense(&m, "fc" + std::to_string(fc_n), int(in), width);
    push_layer(&m, Activation{Act::relu}, -1);
    in = width;
  }
  ++fc_n;
  add_dense(&m, "fc" + std::to_string(fc_n), int(in), classes);
  push_layer(&m, Activation{Act::softmax}, -1);
  return m;
}

VaeModel build_vae(float scale) {
  GTC_CHECK(scale > 0.0f && scale <= 1.0f, ConfigError,
            "model scale must be in (0, 1]");
  VaeModel v;
  v.latent_dim = 10;
  v.input_dim = 784;
  const int e1 = scaled(512, scale);
  const int e2 = scaled(384, scale);
  const int e3 = scaled(256, scale);

  v.encoder.input_shape = {1, 28, 28};
  push_layer(&v.encoder, Flatten{}, -1);
  add_dense(&v.encoder, "fc1", 784, e1);
  push_layer(&v.encoder, Activation{Act::tanh}, -1);
  add_dense(&v.encoder, "fc2", e1, e2);
  push_layer(&v.encoder, Activation{Act::tanh}, -1);
  add_dense(&v.encoder, "fc3", e2, e3);
  push_layer(&v.encoder, Activation{Act::tanh}, -1);

  v.mean_head.input_shape = {e3};
  add_dense(&v.mean_head, "fc4", e3, v.latent_dim);
  v.logvar_head.input_shape = {e3};
  add_dense(&v.logvar_head, "fc5", e3, v.latent_dim);

  v.decoder.input_shape = {v.latent_dim};
  add_dense(&v.decoder, "fc6", v.latent_dim, e3);
  push_layer(&v.decoder, Activation{Act::tanh}, -1);
  add_dense(&v.decoder, "fc7", e3, e2);
  push_layer(&v.decoder, Activation{Act::tanh}, -1);
  add_dense(&v.decoder, "fc8", e2, e1);
  push_layer(&v.decoder, Activation{Act::tanh}, -1);
  add_dense(&v.decoder, "fc9", e1, 784);
  push_layer(&v.decoder, Activation{Act::sigmoid}, -1);
  return v;
}

void init_params(Model* m, SeededRng& rng, float theta1_init, float theta2_init) {
  for (ParamSlot& s : m->slots) {
    if (s.is_bn) {
      for (float& v : s.W.values) v = 1.0f;
      for (float& v : s.b.values) v = 0.0f;
      for (float& v : s.running_mean.values) v = 0.0f;
      for (float& v : s.running_var.values) v = 1.0f;
      s.theta1.values[0] = 0.0f;
      s.theta2.values[0] = 1.0f;
      continue;
    }
    int64_t fan_in = 1;
    for (size_t d = 1; d < s.W.shape.size(); ++d) fan_in *= s.W.shape[d];
    const float stddev = std::sqrt(2.0f / float(fan_in));
    for (float& v : s.W.values) v = float(rng.truncated_normal(stddev));
    for (float& v : s.b.values) v = 0.0f;
    s.theta1.values[0] = theta1_init;
    s.theta2.values[0] = theta2_init;
  }
}

void init_params(VaeModel* m, SeededRng& rng, float theta1_init, float theta2_init) {
  for (Model* p : m->parts()) init_params(p, rng, theta1_init, theta2_init);
}

ModelBinding bind_params(Tape& tape, Model& m, bool train_weights, bool train_theta) {
  ModelBinding b;
  for (ParamSlot& s : m.slots) {
    Tensor w = s.W;
    w.requires_grad = train_weights;
    Tensor bias = s.b;
    bias.requires_grad = train_weights;
    b.W.push_back(tape.leaf(w));
    b.b.push_back(tape.leaf(bias));
    if (!s.is_bn) {
      Tensor t1 = s.theta1;
      t1.requires_grad = train_theta;
      Tensor t2 = s.theta2;
      t2.requires_grad = train_theta;
      b.th1.push_back(tape.leaf(t1));
      b.th2.push_back(tape.leaf(t2));
    } else {
      b.th1.push_back(-1);
      b.th2.push_back(-1);
    }
  }
  return b;
}

ForwardBuild forward_model(Tape& tape, const Model& m, const ModelBinding& bind,
                           NodeId x, const ForwardOptions& opt) {
  GTC_CHECK(bind.W.size() == m.slots.size(), ShapeError,
            "binding does not match the model");
  ForwardBuild fb;
  NodeId cur = x;
  size_t dropout_i = 0;
  const size_t L = m.layers.size();

  const auto quantized_pair = [&](int slot, NodeId* w, NodeId* b) {
    const NodeId qw = tape.quantize(bind.W[size_t(slot)], bind.th1[size_t(slot)],
                                    bind.th2[size_t(slot)], m.eps_zero, opt.qmode,
                                    opt.stochastic, opt.rng);
    const NodeId qb = tape.quantize(bind.b[size_t(slot)], bind.th1[size_t(slot)],
                                    bind.th2[size_t(slot)], m.eps_zero, opt.qmode,
                                    opt.stochastic, opt.rng);
    fb.qpairs.push_back({qw, qb});
    *w = qw;
    *b = qb;
  };

  for (size_t li = 0; li < L; ++li) {
    const LayerSpec& ls = m.layers[li];
    const int slot = m.slot_of[li];
    const bool last = li + 1 == L;
    if (const Dense* d = std::get_if<Dense>(&ls)) {
      (void)d;
      NodeId w = bind.W[size_t(slot)];
      NodeId b = bind.b[size_t(slot)];
      if (opt.student) quantized_pair(slot, &w, &b);
      cur = tape.add_rowvec(tape.matmul_nt(cur, w), b);
    } else if (const Conv2d* c = std::get_if<Conv2d>(&ls)) {
      NodeId w = bind.W[size_t(slot)];
      NodeId b = bind.b[size_t(slot)];
      if (opt.student) quantized_pair(slot, &w, &b);
      cur = tape.add_channels(tape.conv2d(cur, w, c->stride, c->pad), b);
    } else if (const BatchNorm* bn = std::get_if<BatchNorm>(&ls)) {
      if (opt.training) {
        const NodeId mean = tape.channel_mean(cur);
        const NodeId centered = tape.sub_channels(cur, mean);
        const NodeId var = tape.channel_mean(tape.square(centered));
        fb.bn_mean.push_back(mean);
        fb.bn_var.push_back(var);
        const NodeId sigma = tape.sqrt_shift(var, m.bn_eps);
        const NodeId inv = tape.div(tape.constant(Tensor::full({bn->ch}, 1.0f)), sigma);
        const NodeId xhat = tape.scale_channels(centered, inv);
        cur = tape.add_channels(tape.scale_channels(xhat, bind.W[size_t(slot)]),
                                bind.b[size_t(slot)]);
      } else {
        const FoldedBn f =
            fold_bn(m.slots[size_t(slot)], m.bn_eps, opt.student, m.eps_zero);
        Tensor sc = Tensor::zeros({bn->ch});
        sc.values = f.scale;
        Tensor sh = Tensor::zeros({bn->ch});
        sh.values = f.shift;
        cur = tape.add_channels(tape.scale_channels(cur, tape.constant(std::move(sc))),
                                tape.constant(std::move(sh)));
      }
    } else if (const MaxPool* p = std::get_if<MaxPool>(&ls)) {
      cur = tape.maxpool2d(cur, p->k, p->stride);
    } else if (const Activation* a = std::get_if<Activation>(&ls)) {
      switch (a->kind) {
        case Act::relu:
          cur = tape.relu(cur);
          break;
        case Act::tanh:
          cur = tape.tanh_t(cur);
          break;
        case Act::sigmoid:
          cur = tape.sigmoid(cur);
          break;
        case Act::softmax:
          if (last) {
            fb.logits = cur;
            if (!opt.skip_final_softmax) cur = tape.softmax_rows(cur);
          } else {
            cur = tape.softmax_rows(cur);
          }
          break;
      }
    } else if (const Dropout* dr = std::get_if<Dropout>(&ls)) {
      if (opt.training && dr->p > 0.0f) {
        GTC_CHECK(opt.dropout_masks != nullptr &&
                      dropout_i < opt.dropout_masks->size(),
                  ShapeError, "missing dropout masks for the training pass");
        cur = tape.dropout(cur, (*opt.dropout_masks)[dropout_i],
                           1.0f / (1.0f - dr->p));
        ++dropout_i;
      }
    } else {  // Flatten
      const Tensor& v = tape.val(cur);
      GTC_CHECK(v.rank() >= 2, ShapeError, "flatten wants a batched input");
      cur = tape.reshape(cur, {v.dim(0), int(v.numel() / v.dim(0))});
    }
  }
  fb.out = cur;
  if (fb.logits < 0) fb.logits = cur;
  return fb;
}

FoldedBn fold_bn(const ParamSlot& slot, float bn_eps, bool quantize_scale,
                 float eps_zero) {
  GTC_CHECK(slot.is_bn, ShapeError, "fold_bn wants a batchnorm slot");
  const size_t ch = slot.W.values.size();
  FoldedBn f;
  f.scale.resize(ch);
  f.shift.resize(ch);
  Tensor s = Tensor::zeros({int(ch)});
  for (size_t i = 0; i < ch; ++i) {
    const float sigma = std::sqrt(slot.running_var.values[i] + bn_eps);
    s.values[i] = slot.W.values[i] / sigma;
  }
  if (quantize_scale) {
    // The multiplicative constant must itself be a signed power of two, so it
    // goes through the slot's (identity-initialized) quantizer.
    QuantParams p{slot.theta1.item(), slot.theta2.item(), eps_zero};
    f.scale_q = quantize_tensor(s, p);
    const Tensor sq = f.scale_q.dequantize();
    f.scale = sq.values;
  } else {
    f.scale = s.values;
  }
  for (size_t i = 0; i < ch; ++i)
    f.shift[i] = slot.b.values[i] - f.scale[i] * slot.running_mean.values[i];
  return f;
}

namespace {

// Bias add over the channel axis of [n,f,oh,ow], fixed loop order shared with
// the shift engine.
void add_channel_bias(Tensor* x, const std::vector<float>& b) {
  const int n = x->dim(0), f = x->dim(1);
  const int64_t hw = int64_t(x->dim(2)) * x->dim(3);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < f; ++ch) {
      const float bias = b[size_t(ch)];
      float* base = &x->values[(size_t(i) * f + ch) * hw];
      for (int64_t p = 0; p < hw; ++p) base[p] += bias;
    }
}

void affine_channels(Tensor* x, const std::vector<float>& scale,
                     const std::vector<float>& shift) {
  const int n = x->dim(0), f = x->dim(1);
  const int64_t hw = int64_t(x->dim(2)) * x->dim(3);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < f; ++ch) {
      const float sc = scale[size_t(ch)];
      const float sh = shift[size_t(ch)];
      float* base = &x->values[(size_t(i) * f + ch) * hw];
      for (int64_t p = 0; p < hw; ++p) base[p] = base[p] * sc + sh;
    }
}

}  // namespace

Tensor eval_forward(const Model& m, const Tensor& x, bool student,
                    bool skip_final_softmax) {
  Tensor cur = x;
  for (size_t li = 0; li < m.layers.size(); ++li) {
    const LayerSpec& ls = m.layers[li];
    const int slot_i = m.slot_of[li];
    const bool last = li + 1 == m.layers.size();
    if (const Dense* d = std::get_if<Dense>(&ls)) {
      (void)d;
      const ParamSlot& s = m.slots[size_t(slot_i)];
      if (student) {
        QuantParams p{s.theta1.item(), s.theta2.item(), m.eps_zero};
        cur = ops::add_rowvec(ops::matmul_nt(cur, quantize_tensor(s.W, p).dequantize()),
                              quantize_tensor(s.b, p).dequantize());
      } else {
        cur = ops::add_rowvec(ops::matmul_nt(cur, s.W), s.b);
      }
    } else if (const Conv2d* c = std::get_if<Conv2d>(&ls)) {
      const ParamSlot& s = m.slots[size_t(slot_i)];
      if (student) {
        QuantParams p{s.theta1.item(), s.theta2.item(), m.eps_zero};
        cur = ops::conv2d(cur, quantize_tensor(s.W, p).dequantize(), c->stride, c->pad);
        add_channel_bias(&cur, quantize_tensor(s.b, p).dequantize().values);
      } else {
        cur = ops::conv2d(cur, s.W, c->stride, c->pad);
        add_channel_bias(&cur, s.b.values);
      }
    } else if (std::holds_alternative<BatchNorm>(ls)) {
      const FoldedBn f = fold_bn(m.slots[size_t(slot_i)], m.bn_eps, student, m.eps_zero);
      affine_channels(&cur, f.scale, f.shift);
    } else if (const MaxPool* p = std::get_if<MaxPool>(&ls)) {
      cur = ops::maxpool2d(cur, p->k, p->stride);
    } else if (const Activation* a = std::get_if<Activation>(&ls)) {
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
          if (!(skip_final_softmax && last)) cur = ops::softmax(cur, 1);
          break;
      }
    } else if (std::holds_alternative<Dropout>(ls)) {
      // identity at eval time
    } else {  // Flatten
      Tensor flat = cur;
      flat.shape = {cur.dim(0), int(cur.numel() / cur.dim(0))};
      cur = std::move(flat);
    }
  }
  return cur;
}

Tensor eval_forward_vae(const VaeModel& m, const Tensor& x, bool student) {
  const Tensor h = eval_forward(m.encoder, x, student);
  const Tensor mu = eval_forward(m.mean_head, h, student);
  return eval_forward(m.decoder, mu, student);
}

std::vector<int> argmax_rows(const Tensor& t) {
  GTC_CHECK(t.rank() == 2, ShapeError, "argmax wants [n,k]");
  const int n = t.dim(0), k = t.dim(1);
  std::vector<int> out(size_t(n), 0);
  for (int i = 0; i < n; ++i) {
    const float* row = &t.values[size_t(i) * k];
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[size_t(i)] = best;
  }
  return out;
}

}  // namespace gtc
