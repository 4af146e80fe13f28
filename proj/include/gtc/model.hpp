#pragma once

// Model definitions: a layer-list network description, parameter storage with
// per-layer quantizer parameters, paired teacher/student tape forwards, a
// tape-free evaluation path (folded batchnorm, quantized student weights),
// and builders for the three reference architectures.

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "gtc/graph.hpp"
#include "gtc/quant.hpp"
#include "gtc/rng.hpp"
#include "gtc/tensor.hpp"

namespace gtc {

enum class Act { relu, tanh, sigmoid, softmax };

struct Dense {
  int in = 0, out = 0;
};
struct Conv2d {
  int in_ch = 0, out_ch = 0, kh = 0, kw = 0, stride = 1, pad = 0;
};
struct BatchNorm {
  int ch = 0;
};
struct MaxPool {
  int k = 0, stride = 0;
};
struct Activation {
  Act kind = Act::relu;
};
struct Dropout {
  float p = 0.0f;
};
struct Flatten {};

using LayerSpec =
    std::variant<Dense, Conv2d, BatchNorm, MaxPool, Activation, Dropout, Flatten>;

// Parameters of one parameterized layer. Dense/conv layers hold W and b plus
// the trained quantizer pair (theta1, theta2) as scalar tensors; batchnorm
// layers hold gamma in W, beta in b, running statistics, and a frozen
// identity quantizer used only when folding the scale at export time.
struct ParamSlot {
  std::string name;
  bool is_bn = false;
  Tensor W, b;
  Tensor running_mean, running_var;
  Tensor theta1, theta2;
};

struct Model {
  std::vector<LayerSpec> layers;
  std::vector<int> slot_of;  // per layer: index into slots, or -1
  std::vector<ParamSlot> slots;
  std::vector<int> input_shape;  // per-example shape, e.g. {1,28,28}
  float eps_zero = kDefaultEpsZero;
  float bn_eps = 1e-5f;

  int64_t param_count() const;
  // Indices of quantized (dense/conv) slots in topological order — the rows
  // of every per-layer metric.
  std::vector<int> quant_slots() const;
  std::vector<std::string> quant_slot_names() const;
};

// Encoder trunk + the two latent heads + decoder. The heads and decoder
// continue the encoder's layer numbering, so metric rows read fc1..fc9.
struct VaeModel {
  Model encoder;
  Model mean_head;
  Model logvar_head;
  Model decoder;
  int latent_dim = 10;
  int input_dim = 784;

  std::vector<Model*> parts() { return {&encoder, &mean_head, &logvar_head, &decoder}; }
  std::vector<const Model*> parts() const {
    return {&encoder, &mean_head, &logvar_head, &decoder};
  }
  int64_t param_count() const;
  std::vector<std::string> quant_slot_names() const;
};

// conv(ceil(16s), 5x5) -> pool -> relu -> conv(ceil(36s)) -> pool -> relu ->
// fc(ceil(128s)) -> relu -> fc(10) -> softmax, on 1x28x28 input.
Model build_lenet_small(float scale);

// Configuration-D 13-conv stack with batchnorm+relu after every conv,
// dropout 0.4 after every second conv, and fc 4096/4096/10, on 3x32x32 input.
Model build_vgg16();

// Flatten + dense chain with relu between hidden layers and a trailing
// softmax; used for small classification sanity runs.
Model build_mlp(const std::vector<int>& input_shape, const std::vector<int>& hidden,
                int classes);

// tanh encoder ceil(512s)/ceil(384s)/ceil(256s), 10-dim latent heads, and the
// mirrored decoder ending in a 784-unit sigmoid.
VaeModel build_vae(float scale);

// He-style init: truncated normal with stddev sqrt(2/fan_in) for weights,
// zero biases, identity batchnorm, theta as given. Draws in slot order.
void init_params(Model* m, SeededRng& rng, float theta1_init, float theta2_init);
void init_params(VaeModel* m, SeededRng& rng, float theta1_init, float theta2_init);

// ---------------------------------------------------------------------------
// Tape forward

// Leaf ids for one model's parameters on one tape. Teacher and student
// passes share these leaves, so gradients from both accumulate jointly.
struct ModelBinding {
  std::vector<NodeId> W, b;          // per slot
  std::vector<NodeId> th1, th2;      // per slot (-1 for none)
};

// train_weights: W/b/gamma/beta leaves require gradients.
// train_theta: theta leaves require gradients (gtc mode only).
ModelBinding bind_params(Tape& tape, Model& m, bool train_weights, bool train_theta);

struct ForwardOptions {
  bool training = true;    // batch-stat batchnorm + active dropout
  bool student = false;    // quantize dense/conv parameters
  QuantMode qmode = QuantMode::rounded;
  bool stochastic = false;
  SeededRng* rng = nullptr;  // consumed only by stochastic rounding
  // One mask per dropout layer (values 0/1, pre-drawn by the caller so both
  // passes share them); required when training and the model has dropout.
  const std::vector<std::vector<float>>* dropout_masks = nullptr;
  bool skip_final_softmax = false;  // return logits for fused losses
};

struct ForwardBuild {
  NodeId out = -1;     // final output node
  NodeId logits = -1;  // pre-softmax node (== out without a trailing softmax)
  // Per quantized slot: the quantize nodes of W and b (student passes only).
  std::vector<std::array<NodeId, 2>> qpairs;
  // Per batchnorm layer in order: batch mean/var nodes (training mode only).
  std::vector<NodeId> bn_mean, bn_var;
};

ForwardBuild forward_model(Tape& tape, const Model& m, const ModelBinding& bind,
                           NodeId x, const ForwardOptions& opt);

// ---------------------------------------------------------------------------
// Tape-free evaluation (eval mode: folded batchnorm, identity dropout)

// Folded batchnorm constants: y = scale*x + shift per channel. When
// quantize_scale is set the scale is snapped through the slot's quantizer
// (the form the shift engine uses) before shift = beta - scale*mean.
struct FoldedBn {
  std::vector<float> scale;
  std::vector<float> shift;
  QuantizedLayer scale_q;  // populated when quantize_scale was requested
};
FoldedBn fold_bn(const ParamSlot& slot, float bn_eps, bool quantize_scale,
                 float eps_zero);

// Forward in eval mode. student=true runs on dequantized weights and
// quantized folded batchnorm scales — the exact arithmetic the shift engine
// mirrors; student=false is the plain teacher network. skip_final_softmax
// returns logits (argmax-equivalent), matching the shift engine's output.
Tensor eval_forward(const Model& m, const Tensor& x, bool student,
                    bool skip_final_softmax = false);

// VAE eval: encode, take the mean as the latent (no sampling), decode.
Tensor eval_forward_vae(const VaeModel& m, const Tensor& x, bool student);

// Row-wise argmax with first-index tie breaking.
std::vector<int> argmax_rows(const Tensor& t);

}  // namespace gtc
