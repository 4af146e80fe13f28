#include "gtc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "gtc/graph.hpp"
#include "gtc/ops.hpp"

namespace gtc {

namespace {

constexpr float kBceClamp = 1e-7f;
constexpr float kAdamB1 = 0.9f;
constexpr float kAdamB2 = 0.999f;
constexpr float kAdamEps = 1e-8f;
constexpr float kBnMomentum = 0.1f;

// One trained tensor: its checkpoint name, tape leaf, and storage.
struct ParamApply {
  std::string name;
  NodeId node = -1;
  Tensor* dest = nullptr;
};

void collect_applies(Model* m, const ModelBinding& bind, bool train_theta,
                     std::vector<ParamApply>* out) {
  for (size_t i = 0; i < m->slots.size(); ++i) {
    ParamSlot& s = m->slots[i];
    if (!s.is_bn) {
      out->push_back({s.name + ".W", bind.W[i], &s.W});
      out->push_back({s.name + ".b", bind.b[i], &s.b});
      if (train_theta) {
        out->push_back({s.name + ".theta1", bind.th1[i], &s.theta1});
        out->push_back({s.name + ".theta2", bind.th2[i], &s.theta2});
      }
    } else {
      out->push_back({s.name + ".gamma", bind.W[i], &s.W});
      out->push_back({s.name + ".beta", bind.b[i], &s.b});
    }
  }
}

// Fold this iteration's batch statistics into the running estimates.
void update_bn_running(Model* m, const Tape& tape, const ForwardBuild& fb) {
  size_t bi = 0;
  for (size_t li = 0; li < m->layers.size(); ++li) {
    if (!std::holds_alternative<BatchNorm>(m->layers[li])) continue;
    ParamSlot& s = m->slots[size_t(m->slot_of[li])];
    const std::vector<float>& mean = tape.val(fb.bn_mean[bi]).values;
    const std::vector<float>& var = tape.val(fb.bn_var[bi]).values;
    for (size_t c = 0; c < mean.size(); ++c) {
      s.running_mean.values[c] =
          (1.0f - kBnMomentum) * s.running_mean.values[c] + kBnMomentum * mean[c];
      s.running_var.values[c] =
          (1.0f - kBnMomentum) * s.running_var.values[c] + kBnMomentum * var[c];
    }
    ++bi;
  }
}

std::vector<std::vector<float>> draw_dropout_masks(const Model& m,
                                                   const std::vector<int64_t>& counts,
                                                   int64_t batch, SeededRng* rng) {
  std::vector<std::vector<float>> masks;
  size_t di = 0;
  for (const LayerSpec& ls : m.layers) {
    const Dropout* d = std::get_if<Dropout>(&ls);
    if (!d) continue;
    std::vector<float> mask(size_t(counts[di] * batch));
    for (float& v : mask) v = rng->uniform() >= double(d->p) ? 1.0f : 0.0f;
    masks.push_back(std::move(mask));
    ++di;
  }
  return masks;
}

void rows_of(const Model& m, std::vector<LayerRow>* out) {
  for (int i : m.quant_slots()) {
    const ParamSlot& s = m.slots[size_t(i)];
    const QuantParams p{s.theta1.item(), s.theta2.item(), m.eps_zero};
    const QuantizedLayer qw = quantize_tensor(s.W, p);
    const QuantizedLayer qb = quantize_tensor(s.b, p);
    const BitRange r = merge_ranges({&qw, &qb});
    out->push_back({s.name, r.bits, p.theta1, p.theta2, s.W.numel() + s.b.numel()});
  }
}

void tensors_of(const Model& m, std::vector<std::pair<std::string, Tensor>>* out) {
  for (const ParamSlot& s : m.slots) {
    if (!s.is_bn) {
      out->emplace_back(s.name + ".W", s.W);
      out->emplace_back(s.name + ".b", s.b);
      out->emplace_back(s.name + ".theta1", s.theta1);
      out->emplace_back(s.name + ".theta2", s.theta2);
    } else {
      out->emplace_back(s.name + ".gamma", s.W);
      out->emplace_back(s.name + ".beta", s.b);
      out->emplace_back(s.name + ".running_mean", s.running_mean);
      out->emplace_back(s.name + ".running_var", s.running_var);
    }
  }
}

void restore_into(Model* m, std::map<std::string, const Tensor*>* byname,
                  size_t* used) {
  const auto take = [&](const std::string& name, Tensor* dst) {
    auto it = byname->find(name);
    GTC_CHECK(it != byname->end() && it->second != nullptr, FormatError,
              "checkpoint is missing tensor '" + name + "'");
    GTC_CHECK(it->second->shape == dst->shape, FormatError,
              "checkpoint tensor '" + name + "' has shape " +
                  shape_str(it->second->shape) + ", expected " +
                  shape_str(dst->shape));
    dst->values = it->second->values;
    it->second = nullptr;
    ++*used;
  };
  for (ParamSlot& s : m->slots) {
    if (!s.is_bn) {
      take(s.name + ".W", &s.W);
      take(s.name + ".b", &s.b);
      take(s.name + ".theta1", &s.theta1);
      take(s.name + ".theta2", &s.theta2);
    } else {
      take(s.name + ".gamma", &s.W);
      take(s.name + ".beta", &s.b);
      take(s.name + ".running_mean", &s.running_mean);
      take(s.name + ".running_var", &s.running_var);
    }
  }
}

float clamp_prob(float p) {
  return std::min(std::max(p, kBceClamp), 1.0f - kBceClamp);
}

void check_images_match(const std::vector<int>& want, const Tensor& images,
                        const char* which) {
  GTC_CHECK(images.rank() == 4, ConfigError, "dataset images must be [n,c,h,w]");
  GTC_CHECK(want.size() == 3, ConfigError, "model input shape must be c,h,w");
  const bool ok = images.dim(1) == want[0] && images.dim(2) == want[1] &&
                  images.dim(3) == want[2];
  GTC_CHECK(ok, ConfigError,
            std::string(which) + " images are " + shape_str(images.shape) +
                " but the model expects per-example shape " + shape_str(want));
}

}  // namespace

RunMode parse_run_mode(const std::string& s) {
  if (s == "gtc") return RunMode::gtc;
  if (s == "ste") return RunMode::ste;
  if (s == "ste_bit") return RunMode::ste_bit;
  if (s == "teacher_only") return RunMode::teacher_only;
  throw ConfigError("unknown mode '" + s + "'");
}

const char* run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::gtc: return "gtc";
    case RunMode::ste: return "ste";
    case RunMode::ste_bit: return "ste_bit";
    case RunMode::teacher_only: return "teacher_only";
  }
  return "?";
}

std::vector<float>& Optimizer::moment_m(const std::string& name, size_t n) {
  std::vector<float>& v = m_[name];
  if (v.size() != n) v.assign(n, 0.0f);
  return v;
}

std::vector<float>& Optimizer::moment_v(const std::string& name, size_t n) {
  std::vector<float>& v = v_[name];
  if (v.size() != n) v.assign(n, 0.0f);
  return v;
}

void Optimizer::apply(const std::string& name, std::vector<float>* values,
                      const std::vector<float>& grad) {
  if (grad.empty()) return;  // no path to the loss == exactly zero gradient
  GTC_CHECK(grad.size() == values->size(), ShapeError,
            "gradient size mismatch for '" + name + "'");
  if (!adam_) {
    for (size_t i = 0; i < grad.size(); ++i) (*values)[i] -= lr_ * grad[i];
    return;
  }
  GTC_CHECK(step_ > 0, NumericError, "optimizer step applied before begin_step");
  std::vector<float>& m = moment_m(name, grad.size());
  std::vector<float>& v = moment_v(name, grad.size());
  const float c1 = float(1.0 - std::pow(double(kAdamB1), double(step_)));
  const float c2 = float(1.0 - std::pow(double(kAdamB2), double(step_)));
  for (size_t i = 0; i < grad.size(); ++i) {
    m[i] = kAdamB1 * m[i] + (1.0f - kAdamB1) * grad[i];
    v[i] = kAdamB2 * v[i] + (1.0f - kAdamB2) * grad[i] * grad[i];
    const float mh = m[i] / c1;
    const float vh = v[i] / c2;
    (*values)[i] -= lr_ * mh / (std::sqrt(vh) + kAdamEps);
  }
}

double anneal_lambda2(double lambda2, int64_t iter, int64_t every, double factor) {
  if (every <= 0) return lambda2;
  const int64_t periods = (iter - 1) / every;
  return lambda2 * std::pow(factor, double(periods));
}

int64_t BuiltModel::param_count() const {
  return is_vae ? vae.param_count() : net.param_count();
}

std::vector<std::string> BuiltModel::quant_names() const {
  return is_vae ? vae.quant_slot_names() : net.quant_slot_names();
}

BuiltModel build_from_config(const Config& cfg) {
  BuiltModel bm;
  const std::string model = cfg.str("model");
  const float scale = float(cfg.num("model_scale"));
  const float ez = float(cfg.num("eps_zero"));
  if (model == "vae") {
    bm.is_vae = true;
    bm.vae = build_vae(scale);
    for (Model* p : bm.vae.parts()) p->eps_zero = ez;
  } else if (model == "vgg16") {
    bm.net = build_vgg16();
    bm.net.eps_zero = ez;
  } else {
    bm.net = build_lenet_small(scale);
    bm.net.eps_zero = ez;
  }
  return bm;
}

std::vector<int64_t> dropout_elem_counts(const Model& m) {
  std::vector<int> shape = m.input_shape;
  const auto count = [&shape] {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  };
  std::vector<int64_t> out;
  for (const LayerSpec& ls : m.layers) {
    if (const Dense* d = std::get_if<Dense>(&ls)) {
      shape = {d->out};
    } else if (const Conv2d* c = std::get_if<Conv2d>(&ls)) {
      const ops::Conv2dDims dd =
          ops::conv2d_dims({1, shape[0], shape[1], shape[2]},
                           {c->out_ch, c->in_ch, c->kh, c->kw}, c->stride, c->pad);
      shape = {dd.f, dd.oh, dd.ow};
    } else if (const MaxPool* p = std::get_if<MaxPool>(&ls)) {
      shape = {shape[0], (shape[1] - p->k) / p->stride + 1,
               (shape[2] - p->k) / p->stride + 1};
    } else if (std::holds_alternative<Dropout>(ls)) {
      out.push_back(count());
    } else if (std::holds_alternative<Flatten>(ls)) {
      shape = {int(count())};
    }
  }
  return out;
}

std::vector<LayerRow> layer_rows(const BuiltModel& bm) {
  std::vector<LayerRow> rows;
  if (bm.is_vae)
    for (const Model* p : bm.vae.parts()) rows_of(*p, &rows);
  else
    rows_of(bm.net, &rows);
  return rows;
}

double avg_bits_plain(const std::vector<LayerRow>& rows) {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const LayerRow& r : rows) s += r.bits;
  return s / double(rows.size());
}

double avg_bits_weighted(const std::vector<LayerRow>& rows) {
  double s = 0.0, w = 0.0;
  for (const LayerRow& r : rows) {
    s += double(r.bits) * double(r.params);
    w += double(r.params);
  }
  return w > 0.0 ? s / w : 0.0;
}

std::vector<GtcqEntry> collect_gtcq(const Model& m) {
  std::vector<GtcqEntry> out;
  for (int i : m.quant_slots()) {
    const ParamSlot& s = m.slots[size_t(i)];
    const QuantParams p{s.theta1.item(), s.theta2.item(), m.eps_zero};
    out.push_back({s.name, p.theta1, p.theta2, quantize_tensor(s.W, p)});
    out.push_back({s.name + ".b", p.theta1, p.theta2, quantize_tensor(s.b, p)});
  }
  return out;
}

std::vector<GtcqEntry> collect_gtcq(const VaeModel& m) {
  std::vector<GtcqEntry> entries;
  for (const Model* p : m.parts())
    for (GtcqEntry& e : collect_gtcq(*p)) entries.push_back(std::move(e));
  return entries;
}

std::vector<GtcqEntry> collect_gtcq(const BuiltModel& bm) {
  if (bm.is_vae) return collect_gtcq(bm.vae);
  return collect_gtcq(bm.net);
}

std::vector<std::pair<std::string, Tensor>> named_tensors(const BuiltModel& bm) {
  std::vector<std::pair<std::string, Tensor>> out;
  if (bm.is_vae)
    for (const Model* p : bm.vae.parts()) tensors_of(*p, &out);
  else
    tensors_of(bm.net, &out);
  return out;
}

void restore_named_tensors(BuiltModel* bm,
                           const std::vector<std::pair<std::string, Tensor>>& ts) {
  std::map<std::string, const Tensor*> byname;
  for (const auto& [name, t] : ts) {
    GTC_CHECK(!byname.count(name), FormatError,
              "checkpoint repeats tensor '" + name + "'");
    byname[name] = &t;
  }
  size_t used = 0;
  if (bm->is_vae)
    for (Model* p : bm->vae.parts()) restore_into(p, &byname, &used);
  else
    restore_into(&bm->net, &byname, &used);
  GTC_CHECK(used == ts.size(), FormatError,
            "checkpoint holds tensors the model does not have");
}

void load_datasets(const Config& cfg, DatasetSplit* train, DatasetSplit* test) {
  const std::string ds = cfg.str("dataset");
  const int64_t train_count = cfg.integer("train_count");
  const int64_t test_count = cfg.integer("test_count");
  if (ds == "mnist") {
    std::string dir = cfg.str("mnist_dir");
    if (dir.empty()) {
      const char* env = std::getenv("GTC_MNIST_DIR");
      if (env != nullptr && env[0] != '\0') dir = env;
    }
    if (dir.empty()) {
      const std::string asset = "assets/digits8x8.bin";
      GTC_CHECK(std::filesystem::exists(asset), ConfigError,
                "dataset=mnist needs mnist_dir or $GTC_MNIST_DIR (or run from the "
                "repository root so the bundled " +
                    asset + " can be expanded)");
      dir = cfg.str("out_dir") + "/mnist-idx";
      expand_digits_to_idx(asset, dir, int(train_count), int(test_count),
                           uint64_t(cfg.integer("seed")));
    }
    *train = load_mnist_dir(dir, true, train_count);
    *test = load_mnist_dir(dir, false, test_count);
  } else if (ds == "cifar10") {
    std::string dir = cfg.str("cifar_dir");
    if (dir.empty()) {
      const char* env = std::getenv("GTC_CIFAR_DIR");
      if (env != nullptr && env[0] != '\0') dir = env;
    }
    GTC_CHECK(!dir.empty(), ConfigError,
              "dataset=cifar10 needs cifar_dir or $GTC_CIFAR_DIR");
    *train = load_cifar_dir(dir, true, train_count);
    *test = load_cifar_dir(dir, false, test_count);
  } else {
    const int classes = int(cfg.integer("synth_classes"));
    const int per = int(cfg.integer("synth_per_class"));
    const int dim = int(cfg.integer("synth_dim"));
    const uint64_t seed = uint64_t(cfg.integer("seed"));
    *train = synth_blobs(classes, per, dim, seed * 2);
    *test = synth_blobs(classes, std::max(1, per / 5), dim, seed * 2 + 1);
  }
}

double classify_accuracy(const Model& m, const DatasetSplit& d, bool student,
                         int64_t eval_batch) {
  GTC_CHECK(d.count() > 0, ConfigError, "cannot evaluate on an empty split");
  int64_t correct = 0;
  for (int64_t b = 0; b < d.count(); b += eval_batch) {
    const int64_t n = std::min(eval_batch, d.count() - b);
    const Tensor x = slice_images(d.images, b, n);
    const Tensor probs = eval_forward(m, x, student);
    const std::vector<int> pred = argmax_rows(probs);
    for (int64_t i = 0; i < n; ++i)
      if (pred[size_t(i)] == d.labels[size_t(b + i)]) ++correct;
  }
  return 100.0 * double(correct) / double(d.count());
}

double vae_test_bce(const VaeModel& m, const DatasetSplit& d, bool student,
                    int64_t eval_batch) {
  GTC_CHECK(d.count() > 0, ConfigError, "cannot evaluate on an empty split");
  double sum = 0.0;
  int64_t cnt = 0;
  for (int64_t b = 0; b < d.count(); b += eval_batch) {
    const int64_t n = std::min(eval_batch, d.count() - b);
    const Tensor x = slice_images(d.images, b, n);
    const Tensor r = eval_forward_vae(m, x, student);
    for (size_t i = 0; i < r.values.size(); ++i) {
      const double p = double(clamp_prob(r.values[i]));
      const double t = double(x.values[i]);
      sum -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    cnt += r.numel();
  }
  return sum / double(cnt);
}

TrainOutput run_training(const Config& cfg, const std::string& resume_path) {
  cfg.validate();
  const RunMode mode = parse_run_mode(cfg.str("mode"));
  const std::string out_dir = cfg.str("out_dir");
  ensure_dir(out_dir);

  BuiltModel bm = build_from_config(cfg);
  const uint64_t seed = uint64_t(cfg.integer("seed"));
  SeededRng rng(seed);
  const float th1_init = float(cfg.num("theta1_init"));
  const float th2_init = float(cfg.num("theta2_init"));
  if (bm.is_vae)
    init_params(&bm.vae, rng, th1_init, th2_init);
  else
    init_params(&bm.net, rng, th1_init, th2_init);

  DatasetSplit train, test;
  load_datasets(cfg, &train, &test);
  const std::vector<int>& in_shape =
      bm.is_vae ? bm.vae.encoder.input_shape : bm.net.input_shape;
  check_images_match(in_shape, train.images, "train");
  check_images_match(in_shape, test.images, "test");

  const int64_t iters = cfg.integer("iters");
  const int64_t batch_size = cfg.integer("batch_size");
  const int64_t log_every = cfg.integer("log_every");
  const int64_t eval_every = cfg.integer("eval_every");
  const int64_t eval_batch = std::max<int64_t>(1, cfg.integer("eval_batch"));
  const double lambda1 = cfg.num("lambda1");
  const double lambda2 = cfg.num("lambda2");
  const int64_t anneal_every = cfg.integer("anneal_every");
  const double anneal_factor = cfg.num("anneal_factor");
  const bool stochastic = cfg.flag("stochastic_round");
  const float kl_w = float(cfg.num("kl_weight"));

  Batcher batcher(train, int(batch_size), seed, true);
  Optimizer opt(cfg.str("optimizer") == "adam", float(cfg.num("lr")));

  int64_t start_iter = 1;
  if (!resume_path.empty()) {
    const Checkpoint ck = load_checkpoint(resume_path);
    Config ckcfg;
    ckcfg.apply_text(ck.config_text, "checkpoint");
    for (const auto& [k, v] : cfg.entries()) {
      if (k == "iters") continue;
      const auto it = ckcfg.entries().find(k);
      GTC_CHECK(it != ckcfg.entries().end() && it->second == v, ConfigError,
                "checkpoint was written under a different configuration (key '" +
                    k + "')");
    }
    GTC_CHECK(int64_t(ck.iteration) <= iters, ConfigError,
              "checkpoint is already at iteration " + std::to_string(ck.iteration) +
                  ", nothing left to train");
    restore_named_tensors(&bm, ck.tensors);
    rng.load_state(ck.rng_state);
    if (opt.adam() && ck.adam_step > 0) {
      opt.set_step(ck.adam_step);
      for (size_t i = 0; i < ck.tensors.size(); ++i) {
        const std::string& name = ck.tensors[i].first;
        const size_t n = ck.tensors[i].second.values.size();
        opt.moment_m(name, n) = ck.adam_m[i];
        opt.moment_v(name, n) = ck.adam_v[i];
      }
    }
    batcher.set_state(int64_t(ck.data_epoch), int64_t(ck.data_pos));
    start_iter = int64_t(ck.iteration) + 1;
  }

  const std::vector<int64_t> drop_counts =
      bm.is_vae ? std::vector<int64_t>{} : dropout_elem_counts(bm.net);

  std::vector<MetricsRecord> records;
  double last_tm = 0.0, last_sm = 0.0;
  const auto run_eval = [&] {
    if (bm.is_vae) {
      last_tm = vae_test_bce(bm.vae, test, false, eval_batch);
      last_sm = vae_test_bce(bm.vae, test, true, eval_batch);
    } else {
      last_tm = classify_accuracy(bm.net, test, false, eval_batch);
      last_sm = classify_accuracy(bm.net, test, true, eval_batch);
    }
  };

  for (int64_t iter = start_iter; iter <= iters; ++iter) {
    Tensor x;
    std::vector<int> y;
    batcher.next(&x, &y);
    const int64_t n = x.dim(0);
    const double l2 = anneal_lambda2(lambda2, iter, anneal_every, anneal_factor);

    Tape tape;
    std::vector<ParamApply> applies;
    double v_teacher = 0.0, v_distill = 0.0, v_bits = 0.0;
    bool has_bit_node = false;
    NodeId total = -1;
    ForwardBuild stats_fb;
    Model* stats_model = nullptr;

    if (!bm.is_vae) {
      Model& m = bm.net;
      const ModelBinding bind = bind_params(tape, m, true, mode == RunMode::gtc);
      collect_applies(&m, bind, mode == RunMode::gtc, &applies);
      const NodeId xn = tape.constant(std::move(x));
      const std::vector<std::vector<float>> masks =
          draw_dropout_masks(m, drop_counts, n, &rng);
      ForwardOptions base;
      base.training = true;
      base.dropout_masks = &masks;
      base.skip_final_softmax = true;

      if (mode == RunMode::gtc || mode == RunMode::teacher_only) {
        const ForwardBuild tb = forward_model(tape, m, bind, xn, base);
        const NodeId tce = tape.ce_with_logits(tb.logits, y);
        v_teacher = double(tape.val(tce).item());
        stats_fb = tb;
        stats_model = &m;
        if (mode == RunMode::teacher_only) {
          total = tce;
        } else {
          ForwardOptions so = base;
          so.student = true;
          so.stochastic = stochastic;
          so.rng = &rng;
          const ForwardBuild sb = forward_model(tape, m, bind, xn, so);
          const NodeId tp = tape.softmax_rows(tb.logits);
          const NodeId sl = tape.log_softmax_rows(sb.logits);
          const NodeId D =
              tape.mul_scalar(tape.sum_all(tape.mul(tp, sl)), -1.0f / float(n));
          std::vector<std::vector<NodeId>> groups;
          for (const auto& qp : sb.qpairs) groups.push_back({qp[0], qp[1]});
          const NodeId B = tape.bit_cost(groups);
          total = tape.add(tce, tape.add(tape.mul_scalar(D, float(lambda1)),
                                         tape.mul_scalar(B, float(l2))));
          v_distill = double(tape.val(D).item());
          v_bits = double(tape.val(B).item());
          has_bit_node = true;
        }
      } else {  // ste, ste_bit: the quantized network is the objective
        ForwardOptions so = base;
        so.student = true;
        so.stochastic = stochastic;
        so.rng = &rng;
        const ForwardBuild sb = forward_model(tape, m, bind, xn, so);
        const NodeId ce = tape.ce_with_logits(sb.logits, y);
        stats_fb = sb;
        stats_model = &m;
        if (mode == RunMode::ste) {
          total = ce;
        } else {
          std::vector<std::vector<NodeId>> groups;
          for (const auto& qp : sb.qpairs) groups.push_back({qp[0], qp[1]});
          const NodeId B = tape.bit_cost(groups);
          total = tape.add(ce, tape.mul_scalar(B, float(l2)));
          v_bits = double(tape.val(B).item());
          has_bit_node = true;
        }
      }
    } else {
      VaeModel& vm = bm.vae;
      const bool theta = mode == RunMode::gtc;
      const ModelBinding be = bind_params(tape, vm.encoder, true, theta);
      const ModelBinding bmh = bind_params(tape, vm.mean_head, true, theta);
      const ModelBinding blh = bind_params(tape, vm.logvar_head, true, theta);
      const ModelBinding bd = bind_params(tape, vm.decoder, true, theta);
      collect_applies(&vm.encoder, be, theta, &applies);
      collect_applies(&vm.mean_head, bmh, theta, &applies);
      collect_applies(&vm.logvar_head, blh, theta, &applies);
      collect_applies(&vm.decoder, bd, theta, &applies);
      const NodeId xn = tape.constant(std::move(x));
      const NodeId xf = tape.reshape(xn, {int(n), vm.input_dim});
      Tensor noise = Tensor::zeros({int(n), vm.latent_dim});
      for (float& v : noise.values) v = float(rng.normal());
      const NodeId eps = tape.constant(std::move(noise));

      struct VaePass {
        NodeId recon = -1, mu = -1, logvar = -1;
        std::vector<std::array<NodeId, 2>> qpairs;
      };
      const auto vae_pass = [&](bool student) {
        ForwardOptions o;
        o.training = true;
        o.student = student;
        o.stochastic = student && stochastic;
        o.rng = &rng;
        VaePass r;
        const ForwardBuild he = forward_model(tape, vm.encoder, be, xn, o);
        const ForwardBuild hm = forward_model(tape, vm.mean_head, bmh, he.out, o);
        const ForwardBuild hl = forward_model(tape, vm.logvar_head, blh, he.out, o);
        const NodeId z =
            tape.add(hm.out, tape.mul(tape.exp(tape.mul_scalar(hl.out, 0.5f)), eps));
        const ForwardBuild hd = forward_model(tape, vm.decoder, bd, z, o);
        for (const ForwardBuild* fb : {&he, &hm, &hl, &hd})
          for (const auto& qp : fb->qpairs) r.qpairs.push_back(qp);
        r.recon = hd.out;
        r.mu = hm.out;
        r.logvar = hl.out;
        return r;
      };
      const auto loss_of = [&](const VaePass& p) {
        const NodeId inner = tape.sub(
            tape.sub(tape.add_scalar(p.logvar, 1.0f), tape.square(p.mu)),
            tape.exp(p.logvar));
        const NodeId kl = tape.mul_scalar(tape.sum_all(inner), -0.5f / float(n));
        return tape.add(tape.bce(p.recon, xf),
                        tape.mul_scalar(kl, kl_w / float(vm.input_dim)));
      };

      if (mode == RunMode::gtc || mode == RunMode::teacher_only) {
        const VaePass tp = vae_pass(false);
        const NodeId tl = loss_of(tp);
        v_teacher = double(tape.val(tl).item());
        if (mode == RunMode::teacher_only) {
          total = tl;
        } else {
          const VaePass sp = vae_pass(true);
          const NodeId D = tape.bce(sp.recon, tp.recon);
          std::vector<std::vector<NodeId>> groups;
          for (const auto& qp : sp.qpairs) groups.push_back({qp[0], qp[1]});
          const NodeId B = tape.bit_cost(groups);
          total = tape.add(tl, tape.add(tape.mul_scalar(D, float(lambda1)),
                                        tape.mul_scalar(B, float(l2))));
          v_distill = double(tape.val(D).item());
          v_bits = double(tape.val(B).item());
          has_bit_node = true;
        }
      } else {
        const VaePass sp = vae_pass(true);
        const NodeId sl = loss_of(sp);
        if (mode == RunMode::ste) {
          total = sl;
        } else {
          std::vector<std::vector<NodeId>> groups;
          for (const auto& qp : sp.qpairs) groups.push_back({qp[0], qp[1]});
          const NodeId B = tape.bit_cost(groups);
          total = tape.add(sl, tape.mul_scalar(B, float(l2)));
          v_bits = double(tape.val(B).item());
          has_bit_node = true;
        }
      }
    }

    const float total_v = tape.val(total).item();
    GTC_CHECK(std::isfinite(total_v), NumericError,
              "training diverged at iteration " + std::to_string(iter) +
                  " (loss=" + std::to_string(total_v) +
                  "); lower lr or lambda values");
    tape.backward(total);
    opt.begin_step();
    for (const ParamApply& pa : applies)
      opt.apply(pa.name, &pa.dest->values, tape.grad(pa.node));
    if (stats_model != nullptr) update_bn_running(stats_model, tape, stats_fb);

    if (iter % eval_every == 0 || iter == iters) run_eval();
    if (iter % log_every == 0 || iter == iters) {
      const std::vector<LayerRow> rows = layer_rows(bm);
      MetricsRecord rec;
      rec.iter = iter;
      rec.teacher_loss = v_teacher;
      rec.distill_loss = v_distill;
      if (has_bit_node) {
        rec.bit_cost = v_bits;
      } else {
        double s = 0.0;
        for (const LayerRow& r : rows) s += std::ldexp(1.0, r.bits);
        rec.bit_cost = s;
      }
      rec.total = double(total_v);
      rec.teacher_acc = last_tm;
      rec.student_acc = last_sm;
      rec.lambda2 = l2;
      for (const LayerRow& r : rows) {
        rec.bits.push_back(r.bits);
        rec.theta1.push_back(r.theta1);
        rec.theta2.push_back(r.theta2);
      }
      records.push_back(std::move(rec));
    }
  }

  if (iters < start_iter) run_eval();  // nothing trained: still report metrics

  const std::vector<LayerRow> rows = layer_rows(bm);
  TrainOutput out;
  out.layers = rows;
  out.records = std::move(records);
  out.out_dir = out_dir;

  RunSummary s;
  s.mode = cfg.str("mode");
  s.iters = iters;
  s.teacher_metric = last_tm;
  s.student_metric = last_sm;
  for (const LayerRow& r : rows) {
    s.layer_names.push_back(r.name);
    s.bits.push_back(r.bits);
    s.theta1.push_back(r.theta1);
    s.theta2.push_back(r.theta2);
  }
  s.avg_bits = avg_bits_plain(rows);
  s.avg_bits_weighted = avg_bits_weighted(rows);
  if (mode != RunMode::teacher_only) {
    const std::vector<GtcqEntry> entries = collect_gtcq(bm);
    save_gtcq(entries, out_dir + "/model.gtcq");
    const CompressionReport cr = compression_report(entries);
    s.compression_payload = cr.payload_ratio;
    s.compression_file = cr.file_ratio;
    out.wrote_gtcq = true;
  }
  s.config_text = cfg.resolved_text();
  s.config_hash = cfg.hash();

  write_metrics_csv(out.records, int(rows.size()), out_dir + "/metrics.csv");
  write_summary_json(s, out_dir + "/summary.json");

  Checkpoint ck;
  ck.config_text = cfg.resolved_text();
  ck.iteration = uint64_t(std::max(iters, start_iter - 1));
  ck.rng_state = rng.save_state();
  ck.tensors = named_tensors(bm);
  if (opt.adam() && opt.step() > 0) {
    ck.adam_step = opt.step();
    for (const auto& [name, t] : ck.tensors) {
      ck.adam_m.push_back(opt.moment_m(name, t.values.size()));
      ck.adam_v.push_back(opt.moment_v(name, t.values.size()));
    }
  }
  ck.data_epoch = uint64_t(batcher.epoch());
  ck.data_pos = uint64_t(batcher.pos());
  save_checkpoint(ck, out_dir + "/checkpoint.ckpt");

  out.summary = std::move(s);
  return out;
}

}  // namespace gtc
