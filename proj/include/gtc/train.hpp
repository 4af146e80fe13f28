#pragma once

// Training driver: the four run modes (joint teacher/student, straight-through
// baselines, teacher only), the per-tensor optimizer, dataset resolution,
// metric/eval cadence, checkpoint save/resume, and quantized-model export.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gtc/config.hpp"
#include "gtc/data.hpp"
#include "gtc/io.hpp"
#include "gtc/model.hpp"

namespace gtc {

enum class RunMode { gtc, ste, ste_bit, teacher_only };

RunMode parse_run_mode(const std::string& s);
const char* run_mode_name(RunMode m);

// Plain SGD or bias-corrected Adam (beta 0.9/0.999, eps 1e-8), one moment
// pair per parameter tensor keyed by name, one shared step count.
class Optimizer {
 public:
  Optimizer(bool adam, float lr) : adam_(adam), lr_(lr) {}

  void begin_step() { ++step_; }
  // grad may be empty (no path to the loss): the update is skipped, which
  // matches what zero gradients would do exactly.
  void apply(const std::string& name, std::vector<float>* values,
             const std::vector<float>& grad);

  bool adam() const { return adam_; }
  float lr() const { return lr_; }
  uint64_t step() const { return step_; }
  void set_step(uint64_t s) { step_ = s; }

  // Moment buffers for checkpointing, zero-filled to n on first access.
  std::vector<float>& moment_m(const std::string& name, size_t n);
  std::vector<float>& moment_v(const std::string& name, size_t n);

 private:
  bool adam_;
  float lr_;
  uint64_t step_ = 0;
  std::map<std::string, std::vector<float>> m_, v_;
};

// lambda2 * factor^(full anneal periods completed before `iter`);
// every == 0 disables the schedule.
double anneal_lambda2(double lambda2, int64_t iter, int64_t every, double factor);

// Classifier network or VAE, chosen by the config's model key.
struct BuiltModel {
  bool is_vae = false;
  Model net;
  VaeModel vae;

  int64_t param_count() const;
  std::vector<std::string> quant_names() const;
};

BuiltModel build_from_config(const Config& cfg);

// Per-example element count at each dropout layer, in layer order (used to
// pre-draw masks shared by the teacher and student passes).
std::vector<int64_t> dropout_elem_counts(const Model& m);

// One row of the per-layer report: merged weight+bias code range under the
// layer's current theta.
struct LayerRow {
  std::string name;
  int bits = 1;
  float theta1 = 0.0f;
  float theta2 = 1.0f;
  int64_t params = 0;
};

std::vector<LayerRow> layer_rows(const BuiltModel& bm);
double avg_bits_plain(const std::vector<LayerRow>& rows);
double avg_bits_weighted(const std::vector<LayerRow>& rows);

// Two GTCQ entries per parameterized layer: "<name>" for weights and
// "<name>.b" for the bias, each self-contained.
std::vector<GtcqEntry> collect_gtcq(const Model& m);
std::vector<GtcqEntry> collect_gtcq(const VaeModel& m);
std::vector<GtcqEntry> collect_gtcq(const BuiltModel& bm);

// Every model tensor under its checkpoint name ("conv1.W", "conv1.theta1",
// "bn1.gamma", "bn1.running_mean", ...), in slot order.
std::vector<std::pair<std::string, Tensor>> named_tensors(const BuiltModel& bm);
void restore_named_tensors(BuiltModel* bm,
                           const std::vector<std::pair<std::string, Tensor>>& ts);

// Resolve the configured dataset. mnist falls back from mnist_dir to
// $GTC_MNIST_DIR to expanding the bundled digits asset under out_dir.
void load_datasets(const Config& cfg, DatasetSplit* train, DatasetSplit* test);

// Accuracy in percent over the whole split, evaluated in eval_batch chunks.
double classify_accuracy(const Model& m, const DatasetSplit& d, bool student,
                         int64_t eval_batch);
// Mean clamped binary cross-entropy of reconstructions against inputs.
double vae_test_bce(const VaeModel& m, const DatasetSplit& d, bool student,
                    int64_t eval_batch);

struct TrainOutput {
  std::vector<MetricsRecord> records;
  RunSummary summary;
  std::vector<LayerRow> layers;
  std::string out_dir;
  bool wrote_gtcq = false;
};

// Full run: train per config, write metrics.csv, summary.json,
// checkpoint.ckpt, and model.gtcq (all modes except teacher_only) under
// out_dir. resume_path continues a saved run; the checkpoint's config must
// match the current one in every key except iters.
TrainOutput run_training(const Config& cfg, const std::string& resume_path = "");

}  // namespace gtc
