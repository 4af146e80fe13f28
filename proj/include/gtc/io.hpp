#pragma once

// Persistence: the GTCQ bit-packed model format, full training checkpoints,
// metrics CSV, and the run-summary JSON. All writes are atomic
// (temp-then-rename) and byte-deterministic for a given input.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gtc/config.hpp"
#include "gtc/quant.hpp"
#include "gtc/tensor.hpp"

namespace gtc {

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& bytes);
void ensure_dir(const std::string& path);

// ---------------------------------------------------------------------------
// GTCQ: per-entry header (name, dims, theta, base exponent m, reported bits,
// code width c) followed by a bit-packed payload, MSB-first: for each weight
// 1 sign bit (1 = negative) then a c-bit code; code 0 means zero, code v > 0
// means exponent m + v - 1.

struct GtcqEntry {
  std::string name;
  float theta1 = 0.0f;
  float theta2 = 1.0f;
  QuantizedLayer layer;
};

// Width of the exponent code: smallest c with 2^c symbols covering the zero
// code plus all max_exp - min_exp + 1 levels. All-zero entries use c = 1.
int code_width(const QuantizedLayer& q);

std::string encode_gtcq(const std::vector<GtcqEntry>& entries);
std::vector<GtcqEntry> decode_gtcq(const std::string& bytes);

void save_gtcq(const std::vector<GtcqEntry>& entries, const std::string& path);
std::vector<GtcqEntry> load_gtcq(const std::string& path);

// Payload bytes only (headers excluded), summed over entries.
int64_t gtcq_payload_bytes(const std::vector<GtcqEntry>& entries);

struct CompressionReport {
  int64_t param_count = 0;
  int64_t payload_bytes = 0;
  int64_t file_bytes = 0;
  double payload_ratio = 0.0;  // 32*n / (8*payload)
  double file_ratio = 0.0;     // 32*n / (8*file)
};
CompressionReport compression_report(const std::vector<GtcqEntry>& entries);

// ---------------------------------------------------------------------------
// Checkpoint: everything needed to resume a run bit-exactly — resolved config
// text, iteration, RNG state, named parameter tensors, optimizer buffers, and
// the batch-stream position.

struct Checkpoint {
  std::string config_text;  // fully-resolved key=value document
  uint64_t iteration = 0;
  std::string rng_state;
  // Parameter tensors in a fixed order; names like "conv1.W", "fc2.b",
  // "conv1.theta1", "bn1.gamma", "bn1.running_mean".
  std::vector<std::pair<std::string, Tensor>> tensors;
  // Adam buffers aligned with `tensors` (empty when the optimizer is sgd or
  // the run never stepped).
  uint64_t adam_step = 0;
  std::vector<std::vector<float>> adam_m;
  std::vector<std::vector<float>> adam_v;
  uint64_t data_epoch = 0;
  uint64_t data_pos = 0;
};

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Metrics: one row per logged iteration. Header is fixed:
// iter,teacher_loss,distill_loss,bit_cost,total,teacher_acc,student_acc,
// lambda2, then bits_l{i},theta1_l{i},theta2_l{i} per parameterized layer.

struct MetricsRecord {
  int64_t iter = 0;
  double teacher_loss = 0.0;
  double distill_loss = 0.0;
  double bit_cost = 0.0;
  double total = 0.0;
  double teacher_acc = 0.0;  // VAE runs log BCE in the accuracy slots
  double student_acc = 0.0;
  double lambda2 = 0.0;
  std::vector<int> bits;
  std::vector<float> theta1;
  std::vector<float> theta2;
};

std::string metrics_csv_header(int layer_count);
std::string metrics_to_csv(const std::vector<MetricsRecord>& records, int layer_count);
void write_metrics_csv(const std::vector<MetricsRecord>& records, int layer_count,
                       const std::string& path);

// Shortest round-trippable decimal form of a double (%.17g tightened).
std::string format_number(double v);

// ---------------------------------------------------------------------------
// Summary JSON: final metrics, per-layer bits and theta, both avg-bits
// readings, compression, and the resolved config echo with its hash.

struct RunSummary {
  std::string mode;
  int64_t iters = 0;
  double teacher_metric = 0.0;  // accuracy %, or BCE for VAE
  double student_metric = 0.0;
  std::vector<std::string> layer_names;
  std::vector<int> bits;
  std::vector<float> theta1;
  std::vector<float> theta2;
  double avg_bits = 0.0;           // plain layer mean
  double avg_bits_weighted = 0.0;  // parameter-count weighted mean
  double compression_payload = 0.0;
  double compression_file = 0.0;
  std::string config_text;
  std::string config_hash;
};

std::string summary_to_json(const RunSummary& s);
void write_summary_json(const RunSummary& s, const std::string& path);

}  // namespace gtc
