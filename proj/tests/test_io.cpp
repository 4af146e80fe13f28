#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "gtc/io.hpp"
#include "gtc/quant.hpp"
#include "oracles.hpp"

using namespace gtc;

namespace {

std::string temp_path(const char* name) {
  const auto d = std::filesystem::temp_directory_path() / "gtc-tests" / "io";
  std::filesystem::create_directories(d);
  return (d / name).string();
}

GtcqEntry random_entry(oracle::Mix* mx, std::string name, int n, int spread) {
  GtcqEntry e;
  e.name = std::move(name);
  e.theta1 = mx->rangef(-2.0f, 2.0f);
  e.theta2 = mx->rangef(-2.0f, 2.0f);
  QuantizedLayer& q = e.layer;
  q.shape = {n};
  q.sign.resize(size_t(n));
  q.exponent.resize(size_t(n));
  bool seen = false;
  for (int i = 0; i < n; ++i) {
    const int r = mx->below(10);
    if (r == 0) {
      q.sign[size_t(i)] = 0;
      q.exponent[size_t(i)] = 0;
      continue;
    }
    q.sign[size_t(i)] = r % 2 == 0 ? 1 : -1;
    q.exponent[size_t(i)] = int32_t(mx->below(2 * spread + 1) - spread);
    if (!seen) {
      q.min_exp = q.max_exp = q.exponent[size_t(i)];
      seen = true;
    } else {
      q.min_exp = std::min(q.min_exp, q.exponent[size_t(i)]);
      q.max_exp = std::max(q.max_exp, q.exponent[size_t(i)]);
    }
  }
  q.all_zero = !seen;
  if (!seen) {
    q.min_exp = q.max_exp = 0;
    q.bits = 1;
  } else {
    q.bits = 1 + ceil_log2(uint64_t(int64_t(q.max_exp) - q.min_exp + 1));
  }
  return e;
}

}  // namespace

TEST_CASE("worked example packs into four bytes with a 3-bit code") {
  GtcqEntry e;
  e.name = "fc";
  e.theta1 = -1.0f;
  e.theta2 = -3.5f;
  QuantizedLayer& q = e.layer;
  q.shape = {2, 4};
  q.sign = {1, 1, 1, 1, 1, -1, -1, -1};
  q.exponent = {-6, -1, -2, 0, -1, -6, -2, 0};
  q.min_exp = -6;
  q.max_exp = 0;
  q.bits = 4;
  q.all_zero = false;

  CHECK(code_width(q) == 3);  // zero code + 7 levels -> 8 symbols
  CHECK(gtcq_payload_bytes({e}) == 4);

  const std::string bytes = encode_gtcq({e});
  // payload is the last four bytes of the single-entry file
  REQUIRE(bytes.size() >= 4);
  const unsigned char* p =
      reinterpret_cast<const unsigned char*>(bytes.data() + bytes.size() - 4);
  CHECK(p[0] == 0x16);
  CHECK(p[1] == 0x57);
  CHECK(p[2] == 0x69);
  CHECK(p[3] == 0xDF);

  const std::vector<GtcqEntry> back = decode_gtcq(bytes);
  REQUIRE(back.size() == 1);
  CHECK(back[0].layer.sign == q.sign);
  CHECK(back[0].layer.exponent == q.exponent);
}

TEST_CASE("code width covers the zero symbol") {
  QuantizedLayer q;
  q.shape = {1};
  q.sign = {1};
  q.exponent = {5};
  q.min_exp = q.max_exp = 5;
  q.bits = 1;
  q.all_zero = false;
  CHECK(code_width(q) == 1);  // symbols {0, 1}
  q.max_exp = 6;              // 2 levels + zero = 3 symbols
  q.bits = 2;
  CHECK(code_width(q) == 2);
  q.max_exp = 8;              // 4 levels + zero = 5 symbols
  q.bits = 3;
  CHECK(code_width(q) == 3);

  QuantizedLayer z;
  z.shape = {3};
  z.sign = {0, 0, 0};
  z.exponent = {0, 0, 0};
  z.all_zero = true;
  z.bits = 1;
  CHECK(code_width(z) == 1);
  // 3 weights x (1 sign + 1 code) bits -> 1 byte
  CHECK(gtcq_payload_bytes({GtcqEntry{"z", 0.0f, 1.0f, z}}) == 1);
}

TEST_CASE("encode/decode round trip preserves every field") {
  oracle::Mix mx(700);
  std::vector<GtcqEntry> entries;
  entries.push_back(random_entry(&mx, "a", 1, 0));
  entries.push_back(random_entry(&mx, "b.with.dots", 63, 3));
  entries.push_back(random_entry(&mx, "c", 256, 12));
  GtcqEntry zero;
  zero.name = "allzero";
  zero.layer.shape = {2, 2};
  zero.layer.sign = {0, 0, 0, 0};
  zero.layer.exponent = {0, 0, 0, 0};
  zero.layer.all_zero = true;
  zero.layer.bits = 1;
  entries.push_back(zero);
  GtcqEntry multi = random_entry(&mx, "multi", 24, 5);
  multi.layer.shape = {2, 3, 4};
  entries.push_back(multi);

  const std::vector<GtcqEntry> back = decode_gtcq(encode_gtcq(entries));
  REQUIRE(back.size() == entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].theta1 == entries[i].theta1);
    CHECK(back[i].theta2 == entries[i].theta2);
    CHECK(back[i].layer.shape == entries[i].layer.shape);
    CHECK(back[i].layer.sign == entries[i].layer.sign);
    CHECK(back[i].layer.bits == entries[i].layer.bits);
    CHECK(back[i].layer.min_exp == entries[i].layer.min_exp);
    CHECK(back[i].layer.max_exp == entries[i].layer.max_exp);
    CHECK(back[i].layer.all_zero == entries[i].layer.all_zero);
    REQUIRE(back[i].layer.exponent.size() == entries[i].layer.exponent.size());
    for (size_t k = 0; k < entries[i].layer.sign.size(); ++k)
      if (entries[i].layer.sign[k] != 0)
        CHECK(back[i].layer.exponent[k] == entries[i].layer.exponent[k]);
  }
}

TEST_CASE("encoding is deterministic and decoding rejects corruption") {
  oracle::Mix mx(701);
  const std::vector<GtcqEntry> entries = {random_entry(&mx, "w", 40, 6)};
  const std::string a = encode_gtcq(entries);
  const std::string b = encode_gtcq(entries);
  CHECK(a == b);

  CHECK_THROWS_AS(decode_gtcq(a.substr(0, a.size() - 1)), FormatError);
  CHECK_THROWS_AS(decode_gtcq(std::string("GARBAGE")), FormatError);
  std::string flip = a;
  flip[0] = 'X';
  CHECK_THROWS_AS(decode_gtcq(flip), FormatError);
  CHECK_THROWS_AS(decode_gtcq(a + "x"), FormatError);  // trailing bytes
}

TEST_CASE("compression report counts parameters and ratios") {
  oracle::Mix mx(702);
  GtcqEntry e = random_entry(&mx, "w", 1000, 1);  // 3 levels -> c = 2
  const CompressionReport r = compression_report({e});
  CHECK(r.param_count == 1000);
  CHECK(r.payload_bytes == gtcq_payload_bytes({e}));
  CHECK(r.payload_bytes == (1000 * 3 + 7) / 8);
  CHECK(r.file_bytes == int64_t(encode_gtcq({e}).size()));
  CHECK(r.payload_ratio == doctest::Approx(32.0 * 1000 / (8.0 * double(r.payload_bytes))));
  CHECK(r.file_ratio == doctest::Approx(32.0 * 1000 / (8.0 * double(r.file_bytes))));
}

TEST_CASE("gtcq files save and load through disk") {
  oracle::Mix mx(703);
  const std::vector<GtcqEntry> entries = {random_entry(&mx, "disk", 30, 4)};
  const std::string p = temp_path("roundtrip.gtcq");
  save_gtcq(entries, p);
  const std::vector<GtcqEntry> back = load_gtcq(p);
  REQUIRE(back.size() == 1);
  CHECK(back[0].layer.sign == entries[0].layer.sign);
  CHECK_THROWS_AS(load_gtcq(temp_path("missing.gtcq")), IoError);
}

TEST_CASE("checkpoint round trip preserves all state") {
  Checkpoint ck;
  ck.config_text = "alpha=1\nbeta=two\n";
  ck.iteration = 1234;
  ck.rng_state = std::string("\x01\x02\x00\xff serialized", 14);
  ck.tensors.push_back({"fc1.W", Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6})});
  ck.tensors.push_back({"fc1.b", Tensor::from({3}, {0.5f, -0.5f, 0.0f})});
  ck.adam_step = 77;
  ck.adam_m = {{0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f}, {1, 2, 3}};
  ck.adam_v = {{9, 8, 7, 6, 5, 4}, {0, 0, 1}};
  ck.data_epoch = 3;
  ck.data_pos = 41;

  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  CHECK(back.config_text == ck.config_text);
  CHECK(back.iteration == ck.iteration);
  CHECK(back.rng_state == ck.rng_state);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].first == "fc1.W");
  CHECK(back.tensors[0].second.shape == std::vector<int>{2, 3});
  CHECK(back.tensors[0].second.values == ck.tensors[0].second.values);
  CHECK(back.tensors[1].second.values == ck.tensors[1].second.values);
  CHECK(back.adam_step == 77);
  CHECK(back.adam_m == ck.adam_m);
  CHECK(back.adam_v == ck.adam_v);
  CHECK(back.data_epoch == 3);
  CHECK(back.data_pos == 41);

  // sgd flavor: no optimizer buffers
  ck.adam_step = 0;
  ck.adam_m.clear();
  ck.adam_v.clear();
  const Checkpoint sgd = decode_checkpoint(encode_checkpoint(ck));
  CHECK(sgd.adam_m.empty());
  CHECK(sgd.adam_v.empty());
}

TEST_CASE("checkpoint encoding rejects misaligned optimizer buffers") {
  Checkpoint ck;
  ck.config_text = "x=1\n";
  ck.tensors.push_back({"w", Tensor::from({2}, {1, 2})});
  ck.adam_step = 1;
  ck.adam_m = {{1.0f}};  // wrong element count
  ck.adam_v = {{1.0f}};
  CHECK_THROWS_AS(encode_checkpoint(ck), FormatError);
  ck.adam_m = {{1.0f, 2.0f}, {3.0f}};  // wrong tensor count
  ck.adam_v = {{1.0f, 2.0f}, {3.0f}};
  CHECK_THROWS_AS(encode_checkpoint(ck), FormatError);

  const std::string p = temp_path("ck.bin");
  ck.adam_m = {{1.0f, 2.0f}};
  ck.adam_v = {{3.0f, 4.0f}};
  save_checkpoint(ck, p);
  const Checkpoint back = load_checkpoint(p);
  CHECK(back.adam_m[0][1] == 2.0f);
  CHECK_THROWS_AS(decode_checkpoint(std::string("GTCQ....")), FormatError);
}

TEST_CASE("metrics csv layout") {
  CHECK(metrics_csv_header(2) ==
        "iter,teacher_loss,distill_loss,bit_cost,total,teacher_acc,student_acc,"
        "lambda2,bits_l1,theta1_l1,theta2_l1,bits_l2,theta1_l2,theta2_l2\n");
  MetricsRecord r;
  r.iter = 50;
  r.teacher_loss = 0.25;
  r.distill_loss = 0.5;
  r.bit_cost = 64;
  r.total = 1.5;
  r.teacher_acc = 97.5;
  r.student_acc = 96.25;
  r.lambda2 = 0.04;
  r.bits = {4, 3};
  r.theta1 = {0.5f, -0.25f};
  r.theta2 = {1.0f, 0.75f};
  const std::string csv = metrics_to_csv({r}, 2);
  CHECK(csv ==
        "iter,teacher_loss,distill_loss,bit_cost,total,teacher_acc,student_acc,"
        "lambda2,bits_l1,theta1_l1,theta2_l1,bits_l2,theta1_l2,theta2_l2\n"
        "50,0.25,0.5,64,1.5,97.5,96.25,0.04,4,0.5,1,3,-0.25,0.75\n");

  const std::string p = temp_path("metrics.csv");
  write_metrics_csv({r}, 2, p);
  CHECK(read_file(p) == csv);
}

TEST_CASE("numbers render in shortest round-trippable form") {
  CHECK(format_number(0.0) == "0");
  CHECK(format_number(2.0) == "2");
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(-3.5) == "-3.5");
  oracle::Mix mx(704);
  for (int i = 0; i < 500; ++i) {
    const double v = (mx.uniform() - 0.5) * std::pow(10.0, mx.below(13) - 6);
    const std::string s = format_number(v);
    CHECK(std::strtod(s.c_str(), nullptr) == v);
  }
}

TEST_CASE("atomic writes land complete and directories nest") {
  const std::string d = temp_path("nested/deeper");
  ensure_dir(d);
  CHECK(std::filesystem::is_directory(d));
  const std::string p = d + "/blob.bin";
  std::string payload = "with\0nul and\nnewline";
  payload = std::string("with\0nul and\nnewline", 20);
  write_file_atomic(p, payload);
  CHECK(read_file(p) == payload);
  // overwrite in place
  write_file_atomic(p, "second");
  CHECK(read_file(p) == "second");
  CHECK_THROWS_AS(read_file(d + "/absent"), IoError);
}

TEST_CASE("summary json carries metrics, layers, and the config echo") {
  RunSummary s;
  s.mode = "gtc";
  s.iters = 100;
  s.teacher_metric = 97.0;
  s.student_metric = 96.5;
  s.layer_names = {"conv1", "fc1"};
  s.bits = {3, 2};
  s.theta1 = {0.1f, 0.2f};
  s.theta2 = {0.9f, 1.1f};
  s.avg_bits = 2.5;
  s.avg_bits_weighted = 2.25;
  s.compression_payload = 10.0;
  s.compression_file = 9.5;
  s.config_text = "a=1\nb=2\n";
  s.config_hash = "0123456789abcdef";
  const std::string j = summary_to_json(s);
  CHECK(j.find("\"mode\": \"gtc\"") != std::string::npos);
  CHECK(j.find("\"teacher_metric\": 97.0") != std::string::npos);
  CHECK(j.find("\"conv1\"") != std::string::npos);
  CHECK(j.find("0123456789abcdef") != std::string::npos);
  CHECK(j.back() == '\n');
}
