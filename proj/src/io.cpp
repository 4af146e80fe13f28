#include "gtc/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace gtc {

static_assert(std::endian::native == std::endian::little,
              "serialization memcpy paths assume a little-endian host");

namespace {

constexpr uint16_t kGtcqVersion = 1;
constexpr uint16_t kCheckpointVersion = 1;

// --- byte-stream helpers (little-endian) -----------------------------------

void put_u8(std::string* o, uint8_t v) { o->push_back(char(v)); }
void put_u16(std::string* o, uint16_t v) { o->append(reinterpret_cast<const char*>(&v), 2); }
void put_u32(std::string* o, uint32_t v) { o->append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string* o, uint64_t v) { o->append(reinterpret_cast<const char*>(&v), 8); }
void put_i16(std::string* o, int16_t v) { o->append(reinterpret_cast<const char*>(&v), 2); }
void put_f32(std::string* o, float v) { o->append(reinterpret_cast<const char*>(&v), 4); }

struct ByteReader {
  const std::string& b;
  size_t off = 0;

  void need(size_t n, const char* what) {
    GTC_CHECK(off + n <= b.size(), FormatError,
              std::string("truncated while reading ") + what);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return uint8_t(b[off++]);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v;
    std::memcpy(&v, b.data() + off, 2);
    off += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v;
    std::memcpy(&v, b.data() + off, 4);
    off += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v;
    std::memcpy(&v, b.data() + off, 8);
    off += 8;
    return v;
  }
  int16_t i16(const char* what) {
    need(2, what);
    int16_t v;
    std::memcpy(&v, b.data() + off, 2);
    off += 2;
    return v;
  }
  float f32(const char* what) {
    need(4, what);
    float v;
    std::memcpy(&v, b.data() + off, 4);
    off += 4;
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s = b.substr(off, n);
    off += n;
    return s;
  }
  void done(const char* what) {
    GTC_CHECK(off == b.size(), FormatError,
              std::string("trailing bytes after ") + what);
  }
};

// --- MSB-first bit packing --------------------------------------------------

struct BitWriter {
  std::string bytes;
  uint8_t cur = 0;
  int nbits = 0;

  void push(uint32_t value, int width) {
    for (int i = width - 1; i >= 0; --i) {
      cur = uint8_t((cur << 1) | ((value >> i) & 1u));
      if (++nbits == 8) {
        bytes.push_back(char(cur));
        cur = 0;
        nbits = 0;
      }
    }
  }
  void pad_to_byte() {
    if (nbits > 0) {
      cur = uint8_t(cur << (8 - nbits));
      bytes.push_back(char(cur));
      cur = 0;
      nbits = 0;
    }
  }
};

struct BitReader {
  const std::string& bytes;
  size_t bit = 0;

  uint32_t read(int width) {
    uint32_t v = 0;
    for (int i = 0; i < width; ++i) {
      const size_t byte = bit >> 3;
      v = (v << 1) | uint32_t((uint8_t(bytes[byte]) >> (7 - (bit & 7))) & 1u);
      ++bit;
    }
    return v;
  }
};

int64_t dims_product(const std::vector<int>& dims) {
  int64_t n = 1;
  for (int d : dims) n *= d;
  return n;
}

void check_layer_consistent(const QuantizedLayer& q, const std::string& name) {
  const int64_t n = dims_product(q.shape);
  GTC_CHECK(int64_t(q.sign.size()) == n && int64_t(q.exponent.size()) == n,
            FormatError, "entry '" + name + "' has mismatched array sizes");
  bool seen = false;
  int32_t lo = 0, hi = 0;
  for (size_t i = 0; i < q.sign.size(); ++i) {
    if (q.sign[i] == 0) continue;
    if (!seen) {
      lo = hi = q.exponent[i];
      seen = true;
    } else {
      lo = std::min(lo, q.exponent[i]);
      hi = std::max(hi, q.exponent[i]);
    }
  }
  GTC_CHECK(q.all_zero == !seen, FormatError,
            "entry '" + name + "' has an inconsistent all-zero flag");
  if (seen) {
    GTC_CHECK(q.min_exp == lo && q.max_exp == hi, FormatError,
              "entry '" + name + "' has stale range stats");
    GTC_CHECK(q.bits == 1 + ceil_log2(uint64_t(int64_t(hi) - lo + 1)), FormatError,
              "entry '" + name + "' has a stale bit width");
  } else {
    GTC_CHECK(q.bits == 1 && q.min_exp == 0 && q.max_exp == 0, FormatError,
              "entry '" + name + "' has a stale all-zero encoding");
  }
}

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  GTC_CHECK(in.good(), IoError, "cannot open '" + path + "'");
  std::string out;
  in.seekg(0, std::ios::end);
  out.resize(size_t(in.tellg()));
  in.seekg(0);
  in.read(out.data(), std::streamsize(out.size()));
  GTC_CHECK(in.good() || out.empty(), IoError, "failed reading '" + path + "'");
  return out;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    GTC_CHECK(out.good(), IoError, "cannot create '" + tmp + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.flush();
    GTC_CHECK(out.good(), IoError, "failed writing '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  GTC_CHECK(!ec, IoError, "failed renaming '" + tmp + "' to '" + path + "'");
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  GTC_CHECK(!ec, IoError, "cannot create directory '" + path + "'");
}

int code_width(const QuantizedLayer& q) {
  if (q.all_zero) return 1;
  return ceil_log2(uint64_t(int64_t(q.max_exp) - int64_t(q.min_exp) + 2));
}

std::string encode_gtcq(const std::vector<GtcqEntry>& entries) {
  GTC_CHECK(entries.size() <= 0xFFFF, FormatError, "too many entries for the format");
  std::string out;
  out += "GTCQ";
  put_u16(&out, kGtcqVersion);
  put_u16(&out, uint16_t(entries.size()));
  for (const GtcqEntry& e : entries) {
    const QuantizedLayer& q = e.layer;
    GTC_CHECK(!e.name.empty() && e.name.size() <= 255, FormatError,
              "entry name must be 1..255 bytes");
    check_layer_consistent(q, e.name);
    GTC_CHECK(!q.shape.empty() && q.shape.size() <= 8, FormatError,
              "entry '" + e.name + "' rank must be 1..8");
    GTC_CHECK(q.min_exp >= INT16_MIN && q.min_exp <= INT16_MAX &&
                  q.max_exp >= INT16_MIN && q.max_exp <= INT16_MAX,
              FormatError, "entry '" + e.name + "' exponent range exceeds 16 bits");
    put_u8(&out, uint8_t(e.name.size()));
    out += e.name;
    put_u8(&out, uint8_t(q.shape.size()));
    for (int d : q.shape) put_u32(&out, uint32_t(d));
    put_f32(&out, e.theta1);
    put_f32(&out, e.theta2);
    const int32_t m = q.all_zero ? 0 : q.min_exp;
    put_i16(&out, int16_t(m));
    put_u8(&out, uint8_t(q.bits));
    const int c = code_width(q);
    put_u8(&out, uint8_t(c));
    BitWriter bw;
    for (size_t i = 0; i < q.sign.size(); ++i) {
      if (q.sign[i] == 0) {
        bw.push(0, 1);      // sign
        bw.push(0, c);      // zero code
      } else {
        bw.push(q.sign[i] < 0 ? 1u : 0u, 1);
        bw.push(uint32_t(q.exponent[i] - m + 1), c);
      }
    }
    bw.pad_to_byte();
    out += bw.bytes;
  }
  return out;
}

std::vector<GtcqEntry> decode_gtcq(const std::string& bytes) {
  ByteReader r{bytes};
  GTC_CHECK(r.str(4, "magic") == "GTCQ", FormatError, "bad magic");
  GTC_CHECK(r.u16("version") == kGtcqVersion, FormatError, "unsupported version");
  const uint16_t count = r.u16("entry count");
  std::vector<GtcqEntry> entries;
  entries.reserve(count);
  for (uint16_t li = 0; li < count; ++li) {
    GtcqEntry e;
    const uint8_t name_len = r.u8("name length");
    GTC_CHECK(name_len > 0, FormatError, "empty entry name");
    e.name = r.str(name_len, "name");
    const uint8_t rank = r.u8("rank");
    GTC_CHECK(rank >= 1 && rank <= 8, FormatError, "rank out of range");
    int64_t n = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      const uint32_t dim = r.u32("dimension");
      GTC_CHECK(dim >= 1 && dim <= (1u << 28), FormatError, "dimension out of range");
      n *= dim;
      GTC_CHECK(n <= (int64_t(1) << 33), FormatError, "entry too large");
      e.layer.shape.push_back(int(dim));
    }
    e.theta1 = r.f32("theta1");
    e.theta2 = r.f32("theta2");
    GTC_CHECK(std::isfinite(e.theta1) && std::isfinite(e.theta2), FormatError,
              "non-finite quantizer parameters");
    const int16_t m = r.i16("base exponent");
    const uint8_t bits_reported = r.u8("bit width");
    const uint8_t c = r.u8("code width");
    GTC_CHECK(bits_reported >= 1 && c >= 1 && c <= 31, FormatError,
              "bad width fields");
    const uint64_t payload_bits = uint64_t(n) * uint64_t(1 + c);
    const size_t payload_bytes = size_t((payload_bits + 7) / 8);
    const std::string payload = r.str(payload_bytes, "payload");
    BitReader br{payload};
    e.layer.sign.resize(size_t(n));
    e.layer.exponent.resize(size_t(n));
    uint32_t vmax = 0;
    bool vmin_one = false;
    for (int64_t i = 0; i < n; ++i) {
      const uint32_t s = br.read(1);
      const uint32_t v = br.read(c);
      if (v == 0) {
        GTC_CHECK(s == 0, FormatError, "zero code with a set sign bit");
        e.layer.sign[size_t(i)] = 0;
        e.layer.exponent[size_t(i)] = 0;
      } else {
        e.layer.sign[size_t(i)] = s ? -1 : 1;
        e.layer.exponent[size_t(i)] = int32_t(m) + int32_t(v) - 1;
        vmax = std::max(vmax, v);
        if (v == 1) vmin_one = true;
      }
    }
    // padding bits of the last byte must be zero
    const uint64_t pad = uint64_t(payload_bytes) * 8 - payload_bits;
    for (uint64_t i = 0; i < pad; ++i)
      GTC_CHECK(br.read(1) == 0, FormatError, "nonzero padding bits");
    if (vmax == 0) {
      GTC_CHECK(bits_reported == 1 && c == 1 && m == 0, FormatError,
                "inconsistent all-zero entry header");
      e.layer.all_zero = true;
      e.layer.min_exp = 0;
      e.layer.max_exp = 0;
      e.layer.bits = 1;
    } else {
      GTC_CHECK(vmin_one, FormatError, "code range does not start at the base");
      e.layer.all_zero = false;
      e.layer.min_exp = m;
      e.layer.max_exp = int32_t(m) + int32_t(vmax) - 1;
      e.layer.bits = 1 + ceil_log2(uint64_t(vmax));
      GTC_CHECK(e.layer.bits == int(bits_reported), FormatError,
                "stored bit width disagrees with the codes");
      GTC_CHECK(int(c) == ceil_log2(uint64_t(vmax) + 1), FormatError,
                "stored code width disagrees with the codes");
    }
    entries.push_back(std::move(e));
  }
  r.done("entries");
  return entries;
}

void save_gtcq(const std::vector<GtcqEntry>& entries, const std::string& path) {
  write_file_atomic(path, encode_gtcq(entries));
}

std::vector<GtcqEntry> load_gtcq(const std::string& path) {
  return decode_gtcq(read_file(path));
}

int64_t gtcq_payload_bytes(const std::vector<GtcqEntry>& entries) {
  int64_t total = 0;
  for (const GtcqEntry& e : entries) {
    const int64_t n = dims_product(e.layer.shape);
    total += (n * (1 + code_width(e.layer)) + 7) / 8;
  }
  return total;
}

CompressionReport compression_report(const std::vector<GtcqEntry>& entries) {
  CompressionReport rep;
  for (const GtcqEntry& e : entries) rep.param_count += dims_product(e.layer.shape);
  rep.payload_bytes = gtcq_payload_bytes(entries);
  rep.file_bytes = int64_t(encode_gtcq(entries).size());
  if (rep.payload_bytes > 0)
    rep.payload_ratio = double(32 * rep.param_count) / double(8 * rep.payload_bytes);
  if (rep.file_bytes > 0)
    rep.file_ratio = double(32 * rep.param_count) / double(8 * rep.file_bytes);
  return rep;
}

// --- checkpoint -------------------------------------------------------------

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out;
  out += "GTCC";
  put_u16(&out, kCheckpointVersion);
  put_u32(&out, uint32_t(ck.config_text.size()));
  out += ck.config_text;
  put_u64(&out, ck.iteration);
  put_u32(&out, uint32_t(ck.rng_state.size()));
  out += ck.rng_state;
  put_u32(&out, uint32_t(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    GTC_CHECK(!name.empty() && name.size() <= 0xFFFF, FormatError,
              "bad tensor name in checkpoint");
    put_u16(&out, uint16_t(name.size()));
    out += name;
    put_u8(&out, uint8_t(t.shape.size()));
    for (int d : t.shape) put_u32(&out, uint32_t(d));
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * 4);
  }
  const bool has_adam = !ck.adam_m.empty();
  put_u8(&out, has_adam ? 1 : 0);
  if (has_adam) {
    GTC_CHECK(ck.adam_m.size() == ck.tensors.size() &&
                  ck.adam_v.size() == ck.tensors.size(),
              FormatError, "optimizer buffers misaligned with tensors");
    put_u64(&out, ck.adam_step);
    for (size_t i = 0; i < ck.tensors.size(); ++i) {
      GTC_CHECK(ck.adam_m[i].size() == ck.tensors[i].second.values.size() &&
                    ck.adam_v[i].size() == ck.tensors[i].second.values.size(),
                FormatError, "optimizer buffer shape mismatch");
      out.append(reinterpret_cast<const char*>(ck.adam_m[i].data()),
                 ck.adam_m[i].size() * 4);
      out.append(reinterpret_cast<const char*>(ck.adam_v[i].data()),
                 ck.adam_v[i].size() * 4);
    }
  }
  put_u64(&out, ck.data_epoch);
  put_u64(&out, ck.data_pos);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  ByteReader r{bytes};
  GTC_CHECK(r.str(4, "magic") == "GTCC", FormatError, "bad checkpoint magic");
  GTC_CHECK(r.u16("version") == kCheckpointVersion, FormatError,
            "unsupported checkpoint version");
  Checkpoint ck;
  ck.config_text = r.str(r.u32("config length"), "config text");
  ck.iteration = r.u64("iteration");
  ck.rng_state = r.str(r.u32("rng length"), "rng state");
  const uint32_t tcount = r.u32("tensor count");
  GTC_CHECK(tcount <= 1u << 20, FormatError, "tensor count out of range");
  for (uint32_t i = 0; i < tcount; ++i) {
    const std::string name = r.str(r.u16("tensor name length"), "tensor name");
    GTC_CHECK(!name.empty(), FormatError, "empty tensor name");
    const uint8_t rank = r.u8("tensor rank");
    GTC_CHECK(rank >= 1 && rank <= 8, FormatError, "tensor rank out of range");
    Tensor t;
    int64_t n = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      const uint32_t dim = r.u32("tensor dimension");
      GTC_CHECK(dim >= 1 && dim <= (1u << 28), FormatError,
                "tensor dimension out of range");
      n *= dim;
      GTC_CHECK(n <= (int64_t(1) << 33), FormatError, "tensor too large");
      t.shape.push_back(int(dim));
    }
    const std::string raw = r.str(size_t(n) * 4, "tensor values");
    t.values.resize(size_t(n));
    std::memcpy(t.values.data(), raw.data(), raw.size());
    ck.tensors.emplace_back(name, std::move(t));
  }
  if (r.u8("optimizer flag") != 0) {
    ck.adam_step = r.u64("optimizer step");
    for (uint32_t i = 0; i < tcount; ++i) {
      const size_t n = ck.tensors[i].second.values.size();
      std::string raw = r.str(n * 4, "first-moment buffer");
      ck.adam_m.emplace_back(n);
      std::memcpy(ck.adam_m.back().data(), raw.data(), raw.size());
      raw = r.str(n * 4, "second-moment buffer");
      ck.adam_v.emplace_back(n);
      std::memcpy(ck.adam_v.back().data(), raw.data(), raw.size());
    }
  }
  ck.data_epoch = r.u64("data epoch");
  ck.data_pos = r.u64("data position");
  r.done("checkpoint");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path));
}

// --- metrics CSV ------------------------------------------------------------

std::string format_number(double v) {
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::string metrics_csv_header(int layer_count) {
  std::string h = "iter,teacher_loss,distill_loss,bit_cost,total,teacher_acc,student_acc,lambda2";
  for (int i = 1; i <= layer_count; ++i) {
    const std::string li = std::to_string(i);
    h += ",bits_l" + li + ",theta1_l" + li + ",theta2_l" + li;
  }
  h += "\n";
  return h;
}

std::string metrics_to_csv(const std::vector<MetricsRecord>& records, int layer_count) {
  std::string out = metrics_csv_header(layer_count);
  for (const MetricsRecord& m : records) {
    GTC_CHECK(int(m.bits.size()) == layer_count && int(m.theta1.size()) == layer_count &&
                  int(m.theta2.size()) == layer_count,
              ShapeError, "metrics record layer count mismatch");
    out += std::to_string(m.iter);
    out += ',' + format_number(m.teacher_loss);
    out += ',' + format_number(m.distill_loss);
    out += ',' + format_number(m.bit_cost);
    out += ',' + format_number(m.total);
    out += ',' + format_number(m.teacher_acc);
    out += ',' + format_number(m.student_acc);
    out += ',' + format_number(m.lambda2);
    for (int i = 0; i < layer_count; ++i) {
      out += ',' + std::to_string(m.bits[size_t(i)]);
      out += ',' + format_number(double(m.theta1[size_t(i)]));
      out += ',' + format_number(double(m.theta2[size_t(i)]));
    }
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::vector<MetricsRecord>& records, int layer_count,
                       const std::string& path) {
  write_file_atomic(path, metrics_to_csv(records, layer_count));
}

// --- summary JSON -----------------------------------------------------------

std::string summary_to_json(const RunSummary& s) {
  nlohmann::ordered_json j;
  j["mode"] = s.mode;
  j["iters"] = s.iters;
  j["teacher_metric"] = s.teacher_metric;
  j["student_metric"] = s.student_metric;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (size_t i = 0; i < s.layer_names.size(); ++i) {
    nlohmann::ordered_json l;
    l["name"] = s.layer_names[i];
    l["bits"] = i < s.bits.size() ? s.bits[i] : 0;
    l["theta1"] = i < s.theta1.size() ? double(s.theta1[i]) : 0.0;
    l["theta2"] = i < s.theta2.size() ? double(s.theta2[i]) : 0.0;
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  j["avg_bits"] = s.avg_bits;
  j["avg_bits_weighted"] = s.avg_bits_weighted;
  j["compression"] = {{"payload_ratio", s.compression_payload},
                      {"file_ratio", s.compression_file}};
  nlohmann::ordered_json cfg;
  cfg["hash"] = s.config_hash;
  cfg["resolved"] = s.config_text;
  j["config"] = std::move(cfg);
  return j.dump(2) + "\n";
}

void write_summary_json(const RunSummary& s, const std::string& path) {
  write_file_atomic(path, summary_to_json(s));
}

}  // namespace gtc
