#include "gtc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gtc/common.hpp"
#include "gtc/io.hpp"

namespace gtc {

namespace {

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;
constexpr int64_t kCifarRecord = 3073;

uint32_t read_be32(const std::string& b, size_t off) {
  return (uint32_t(uint8_t(b[off])) << 24) | (uint32_t(uint8_t(b[off + 1])) << 16) |
         (uint32_t(uint8_t(b[off + 2])) << 8) | uint32_t(uint8_t(b[off + 3]));
}

void append_be32(std::string* out, uint32_t v) {
  out->push_back(char(uint8_t(v >> 24)));
  out->push_back(char(uint8_t(v >> 16)));
  out->push_back(char(uint8_t(v >> 8)));
  out->push_back(char(uint8_t(v)));
}

uint8_t to_byte(float v) {
  long r = std::lround(double(v) * 255.0);
  if (r < 0) r = 0;
  if (r > 255) r = 255;
  return uint8_t(r);
}

}  // namespace

Tensor parse_idx_images(const std::string& bytes) {
  GTC_CHECK(bytes.size() >= 16, FormatError, "image file too short for its header");
  GTC_CHECK(read_be32(bytes, 0) == kIdxImagesMagic, FormatError,
            "bad image file magic");
  const uint32_t n = read_be32(bytes, 4);
  const uint32_t h = read_be32(bytes, 8);
  const uint32_t w = read_be32(bytes, 12);
  GTC_CHECK(n <= (1u << 24) && h <= 4096 && w <= 4096, FormatError,
            "image file dimensions out of range");
  const uint64_t body = uint64_t(n) * h * w;
  GTC_CHECK(bytes.size() == 16 + body, FormatError,
            "image file length does not match its header");
  GTC_CHECK(n > 0 && h > 0 && w > 0, FormatError, "image file has an empty dimension");
  Tensor t = Tensor::zeros({int(n), 1, int(h), int(w)});
  for (uint64_t i = 0; i < body; ++i)
    t.values[size_t(i)] = float(uint8_t(bytes[16 + i])) / 255.0f;
  return t;
}

std::vector<int> parse_idx_labels(const std::string& bytes) {
  GTC_CHECK(bytes.size() >= 8, FormatError, "label file too short for its header");
  GTC_CHECK(read_be32(bytes, 0) == kIdxLabelsMagic, FormatError,
            "bad label file magic");
  const uint32_t n = read_be32(bytes, 4);
  GTC_CHECK(bytes.size() == 8 + uint64_t(n), FormatError,
            "label file length does not match its header");
  std::vector<int> labels(n);
  for (uint32_t i = 0; i < n; ++i) labels[i] = int(uint8_t(bytes[8 + i]));
  return labels;
}

std::string write_idx_images(const Tensor& images) {
  GTC_CHECK(images.rank() == 4 && images.dim(1) == 1, ShapeError,
            "image writer wants [n,1,h,w]");
  std::string out;
  out.reserve(16 + size_t(images.numel()));
  append_be32(&out, kIdxImagesMagic);
  append_be32(&out, uint32_t(images.dim(0)));
  append_be32(&out, uint32_t(images.dim(2)));
  append_be32(&out, uint32_t(images.dim(3)));
  for (float v : images.values) out.push_back(char(to_byte(v)));
  return out;
}

std::string write_idx_labels(const std::vector<int>& labels) {
  std::string out;
  out.reserve(8 + labels.size());
  append_be32(&out, kIdxLabelsMagic);
  append_be32(&out, uint32_t(labels.size()));
  for (int l : labels) {
    GTC_CHECK(l >= 0 && l <= 255, FormatError, "label out of byte range");
    out.push_back(char(uint8_t(l)));
  }
  return out;
}

DatasetSplit parse_cifar10_bin(const std::string& bytes) {
  GTC_CHECK(bytes.size() % kCifarRecord == 0, FormatError,
            "cifar buffer length is not a multiple of 3073");
  const int64_t n = int64_t(bytes.size()) / kCifarRecord;
  DatasetSplit split;
  split.name = "cifar10";
  if (n == 0) {
    split.images.shape = {0, 3, 32, 32};
    return split;
  }
  split.images = Tensor::zeros({int(n), 3, 32, 32});
  split.labels.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    const size_t rec = size_t(i) * kCifarRecord;
    const int label = int(uint8_t(bytes[rec]));
    GTC_CHECK(label <= 9, FormatError, "cifar label byte out of range");
    split.labels[size_t(i)] = label;
    for (int64_t p = 0; p < 3072; ++p)
      split.images.values[size_t(i) * 3072 + size_t(p)] =
          float(uint8_t(bytes[rec + 1 + size_t(p)])) / 255.0f;
  }
  return split;
}

DatasetSplit synth_blobs(int classes, int n_per_class, int dim, uint64_t seed,
                         float sigma) {
  GTC_CHECK(classes >= 2, ConfigError, "synthetic blobs want at least 2 classes");
  GTC_CHECK(classes <= dim, ConfigError,
            "synthetic blobs want dim >= classes for separated centers");
  GTC_CHECK(n_per_class >= 1 && dim >= 1, ConfigError, "bad blob sizes");
  const int side = int(std::lround(std::sqrt(double(dim))));
  const bool square = side * side == dim;
  const int n = classes * n_per_class;
  DatasetSplit split;
  split.name = "synth";
  split.images = square ? Tensor::zeros({n, 1, side, side})
                        : Tensor::zeros({n, 1, 1, dim});
  split.labels.resize(size_t(n));
  SeededRng rng(seed);
  size_t off = 0;
  for (int c = 0; c < classes; ++c)
    for (int j = 0; j < n_per_class; ++j) {
      split.labels[size_t(c) * n_per_class + j] = c;
      for (int d = 0; d < dim; ++d) {
        float v = (d == c ? 1.0f : 0.0f) + sigma * float(rng.normal());
        if (v < 0.0f) v = 0.0f;
        if (v > 1.0f) v = 1.0f;
        split.images.values[off++] = v;
      }
    }
  return split;
}

namespace {

constexpr int kDigitSide = 8;
constexpr int kCanvas = 28;
constexpr int kUpscaled = 24;
constexpr int kTestPool = 300;  // source digits reserved for the test split

struct DigitAsset {
  std::vector<uint8_t> pixels;  // count * 64, values 0..16
  std::vector<uint8_t> labels;
  int count = 0;
};

DigitAsset read_digit_asset(const std::string& path) {
  const std::string bytes = read_file(path);
  GTC_CHECK(bytes.size() >= 8 && bytes.compare(0, 4, "DIG8") == 0, FormatError,
            "bad digit asset header in " + path);
  uint32_t count = 0;
  std::memcpy(&count, bytes.data() + 4, 4);  // little-endian host assumed
  const size_t rec = size_t(kDigitSide) * kDigitSide + 1;
  GTC_CHECK(bytes.size() == 8 + size_t(count) * rec, FormatError,
            "digit asset length does not match its header");
  GTC_CHECK(count > kTestPool + 100, FormatError, "digit asset too small");
  DigitAsset a;
  a.count = int(count);
  a.pixels.resize(size_t(count) * kDigitSide * kDigitSide);
  a.labels.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    const size_t src = 8 + size_t(i) * rec;
    for (int p = 0; p < kDigitSide * kDigitSide; ++p)
      a.pixels[size_t(i) * 64 + size_t(p)] = uint8_t(bytes[src + size_t(p)]);
    a.labels[i] = uint8_t(bytes[src + 64]);
  }
  return a;
}

// Bilinear 8x8 -> 24x24 placed on a 28x28 canvas at a (dy, dx) offset from
// the centered position, plus optional additive Gaussian noise; output in
// [0,1]. Shifts and noise are train-split augmentation only — evaluation
// images stay centered and clean, matching the size-normalized handwriting
// sets this expansion stands in for.
void render_digit(const uint8_t* src, int dy, int dx, float noise, SeededRng& rng,
                  float* out) {
  float up[kUpscaled * kUpscaled];
  for (int oy = 0; oy < kUpscaled; ++oy) {
    float sy = (float(oy) + 0.5f) * float(kDigitSide) / float(kUpscaled) - 0.5f;
    if (sy < 0.0f) sy = 0.0f;
    if (sy > float(kDigitSide - 1)) sy = float(kDigitSide - 1);
    const int y0 = int(sy);
    const int y1 = std::min(y0 + 1, kDigitSide - 1);
    const float fy = sy - float(y0);
    for (int ox = 0; ox < kUpscaled; ++ox) {
      float sx = (float(ox) + 0.5f) * float(kDigitSide) / float(kUpscaled) - 0.5f;
      if (sx < 0.0f) sx = 0.0f;
      if (sx > float(kDigitSide - 1)) sx = float(kDigitSide - 1);
      const int x0 = int(sx);
      const int x1 = std::min(x0 + 1, kDigitSide - 1);
      const float fx = sx - float(x0);
      const float a = float(src[y0 * kDigitSide + x0]);
      const float b = float(src[y0 * kDigitSide + x1]);
      const float c = float(src[y1 * kDigitSide + x0]);
      const float d = float(src[y1 * kDigitSide + x1]);
      const float v = (a * (1.0f - fx) + b * fx) * (1.0f - fy) +
                      (c * (1.0f - fx) + d * fx) * fy;
      up[oy * kUpscaled + ox] = v / 16.0f;
    }
  }
  for (int i = 0; i < kCanvas * kCanvas; ++i) out[i] = 0.0f;
  const int oy0 = (kCanvas - kUpscaled) / 2 + dy;
  const int ox0 = (kCanvas - kUpscaled) / 2 + dx;
  for (int y = 0; y < kUpscaled; ++y) {
    const int cy = oy0 + y;
    if (cy < 0 || cy >= kCanvas) continue;
    for (int x = 0; x < kUpscaled; ++x) {
      const int cx = ox0 + x;
      if (cx < 0 || cx >= kCanvas) continue;
      out[cy * kCanvas + cx] = up[y * kUpscaled + x];
    }
  }
  if (noise <= 0.0f) return;
  for (int i = 0; i < kCanvas * kCanvas; ++i) {
    float v = out[i] + noise * float(rng.normal());
    if (v < 0.0f) v = 0.0f;
    if (v > 1.0f) v = 1.0f;
    out[i] = v;
  }
}

void render_split(const DigitAsset& asset, int pool_begin, int pool_count, int n,
                  int max_shift, float noise, uint64_t seed, Tensor* images,
                  std::vector<int>* labels) {
  *images = Tensor::zeros({n, 1, kCanvas, kCanvas});
  labels->resize(size_t(n));
  SeededRng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int src = pool_begin + int(rng.below(uint64_t(pool_count)));
    const int dy = int(rng.below(uint64_t(2 * max_shift + 1))) - max_shift;
    const int dx = int(rng.below(uint64_t(2 * max_shift + 1))) - max_shift;
    render_digit(&asset.pixels[size_t(src) * 64], dy, dx, noise, rng,
                 &images->values[size_t(i) * kCanvas * kCanvas]);
    (*labels)[size_t(i)] = int(asset.labels[size_t(src)]);
  }
}

}  // namespace

void expand_digits_to_idx(const std::string& asset_path, const std::string& out_dir,
                          int train_count, int test_count, uint64_t seed) {
  GTC_CHECK(train_count >= 1 && test_count >= 1, ConfigError,
            "expansion wants positive split sizes");
  const DigitAsset asset = read_digit_asset(asset_path);
  ensure_dir(out_dir);
  Tensor images;
  std::vector<int> labels;
  render_split(asset, 0, asset.count - kTestPool, train_count, 2, 0.05f,
               seed * 2, &images, &labels);
  write_file_atomic(out_dir + "/train-images-idx3-ubyte", write_idx_images(images));
  write_file_atomic(out_dir + "/train-labels-idx1-ubyte", write_idx_labels(labels));
  render_split(asset, asset.count - kTestPool, kTestPool, test_count, 0, 0.0f,
               seed * 2 + 1, &images, &labels);
  write_file_atomic(out_dir + "/t10k-images-idx3-ubyte", write_idx_images(images));
  write_file_atomic(out_dir + "/t10k-labels-idx1-ubyte", write_idx_labels(labels));
}

namespace {

DatasetSplit take_front(DatasetSplit split, int64_t count) {
  if (count <= 0 || count >= split.count()) return split;
  split.images = slice_images(split.images, 0, count);
  split.labels.resize(size_t(count));
  return split;
}

}  // namespace

DatasetSplit load_mnist_dir(const std::string& dir, bool train, int64_t count) {
  const std::string stem = train ? "train" : "t10k";
  DatasetSplit split;
  split.name = train ? "mnist-train" : "mnist-test";
  split.images = parse_idx_images(read_file(dir + "/" + stem + "-images-idx3-ubyte"));
  split.labels = parse_idx_labels(read_file(dir + "/" + stem + "-labels-idx1-ubyte"));
  GTC_CHECK(split.count() == int64_t(split.labels.size()), FormatError,
            "image/label count mismatch in " + dir);
  return take_front(std::move(split), count);
}

DatasetSplit load_cifar_dir(const std::string& dir, bool train, int64_t count) {
  std::string bytes;
  if (train) {
    for (int i = 1; i <= 5; ++i)
      bytes += read_file(dir + "/data_batch_" + std::to_string(i) + ".bin");
  } else {
    bytes = read_file(dir + "/test_batch.bin");
  }
  DatasetSplit split = parse_cifar10_bin(bytes);
  split.name = train ? "cifar-train" : "cifar-test";
  return take_front(std::move(split), count);
}

Tensor slice_images(const Tensor& images, int64_t begin, int64_t count) {
  GTC_CHECK(images.rank() >= 1, ShapeError, "slice wants a batched tensor");
  const int64_t n = images.dim(0);
  GTC_CHECK(begin >= 0 && count >= 0 && begin + count <= n, ShapeError,
            "slice range out of bounds");
  std::vector<int> shape = images.shape;
  shape[0] = int(count);
  Tensor out = Tensor::zeros(shape);
  const int64_t stride = images.numel() / n;
  std::copy(images.values.begin() + size_t(begin * stride),
            images.values.begin() + size_t((begin + count) * stride),
            out.values.begin());
  return out;
}

Batcher::Batcher(const DatasetSplit& split, int batch_size, uint64_t seed, bool shuffle)
    : split_(split), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  GTC_CHECK(batch_size >= 1, ConfigError, "batch size must be >= 1");
  GTC_CHECK(split.count() >= 1, ConfigError, "empty dataset split");
  order_.resize(size_t(split.count()));
  reshuffle();
}

void Batcher::reshuffle() {
  const int64_t n = int64_t(order_.size());
  for (int64_t i = 0; i < n; ++i) order_[size_t(i)] = i;
  if (!shuffle_) return;
  // Per-epoch derived seed keeps any epoch's order reconstructible on resume.
  SeededRng rng(seed_ + 0x9E3779B97F4A7C15ull * uint64_t(epoch_));
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = int64_t(rng.below(uint64_t(i) + 1));
    std::swap(order_[size_t(i)], order_[size_t(j)]);
  }
}

void Batcher::set_state(int64_t epoch, int64_t pos) {
  GTC_CHECK(epoch >= 0 && pos >= 0 && pos < split_.count(), ConfigError,
            "bad batcher state");
  epoch_ = epoch;
  reshuffle();
  pos_ = pos;
}

void Batcher::next(Tensor* x, std::vector<int>* y) {
  const int64_t n = split_.count();
  const int64_t take = std::min<int64_t>(batch_size_, n - pos_);
  std::vector<int> shape = split_.images.shape;
  shape[0] = int(take);
  *x = Tensor::zeros(shape);
  y->resize(size_t(take));
  const int64_t stride = split_.images.numel() / n;
  for (int64_t i = 0; i < take; ++i) {
    const int64_t src = order_[size_t(pos_ + i)];
    std::copy(split_.images.values.begin() + size_t(src * stride),
              split_.images.values.begin() + size_t((src + 1) * stride),
              x->values.begin() + size_t(i * stride));
    (*y)[size_t(i)] = split_.labels[size_t(src)];
  }
  pos_ += take;
  if (pos_ >= n) {
    pos_ = 0;
    ++epoch_;
    reshuffle();
  }
}

}  // namespace gtc
