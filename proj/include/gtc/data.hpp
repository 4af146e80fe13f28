#pragma once

// Dataset ingestion: IDX image/label files (big-endian), CIFAR-10 binary
// records, a deterministic synthetic-blob generator, a bundled 8x8 digits
// asset that expands into MNIST-shaped IDX files, and seeded batching.

#include <cstdint>
#include <string>
#include <vector>

#include "gtc/rng.hpp"
#include "gtc/tensor.hpp"

namespace gtc {

struct DatasetSplit {
  Tensor images;            // [N, C, H, W], values in [0, 1]
  std::vector<int> labels;  // N class indices
  std::string name;

  int64_t count() const { return images.rank() > 0 ? images.dim(0) : 0; }
};

// IDX wire format: u32 big-endian magic (0x00000803 images / 0x00000801
// labels), then one u32 big-endian size per dimension, then raw bytes.
Tensor parse_idx_images(const std::string& bytes);          // -> [N,1,H,W] / 255
std::vector<int> parse_idx_labels(const std::string& bytes);
std::string write_idx_images(const Tensor& images);
std::string write_idx_labels(const std::vector<int>& labels);

// CIFAR-10 binary: 3073-byte records (label, 1024 R, 1024 G, 1024 B).
DatasetSplit parse_cifar10_bin(const std::string& bytes);

// Gaussian clusters centered on distinct unit-simplex vertices, clamped to
// [0,1]. dim that is a perfect square s*s yields [N,1,s,s]; otherwise
// [N,1,1,dim]. Class-balanced and deterministic for a fixed seed.
DatasetSplit synth_blobs(int classes, int n_per_class, int dim, uint64_t seed,
                         float sigma = 0.1f);

// Expand the bundled 8x8 digits asset ("DIG8" file) into MNIST-shaped IDX
// files (28x28, standard MNIST file names) under out_dir. The upscaled digits
// get seeded +-2 px shifts and additive noise; source images are partitioned
// so train and test never share a source digit.
void expand_digits_to_idx(const std::string& asset_path, const std::string& out_dir,
                          int train_count, int test_count, uint64_t seed);

// Load the first `count` images of an MNIST-layout directory
// (train-images-idx3-ubyte etc.). count <= 0 loads everything.
DatasetSplit load_mnist_dir(const std::string& dir, bool train, int64_t count);

// Load train or test CIFAR-10 batches from a directory (data_batch_1..5.bin /
// test_batch.bin), keeping the first `count` records.
DatasetSplit load_cifar_dir(const std::string& dir, bool train, int64_t count);

// Seeded mini-batch stream: a fresh permutation per epoch (Fisher-Yates on a
// per-epoch-derived seed), full coverage, last short batch kept.
class Batcher {
 public:
  Batcher(const DatasetSplit& split, int batch_size, uint64_t seed, bool shuffle);

  void next(Tensor* x, std::vector<int>* y);
  int64_t epoch() const { return epoch_; }
  int64_t pos() const { return pos_; }
  // Restore a checkpointed position: re-derives that epoch's permutation.
  void set_state(int64_t epoch, int64_t pos);

 private:
  void reshuffle();

  const DatasetSplit& split_;
  int batch_size_;
  uint64_t seed_;
  bool shuffle_;
  std::vector<int64_t> order_;
  int64_t pos_ = 0;
  int64_t epoch_ = 0;
};

// Copy rows [begin, begin+count) of a split's images into a batch tensor.
Tensor slice_images(const Tensor& images, int64_t begin, int64_t count);

}  // namespace gtc
