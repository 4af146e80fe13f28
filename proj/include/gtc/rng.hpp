#pragma once

#include <cstdint>
#include <string>
#include <random>

namespace gtc {

// Seeded generator with hand-rolled transforms.  mt19937_64 output is pinned
// by the standard, but the std distributions are not, so uniform/normal are
// implemented here to keep runs bit-reproducible.
class SeededRng {
 public:
  explicit SeededRng(uint64_t seed) : seed_(seed), eng_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  int64_t below(int64_t n) { return int64_t(eng_() % uint64_t(n)); }

  // standard normal via Box-Muller; pairs are cached
  double normal();

  // normal truncated to +-2 sigma, scaled by std
  double truncated_normal(double stddev);

  // engine + cache snapshot for checkpoints
  std::string save_state() const;
  void load_state(const std::string& s);

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gtc
