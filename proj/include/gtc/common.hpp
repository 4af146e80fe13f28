#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace gtc {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };    // operand shape mismatch
struct NumericError : Error { using Error::Error; };  // non-finite values, divergence
struct FormatError : Error { using Error::Error; };   // file parsing / serialization
struct ConfigError : Error { using Error::Error; };   // bad config keys or values
struct IoError : Error { using Error::Error; };       // filesystem failures

// smallest r >= 0 with 2^r >= x, for x >= 1
inline int ceil_log2(uint64_t x) {
  int r = 0;
  uint64_t v = 1;
  while (v < x) {
    v <<= 1;
    ++r;
  }
  return r;
}

}  // namespace gtc

#define GTC_CHECK(cond, ExcType, msg)        \
  do {                                       \
    if (!(cond)) throw ExcType(msg);         \
  } while (0)
