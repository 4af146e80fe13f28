#include "gtc/rng.hpp"

#include <cmath>
#include <sstream>

#include "gtc/common.hpp"

namespace gtc {

double SeededRng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // u1 in (0,1] so the log is finite
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

double SeededRng::truncated_normal(double stddev) {
  double z = normal();
  while (std::fabs(z) > 2.0) z = normal();
  return z * stddev;
}

std::string SeededRng::save_state() const {
  std::ostringstream os;
  os << eng_ << ' ' << (have_spare_ ? 1 : 0) << ' ';
  os.precision(17);
  os << spare_ << ' ' << seed_;
  return os.str();
}

void SeededRng::load_state(const std::string& s) {
  std::istringstream is(s);
  int spare_flag = 0;
  is >> eng_ >> spare_flag >> spare_ >> seed_;
  GTC_CHECK(!is.fail(), FormatError, "bad rng state string");
  have_spare_ = spare_flag != 0;
}

}  // namespace gtc
