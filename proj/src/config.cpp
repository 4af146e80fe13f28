#include "gtc/config.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace gtc {

namespace {

struct KeyDef {
  const char* key;
  const char* def;
};

// Every recognized key with its default. eps_zero default is 2^-24.
const KeyDef kKeys[] = {
    {"model", "lenet"},            // lenet | vgg16 | vae
    {"model_scale", "1.0"},
    {"dataset", "mnist"},          // mnist | cifar10 | synth
    {"mnist_dir", ""},
    {"cifar_dir", ""},
    {"synth_classes", "10"},
    {"synth_per_class", "100"},
    {"synth_dim", "784"},
    {"train_count", "10000"},
    {"test_count", "2000"},
    {"mode", "gtc"},               // gtc | ste | ste_bit | teacher_only
    {"optimizer", "adam"},         // adam | sgd
    {"lr", "0.0001"},
    {"lambda1", "0.8"},
    {"lambda2", "0.04"},
    {"anneal_every", "0"},         // 0 disables annealing
    {"anneal_factor", "0.1"},
    {"batch_size", "64"},
    {"iters", "5000"},
    {"seed", "1"},
    {"eps_zero", "5.9604644775390625e-08"},
    {"theta1_init", "0.0"},
    {"theta2_init", "1.0"},
    {"stochastic_round", "0"},     // deterministic rounding is the default path
    {"kl_weight", "1.0"},
    {"log_every", "50"},
    {"eval_every", "500"},
    {"eval_batch", "256"},
    {"out_dir", "out"},
};

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

uint64_t fnv1a64(const std::string& text) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Config::Config() {
  for (const KeyDef& k : kKeys) values_[k.key] = k.def;
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  GTC_CHECK(it != values_.end(), ConfigError, "unknown config key '" + key + "'");
  it->second = value;
}

void Config::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    GTC_CHECK(eq != std::string::npos, ConfigError,
              origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    GTC_CHECK(!key.empty(), ConfigError,
              origin + ":" + std::to_string(lineno) + ": empty key");
    try {
      set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void Config::apply_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  GTC_CHECK(in.good(), IoError, "cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  apply_text(buf.str(), path);
}

const std::string& Config::str(const std::string& key) const {
  auto it = values_.find(key);
  GTC_CHECK(it != values_.end(), ConfigError, "unknown config key '" + key + "'");
  return it->second;
}

double Config::num(const std::string& key) const {
  const std::string& v = str(key);
  errno = 0;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  GTC_CHECK(end && *end == '\0' && !v.empty() && errno != ERANGE, ConfigError,
            "config key '" + key + "' is not a number: '" + v + "'");
  return d;
}

int64_t Config::integer(const std::string& key) const {
  const std::string& v = str(key);
  errno = 0;
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  GTC_CHECK(end && *end == '\0' && !v.empty() && errno != ERANGE, ConfigError,
            "config key '" + key + "' is not an integer: '" + v + "'");
  return i;
}

bool Config::flag(const std::string& key) const {
  std::string v = str(key);
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: '" + v + "'");
}

bool Config::has(const std::string& key) const { return values_.count(key) != 0; }

std::string Config::resolved_text() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

std::string Config::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(resolved_text())));
  return buf;
}

void Config::validate() const {
  const auto one_of = [&](const char* key, std::initializer_list<const char*> allowed) {
    const std::string& v = str(key);
    for (const char* a : allowed)
      if (v == a) return;
    std::string msg = "config key '" + std::string(key) + "' must be one of {";
    bool first = true;
    for (const char* a : allowed) {
      if (!first) msg += ", ";
      msg += a;
      first = false;
    }
    throw ConfigError(msg + "}, got '" + v + "'");
  };
  one_of("model", {"lenet", "vgg16", "vae"});
  one_of("dataset", {"mnist", "cifar10", "synth"});
  one_of("mode", {"gtc", "ste", "ste_bit", "teacher_only"});
  one_of("optimizer", {"adam", "sgd"});
  GTC_CHECK(num("lr") > 0.0, ConfigError, "lr must be positive");
  GTC_CHECK(num("model_scale") > 0.0, ConfigError, "model_scale must be positive");
  GTC_CHECK(num("lambda1") >= 0.0 && num("lambda2") >= 0.0, ConfigError,
            "lambda1/lambda2 must be nonnegative");
  GTC_CHECK(integer("batch_size") >= 1, ConfigError, "batch_size must be >= 1");
  GTC_CHECK(integer("iters") >= 0, ConfigError, "iters must be >= 0");
  GTC_CHECK(num("eps_zero") >= 0.0, ConfigError, "eps_zero must be >= 0");
  GTC_CHECK(integer("log_every") >= 1 && integer("eval_every") >= 1, ConfigError,
            "log_every/eval_every must be >= 1");
  GTC_CHECK(integer("synth_classes") >= 2, ConfigError, "synth_classes must be >= 2");
  if (integer("anneal_every") != 0) {
    const double f = num("anneal_factor");
    GTC_CHECK(f > 0.0 && f < 1.0, ConfigError, "anneal_factor must be in (0,1)");
    GTC_CHECK(integer("anneal_every") > 0, ConfigError, "anneal_every must be >= 0");
  }
  flag("stochastic_round");  // type check
}

}  // namespace gtc
