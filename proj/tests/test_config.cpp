#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <string>

#include "gtc/config.hpp"
#include "gtc/io.hpp"

using namespace gtc;

TEST_CASE("defaults cover every key and validate cleanly") {
  Config c;
  CHECK(c.str("model") == "lenet");
  CHECK(c.str("dataset") == "mnist");
  CHECK(c.str("mode") == "gtc");
  CHECK(c.str("optimizer") == "adam");
  CHECK(c.num("lr") == 0.0001);
  CHECK(c.num("lambda1") == 0.8);
  CHECK(c.num("lambda2") == 0.04);
  CHECK(c.integer("batch_size") == 64);
  CHECK(c.integer("iters") == 5000);
  CHECK(c.integer("seed") == 1);
  CHECK(c.num("model_scale") == 1.0);
  CHECK(c.integer("anneal_every") == 0);
  CHECK(c.num("anneal_factor") == 0.1);
  CHECK(c.integer("stochastic_round") == 0);
  CHECK(c.num("theta1_init") == 0.0);
  CHECK(c.num("theta2_init") == 1.0);
  CHECK(c.num("kl_weight") == 1.0);
  CHECK(c.integer("train_count") == 10000);
  CHECK(c.integer("test_count") == 2000);
  CHECK(c.str("out_dir") == "out");
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("parsing: comments, blanks, overrides, whitespace") {
  Config c;
  c.apply_text("# comment\n\n  lr = 0.5 \nmode=ste\nlr=0.25\n", "inline");
  CHECK(c.num("lr") == 0.25);  // later assignment wins
  CHECK(c.str("mode") == "ste");

  CHECK_THROWS_AS(c.apply_text("unknown_key=3\n", "inline"), ConfigError);
  CHECK_THROWS_AS(c.apply_text("lr\n", "inline"), ConfigError);
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
}

TEST_CASE("typed accessors reject junk") {
  Config c;
  c.set("lr", "abc");
  CHECK_THROWS_AS((void)c.num("lr"), ConfigError);
  c.set("iters", "12.5");
  CHECK_THROWS_AS((void)c.integer("iters"), ConfigError);
  c.set("stochastic_round", "1");
  CHECK(c.flag("stochastic_round"));
  c.set("stochastic_round", "0");
  CHECK_FALSE(c.flag("stochastic_round"));
}

TEST_CASE("validation catches bad enums and non-positive sizes") {
  const auto expect_bad = [](const char* key, const char* value) {
    Config c;
    c.set(key, value);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  expect_bad("model", "resnet");
  expect_bad("dataset", "imagenet");
  expect_bad("mode", "distill");
  expect_bad("optimizer", "rmsprop");
  expect_bad("batch_size", "0");
  expect_bad("iters", "-5");
  expect_bad("model_scale", "0");
  expect_bad("lambda1", "-0.1");
  expect_bad("lambda2", "-0.1");
  expect_bad("lr", "0");
  expect_bad("eps_zero", "-1");
  expect_bad("log_every", "0");

  Config c;
  c.set("anneal_every", "10");
  c.set("anneal_factor", "1.0");  // factor checked only when annealing is on
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.set("anneal_every", "0");
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("resolved text is canonical and hashes stably") {
  Config a;
  a.set("lambda1", "0.5");
  a.set("seed", "9");
  Config b;
  b.set("seed", "9");
  b.set("lambda1", "0.5");
  CHECK(a.resolved_text() == b.resolved_text());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);

  Config c;
  c.set("lambda1", "0.5");
  c.set("seed", "10");
  CHECK(a.hash() != c.hash());

  // the document parses back into an identical configuration
  Config d;
  d.apply_text(a.resolved_text(), "echo");
  CHECK(d.resolved_text() == a.resolved_text());

  // text form is sorted key=value lines
  const std::string text = a.resolved_text();
  CHECK(text.find("lambda1=0.5\n") != std::string::npos);
  CHECK(text.find("seed=9\n") != std::string::npos);
  CHECK(text.find("anneal_every=") < text.find("batch_size="));
}

TEST_CASE("hash is the reference 64-bit FNV-1a") {
  // fixed points computed from the published offset basis and prime
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("files load through the same parser") {
  const auto dir = std::filesystem::temp_directory_path() / "gtc-tests";
  std::filesystem::create_directories(dir);
  const std::string p = (dir / "cfg.cfg").string();
  write_file_atomic(p, "mode=teacher_only\nbatch_size=8\n");
  Config c;
  c.apply_file(p);
  CHECK(c.str("mode") == "teacher_only");
  CHECK(c.integer("batch_size") == 8);
  CHECK_THROWS_AS(c.apply_file((dir / "missing.cfg").string()), IoError);
}
