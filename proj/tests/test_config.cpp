#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "evssl/bytes.hpp"
#include "evssl/common.hpp"
#include "evssl/config.hpp"

#include "testutil.hpp"

using namespace evssl;
using testutil::TempDir;

namespace {

void expect_usage(const std::function<void()>& fn, const std::string& needle) {
  try {
    fn();
    FAIL("expected a usage error mentioning '" << needle << "'");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Usage);
    REQUIRE(std::string(e.what()).find(needle) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("train config defaults validate and carry the pinned values") {
  TrainConfig cfg;
  cfg.validate();
  REQUIRE(cfg.lambda1 == 0.1);
  REQUIRE(cfg.lambda2 == 0.9);
  REQUIRE(cfg.contexts == 8);
  REQUIRE(cfg.tau_student == 0.1);
  REQUIRE(cfg.tau_teacher == 0.04);
  REQUIRE(cfg.center_rate == 0.9);
  REQUIRE(cfg.momentum_start == 0.996);
  REQUIRE(cfg.momentum_end == 1.0);
  REQUIRE(cfg.steps == 300);
  REQUIRE(cfg.batch_size == 32);
  REQUIRE(cfg.model().tokens() == 64);
}

TEST_CASE("config text parses sections, comments, and typed values") {
  TrainConfig cfg;
  auto schema = cfg.schema();
  const std::string text =
      "# top comment\n"
      "\n"
      "[data]\n"
      "manifest = \"sets/train.json\"  # inline comment\n"
      "out_dir = \"out dir with \\\"quotes\\\" and \\\\slash\"\n"
      "[loss]\n"
      "lambda1 = 0.25\n"
      "centering = false\n"
      "contexts = 4\n"
      "[optim]\n"
      "lr = 2.5e-4\n"
      "[run]\n"
      "seed = 18446744073709551615\n"
      "steps = 10\n"
      "warmup_steps = 2\n";
  // warmup_steps lives under [optim]; a stray key must be rejected by name
  expect_usage([&] { apply_config_text(schema, text, "inline"); },
               "run.warmup_steps");

  const std::string good =
      "[data]\n"
      "manifest = \"sets/train.json\"\n"
      "out_dir = \"out dir with \\\"quotes\\\" and \\\\slash\"\n"
      "[loss]\n"
      "lambda1 = 0.25\n"
      "centering = false\n"
      "contexts = 4\n"
      "[optim]\n"
      "lr = 2.5e-4\n"
      "warmup_steps = 2\n"
      "[run]\n"
      "seed = 18446744073709551615\n"
      "steps = 10\n";
  apply_config_text(schema, good, "inline");
  REQUIRE(cfg.manifest == "sets/train.json");
  REQUIRE(cfg.out_dir == "out dir with \"quotes\" and \\slash");
  REQUIRE(cfg.lambda1 == 0.25);
  REQUIRE(cfg.centering == false);
  REQUIRE(cfg.contexts == 4);
  REQUIRE(cfg.lr == 2.5e-4);
  REQUIRE(cfg.seed == ~uint64_t{0});
  REQUIRE(cfg.steps == 10);
  REQUIRE(cfg.warmup_steps == 2);
  // untouched fields keep their defaults
  REQUIRE(cfg.lambda2 == 0.9);
}

TEST_CASE("unknown and duplicate keys are rejected by name") {
  TrainConfig cfg;
  auto schema = cfg.schema();
  expect_usage([&] { apply_config_text(schema, "[loss]\nlambda3 = 1\n", "f"); },
               "loss.lambda3");
  expect_usage([&] { schema.set("nope.key", "1"); }, "nope.key");
  expect_usage(
      [&] {
        apply_config_text(schema, "[run]\nsteps = 1\nsteps = 2\n", "f");
      },
      "duplicate key 'run.steps'");
}

TEST_CASE("value type errors name the key and the offending token") {
  TrainConfig cfg;
  auto schema = cfg.schema();
  expect_usage([&] { schema.set("model.dim", "3.5"); }, "model.dim");
  expect_usage([&] { schema.set("optim.lr", "fast"); }, "optim.lr");
  expect_usage([&] { schema.set("loss.centering", "yes"); }, "loss.centering");
  expect_usage([&] { schema.set("run.seed", "-1"); }, "run.seed");
  expect_usage([&] { schema.set("model.dim", ""); }, "model.dim");
  expect_usage([&] { schema.set("data.manifest", "\"unterminated"); }, "data.manifest");
}

TEST_CASE("malformed config lines are reported with line numbers") {
  TrainConfig cfg;
  auto schema = cfg.schema();
  expect_usage([&] { apply_config_text(schema, "steps 3\n", "cfg.toml"); },
               "cfg.toml:1");
  expect_usage([&] { apply_config_text(schema, "\n[run\nsteps = 1\n", "c"); }, "c:2");
  expect_usage([&] { apply_config_text(schema, "[]\n", "c"); }, "section");
  expect_usage([&] { apply_config_text(schema, "bad key! = 1\n", "c"); }, "bad");
}

TEST_CASE("overrides parse key=value and reject malformed input") {
  TrainConfig cfg;
  auto schema = cfg.schema();
  apply_override(schema, "optim.lr=0.005");
  REQUIRE(cfg.lr == 0.005);
  apply_override(schema, "data.manifest=plain/path.json");
  REQUIRE(cfg.manifest == "plain/path.json");
  apply_override(schema, "run.threads = 2");
  REQUIRE(cfg.threads == 2);
  expect_usage([&] { apply_override(schema, "optim.lr"); }, "key=value");
  expect_usage([&] { apply_override(schema, "=3"); }, "key=value");
  expect_usage([&] { apply_override(schema, "loss.gamma=1"); }, "loss.gamma");
}

TEST_CASE("every rendered value parses back to the identical value") {
  TrainConfig cfg;
  cfg.manifest = "weird \"name\" \\ here";
  cfg.lr = 1.0 / 3.0;
  cfg.lambda1 = 0.1 + 1e-17;
  cfg.seed = 1234567890123456789ULL;
  cfg.center_rate = 2.0 / 7.0;
  auto schema = cfg.schema();
  const std::string rendered = render_config(schema);

  TrainConfig other;
  other.lr = 0.0;
  auto other_schema = other.schema();
  apply_config_text(other_schema, rendered, "rendered");

  for (const auto& f : schema.fields())
    REQUIRE(other_schema.get(f.key) == schema.get(f.key));
  REQUIRE(std::memcmp(&other.lr, &cfg.lr, sizeof(double)) == 0);
  REQUIRE(std::memcmp(&other.lambda1, &cfg.lambda1, sizeof(double)) == 0);
  REQUIRE(other.manifest == cfg.manifest);
  REQUIRE(render_config(other_schema) == rendered);
}

TEST_CASE("config files load from disk") {
  TempDir dir("config");
  const std::string path = dir.str() + "/run.toml";
  write_file_text(path, "[run]\nsteps = 5\nbatch_size = 2\n");

  TrainConfig cfg;
  auto schema = cfg.schema();
  apply_config_file(schema, path);
  REQUIRE(cfg.steps == 5);
  REQUIRE(cfg.batch_size == 2);

  REQUIRE_THROWS_AS(apply_config_file(schema, dir.str() + "/missing.toml"), Error);
}

TEST_CASE("train config validation rejects bad ranges") {
  const auto expect_invalid = [](auto mutate, const std::string& needle) {
    TrainConfig cfg;
    mutate(cfg);
    try {
      cfg.validate();
      FAIL("expected validation failure for " << needle);
    } catch (const Error& e) {
      REQUIRE(e.kind() == ErrorKind::Usage);
      REQUIRE(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  expect_invalid([](TrainConfig& c) { c.lambda1 = -0.1; }, "loss weights");
  expect_invalid([](TrainConfig& c) { c.batch_size = 0; }, "batch_size");
  expect_invalid([](TrainConfig& c) { c.mask_ratio_lo = 0.0; }, "mask ratio");
  expect_invalid([](TrainConfig& c) { c.mask_ratio_lo = 0.7; c.mask_ratio_hi = 0.5; },
                 "mask ratio");
  expect_invalid([](TrainConfig& c) { c.tau_teacher = 0.0; }, "temperatures");
  expect_invalid([](TrainConfig& c) { c.warmup_steps = 400; }, "warmup");
  expect_invalid([](TrainConfig& c) { c.threads = 0; }, "threads");
  expect_invalid([](TrainConfig& c) { c.momentum_start = 1.1; }, "momentum");
  expect_invalid([](TrainConfig& c) { c.center_rate = 1.5; }, "center_rate");
  expect_invalid([](TrainConfig& c) { c.patch_size = 7; }, "patch");
  expect_invalid([](TrainConfig& c) { c.kmeans_iters = 0; }, "kmeans_iters");
}

TEST_CASE("simulate and probe configs expose their schemas") {
  SimulateConfig sim;
  auto ss = sim.schema();
  apply_config_text(ss,
                    "[data]\nkind = \"image_folder\"\nimage_dir = \"imgs\"\n"
                    "[sim]\nnoise_rate_hz = 25.0\n",
                    "s");
  REQUIRE(sim.kind == "image_folder");
  REQUIRE(sim.image_dir == "imgs");
  REQUIRE(sim.noise_rate_hz == 25.0);

  ProbeConfig probe;
  auto ps = probe.schema();
  apply_config_text(ps, "[probe]\nclasses = 3\nlr = 0.25\nrandom_backbone = true\n",
                    "p");
  REQUIRE(probe.classes == 3);
  REQUIRE(probe.probe_lr == 0.25);
  REQUIRE(probe.random_backbone);
  probe.validate();
  probe.classes = 1;
  REQUIRE_THROWS_AS(probe.validate(), Error);
}
