#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evssl/bytes.hpp"
#include "evssl/common.hpp"
#include "evssl/model.hpp"
#include "evssl/serialize.hpp"

#include "testutil.hpp"

using namespace evssl;
using testutil::TempDir;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint ckpt;
  ckpt.config_json = "{\"seed\": 7, \"note\": \"fixture\"}";
  ckpt.tensors.push_back(
      make_tensor<float>("w", {2, 3}, std::vector<float>{1, -2, 3.5f, 0, 1e-7f, -9}));
  ckpt.tensors.push_back(
      make_tensor<double>("stats", {4}, std::vector<double>{0.25, -1.0, 3.0, 1e300}));
  ckpt.tensors.push_back(
      make_tensor<int64_t>("ids", {3}, std::vector<int64_t>{-5, 0, 123456789012345}));
  ckpt.tensors.push_back(make_tensor<uint8_t>("mask", {2, 2},
                                              std::vector<uint8_t>{1, 0, 0, 1}));
  set_checkpoint_step(ckpt, 42);
  Rng rng(99);
  rng.uniform();
  const std::string state = rng.save_state();
  ckpt.rng_state.assign(state.begin(), state.end());
  return ckpt;
}

}  // namespace

TEST_CASE("checkpoint encode and decode round trip exactly") {
  const Checkpoint ckpt = sample_checkpoint();
  const auto bytes = encode_checkpoint(ckpt);
  const Checkpoint back = decode_checkpoint(bytes);
  REQUIRE(back == ckpt);
  REQUIRE(encode_checkpoint(back) == bytes);
}

TEST_CASE("save load save is byte-identical") {
  TempDir dir("ckpt");
  const Checkpoint ckpt = sample_checkpoint();
  const std::string p1 = dir.str() + "/a.eckp";
  const std::string p2 = dir.str() + "/b.eckp";
  save_checkpoint(p1, ckpt);
  const Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(p2, loaded);
  REQUIRE(read_file_bytes(p1) == read_file_bytes(p2));
  REQUIRE(loaded == ckpt);
}

TEST_CASE("checkpoint byte layout is pinned") {
  Checkpoint ckpt;
  ckpt.config_json = "{}";
  ckpt.tensors.push_back(make_tensor<float>("x", {1}, std::vector<float>{1.0f}));
  ckpt.rng_state = {0xAB};
  const auto bytes = encode_checkpoint(ckpt);

  const std::vector<uint8_t> expect = {
      'E', 'C', 'K', 'P',               // magic
      1, 0, 0, 0,                       // version u32 LE
      2, 0, 0, 0, 0, 0, 0, 0,           // config length u64 LE
      '{', '}',                         // config bytes
      1, 0, 0, 0,                       // tensor count u32 LE
      1, 0, 0, 0,                       // name length u32 LE
      'x',                              // name
      0,                                // dtype tag f32
      1,                                // rank
      1, 0, 0, 0, 0, 0, 0, 0,           // dim 1 u64 LE
      0x00, 0x00, 0x80, 0x3F,           // 1.0f LE
      1, 0, 0, 0, 0, 0, 0, 0,           // rng length u64 LE
      0xAB,                             // rng blob
  };
  REQUIRE(bytes == expect);
}

TEST_CASE("typed tensor helpers check dtype and length") {
  const auto t = make_tensor<float>("w", {2, 2}, std::vector<float>{1, 2, 3, 4});
  REQUIRE(t.dtype == DType::F32);
  REQUIRE(t.data.size() == 16);
  REQUIRE(tensor_values<float>(t) == std::vector<float>{1, 2, 3, 4});
  REQUIRE_THROWS_AS(tensor_values<double>(t), Error);
  try {
    tensor_values<double>(t);
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Usage);
  }
  REQUIRE_THROWS_AS(make_tensor<float>("w", {2, 2}, std::vector<float>{1, 2, 3}), Error);
  REQUIRE_THROWS_AS(make_tensor<float>("", {1}, std::vector<float>{1}), Error);

  const auto d = make_tensor<double>("d", {1}, std::vector<double>{-0.5});
  REQUIRE(tensor_values<double>(d) == std::vector<double>{-0.5});
  const auto i = make_tensor<int64_t>("i", {2}, std::vector<int64_t>{-1, 7});
  REQUIRE(tensor_values<int64_t>(i) == std::vector<int64_t>{-1, 7});
  const auto u = make_tensor<uint64_t>("u", {1}, std::vector<uint64_t>{~uint64_t{0}});
  REQUIRE(tensor_values<uint64_t>(u) == std::vector<uint64_t>{~uint64_t{0}});
  const auto b = make_tensor<uint8_t>("b", {3}, std::vector<uint8_t>{0, 1, 255});
  REQUIRE(tensor_values<uint8_t>(b) == std::vector<uint8_t>{0, 1, 255});
}

TEST_CASE("find, at, put, and the step tensor") {
  Checkpoint ckpt = sample_checkpoint();
  REQUIRE(ckpt.find("w") != nullptr);
  REQUIRE(ckpt.find("nope") == nullptr);
  REQUIRE_THROWS_AS(ckpt.at("nope"), Error);
  REQUIRE(checkpoint_step(ckpt) == 42);

  set_checkpoint_step(ckpt, 43);  // replaces in place, no duplicate
  REQUIRE(checkpoint_step(ckpt) == 43);
  int step_tensors = 0;
  for (const auto& t : ckpt.tensors) step_tensors += (t.name == kStepTensorName);
  REQUIRE(step_tensors == 1);

  Checkpoint empty;
  REQUIRE_THROWS_AS(checkpoint_step(empty), Error);
}

TEST_CASE("decoder rejects malformed inputs") {
  const Checkpoint ckpt = sample_checkpoint();
  const auto good = encode_checkpoint(ckpt);

  const auto expect_data_error = [](std::vector<uint8_t> bytes) {
    try {
      decode_checkpoint(bytes);
      FAIL("expected a decode error");
    } catch (const Error& e) {
      REQUIRE(e.kind() == ErrorKind::Data);
    }
  };

  // bad magic
  {
    auto bad = good;
    bad[0] = 'X';
    expect_data_error(bad);
  }
  // unsupported version
  {
    auto bad = good;
    bad[4] = 9;
    expect_data_error(bad);
  }
  // truncations at every prefix length up to the header region
  for (size_t len : {size_t{0}, size_t{3}, size_t{7}, size_t{12}, good.size() - 1})
    expect_data_error({good.begin(), good.begin() + static_cast<int64_t>(len)});
  // trailing garbage
  {
    auto bad = good;
    bad.push_back(0);
    expect_data_error(bad);
  }
  // config length pointing past the end
  {
    auto bad = good;
    bad[8] = 0xFF;
    bad[9] = 0xFF;
    expect_data_error(bad);
  }
  // unknown dtype tag: rebuild with a poisoned tag
  {
    ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u64(0);
    w.u32(1);
    w.str("t");
    w.u8(250);  // no such dtype
    w.u8(1);
    w.u64(1);
    w.u32(0);
    expect_data_error(w.data());
  }
  // duplicate tensor names
  {
    Checkpoint dup;
    dup.tensors.push_back(make_tensor<uint8_t>("t", {1}, std::vector<uint8_t>{1}));
    dup.tensors.push_back(make_tensor<uint8_t>("t", {1}, std::vector<uint8_t>{2}));
    expect_data_error(encode_checkpoint(dup));
  }
  // zero dim
  {
    ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u64(0);
    w.u32(1);
    w.str("t");
    w.u8(0);
    w.u8(1);
    w.u64(0);  // dim of zero
    w.u64(0);
    expect_data_error(w.data());
  }
  // absurd dims must fail before any allocation
  {
    ByteWriter w;
    w.bytes(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u64(0);
    w.u32(1);
    w.str("t");
    w.u8(0);
    w.u8(2);
    w.u64(uint64_t{1} << 50);
    w.u64(uint64_t{1} << 50);
    expect_data_error(w.data());
  }

  REQUIRE_THROWS_AS(load_checkpoint("/nonexistent/path/x.eckp"), Error);
}

TEST_CASE("param store round trips through a checkpoint") {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 2;
  cfg.dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.head_hidden = 8;
  cfg.bottleneck = 6;
  cfg.prototypes = 10;
  const auto net = Network<float>::init(cfg, 5);

  Checkpoint ckpt;
  put_params(ckpt, "student.", net.params);
  REQUIRE(ckpt.tensors.size() == net.params.items.size());

  auto other = Network<float>::init(cfg, 6);
  bool differed = false;
  for (size_t i = 0; i < other.params.items.size(); ++i)
    differed = differed || other.params.items[i].value != net.params.items[i].value;
  REQUIRE(differed);

  read_params(ckpt, "student.", other.params);
  for (size_t i = 0; i < other.params.items.size(); ++i) {
    REQUIRE(other.params.items[i].name == net.params.items[i].name);
    REQUIRE(other.params.items[i].value == net.params.items[i].value);
  }

  Checkpoint wrong = ckpt;
  wrong.tensors[0].dims = {1, wrong.tensors[0].numel()};
  // reshaped on disk but same payload: shape check must reject it
  if (wrong.tensors[0].dims != ckpt.tensors[0].dims)
    REQUIRE_THROWS_AS(read_params(wrong, "student.", other.params), Error);
}

TEST_CASE("rng state survives the checkpoint blob") {
  Rng rng(1234);
  for (int i = 0; i < 17; ++i) rng.uniform();
  const std::string state = rng.save_state();

  Checkpoint ckpt;
  ckpt.rng_state.assign(state.begin(), state.end());
  const auto back = decode_checkpoint(encode_checkpoint(ckpt));

  Rng restored(1);
  restored.load_state(std::string(back.rng_state.begin(), back.rng_state.end()));
  Rng reference(1234);
  for (int i = 0; i < 17; ++i) reference.uniform();
  for (int i = 0; i < 50; ++i) REQUIRE(restored.next_u64() == reference.next_u64());
}
