#include "cityloc/checkpoint.hpp"
#include "cityloc/nn.hpp"

#include "doctest.h"
#include "test_util.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace cityloc;
using namespace cityloc::nn;
using cityloc::testing::random_array;

TEST_CASE("ParamStore naming and checksum") {
  ParamStore s;
  auto a = s.add("a", ng::Array({2}, 1.0));
  CHECK(s.find("a") == a);
  CHECK_FALSE(s.find("b").has_value());
  CHECK_THROWS(s.add("a", ng::Array({1})));
  const auto before = s.checksum();
  s.value(a)[1] = 2.0;
  CHECK(s.checksum() != before);
  CHECK(s.scalar_count() == 2);
}

TEST_CASE("Linear init is deterministic and Glorot-bounded") {
  ParamStore s1, s2;
  auto l1 = Linear::create(s1, "fc", 5, 3, 7);
  Linear::create(s2, "fc", 5, 3, 7);
  CHECK(s1 == s2);
  const double limit = std::sqrt(6.0 / 8.0);
  for (double w : s1.value(l1.w).values()) CHECK(std::abs(w) <= limit);
  for (double b : s1.value(l1.b).values()) CHECK(b == 0.0);
}

TEST_CASE("frozen binding yields no gradients") {
  ParamStore s;
  auto l = Linear::create(s, "fc", 3, 2, 1);
  ng::Tape t;
  Binding p(t, s, false);
  auto y = ng::sum(l(p, t.variable(random_array(1, {4, 3}))));
  auto g = p.gradients(t.backward(y));
  for (const auto& a : g) {
    for (double v : a.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("sinusoidal positions") {
  auto pe = sinusoidal_positions(3, 4);
  CHECK(pe.at(0, 0) == 0.0);
  CHECK(pe.at(0, 1) == 1.0);
  CHECK(std::abs(pe.at(1, 0) - std::sin(1.0)) < 1e-15);
  CHECK(std::abs(pe.at(2, 2) - std::sin(2.0 / 100.0)) < 1e-15);
  CHECK(offsets_from_sizes({2, 0, 3}) == ng::Offsets{0, 2, 2, 5});
}

TEST_CASE("layers pass grad_check") {
  ParamStore s;
  auto mlp = Mlp::create(s, "mlp", {4, 6, 4}, 3);
  auto block = EncoderBlock::create(s, "block", 4, 2, 8, 3);
  auto att = Attention::create(s, "cross", 4, 2, 3);
  const ng::Array x = random_array(5, {5, 4});
  const ng::Array y = random_array(6, {3, 4});
  auto f = [&](Binding& p) {
    auto& t = p.tape();
    auto h = block(p, mlp(p, t.constant(x)), {0, 2, 5});
    auto c = att(p, h, t.constant(y), {0, 2, 5}, {0, 1, 3});
    return ng::sum(ng::mul(c, c));
  };
  CHECK(grad_check_params(s, f) < 1e-6);
  CHECK_THROWS(Attention::create(s, "bad", 5, 2, 1));
}

TEST_CASE("Adam matches the update rule and minimizes a quadratic") {
  ParamStore s;
  auto id = s.add("w", ng::Array::vector({1.0, -2.0}));
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam opt(s, cfg);
  double m = 0, v = 0, w = 1.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2.0 * w;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    const auto& cur = s.value(id);
    opt.step(s, {ng::Array::vector({2.0 * cur[0], 2.0 * cur[1]})});
    CHECK(std::abs(s.value(id)[0] - w) < 1e-12);
  }
  for (int t = 0; t < 500; ++t) {
    const auto& cur = s.value(id);
    opt.step(s, {ng::Array::vector({2.0 * cur[0], 2.0 * cur[1]})});
  }
  CHECK(std::abs(s.value(id)[0]) < 1e-2);
  CHECK(std::abs(s.value(id)[1]) < 1e-2);
  CHECK(opt.steps() == 503);
}

TEST_CASE("checkpoint round trip, digest and diagnostics") {
  ParamStore s;
  Linear::create(s, "fc", 3, 2, 9);
  Checkpoint c;
  c.meta["kind"] = "test";
  export_store(c, s, "model");
  const auto bytes = encode_checkpoint(c);
  auto back = decode_checkpoint(bytes);
  CHECK(back == c);
  CHECK(checkpoint_digest(back) == checkpoint_digest(c));

  const auto path = std::filesystem::temp_directory_path() / "cityloc_test_ckpt.bin";
  save_checkpoint(path, c);
  CHECK(load_checkpoint(path) == c);

  ParamStore target;
  Linear::create(target, "fc", 3, 2, 1);
  import_store(back, target, "model");
  CHECK(target == s);

  ParamStore wrong;
  Linear::create(wrong, "fc", 4, 2, 1);
  try {
    import_store(back, wrong, "model");
    FAIL("expected a shape mismatch");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("model/fc.w") != std::string::npos);
  }
  CHECK_THROWS_AS(import_store(back, target, "other"), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint("garbage"), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(path.string() + ".missing"), CheckpointError);
  std::filesystem::remove(path);
}
