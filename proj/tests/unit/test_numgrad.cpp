#include "cityloc/numgrad.hpp"

#include "doctest.h"
#include "test_util.hpp"

#include <cmath>

using namespace cityloc;
using namespace cityloc::ng;
using cityloc::testing::max_abs_diff;
using cityloc::testing::random_array;

TEST_CASE("matmul identity and permutation") {
  Tape t;
  auto eye = t.constant(Array::matrix({{1, 0}, {0, 1}}));
  auto m = t.constant(Array::matrix({{1, 2}, {3, 4}}));
  CHECK(matmul(eye, m).value() == Array::matrix({{1, 2}, {3, 4}}));
  auto swap = t.constant(Array::matrix({{0, 1}, {1, 0}}));
  CHECK(matmul(m, swap).value() == Array::matrix({{2, 1}, {4, 3}}));
}

TEST_CASE("matmul matches triple loop") {
  const Array a = random_array(11, {3, 4});
  const Array b = random_array(12, {4, 2});
  Array expected({3, 2}, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 4; ++k) expected.at(i, j) += a.at(i, k) * b.at(k, j);
  Tape t;
  auto c = matmul(t.constant(a), t.constant(b));
  CHECK(max_abs_diff(c.value(), expected) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape t;
  auto a = t.constant(Array({2, 3}));
  auto b = t.constant(Array({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax rows") {
  Tape t;
  auto y = softmax_rows(t.constant(Array::matrix({{0, 0, 0}, {1000, 0, 0}, {1, 2, 3}})));
  const Array& v = y.value();
  for (int c = 0; c < 3; ++c) CHECK(std::abs(v.at(0, c) - 1.0 / 3.0) < 1e-12);
  CHECK(std::abs(v.at(1, 0) - 1.0) < 1e-12);
  CHECK(v.at(1, 1) < 1e-12);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(v.at(2, 0) - std::exp(1.0) / z) < 1e-12);
  CHECK(std::abs(v.at(2, 1) - std::exp(2.0) / z) < 1e-12);
  CHECK(std::abs(v.at(2, 2) - std::exp(3.0) / z) < 1e-12);
  CHECK(v.all_finite());
}

TEST_CASE("softmax rows sum to one for large magnitudes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tape t;
    auto y = softmax_rows(t.constant(random_array(seed, {5, 7}, 1e3)));
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += y.value().at(r, c);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("elementwise examples") {
  Tape t;
  auto x = t.constant(Array::vector({-1, 0, 2}));
  auto back = log(exp(x));
  CHECK(max_abs_diff(back.value(), x.value()) < 1e-12);
  CHECK(relu(x).value() == Array::vector({0, 0, 2}));

  auto v = t.variable(Array::vector({1, 2, 3}));
  auto g = t.backward(sum(mul(v, v))).of(v);
  CHECK(g == Array::vector({2, 4, 6}));

  auto r = t.variable(Array::vector({-1, 0, 3}));
  CHECK(t.backward(sum(relu(r))).of(r) == Array::vector({0, 0, 1}));
}

TEST_CASE("elementwise errors") {
  Tape t;
  CHECK_THROWS_AS(log(t.constant(Array::vector({1, 0}))), DomainError);
  CHECK_THROWS_AS(log(t.constant(Array::vector({-2}))), DomainError);
  CHECK_THROWS_AS(add(t.constant(Array({2, 2})), t.constant(Array({3}))), ShapeError);
  CHECK_THROWS_AS(elementwise(ElementwiseOp::kAdd, t.constant(Array({2}))), ShapeError);
  // array-vs-scalar broadcast is allowed
  auto s = add(t.constant(Array::vector({1, 2})), t.constant(Array::scalar(3)));
  CHECK(s.value() == Array::vector({4, 5}));
}

TEST_CASE("reductions") {
  Tape t;
  auto m = t.constant(Array::matrix({{1, 5}, {7, 2}}));
  CHECK(max(m, 1).value() == Array::vector({5, 7}));
  CHECK(max(m, 0).value() == Array::vector({7, 5}));
  CHECK(mean(t.constant(Array::vector({2, 4}))).item() == 3.0);

  auto tie = t.variable(Array::vector({3, 3}));
  CHECK(t.backward(max(tie)).of(tie) == Array::vector({1, 0}));

  CHECK_THROWS_AS(sum(m, 2), ShapeError);
  CHECK_THROWS_AS(sum(t.constant(Array({0, 3})), 0), ShapeError);
}

TEST_CASE("max reduce gradient is one-hot per slice") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tape t;
    auto x = t.variable(random_array(seed, {4, 6}));
    auto g = t.backward(sum(max(x, 1))).of(x);
    for (std::size_t r = 0; r < 4; ++r) {
      int ones = 0;
      for (std::size_t c = 0; c < 6; ++c) {
        CHECK((g.at(r, c) == 0.0 || g.at(r, c) == 1.0));
        ones += g.at(r, c) == 1.0;
      }
      CHECK(ones == 1);
    }
  }
}

TEST_CASE("backward edge cases") {
  Tape t;
  auto x = t.variable(Array::vector({1, 2}));
  auto c = t.constant(Array::scalar(4.0));
  CHECK(t.backward(c).of(x) == Array::vector({0, 0}));

  auto row = t.variable(random_array(3, {1, 5}));
  auto g = t.backward(sum(softmax_rows(row))).of(row);
  for (double v : g.values()) CHECK(std::abs(v) < 1e-12);

  CHECK_THROWS_AS(t.backward(x), ShapeError);
  CHECK_FALSE(c.node_id().has_value());
  CHECK(x.node_id().has_value());
}

TEST_CASE("grad_check of a linear function is exact") {
  auto f = [](Tape&, const DiffArray& x) { return sum(x); };
  CHECK(grad_check(f, random_array(5, {3, 4})) < 1e-10);
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Tape t;
    auto x = t.variable(random_array(1, {4, 5}));
    auto w = t.variable(random_array(2, {5, 3}));
    auto y = sum(mul(softmax_rows(matmul(x, w)), t.constant(random_array(3, {4, 3}))));
    auto g = t.backward(y);
    return std::pair{g.of(x), g.of(w)};
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

// Every recorded op, checked against central differences over 20 seeds.
TEST_CASE("grad_check property over all ops") {
  using Fn = std::function<DiffArray(Tape&, std::span<const DiffArray>)>;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    Fn f;
    bool positive = false;
  };
  // A fixed random projection turns array-valued ops into scalars.
  auto probe = [](Tape& t, const DiffArray& y) {
    return sum(mul(y, t.constant(random_array(999, y.shape()))));
  };
  std::vector<Case> cases = {
      {"matmul", {{3, 4}, {4, 2}}, [&](Tape& t, auto v) { return probe(t, matmul(v[0], v[1])); }},
      {"add", {{3, 4}, {3, 4}}, [&](Tape& t, auto v) { return probe(t, add(v[0], v[1])); }},
      {"add_scalar_bcast", {{3, 4}, {1}}, [&](Tape& t, auto v) { return probe(t, add(v[0], v[1])); }},
      {"sub", {{3, 4}, {3, 4}}, [&](Tape& t, auto v) { return probe(t, sub(v[0], v[1])); }},
      {"mul", {{3, 4}, {3, 4}}, [&](Tape& t, auto v) { return probe(t, mul(v[0], v[1])); }},
      {"mul_bcast", {{3, 4}, {1}}, [&](Tape& t, auto v) { return probe(t, mul(v[0], v[1])); }},
      {"divide", {{3, 4}, {3, 4}}, [&](Tape& t, auto v) { return probe(t, div(v[0], v[1])); }, true},
      {"neg", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, neg(v[0])); }},
      {"exp", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, exp(v[0])); }},
      {"log", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, log(v[0])); }, true},
      {"sqrt", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, sqrt(v[0])); }, true},
      {"relu", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, relu(v[0])); }},
      {"scale", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, scale(v[0], -2.5)); }},
      {"sum0", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, sum(v[0], 0)); }},
      {"mean1", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, mean(v[0], 1)); }},
      {"max0", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, max(v[0], 0)); }},
      {"max1", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, max(v[0], 1)); }},
      {"transpose", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, transpose(v[0])); }},
      {"reshape", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, reshape(v[0], {12})); }},
      {"add_rowvec", {{3, 4}, {4}}, [&](Tape& t, auto v) { return probe(t, add_rowvec(v[0], v[1])); }},
      {"mul_rowvec", {{3, 4}, {4}}, [&](Tape& t, auto v) { return probe(t, mul_rowvec(v[0], v[1])); }},
      {"concat_cols", {{3, 4}, {3, 2}},
       [&](Tape& t, auto v) { return probe(t, concat_cols(v)); }},
      {"concat_rows", {{3, 4}, {2, 4}},
       [&](Tape& t, auto v) { return probe(t, concat_rows(v)); }},
      {"slice_cols", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, slice_cols(v[0], 1, 2)); }},
      {"slice_rows", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, slice_rows(v[0], 1, 2)); }},
      {"element", {{3, 4}}, [&](Tape& t, auto v) { return scale(element(v[0], 2, 1), 3.0); }},
      {"softmax_rows", {{3, 4}}, [&](Tape& t, auto v) { return probe(t, softmax_rows(v[0])); }},
      {"log_softmax_rows", {{3, 4}},
       [&](Tape& t, auto v) { return probe(t, log_softmax_rows(v[0])); }},
      {"log_softmax_masked", {{3, 4}},
       [&](Tape& t, auto v) {
         Array mask = Array::matrix({{1, 0, 1, 1}, {1, 1, 1, 0}, {0, 1, 1, 1}});
         return probe(t, log_softmax_rows(v[0], &mask));
       }},
      {"l2_normalize_rows", {{3, 4}},
       [&](Tape& t, auto v) { return probe(t, l2_normalize_rows(v[0])); }},
      {"layer_norm_rows", {{3, 4}, {4}, {4}},
       [&](Tape& t, auto v) { return probe(t, layer_norm_rows(v[0], v[1], v[2])); }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::vector<Array> inputs;
      for (std::size_t k = 0; k < c.shapes.size(); ++k) {
        Array a = random_array(seed * 31 + k, c.shapes[k]);
        if (c.positive) {
          for (double& v : a.values()) v = 0.5 + std::abs(v);
        }
        inputs.push_back(std::move(a));
      }
      worst = std::max(worst, grad_check(c.f, inputs, 1e-5));
    }
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

namespace {

// Plain-loop attention over one segment and one head.
Array loop_attention(const Array& q, const Array& k, const Array& v, const Offsets& qo,
                     const Offsets& ko, std::size_t heads) {
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  Array out(q.shape(), 0.0);
  for (std::size_t s = 0; s + 1 < qo.size(); ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = qo[s]; i < qo[s + 1]; ++i) {
        std::vector<double> w;
        double mx = -1e300;
        for (std::size_t j = ko[s]; j < ko[s + 1]; ++j) {
          double dot = 0.0;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += q.at(i, c) * k.at(j, c);
          w.push_back(dot / std::sqrt(static_cast<double>(dh)));
          mx = std::max(mx, w.back());
        }
        double z = 0.0;
        for (double& x : w) z += (x = std::exp(x - mx));
        for (std::size_t j = ko[s]; j < ko[s + 1]; ++j) {
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
            out.at(i, c) += w[j - ko[s]] / z * v.at(j, c);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("gather_rows and segment_max") {
  Tape t;
  auto a = t.variable(Array::matrix({{1, 5}, {7, 2}, {3, 3}}));
  CHECK(gather_rows(a, {2, 0, 2}).value() == Array::matrix({{3, 3}, {1, 5}, {3, 3}}));
  CHECK(segment_max(a, {0, 2, 3}).value() == Array::matrix({{7, 5}, {3, 3}}));
  CHECK_THROWS_AS(segment_max(a, {0, 0, 3}), ShapeError);
  CHECK_THROWS_AS(segment_max(a, {0, 2}), ShapeError);
  CHECK_THROWS_AS(gather_rows(a, {3}), ShapeError);

  auto g = t.backward(sum(gather_rows(a, {2, 0, 2})));
  CHECK(g.of(a) == Array::matrix({{1, 1}, {0, 0}, {2, 2}}));
}

TEST_CASE("segment_attention matches a loop oracle") {
  const Offsets qo = {0, 3, 3, 5};
  const Offsets ko = {0, 2, 4, 7};
  const Array q = random_array(21, {5, 6});
  const Array k = random_array(22, {7, 6});
  const Array v = random_array(23, {7, 6});
  for (std::size_t heads : {1, 2, 3}) {
    Tape t;
    auto out = segment_attention(t.constant(q), t.constant(k), t.constant(v), qo, ko, heads);
    CHECK(max_abs_diff(out.value(), loop_attention(q, k, v, qo, ko, heads)) < 1e-12);
  }
  Tape t;
  CHECK_THROWS_AS(segment_attention(t.constant(q), t.constant(k), t.constant(v), qo, ko, 4),
                  ShapeError);
  CHECK_THROWS_AS(segment_attention(t.constant(q), t.constant(k), t.constant(v), {0, 5}, {0, 0, 7}, 1),
                  ShapeError);
}

TEST_CASE("segmented ops pass grad_check") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::vector<Array> in = {random_array(seed * 3 + 1, {5, 4}), random_array(seed * 3 + 2, {6, 4}),
                                   random_array(seed * 3 + 3, {6, 4})};
    auto fn = [](Tape& t, std::span<const DiffArray> x) {
      auto att = segment_attention(x[0], x[1], x[2], {0, 2, 5}, {0, 4, 6}, 2);
      auto pooled = segment_max(att, {0, 2, 5});
      auto w = t.constant(random_array(99, {2, 4}));
      auto picked = gather_rows(x[1], {5, 1, 1});
      return add(sum(mul(pooled, w)), sum(mul(picked, picked)));
    };
    CHECK(grad_check(fn, in) < 1e-6);
  }
}
