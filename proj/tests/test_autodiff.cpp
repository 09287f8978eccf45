#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "pdisco/autodiff.hpp"
#include "pdisco/rng.hpp"

using namespace pdisco;
using pdisco::testing::fd_gradient;
using pdisco::testing::random_tensor;
using pdisco::testing::relative_error;

namespace {

// Checks the tape gradient of a scalar-valued graph against central
// differences for every input.
template <typename Builder>
void check_op(Builder build, std::vector<Tensor> inputs, double tol = 1e-7) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& in : inputs) vars.push_back(tape.leaf(in));
  Var out = build(tape, vars);
  REQUIRE(tape.value(out).numel() == 1);
  tape.backward(out);

  auto value_fn = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Var> vs;
    for (const Tensor& x : xs) vs.push_back(t.constant(x));
    return t.value(build(t, vs))[0];
  };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor fd = fd_gradient(value_fn, inputs, i);
    CHECK(relative_error(tape.gradient(vars[i]), fd) < tol);
  }
}

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
  RandomSource rng(17);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);

  check_op([](Tape& t, const std::vector<Var>& v) { return t.sum_all(t.add(v[0], v[1])); },
           {a, b});
  check_op([](Tape& t, const std::vector<Var>& v) { return t.sum_all(t.sub(v[0], v[1])); },
           {a, b});
  check_op([](Tape& t, const std::vector<Var>& v) { return t.sum_all(t.mul(v[0], v[1])); },
           {a, b});
  check_op([](Tape& t, const std::vector<Var>& v) { return t.sum_all(t.scale(v[0], -2.5)); },
           {a});
  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.vlog(t.add_scalar(v[0], 3.0)));
      },
      {a});
  check_op([](Tape& t, const std::vector<Var>& v) { return t.sum_all(t.gelu(v[0])); }, {a});
}

TEST_CASE("matrix product gradients") {
  RandomSource rng(23);
  Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 4}, rng);
  Tensor c = random_tensor({4, 5}, rng);
  Tensor w = random_tensor({6, 5}, rng), bias = random_tensor({6}, rng);
  Tensor at = random_tensor({5, 3}, rng);

  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.matmul(v[0], v[1]), t.matmul(v[0], v[1])));
      },
      {a, b});
  check_op([](Tape& t, const std::vector<Var>& v) { return t.sum_all(t.matmul_nt(v[0], v[1])); },
           {a, c});
  check_op([](Tape& t, const std::vector<Var>& v) { return t.sum_all(t.matmul_tn(v[0], v[1])); },
           {at, b});
  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        Var y = t.linear(v[0], v[1], v[2]);
        return t.sum_all(t.mul(y, y));
      },
      {a, w, bias});
}

TEST_CASE("structural op gradients") {
  RandomSource rng(31);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({2, 4}, rng);

  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        Var cat = t.concat_rows({v[0], v[1]});
        return t.sum_all(t.mul(cat, cat));
      },
      {a, b});
  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        Var s = t.slice_rows(v[0], 1, 2);
        return t.sum_all(t.mul(s, s));
      },
      {a});
  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        Var s = t.slice_cols(v[0], 1, 2);
        return t.sum_all(t.mul(s, s));
      },
      {a});
  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        Var row = t.pick_row(v[0], 2);
        return t.sum_all(t.mul(row, row));
      },
      {a});
  check_op([](Tape& t, const std::vector<Var>& v) { return t.pick(v[0], 5); }, {a});
  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        Var m = t.mean_rows(v[0]);
        return t.sum_all(t.mul(m, m));
      },
      {a});
}

TEST_CASE("softmax, logsumexp and normalization gradients") {
  RandomSource rng(37);
  Tensor a = random_tensor({4, 5}, rng, -2.0, 2.0);
  Tensor vec = random_tensor({6}, rng, -2.0, 2.0);
  Tensor gamma = random_tensor({5}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({5}, rng);

  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        Var p = t.row_softmax(v[0]);
        return t.sum_all(t.mul(p, p));
      },
      {a});
  check_op([](Tape& t, const std::vector<Var>& v) { return t.logsumexp(v[0]); }, {vec});
  check_op(
      [](Tape& t, const std::vector<Var>& v) {
        Var y = t.layer_norm_rows(v[0], v[1], v[2], 1e-5);
        return t.sum_all(t.mul(y, y));
      },
      {a, gamma, beta});
  // weight the standardized entries so the objective is not invariant to x
  Tensor mixer = random_tensor({4, 5}, rng, 0.2, 1.8);
  check_op(
      [&](Tape& t, const std::vector<Var>& v) {
        Var y = t.normalize_all(v[0], 1e-5);
        Var z = t.mul_const(y, mixer);
        return t.sum_all(t.mul(z, z));
      },
      {a});
}

TEST_CASE("domain kernel gradients") {
  RandomSource rng(41);
  Tensor feats = random_tensor({6, 3}, rng);
  Tensor protos = random_tensor({4, 3}, rng);
  Tensor u = random_tensor({7}, rng), v = random_tensor({7}, rng);

  check_op(
      [](Tape& t, const std::vector<Var>& vs) {
        Var l = t.squared_distance_logits(vs[0], vs[1]);
        return t.sum_all(t.mul(l, l));
      },
      {feats, protos});
  check_op([](Tape& t, const std::vector<Var>& vs) { return t.cosine(vs[0], vs[1], 1e-12); },
           {u, v});

  // stay away from the abs/max kinks and the x=0 entropy boundary
  Tensor maps = random_tensor({12, 3}, rng, 0.05, 1.0);
  check_op([](Tape& t, const std::vector<Var>& vs) { return t.entropy_sum(vs[0]); }, {maps},
           1e-6);
  check_op([](Tape& t, const std::vector<Var>& vs) { return t.tv_penalty(vs[0], 4, 3); }, {maps},
           1e-6);
  check_op(
      [](Tape& t, const std::vector<Var>& vs) {
        Var m = t.max_all(vs[0]);
        return m;
      },
      {maps});
}

TEST_CASE("spatial linear map gradient") {
  RandomSource rng(43);
  Tensor maps = random_tensor({12, 2}, rng);
  SpatialMap plan(12);
  for (int o = 0; o < 12; ++o) {
    plan[o].push_back(SpatialTap{(o + 3) % 12, 0.75});
    plan[o].push_back(SpatialTap{(o + 7) % 12, 0.25});
  }
  check_op(
      [&](Tape& t, const std::vector<Var>& vs) {
        Var y = t.spatial_linear(vs[0], plan);
        return t.sum_all(t.mul(y, y));
      },
      {maps});
}

TEST_CASE("gradient accumulates across reuse") {
  Tensor x = Tensor::from_values({2}, {3.0, -1.0});
  Tape tape;
  Var v = tape.leaf(x);
  Var y = tape.sum_all(tape.mul(v, v));  // d/dx sum(x^2) = 2x
  tape.backward(y);
  CHECK(tape.gradient(v)[0] == doctest::Approx(6.0));
  CHECK(tape.gradient(v)[1] == doctest::Approx(-2.0));
}

TEST_CASE("constants receive no gradient work") {
  Tape tape;
  Var c = tape.constant(Tensor::from_values({2}, {1.0, 2.0}));
  Var l = tape.leaf(Tensor::from_values({2}, {5.0, 7.0}));
  Var out = tape.sum_all(tape.mul(c, l));
  tape.backward(out);
  CHECK(tape.gradient(c).l2_norm() == 0.0);
  CHECK(tape.gradient(l)[0] == doctest::Approx(1.0));
}

TEST_CASE("max_all ties break to the lowest index") {
  Tape tape;
  Var v = tape.leaf(Tensor::from_values({4}, {2.0, 7.0, 7.0, 1.0}));
  Var m = tape.max_all(v);
  tape.backward(m);
  CHECK(tape.value(m)[0] == 7.0);
  CHECK(tape.gradient(v)[1] == 1.0);
  CHECK(tape.gradient(v)[2] == 0.0);
}

TEST_CASE("backward requires a scalar") {
  Tape tape;
  Var v = tape.leaf(Tensor({2, 2}, 1.0));
  CHECK_THROWS_AS(tape.backward(v), ConfigError);
}
