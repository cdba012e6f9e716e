#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "stsn/rng.hpp"
#include "stsn/tensor.hpp"

using namespace stsn;

namespace {

real rel_err(real a, real b) { return std::abs(a - b) / std::max({real(1), std::abs(a), std::abs(b)}); }

real max_rel_err(const Tensor& a, const Tensor& b) {
  REQUIRE(a.dims() == b.dims());
  real worst = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a.data()[i], b.data()[i]));
  return worst;
}

// random [c,h,w] tensor with entries in [-2,2], kept away from the relu tie
Tensor random_activation(Rng& rng, std::vector<int> dims) {
  std::vector<real> v(element_count(dims));
  for (real& x : v) {
    x = rng.uniform(-2.0, 2.0);
    if (std::abs(x) < 1e-2) x = x < 0 ? x - 1e-2 : x + 1e-2;
  }
  return tensor_from(std::move(dims), std::move(v));
}

Tensor random_positive(Rng& rng, std::vector<int> dims, real lo, real hi) {
  std::vector<real> v(element_count(dims));
  for (real& x : v) x = rng.uniform(lo, hi);
  return tensor_from(std::move(dims), std::move(v));
}

// analytic gradient of scalar_fn at x via the tape
Tensor tape_grad(const std::function<Tensor(const Tensor&)>& op, const Tensor& proj, const Tensor& x) {
  Tape tape;
  Tensor leaf = x;
  tape.watch(leaf);
  Tensor loss = sum(mul(op(leaf), proj));
  GradientMap grads = tape.run_backward(loss);
  return grads.grad(leaf);
}

// central-difference gradient of the same scalar function
Tensor fd_grad(const std::function<Tensor(const Tensor&)>& op, const Tensor& proj, const Tensor& x,
               real eps = 1e-3) {
  return finite_difference_grad(
      [&](const Tensor& xx) {
        real acc = 0;
        Tensor y = op(xx);
        for (std::int64_t i = 0; i < y.size(); ++i) acc += y.data()[i] * proj.data()[i];
        return acc;
      },
      x, eps);
}

void check_op_grad(const std::function<Tensor(const Tensor&)>& op, const Tensor& x, Rng& rng,
                   real tol = 1e-4) {
  Tensor probe = op(x);
  std::vector<real> pv(probe.size());
  for (real& v : pv) v = rng.uniform(-1.0, 1.0);
  Tensor proj = tensor_from(probe.dims(), std::move(pv));
  CHECK(max_rel_err(tape_grad(op, proj, x), fd_grad(op, proj, x)) < tol);
}

}  // namespace

TEST_SUITE("tensor_core") {

TEST_CASE("tensor_from basic construction") {
  Tensor t = tensor_from({2, 2}, {1, 2, 3, 4});
  CHECK(t.dims() == std::vector<int>{2, 2});
  CHECK(t.values() == std::vector<real>{1, 2, 3, 4});

  Tensor z = tensor_from({3}, {0, 0, 0});
  CHECK(z.values() == std::vector<real>{0, 0, 0});

  CHECK_THROWS_AS(tensor_from({2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(tensor_from({1}, {std::nan("")}), std::invalid_argument);
  CHECK_THROWS_AS(tensor_from({0}, {}), std::invalid_argument);
}

TEST_CASE("unary elementwise values") {
  CHECK(exp(tensor_from({1}, {0})).values()[0] == 1.0);
  Tensor r = relu(tensor_from({2}, {-1, 2}));
  CHECK(r.values() == std::vector<real>{0, 2});
  CHECK(exp(tensor_from({1}, {1})).values()[0] == doctest::Approx(2.718281828459045).epsilon(1e-14));
  CHECK(negate(tensor_from({2}, {1, -3})).values() == std::vector<real>{-1, 3});
  CHECK_THROWS_AS(exp(tensor_from({1}, {1000.0})), std::invalid_argument);
}

TEST_CASE("binary elementwise values and broadcast") {
  CHECK(add(tensor_from({2}, {1, 2}), tensor_from({2}, {3, 4})).values() ==
        std::vector<real>{4, 6});

  Tensor ones = full({2, 2, 2}, 1.0);
  Tensor half = full({1, 2, 2}, 0.5);
  Tensor scaled = mul(ones, half);
  for (real v : scaled.values()) CHECK(v == 0.5);

  CHECK_THROWS_AS(div(tensor_from({1}, {1}), tensor_from({1}, {0})), std::invalid_argument);
  CHECK_THROWS_AS(add(tensor_from({2}, {1, 2}), tensor_from({3}, {1, 2, 3})),
                  std::invalid_argument);
}

TEST_CASE("concat_channels and split recover inputs") {
  Tensor a = full({1, 2, 2}, 1.0);
  Tensor b = full({1, 2, 2}, 0.0);
  Tensor cat = concat_channels(a, b);
  CHECK(cat.dims() == std::vector<int>{2, 2, 2});
  for (int i = 0; i < 4; ++i) {
    CHECK(cat.values()[i] == 1.0);
    CHECK(cat.values()[4 + i] == 0.0);
  }
  CHECK(concat_channels(a, a).dims()[0] == 2);
  CHECK_THROWS_AS(concat_channels(a, full({1, 3, 2}, 0.0)), std::invalid_argument);

  Rng rng(7);
  Tensor x = random_activation(rng, {3, 4, 5});
  Tensor y = random_activation(rng, {2, 4, 5});
  auto [sx, sy] = split_channels(concat_channels(x, y), 3);
  CHECK(sx.values() == x.values());
  CHECK(sy.values() == y.values());
}

TEST_CASE("softmax_over_leading_axis") {
  Tensor eq = softmax_over_leading_axis(full({3, 2, 2}, 0.7));
  for (real v : eq.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor one = softmax_over_leading_axis(full({1, 3, 3}, -4.0));
  for (real v : one.values()) CHECK(v == 1.0);

  Tensor two = softmax_over_leading_axis(tensor_from({2, 1, 1}, {0.0, std::log(3.0)}));
  CHECK(two.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(two.values()[1] == doctest::Approx(0.75).epsilon(1e-12));

  // columns sum to one, entries within [0,1]
  Rng rng(11);
  Tensor x = random_activation(rng, {4, 5, 6});
  Tensor s = softmax_over_leading_axis(x);
  for (int p = 0; p < 30; ++p) {
    real total = 0;
    for (int k = 0; k < 4; ++k) {
      real v = s.values()[k * 30 + p];
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  Tensor bad({1, 1, 1}, std::vector<real>{std::numeric_limits<real>::infinity()});
  CHECK_THROWS_AS(softmax_over_leading_axis(bad), std::invalid_argument);
}

TEST_CASE("backward on simple graphs") {
  {
    Tape tape;
    Tensor x = tensor_from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    GradientMap g = tape.run_backward(sum(x));
    for (real v : g.grad(x).values()) CHECK(v == 1.0);
  }
  {
    Tape tape;
    Tensor x = tensor_from({1}, {3}, true);
    GradientMap g = tape.run_backward(sum(mul(x, x)));
    CHECK(g.grad(x).values()[0] == 6.0);
  }
  {
    // gradient accumulates across fan-out
    Tape tape;
    Tensor x = tensor_from({2}, {1, 2}, true);
    GradientMap g = tape.run_backward(sum(add(x, x)));
    for (real v : g.grad(x).values()) CHECK(v == 2.0);
  }
}

TEST_CASE("deep composite matches finite differences tightly") {
  Rng rng(3);
  Tensor x = random_activation(rng, {2, 3, 3});
  auto op = [](const Tensor& t) { return exp(mul(add(t, full(t.dims(), 0.25)), full(t.dims(), 0.5))); };
  Tensor probe = op(x);
  std::vector<real> pv(probe.size());
  for (real& v : pv) v = rng.uniform(-1.0, 1.0);
  Tensor proj = tensor_from(probe.dims(), std::move(pv));
  CHECK(max_rel_err(tape_grad(op, proj, x), fd_grad(op, proj, x)) < 1e-6);
}

TEST_CASE("backward error paths") {
  {
    Tape tape;
    Tensor x = tensor_from({2}, {1, 2}, true);
    Tensor y = add(x, x);
    CHECK_THROWS_AS(tape.run_backward(y), std::invalid_argument);  // not scalar
  }
  {
    Tape tape;
    Tensor x = tensor_from({2}, {1, 2}, true);
    Tensor loss = sum(x);
    tape.run_backward(loss);
    CHECK_THROWS_AS(tape.run_backward(loss), std::invalid_argument);  // consumed
  }
  {
    Tensor x = tensor_from({2}, {1, 2});
    CHECK_THROWS_AS(backward(sum(x)), std::invalid_argument);  // no active tape
  }
}

TEST_CASE("finite_difference_grad oracle") {
  Tensor x = tensor_from({3}, {0.3, -1.2, 2.0});
  auto fsum = [](const Tensor& t) {
    real acc = 0;
    for (real v : t.values()) acc += v;
    return acc;
  };
  Tensor gsum = finite_difference_grad(fsum, x, 1e-3);
  for (real v : gsum.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));

  Tensor x2 = tensor_from({1}, {2.0});
  auto fsq = [](const Tensor& t) { return t.values()[0] * t.values()[0]; };
  CHECK(finite_difference_grad(fsq, x2, 1e-4).values()[0] == doctest::Approx(4.0).epsilon(1e-6));

  CHECK_THROWS_AS(finite_difference_grad(fsq, x2, 0.0), std::invalid_argument);
}

TEST_CASE("gradients of every op match central differences over random tensors") {
  Rng rng(20260808);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> dims{rng.uniform_int(1, 4), rng.uniform_int(1, 6), rng.uniform_int(1, 6)};
    Tensor x = random_activation(rng, dims);
    Tensor other = random_activation(rng, dims);
    Tensor pos = random_positive(rng, dims, 0.2, 2.0);
    Tensor pixmap = random_positive(rng, {1, dims[1], dims[2]}, 0.5, 2.0);

    check_op_grad([](const Tensor& t) { return exp(t); }, x, rng);
    check_op_grad([](const Tensor& t) { return relu(t); }, x, rng);
    check_op_grad([](const Tensor& t) { return negate(t); }, x, rng);
    check_op_grad([](const Tensor& t) { return sqrt(t); }, pos, rng);
    check_op_grad([](const Tensor& t) { return sigmoid(t); }, x, rng);
    check_op_grad([&](const Tensor& t) { return add(t, other); }, x, rng);
    check_op_grad([&](const Tensor& t) { return sub(t, other); }, x, rng);
    check_op_grad([&](const Tensor& t) { return mul(t, other); }, x, rng);
    check_op_grad([&](const Tensor& t) { return div(t, pos); }, x, rng);
    check_op_grad([&](const Tensor& t) { return mul(t, pixmap); }, x, rng);
    check_op_grad([&](const Tensor& t) { return div(t, pixmap); }, x, rng);
    check_op_grad([&](const Tensor& t) { return concat_channels(t, other); }, x, rng);
    check_op_grad([&](const Tensor& t) { return concat_channels(other, t); }, x, rng);
    check_op_grad([](const Tensor& t) { return softmax_over_leading_axis(t); }, x, rng);
    check_op_grad([](const Tensor& t) { return sum_channels(t); }, x, rng);
    check_op_grad([](const Tensor& t) { return slice_leading(t, 0); }, x, rng);
    if (dims[0] > 1) {
      check_op_grad([](const Tensor& t) { return split_channels(t, 1).second; }, x, rng);
    }
    // second operand side of the broadcast
    check_op_grad([&](const Tensor& t) {
      auto bt = sum_channels(t);
      return mul(x, bt);
    }, x, rng);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("forward results are deterministic") {
  Rng rng(5);
  Tensor x = random_activation(rng, {3, 4, 4});
  auto run = [&]() {
    Tensor y = softmax_over_leading_axis(exp(mul(x, x)));
    return sum(y).item();
  };
  real a = run(), b = run();
  CHECK(std::memcmp(&a, &b, sizeof(real)) == 0);
}

}  // TEST_SUITE
