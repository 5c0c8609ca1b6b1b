#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "chmffn/error.hpp"
#include "chmffn/gemm.hpp"
#include "chmffn/grad_check.hpp"
#include "chmffn/ops.hpp"
#include "chmffn/rng.hpp"
#include "chmffn/tape.hpp"
#include "support.hpp"

using namespace chmffn;
using testing::rand_tensor;

namespace {

constexpr double kStep = 1e-6;
constexpr double kOpTol = 1e-4;

// Weighted sum with fixed random weights: a scalar with a non-uniform gradient.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return sum(mul(y, rand_tensor(y.shape(), rng)));
}

void check_op(const char* name, const std::function<Tensor()>& f, std::vector<Tensor> inputs) {
  const auto r = grad_check(f, std::move(inputs), kStep, kOpTol);
  INFO(std::string(name) << ": max rel " << r.max_rel_error << " at " << r.worst);
  CHECK(r.passed);
  CHECK(r.checked > 0);
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction and shape rules") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.rank() == 2);
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 1.5);
    CHECK_THROWS_AS(Tensor(Shape{}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{1, 1, 1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(t.at({2, 0}), ShapeError);
  }

  TEST_CASE("row-major indexing") {
    const Tensor t = Tensor::of({2, 3}, {0, 1, 2, 3, 4, 5});
    CHECK(t.at({0, 2}) == 2);
    CHECK(t.at({1, 0}) == 3);
  }

  TEST_CASE("handles share storage, clone does not") {
    Tensor a = Tensor::zeros({3});
    Tensor b = a;
    b[1] = 7.0;
    CHECK(a[1] == 7.0);
    Tensor c = a.clone();
    c[1] = 1.0;
    CHECK(a[1] == 7.0);
    CHECK(!a.same_storage(c));
    CHECK(identical(a, b));
  }

  TEST_CASE("broadcast rule is trailing-dimension") {
    CHECK(broadcastable({2, 3}, {3}));
    CHECK(broadcastable({4, 2, 3}, {2, 3}));
    CHECK(broadcastable({2, 3}, {1, 3}));
    CHECK(!broadcastable({2, 3}, {2}));
    const Tensor s = add(Tensor::of({2, 3}, {1, 2, 3, 4, 5, 6}), Tensor::of({3}, {10, 20, 30}));
    CHECK(s.at({1, 2}) == 36);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  }

  TEST_CASE("matmul, transpose, permute, reshape by hand") {
    const Tensor a = Tensor::of({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::of({2, 2}, {5, 6, 7, 8});
    const Tensor c = matmul(a, b);
    CHECK(c.at({0, 0}) == 19);
    CHECK(c.at({0, 1}) == 22);
    CHECK(c.at({1, 0}) == 43);
    CHECK(c.at({1, 1}) == 50);
    CHECK(transpose(a).at({0, 1}) == 3);
    const Tensor x = Tensor::of({2, 3}, {0, 1, 2, 3, 4, 5});
    const Tensor p = permute(x, {1, 0});
    CHECK(p.shape() == Shape{3, 2});
    CHECK(p.at({2, 1}) == 5);
    CHECK(reshape(x, {3, 2}).at({2, 0}) == 4);
    CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), ShapeError);
  }

  TEST_CASE("concat and slice") {
    const Tensor a = Tensor::of({1, 2}, {1, 2});
    const Tensor b = Tensor::of({2, 2}, {3, 4, 5, 6});
    const Tensor c = concat({a, b}, 0);
    CHECK(c.shape() == Shape{3, 2});
    CHECK(c.at({2, 1}) == 6);
    const Tensor s = slice(c, 0, 1, 2);
    CHECK(identical(s, b));
    CHECK_THROWS_AS(concat({}, 0), ShapeError);
    CHECK_THROWS_AS(concat({a, Tensor::zeros({1, 3})}, 0), ShapeError);
    CHECK_THROWS_AS(slice(c, 0, 2, 2), ShapeError);
  }

  TEST_CASE("reductions") {
    const Tensor x = Tensor::of({2, 2}, {1, 2, 3, 4});
    CHECK(sum(x).item() == 10);
    CHECK(mean(x).item() == 2.5);
  }
}

TEST_SUITE("gemm") {
  TEST_CASE("matches a naive triple loop for every transpose combination") {
    Rng rng(3);
    for (std::size_t m : {1u, 3u, 4u, 9u, 17u}) {
      for (std::size_t n : {1u, 7u, 8u, 13u}) {
        for (std::size_t k : {1u, 5u, 130u}) {
          for (int ta = 0; ta < 2; ++ta) {
            for (int tb = 0; tb < 2; ++tb) {
              std::vector<double> a(m * k), b(k * n), c(m * n), ref(m * n);
              for (auto& v : a) v = rng.uniform(-1, 1);
              for (auto& v : b) v = rng.uniform(-1, 1);
              for (auto& v : c) v = rng.uniform(-1, 1);
              for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                  double s = c[i * n + j];
                  for (std::size_t p = 0; p < k; ++p) {
                    const double av = ta ? a[p * m + i] : a[i * k + p];
                    const double bv = tb ? b[j * k + p] : b[p * n + j];
                    s += av * bv;
                  }
                  ref[i * n + j] = s;
                }
              }
              gemm(ta, tb, m, n, k, a.data(), b.data(), c.data(), true);
              double err = 0.0;
              for (std::size_t i = 0; i < m * n; ++i) err = std::max(err, std::abs(c[i] - ref[i]));
              CHECK(err < 1e-12);
            }
          }
        }
      }
    }
  }
}

TEST_SUITE("tape") {
  TEST_CASE("nothing is recorded without an active tape") {
    Tensor x = Tensor::ones({2});
    x.set_requires_grad(true);
    const Tensor y = scale(x, 2.0);
    CHECK(y.is_leaf());
    CHECK(!y.requires_grad());
  }

  TEST_CASE("no-grad guard suspends recording") {
    Tensor x = Tensor::ones({2});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    {
      NoGradGuard guard;
      (void)scale(x, 2.0);
    }
    CHECK(tape.size() == 0);
    (void)scale(x, 2.0);
    CHECK(tape.size() == 1);
  }

  TEST_CASE("operands without requires_grad are not recorded") {
    Tape tape;
    TapeScope scope(tape);
    (void)add(Tensor::ones({2}), Tensor::ones({2}));
    CHECK(tape.size() == 0);
  }

  TEST_CASE("backward rejects non-scalar losses") {
    Tensor x = Tensor::ones({2});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
  }

  TEST_CASE("leaf gradients accumulate across backward calls") {
    Tensor x = Tensor::of({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum(mul(x, x));
    }
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    CHECK(x.grad()[1] == doctest::Approx(8.0));
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }

  TEST_CASE("a tensor used twice receives both contributions") {
    Tensor x = Tensor::of({1}, {3.0});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = add(mul(x, x), scale(x, 5.0));  // x^2 + 5x
    tape.backward(sum(y));
    CHECK(x.grad()[0] == doctest::Approx(11.0));
  }
}

TEST_SUITE("op gradients") {
  TEST_CASE("elementwise and broadcast ops") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      Tensor a = rand_tensor({2, 3, 4}, rng);
      Tensor b = rand_tensor({3, 4}, rng);
      Tensor c = rand_tensor({2, 3, 4}, rng);
      Tensor d = testing::rand_away_from_zero({2, 3}, rng);
      check_op("add", [&] { return probe(add(a, b), seed); }, {a, b});
      check_op("sub", [&] { return probe(sub(a, b), seed); }, {a, b});
      check_op("mul", [&] { return probe(mul(a, c), seed); }, {a, c});
      check_op("mul broadcast", [&] { return probe(mul(a, b), seed); }, {a, b});
      check_op("scale", [&] { return probe(scale(a, -1.7), seed); }, {a});
      check_op("add_scalar", [&] { return probe(add_scalar(a, 0.3), seed); }, {a});
      check_op("abs", [&] { return probe(abs(d), seed); }, {d});
    }
  }

  TEST_CASE("matmul variants and layout ops") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed + 100);
      Tensor a = rand_tensor({3, 4}, rng);
      Tensor b = rand_tensor({4, 5}, rng);
      Tensor a3 = rand_tensor({2, 3, 4}, rng);
      Tensor b3 = rand_tensor({2, 4, 5}, rng);
      check_op("matmul 2d", [&] { return probe(matmul(a, b), seed); }, {a, b});
      check_op("matmul 3d", [&] { return probe(matmul(a3, b3), seed); }, {a3, b3});
      check_op("matmul 3d x 2d", [&] { return probe(matmul(a3, b), seed); }, {a3, b});
      check_op("transpose", [&] { return probe(transpose(a3), seed); }, {a3});
      check_op("permute", [&] { return probe(permute(a3, {2, 0, 1}), seed); }, {a3});
      check_op("reshape", [&] { return probe(reshape(a3, {4, 6}), seed); }, {a3});
      const Tensor tail = rand_tensor({2, 4}, rng);
      check_op("concat", [&] { return probe(concat({a, tail}, 0), seed); }, {a});
      check_op("slice", [&] { return probe(slice(a3, 2, 1, 2), seed); }, {a3});
      check_op("sum", [&] { return sum(mul(a, a)); }, {a});
      check_op("mean", [&] { return mean(mul(a, a)); }, {a});
    }
  }
}

TEST_SUITE("rng") {
  TEST_CASE("same seed, same stream") {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
      const auto x = a.next_u64();
      CHECK(x == b.next_u64());
      differs |= x != c.next_u64();
    }
    CHECK(differs);
  }

  TEST_CASE("ranges and moments") {
    Rng rng(1);
    double s = 0.0, ss = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double u = rng.uniform();
      CHECK(u >= 0.0);
      CHECK(u < 1.0);
      CHECK(rng.below(7) < 7);
      const double z = rng.normal();
      s += z;
      ss += z * z;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(ss / n - 1.0) < 0.02);
  }

  TEST_CASE("shuffle is a permutation") {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    Rng rng(9);
    rng.shuffle(v);
    CHECK(std::set<int>(v.begin(), v.end()).size() == 50);
    CHECK(!std::is_sorted(v.begin(), v.end()));
  }
}

TEST_SUITE("grad_check") {
  TEST_CASE("detects a wrong gradient") {
    // Forward computes 2x but the tape never sees it, so the analytic grad is 0.
    Tensor x = Tensor::of({2}, {0.5, -0.3});
    const auto r = grad_check(
        [&] {
          Tensor y = Tensor::of({1}, {2.0 * x[0] + 2.0 * x[1]});
          return add(y, scale(sum(x), 0.0));
        },
        {x}, kStep, kOpTol);
    CHECK(!r.passed);
  }

  TEST_CASE("restores requires_grad and clears gradients") {
    Tensor x = Tensor::of({2}, {0.5, -0.3});
    (void)grad_check([&] { return sum(mul(x, x)); }, {x}, kStep, kOpTol);
    CHECK(!x.requires_grad());
  }
}
