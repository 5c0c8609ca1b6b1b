#include <doctest.h>

#include <cmath>

#include "chmffn/error.hpp"
#include "chmffn/grad_check.hpp"
#include "chmffn/nn.hpp"
#include "chmffn/ops.hpp"
#include "support.hpp"

using namespace chmffn;
using testing::rand_tensor;

namespace {

constexpr double kStep = 1e-6;
constexpr double kTol = 1e-4;

Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0xabcdefULL);
  return sum(mul(y, rand_tensor(y.shape(), rng)));
}

void expect_grad(const char* name, const std::function<Tensor()>& f, std::vector<Tensor> in) {
  const auto r = grad_check(f, std::move(in), kStep, kTol);
  INFO(std::string(name) << ": max rel " << r.max_rel_error << " at " << r.worst);
  CHECK(r.passed);
}

// Direct same-padding convolution.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const long pad = static_cast<long>(k / 2);
  Tensor out({n, co, h, wd});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx) {
          double acc = b.defined() ? b[o] : 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long sy = static_cast<long>(y + ky) - pad;
                const long sx = static_cast<long>(xx + kx) - pad;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(wd))
                  continue;
                acc += w.at({o, c, ky, kx}) *
                       x.at({s, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)});
              }
          out.at({s, o, y, xx}) = acc;
        }
  return out;
}

}  // namespace

TEST_SUITE("conv2d") {
  TEST_CASE("matches direct convolution") {
    Rng rng(11);
    for (std::size_t k : {1u, 3u, 5u, 7u}) {
      const Tensor x = rand_tensor({2, 3, 5, 6}, rng);
      const Tensor w = rand_tensor({4, 3, k, k}, rng);
      const Tensor b = rand_tensor({4}, rng);
      CHECK(max_abs_diff(nn::conv2d(x, w, b), naive_conv(x, w, b)) < 1e-12);
      CHECK(max_abs_diff(nn::conv2d(x, w, Tensor()), naive_conv(x, w, Tensor())) < 1e-12);
    }
  }

  TEST_CASE("gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(seed);
      for (std::size_t k : {1u, 3u, 5u}) {
        Tensor x = rand_tensor({2, 2, 4, 4}, rng);
        Tensor w = rand_tensor({3, 2, k, k}, rng);
        Tensor b = rand_tensor({3}, rng);
        expect_grad("conv2d", [&] { return probe(nn::conv2d(x, w, b), seed); }, {x, w, b});
      }
    }
  }

  TEST_CASE("shape errors") {
    CHECK_THROWS_AS(nn::conv2d(Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1, 3, 3, 3}), Tensor()),
                    ShapeError);
    CHECK_THROWS_AS(nn::conv2d(Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1, 2, 2, 2}), Tensor()),
                    ShapeError);
    CHECK_THROWS_AS(nn::conv2d(Tensor::zeros({2, 3, 3}), Tensor::zeros({1, 2, 1, 1}), Tensor()),
                    ShapeError);
  }
}

TEST_SUITE("normalization") {
  TEST_CASE("training batch norm standardizes each channel") {
    Rng rng(5);
    const Tensor x = rand_tensor({4, 3, 5, 5}, rng, -3.0, 7.0);
    nn::BatchNorm bn(3);
    const Tensor y = bn.forward(x, nn::Mode::train);
    const std::size_t m = 4 * 25;
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0, ss = 0.0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) s += y[(n * 3 + c) * 25 + i];
      const double mu = s / m;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) ss += std::pow(y[(n * 3 + c) * 25 + i] - mu, 2);
      CHECK(std::abs(mu) <= 1e-8);
      // eps = 1e-5 shrinks the variance by var/(var+eps); the batch var here is O(1).
      CHECK(std::abs(ss / m - 1.0) <= 1e-4);
    }
  }

  TEST_CASE("running statistics use momentum 0.9 and the biased variance") {
    const Tensor x = Tensor::of({2, 1}, {1.0, 3.0});
    nn::BatchNorm bn(1);
    (void)bn.forward(x, nn::Mode::train);
    CHECK(bn.running_mean[0] == doctest::Approx(0.1 * 2.0));
    CHECK(bn.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0));
    const Tensor y = bn.forward(Tensor::of({1, 1}, {0.2}), nn::Mode::eval);
    CHECK(y[0] == doctest::Approx(0.0).epsilon(1e-4));
  }

  TEST_CASE("training mode needs two values per channel") {
    nn::BatchNorm bn(2);
    CHECK_THROWS_AS(bn.forward(Tensor::zeros({1, 2, 1, 1}), nn::Mode::train), ShapeError);
    CHECK_NOTHROW(bn.forward(Tensor::zeros({1, 2, 1, 1}), nn::Mode::eval));
  }

  TEST_CASE("batch norm gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(seed);
      Tensor x = rand_tensor({3, 2, 2, 2}, rng);
      Tensor g = rand_tensor({2}, rng, 0.5, 1.5);
      Tensor b = rand_tensor({2}, rng);
      Tensor rm = Tensor::zeros({2}), rv = Tensor::ones({2});
      expect_grad("batch_norm", [&] {
        return probe(nn::batch_norm(x, g, b, rm, rv, true, 0.9, 1e-5), seed);
      }, {x, g, b});
      Tensor x2 = rand_tensor({4, 3}, rng);
      Tensor g2 = rand_tensor({3}, rng), b2 = rand_tensor({3}, rng);
      Tensor rm2 = Tensor::zeros({3}), rv2 = Tensor::ones({3});
      expect_grad("batch_norm (n,c)", [&] {
        return probe(nn::batch_norm(x2, g2, b2, rm2, rv2, true, 0.9, 1e-5), seed);
      }, {x2, g2, b2});
      expect_grad("batch_norm eval", [&] {
        return probe(nn::batch_norm(x2, g2, b2, rm2, rv2, false, 0.9, 1e-5), seed);
      }, {x2, g2, b2});
    }
  }

  TEST_CASE("layer norm rows and gradients") {
    Rng rng(8);
    Tensor x = rand_tensor({2, 3, 6}, rng, -2.0, 5.0);
    Tensor g = Tensor::ones({6}), b = Tensor::zeros({6});
    const Tensor y = nn::layer_norm(x, g, b, 1e-5);
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < 6; ++i) s += y[r * 6 + i];
      CHECK(std::abs(s / 6) < 1e-10);
    }
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Tensor g2 = rand_tensor({6}, rng), b2 = rand_tensor({6}, rng);
      expect_grad("layer_norm", [&] { return probe(nn::layer_norm(x, g2, b2, 1e-5), seed); },
                  {x, g2, b2});
    }
    CHECK_THROWS_AS(nn::layer_norm(Tensor::zeros({2, 1}), Tensor::ones({1}), Tensor::zeros({1}), 1e-5),
                    ShapeError);
  }
}

TEST_SUITE("activations") {
  TEST_CASE("mish values and stability") {
    CHECK(nn::mish_scalar(0.0) == 0.0);
    CHECK(nn::mish_scalar(1.0) == doctest::Approx(0.8650983882673103));
    CHECK(nn::mish_scalar(-1.0) == doctest::Approx(-0.30340146137410895));
    CHECK(nn::mish_scalar(1000.0) == doctest::Approx(1000.0));
    CHECK(std::isfinite(nn::mish_scalar(-1000.0)));
    CHECK(std::abs(nn::mish_scalar(-1000.0)) < 1e-300);
    CHECK(nn::softplus(800.0) == doctest::Approx(800.0));
  }

  TEST_CASE("activation gradients") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      Tensor x = rand_tensor({3, 4}, rng, -4.0, 4.0);
      Tensor xr = testing::rand_away_from_zero({3, 4}, rng);
      expect_grad("mish", [&] { return probe(nn::mish(x), seed); }, {x});
      expect_grad("sigmoid", [&] { return probe(nn::sigmoid(x), seed); }, {x});
      expect_grad("tanh", [&] { return probe(nn::tanh_act(x), seed); }, {x});
      expect_grad("relu", [&] { return probe(nn::relu(xr), seed); }, {xr});
      expect_grad("softmax last", [&] { return probe(nn::softmax(x, 1), seed); }, {x});
      expect_grad("softmax first", [&] { return probe(nn::softmax(x, 0), seed); }, {x});
    }
  }

  TEST_CASE("softmax rows sum to one, also for extreme logits") {
    Rng rng(2);
    Tensor x = rand_tensor({2, 5, 7}, rng, -50.0, 50.0);
    x[3] = 1e9;
    x[4] = -1e9;
    const Tensor y = nn::softmax(x, 2);
    for (std::size_t r = 0; r < 10; ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < 7; ++i) s += y[r * 7 + i];
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_SUITE("pooling") {
  TEST_CASE("max and average pooling by hand") {
    const Tensor x = Tensor::of({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 6});
    const Tensor mx = nn::max_pool2d(x, 2, 2);
    CHECK(mx.shape() == Shape{1, 1, 1, 2});
    CHECK(mx[0] == 5);
    CHECK(mx[1] == 8);
    const Tensor av = nn::avg_pool2d(x, 2, 2);
    CHECK(av[0] == doctest::Approx(3.25));
    CHECK(av[1] == doctest::Approx(4.0));
    CHECK(nn::global_max_pool(x)[0] == 8);
    CHECK(nn::global_avg_pool(x)[0] == doctest::Approx(29.0 / 8));
  }

  TEST_CASE("channelwise pool gives per-pixel max then mean") {
    const Tensor x = Tensor::of({1, 3, 1, 2}, {1, -2, 4, 0, -3, 5});
    const Tensor p = nn::channelwise_pool(x);
    CHECK(p.shape() == Shape{1, 2, 1, 2});
    CHECK(p.at({0, 0, 0, 0}) == 4);
    CHECK(p.at({0, 0, 0, 1}) == 5);
    CHECK(p.at({0, 1, 0, 0}) == doctest::Approx(2.0 / 3));
    CHECK(p.at({0, 1, 0, 1}) == doctest::Approx(1.0));
  }

  TEST_CASE("pooling gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(seed);
      Tensor x = rand_tensor({2, 3, 4, 4}, rng);
      expect_grad("max_pool2d", [&] { return probe(nn::max_pool2d(x, 2, 2), seed); }, {x});
      expect_grad("avg_pool2d", [&] { return probe(nn::avg_pool2d(x, 3, 1), seed); }, {x});
      expect_grad("global_max", [&] { return probe(nn::global_max_pool(x), seed); }, {x});
      expect_grad("global_avg", [&] { return probe(nn::global_avg_pool(x), seed); }, {x});
      expect_grad("channelwise", [&] { return probe(nn::channelwise_pool(x), seed); }, {x});
    }
  }
}

TEST_SUITE("layers") {
  TEST_CASE("xavier uniform bound and zero biases") {
    Rng rng(4);
    nn::Conv2d conv(6, 10, 3, rng);
    const double a = std::sqrt(6.0 / (6 * 9 + 10 * 9));
    for (double v : conv.weight.data()) CHECK(std::abs(v) <= a);
    for (double v : conv.bias.data()) CHECK(v == 0.0);
    nn::Linear lin(5, 7, rng);
    const double al = std::sqrt(6.0 / 12);
    for (double v : lin.weight.data()) CHECK(std::abs(v) <= al);
  }

  TEST_CASE("parameter collection names and flags") {
    Rng rng(1);
    nn::ParamList list;
    nn::Conv2d(2, 3, 3, rng).collect("c", list);
    nn::Conv2d(2, 3, 1, rng, false).collect("p", list);
    nn::BatchNorm(3).collect("bn", list);
    REQUIRE(list.size() == 7);
    CHECK(list[0].name == "c.weight");
    CHECK(list[1].name == "c.bias");
    CHECK(list[2].name == "p.weight");
    CHECK(list[5].name == "bn.running_mean");
    CHECK(!list[5].trainable);
    CHECK(!list[6].trainable);
    CHECK(list[3].trainable);
  }

  TEST_CASE("linear applies to the last axis") {
    Rng rng(3);
    nn::Linear lin(4, 2, rng);
    Tensor x = rand_tensor({3, 5, 4}, rng);
    const Tensor y = lin.forward(x);
    CHECK(y.shape() == Shape{3, 5, 2});
    double ref = lin.bias[1];
    for (std::size_t i = 0; i < 4; ++i) ref += lin.weight.at({1, i}) * x.at({2, 3, i});
    CHECK(y.at({2, 3, 1}) == doctest::Approx(ref));
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      expect_grad("linear", [&] { return probe(lin.forward(x), seed); }, {x, lin.weight, lin.bias});
    }
  }
}
