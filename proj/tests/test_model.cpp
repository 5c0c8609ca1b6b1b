#include <doctest.h>

#include <cmath>
#include <set>

#include "chmffn/error.hpp"
#include "chmffn/grad_check.hpp"
#include "chmffn/model.hpp"
#include "chmffn/ops.hpp"
#include "chmffn/tape.hpp"
#include "support.hpp"

using namespace chmffn;
using testing::rand_tensor;
using testing::tiny_config;

namespace {

constexpr std::uint64_t kSeeds = 10;

Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x77aa55ULL);
  return sum(mul(y, rand_tensor(y.shape(), rng)));
}

std::vector<Tensor> params_of(const nn::ParamList& list) {
  std::vector<Tensor> out;
  for (const auto& p : list) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

void expect_grad(const std::string& name, const std::function<Tensor()>& f,
                 std::vector<Tensor> in, double tol) {
  const auto r = grad_check(f, std::move(in), 1e-6, tol);
  INFO(std::string(name) << ": max rel " << r.max_rel_error << " at " << r.worst);
  CHECK(r.passed);
}

struct Variant {
  const char* label;
  ModelConfig cfg;
};

std::vector<Variant> variants(ModelConfig base) {
  std::vector<Variant> out;
  out.push_back({"Full", base});
  ModelConfig a = base;
  a.use_msc = false;
  out.push_back({"A", a});
  ModelConfig b = base;
  b.use_dccsa = false;
  out.push_back({"B", b});
  ModelConfig c = base;
  c.use_stcfl = false;
  out.push_back({"C", c});
  ModelConfig d = base;
  d.use_afaf = false;
  out.push_back({"D", d});
  return out;
}

}  // namespace

TEST_SUITE("model config") {
  TEST_CASE("validation") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    CHECK(c.model_dim() == 6);
    c.patch = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.heads = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.bands = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.reduction = 16;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("diff mode strings") {
    CHECK(diff_mode_from_string(to_string(DiffMode::absolute)) == DiffMode::absolute);
    CHECK(diff_mode_from_string(to_string(DiffMode::signed_diff)) == DiffMode::signed_diff);
    CHECK_THROWS_AS(diff_mode_from_string("bogus"), ConfigError);
  }
}

TEST_SUITE("token layout") {
  TEST_CASE("tokens and maps round-trip in row-major pixel order") {
    Rng rng(1);
    const Tensor map = rand_tensor({2, 4, 3, 3}, rng);
    const Tensor tok = map_to_tokens(map);
    CHECK(tok.shape() == Shape{2, 9, 4});
    CHECK(tok.at({1, 5, 2}) == map.at({1, 2, 1, 2}));
    CHECK(max_abs_diff(tokens_to_map(tok, 3), map) == 0.0);
    CHECK_THROWS_AS(tokens_to_map(tok, 4), ShapeError);
  }
}

TEST_SUITE("model shapes") {
  TEST_CASE("every variant follows its shape table") {
    ModelConfig base = tiny_config(3);
    base.patch = 5;
    base.bands = 4;
    for (const auto& v : variants(base)) {
      INFO("variant " << v.label);
      ChmffnModel m(v.cfg);
      const std::size_t b = 3, p = 5, c = v.cfg.base_channels, d = v.cfg.model_dim();
      Rng rng(9);
      const Tensor p1 = rand_tensor({b, 4, p, p}, rng), p2 = rand_tensor({b, 4, p, p}, rng);
      const PairTrace t = m.forward_trace(p1, p2, nn::Mode::train);
      CHECK(t.t1.rf.shape() == Shape{b, c, p, p});
      CHECK(t.t1.ef.shape() == Shape{b, d, p, p});
      CHECK(t.t2.df.shape() == Shape{b, d, p, p});
      CHECK(t.f1.shape() == Shape{b, d, p, p});
      CHECK(t.f2.shape() == Shape{b, d, p, p});
      CHECK(t.f3.shape() == Shape{b, d, p, p});
      CHECK(t.stcfl.o1.shape() == Shape{b, d, p, p});
      CHECK(t.stcfl.o2.shape() == Shape{b, 2 * d, p, p});
      CHECK(t.stcfl.o3.shape() == Shape{b, d, p, p});
      const std::size_t fused = v.cfg.use_afaf ? 6 * d : 4 * d;
      CHECK(t.fused.shape() == Shape{b, fused, p, p});
      REQUIRE(t.probs.shape() == Shape{b, 2});
      for (std::size_t i = 0; i < b; ++i) {
        CHECK(std::abs(t.probs.at({i, 0}) + t.probs.at({i, 1}) - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("multiscale off narrows the model dimension") {
    ModelConfig c = tiny_config();
    c.use_msc = false;
    CHECK(c.model_dim() == 2);
    ChmffnModel m(c);
    CHECK(m.subnet.embed.convs.size() == 1);
    CHECK_FALSE(ChmffnModel(tiny_config()).subnet.embed.convs.size() == 1);
  }

  TEST_CASE("mismatched inputs are rejected") {
    ChmffnModel m(tiny_config());
    Rng rng(2);
    CHECK_THROWS_AS(m.forward_pair(rand_tensor({2, 2, 3, 3}, rng), rand_tensor({3, 2, 3, 3}, rng),
                                   nn::Mode::train),
                    ShapeError);
    CHECK_THROWS_AS(m.forward_pair(rand_tensor({2, 3, 3, 3}, rng), rand_tensor({2, 3, 3, 3}, rng),
                                   nn::Mode::train),
                    ShapeError);
  }
}

TEST_SUITE("model parameters") {
  TEST_CASE("names are unique and construction is seeded") {
    ChmffnModel a(tiny_config(5)), b(tiny_config(5)), c(tiny_config(6));
    const auto na = a.named_tensors(), nb = b.named_tensors(), nc = c.named_tensors();
    REQUIRE(na.size() == nb.size());
    std::set<std::string> names;
    bool any_diff = false;
    for (std::size_t i = 0; i < na.size(); ++i) {
      names.insert(na[i].name);
      CHECK(na[i].name == nb[i].name);
      CHECK(na[i].trainable == nb[i].trainable);
      CHECK(max_abs_diff(na[i].tensor, nb[i].tensor) == 0.0);
      if (na[i].trainable && max_abs_diff(na[i].tensor, nc[i].tensor) > 0.0) any_diff = true;
      if (na[i].name.find("running") != std::string::npos) CHECK_FALSE(na[i].trainable);
    }
    CHECK(names.size() == na.size());
    CHECK(any_diff);
    CHECK(a.parameters().size() < na.size());
  }

  TEST_CASE("dates share one parameter set") {
    // Siamese weights: swapping dates flips signed differences and leaves
    // absolute differences unchanged.
    Rng rng(4);
    const Tensor p1 = rand_tensor({2, 2, 3, 3}, rng), p2 = rand_tensor({2, 2, 3, 3}, rng);
    for (nn::Mode mode : {nn::Mode::train, nn::Mode::eval}) {
      ChmffnModel m(tiny_config(1));
      const PairTrace ab = m.forward_trace(p1, p2, mode);
      const PairTrace ba = m.forward_trace(p2, p1, mode);
      CHECK(max_abs_diff(ab.f1, scale(ba.f1, -1.0)) < 1e-10);
      CHECK(max_abs_diff(ab.f2, scale(ba.f2, -1.0)) < 1e-10);
      CHECK(max_abs_diff(ab.f3, scale(ba.f3, -1.0)) < 1e-10);
      ModelConfig ac = tiny_config(1);
      ac.diff_mode = DiffMode::absolute;
      ChmffnModel ma(ac);
      CHECK(max_abs_diff(ma.forward_pair(p1, p2, mode), ma.forward_pair(p2, p1, mode)) < 1e-10);
    }
  }

  TEST_CASE("eval-mode output of a sample does not depend on its batch") {
    ChmffnModel m(tiny_config(2));
    Rng rng(8);
    const Tensor p1 = rand_tensor({4, 2, 3, 3}, rng), p2 = rand_tensor({4, 2, 3, 3}, rng);
    NoGradGuard guard;
    const Tensor all = m.forward_pair(p1, p2, nn::Mode::eval);
    const Tensor one = m.forward_pair(slice(p1, 0, 2, 1), slice(p2, 0, 2, 1), nn::Mode::eval);
    CHECK(std::abs(all.at({2, 1}) - one.at({0, 1})) < 1e-12);
  }
}

TEST_SUITE("bce loss") {
  TEST_CASE("value, clamping and errors") {
    const Tensor probs = Tensor::of({2, 2}, {0.2, 0.8, 0.9, 0.1});
    const double want = -(std::log(0.8) + std::log(0.9)) / 2.0;
    CHECK(bce_loss(probs, {1, 0}).item() == doctest::Approx(want).epsilon(1e-14));
    const Tensor sure = Tensor::of({1, 2}, {1.0, 0.0});
    CHECK(bce_loss(sure, {1}).item() == doctest::Approx(-std::log(1e-12)));
    CHECK(std::isfinite(bce_loss(sure, {1}).item()));
    CHECK_THROWS_AS(bce_loss(probs, {1}), ShapeError);
    CHECK_THROWS_AS(bce_loss(Tensor::zeros({2, 3}), {0, 1}), ShapeError);
  }

  TEST_CASE("gradient") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng rng(seed);
      Tensor p = uniform_tensor({4, 2}, 0.05, 0.95, rng);
      const std::vector<int> labels{1, 0, 0, 1};
      expect_grad("bce", [&] { return bce_loss(p, labels); }, {p}, 1e-4);
    }
  }
}

TEST_SUITE("block gradients") {
  TEST_CASE("residual block") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng rng(seed);
      ResidualBlock blk(2, 3, rng);
      Tensor x = rand_tensor({2, 2, 3, 3}, rng);
      nn::ParamList ps;
      blk.collect("res", ps);
      auto in = params_of(ps);
      in.push_back(x);
      expect_grad("residual", [&] { return probe(blk.forward(x, nn::Mode::train), seed); }, in,
                  1e-4);
    }
  }

  TEST_CASE("multiscale embedding") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng rng(seed);
      MultiscaleEmbed emb(2, true, 3, rng);
      Tensor x = rand_tensor({2, 2, 3, 3}, rng);
      nn::ParamList ps;
      emb.collect("emb", ps);
      auto in = params_of(ps);
      in.push_back(x);
      expect_grad("embed", [&] { return probe(emb.forward(x, nn::Mode::train), seed); }, in, 1e-4);
    }
  }

  TEST_CASE("DCCSA") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng rng(seed);
      Dccsa blk(4, 2, rng);
      Tensor f = rand_tensor({2, 4, 3, 3}, rng), skip = rand_tensor({2, 4, 3, 3}, rng);
      nn::ParamList ps;
      blk.collect("dccsa", ps);
      auto in = params_of(ps);
      in.push_back(f);
      in.push_back(skip);
      expect_grad("dccsa", [&] { return probe(blk.forward(f, skip), seed); }, in, 1e-4);
    }
  }

  TEST_CASE("STCFL") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng rng(seed);
      Stcfl blk(3, rng);
      Tensor f1 = rand_tensor({2, 3, 3, 3}, rng), f2 = rand_tensor({2, 3, 3, 3}, rng);
      Tensor f3 = rand_tensor({2, 3, 3, 3}, rng);
      nn::ParamList ps;
      blk.collect("stcfl", ps);
      auto in = params_of(ps);
      in.insert(in.end(), {f1, f2, f3});
      expect_grad("stcfl",
                  [&] {
                    const StcflOutputs o = blk.forward(f1, f2, f3, nn::Mode::train);
                    return add(add(probe(o.o1, seed), probe(o.o2, seed + 1)), probe(o.o3, seed + 2));
                  },
                  in, 1e-4);
    }
  }

  TEST_CASE("AFAF") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng rng(seed);
      Afaf blk(2, 2, rng);
      Tensor s1 = rand_tensor({3, 2, 3, 3}, rng), s2 = rand_tensor({3, 4, 3, 3}, rng);
      Tensor s3 = rand_tensor({3, 2, 3, 3}, rng);
      nn::ParamList ps;
      blk.collect("afaf", ps);
      auto in = params_of(ps);
      in.insert(in.end(), {s1, s2, s3});
      expect_grad("afaf", [&] { return probe(blk.forward(s1, s2, s3, nn::Mode::train), seed); }, in,
                  1e-4);
    }
  }

  TEST_CASE("AFAF weights lie in (0,1) and gate every branch") {
    Rng rng(3);
    Afaf blk(2, 2, rng);
    const Tensor s1 = rand_tensor({2, 2, 3, 3}, rng), s2 = rand_tensor({2, 4, 3, 3}, rng);
    const Tensor s3 = rand_tensor({2, 2, 3, 3}, rng);
    Tensor w;
    const Tensor out = blk.forward(s1, s2, s3, nn::Mode::train, &w);
    CHECK(out.shape() == Shape{2, 12, 3, 3});
    REQUIRE(w.shape() == Shape{2, 4, 1, 1});
    for (double v : w.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
    // The middle block of the output is s2 scaled per channel by w.
    CHECK(out.at({1, 4 + 3, 2, 1}) == doctest::Approx(s2.at({1, 3, 2, 1}) * w.at({1, 3, 0, 0})));
  }

  TEST_CASE("classifier head") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
      Rng rng(seed);
      ClassifierHead head(6, 4, rng);
      Tensor x = rand_tensor({2, 6, 3, 3}, rng);
      nn::ParamList ps;
      head.collect("head", ps);
      auto in = params_of(ps);
      in.push_back(x);
      expect_grad("head", [&] { return probe(head.forward(x), seed); }, in, 1e-4);
    }
  }

  TEST_CASE("subnetwork") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      ChmffnModel m(tiny_config(seed));
      Rng rng(seed + 100);
      Tensor x = rand_tensor({2, 2, 3, 3}, rng);
      nn::ParamList ps;
      m.subnet.collect("subnet", ps);
      auto in = params_of(ps);
      in.push_back(x);
      expect_grad("subnet",
                  [&] {
                    const SubnetworkFeatures f = m.subnetwork_forward(x, nn::Mode::train);
                    return add(add(probe(f.rf, seed), probe(f.ef, seed + 1)), probe(f.df, seed + 2));
                  },
                  in, 1e-4);
    }
  }

  TEST_CASE("full forward pair and loss, every variant") {
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
      for (const auto& v : variants(tiny_config(seed))) {
        ChmffnModel m(v.cfg);
        Rng rng(seed + 1000);
        Tensor p1 = rand_tensor({2, 2, 3, 3}, rng), p2 = rand_tensor({2, 2, 3, 3}, rng);
        auto in = m.parameters();
        in.push_back(p1);
        in.push_back(p2);
        expect_grad(std::string("end-to-end ") + v.label + " seed " + std::to_string(seed),
                    [&] { return bce_loss(m.forward_pair(p1, p2, nn::Mode::train), {1, 0}); }, in,
                    1e-3);
      }
    }
  }
}
