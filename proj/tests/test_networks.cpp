#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "bws/gradcheck.hpp"
#include "bws/nets.hpp"
#include "bws/params.hpp"

using namespace bws;

namespace {

ArrayXd random_image(Index n, Rng& rng) {
  ArrayXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.uniform();
  return v;
}

void check_simplex(const ArrayXd& probs, Index n, Index c, Index hw) {
  CHECK((probs >= 0.0).all());
  for (Index i = 0; i < n; ++i)
    for (Index s = 0; s < hw; ++s) {
      double sum = 0;
      for (Index k = 0; k < c; ++k) sum += probs[i * c * hw + k * hw + s];
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_THROWS_AS((UNetConfig{1, 4, 8, 0}.validate()), ContractError);
  CHECK_THROWS_AS((UNetConfig{1, 4, 2, 2}.validate()), ContractError);
  CHECK_THROWS_AS((UNetConfig{1, 1, 8, 2}.validate()), ContractError);
  GeneratorConfig g;
  g.height = 66;  // not divisible by 2^depth
  CHECK_THROWS_AS(g.validate(), ContractError);
}

TEST_CASE("encode_e1 shape contract and determinism") {
  Rng rng(3);
  GeneratorConfig cfg;  // d=16, 64x64 defaults
  Generator<double> gen = Generator<double>::init(cfg, rng);
  GraphContext<double> g(gen.params);
  Rng ir(17);
  auto x = g.c({1, 1, 64, 64}, random_image(64 * 64, ir));
  auto [mu, logvar] = encode_e1(g, cfg, x);
  CHECK(mu.shape() == Shape{1, 16});
  CHECK(logvar.shape() == Shape{1, 16});
  CHECK(mu.value().isFinite().all());
  CHECK(logvar.value().isFinite().all());

  // identical input, fresh graph: identical outputs
  GraphContext<double> g2(gen.params);
  Rng ir2(17);
  auto [mu2, lv2] = encode_e1(g2, cfg, g2.c({1, 1, 64, 64}, random_image(64 * 64, ir2)));
  CHECK((mu.value() == mu2.value()).all());
  CHECK((logvar.value() == lv2.value()).all());

  // wrong extent
  CHECK_THROWS_AS(encode_e1(g2, cfg, g2.c({1, 1, 32, 32}, ArrayXd::Zero(32 * 32))), ShapeError);
}

TEST_CASE("sample_z reparameterization") {
  ParamStore<double> none;

  // degenerate variance: z collapses to mu
  {
    GraphContext<double> g(none);
    auto mu = g.c({1, 2}, {0.7, -0.3});
    auto lv = g.c({1, 2}, {-1e9, -1e9});  // clamped at the floor
    Rng rng(1);
    auto z = sample_z(g, mu, lv, rng);
    CHECK((z.value() - mu.value()).abs().maxCoeff() < 1e-4);
  }

  // unit Gaussian with a pinned draw is the identity transform
  {
    GraphContext<double> g(none);
    auto mu = g.c({1, 2}, {0.0, 0.0});
    auto lv = g.c({1, 2}, {0.0, 0.0});
    auto sigma = vexp(scale(clamp_min(lv, kLogVarFloor), 0.5));
    auto z = add(mu, mul(sigma, g.c({1, 2}, {1.0, -1.0})));
    CHECK(z.value()[0] == doctest::Approx(1.0));
    CHECK(z.value()[1] == doctest::Approx(-1.0));
  }

  // Monte Carlo: sample mean approaches mu within 3 sigma / sqrt(n)
  {
    const int n = 100000;
    const double mu_val = 0.8, logvar_val = -0.4;
    Rng rng(42);
    double acc = 0;
    for (int i = 0; i < n; ++i) {
      GraphContext<double> g(none);
      auto z = sample_z(g, g.c({1, 1}, {mu_val}), g.c({1, 1}, {logvar_val}), rng);
      acc += z.value()[0];
    }
    const double sigma = std::exp(0.5 * logvar_val);
    CHECK(std::abs(acc / n - mu_val) < 3.0 * sigma / std::sqrt(double(n)));
  }
}

TEST_CASE("decode_d1 shape contract and determinism") {
  Rng rng(4);
  GeneratorConfig cfg;
  Generator<double> gen = Generator<double>::init(cfg, rng);
  GraphContext<double> g(gen.params);
  Rng zr(5);
  ArrayXd zv(16);
  for (Index i = 0; i < 16; ++i) zv[i] = zr.normal();
  auto xrec = decode_d1(g, cfg, g.c({1, 16}, zv));
  CHECK(xrec.shape() == Shape{1, 1, 64, 64});
  CHECK(xrec.value().isFinite().all());

  GraphContext<double> g2(gen.params);
  auto xrec2 = decode_d1(g2, cfg, g2.c({1, 16}, zv));
  CHECK((xrec.value() == xrec2.value()).all());
}

TEST_CASE("decode_d2 emits channel-simplex maps of the right shape") {
  Rng rng(6);
  GeneratorConfig cfg;  // C=4
  Generator<double> gen = Generator<double>::init(cfg, rng);
  GraphContext<double> g(gen.params);
  Rng ir(7);
  auto x = g.c({1, 1, 64, 64}, random_image(64 * 64, ir));
  auto feats = encode_e2(g, cfg, x);
  ArrayXd zv(16);
  for (Index i = 0; i < 16; ++i) zv[i] = ir.normal();
  auto probs = decode_d2(g, cfg, feats, g.c({1, 16}, zv));
  CHECK(probs.shape() == Shape{1, 4, 64, 64});
  check_simplex(probs.value(), 1, 4, 64 * 64);
}

TEST_CASE("seg_forward dropout semantics") {
  Rng rng(8);
  UNetConfig cfg{1, 4, 8, 2, 0.0};  // rate 0
  SegNet<double> net = SegNet<double>::init(cfg, rng);
  GraphContext<double> g(net.params);
  Rng ir(9);
  ArrayXd xv = random_image(64 * 64, ir);
  auto x = g.c({1, 1, 64, 64}, xv);
  Rng d1(11);
  auto with_flag = seg_forward(g, cfg, x, true, &d1);
  auto without = seg_forward(g, cfg, g.c({1, 1, 64, 64}, xv), false, nullptr);
  CHECK((with_flag.value() == without.value()).all());

  // fixed seed, dropout active: reproducible
  UNetConfig cfgd{1, 4, 8, 2, 0.3};
  Rng rng2(8);
  SegNet<double> netd = SegNet<double>::init(cfgd, rng2);
  auto& headw = netd.params.at("w.head.w").value;  // zero-init head would mask dropout
  for (Index i = 0; i < headw.size(); ++i) headw[i] = rng2.normal();
  auto run = [&](std::uint64_t seed) {
    GraphContext<double> gc(netd.params);
    Rng dr(seed);
    return ArrayXd(seg_forward(gc, cfgd, gc.c({1, 1, 64, 64}, xv), true, &dr).value());
  };
  CHECK((run(21) == run(21)).all());
  bool same = (run(21) == run(22)).all();
  CHECK(!same);
}

TEST_CASE("untrained network with zero-initialized head is exactly uniform") {
  Rng rng(10);
  UNetConfig cfg{1, 4, 8, 2, 0.1};
  SegNet<double> net = SegNet<double>::init(cfg, rng);
  GraphContext<double> g(net.params);
  Rng ir(12);
  auto probs = seg_forward(g, cfg, g.c({1, 1, 32, 32}, random_image(32 * 32, ir)), false, nullptr);
  CHECK((probs.value() == 0.25).all());
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(14);
  GeneratorConfig cfg;
  cfg.base = 8;
  cfg.height = 16;
  cfg.width = 16;
  Generator<double> gen = Generator<double>::init(cfg, rng);
  const auto path = std::filesystem::temp_directory_path() / "bws_ckpt_test.bin";
  save_checkpoint(gen.params, path);
  ParamStore<double> loaded = load_checkpoint<double>(path);
  CHECK(loaded == gen.params);

  Generator<double> back = Generator<double>::from_params(std::move(loaded));
  CHECK(back.cfg.latent == cfg.latent);
  CHECK(back.cfg.height == 16);

  // corruption is detected by the trailing CRC
  std::string data = read_file(path);
  data[data.size() / 2] ^= 0x40;
  write_file_atomic(path, data);
  CHECK_THROWS_AS(load_checkpoint<double>(path), ParseError);
  std::filesystem::remove(path);
}

TEST_CASE("backbone gradients through a dropout-active pass match finite differences") {
  auto row = seg_gradcheck<double>(31337ull, 2);
  INFO(row.name);
  CHECK(row.max_rel_err < 1e-4);
}

TEST_CASE("stage-1 generator gradients match finite differences") {
  auto row = stage1_gradcheck<double>(1234ull, 1);
  INFO(row.name);
  CHECK(row.max_rel_err < 1e-4);
}
