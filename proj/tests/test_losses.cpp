#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bws/gradcheck.hpp"
#include "bws/losses.hpp"
#include "bws/rng.hpp"

using namespace bws;

namespace {

// Independent oracle: brute-force triple loop over classes and pixel pairs.
double crf_brute_force(const ProbMap& y, const MatrixXd& K) {
  const Index n = y.pixels();
  double s = 0.0;
  for (Index c = 0; c < y.c; ++c)
    for (Index a = 0; a < n; ++a)
      for (Index b = 0; b < n; ++b) s += y.v[c * n + a] * K(a, b) * (1.0 - y.v[c * n + b]);
  return s;
}

ProbMap random_simplex_map(Index c, Index h, Index w, Rng& rng) {
  ProbMap p{c, h, w, ArrayXd(c * h * w)};
  for (Index i = 0; i < h * w; ++i) {
    double z = 0;
    for (Index k = 0; k < c; ++k) {
      const double e = std::exp(rng.uniform(-2.0, 2.0));
      p.v[k * h * w + i] = e;
      z += e;
    }
    for (Index k = 0; k < c; ++k) p.v[k * h * w + i] /= z;
  }
  return p;
}

KernelMatrix random_kernel_matrix(Index h, Index w, Rng& rng) {
  Image img{1, h, w, ArrayXd(h * w)};
  for (Index i = 0; i < h * w; ++i) img.v[i] = rng.uniform();
  return gaussian_kernel(img, rng.uniform(1.0, 6.0), rng.uniform(0.05, 0.5));
}

}  // namespace

TEST_CASE("pce closed forms") {
  // one labeled pixel, perfect prediction
  ProbMap p{2, 1, 1, ArrayXd(2)};
  p.v << 1.0, 0.0;
  ScribbleMap ys{1, 1, {0}};
  CHECK(pce_loss(p, ys) == doctest::Approx(0.0).epsilon(1e-9));

  // one labeled pixel, uniform prediction: ln 2
  p.v << 0.5, 0.5;
  CHECK(pce_loss(p, ys) == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  // empty scribble set
  ScribbleMap none{1, 1, {kUnlabeled}};
  CHECK(pce_loss(p, none) == 0.0);

  // class id out of range
  ScribbleMap bad{1, 1, {7}};
  CHECK_THROWS_AS(pce_loss(p, bad), DomainError);
}

TEST_CASE("pce sums over labeled pixels; normalization is opt-in") {
  ProbMap p{2, 1, 2, ArrayXd(4)};
  p.v << 0.5, 0.5, 0.5, 0.5;  // class 0 plane, class 1 plane
  ScribbleMap ys{1, 2, {0, 1}};
  const double ln2 = std::log(2.0);
  CHECK(pce_loss(p, ys) == doctest::Approx(2 * ln2).epsilon(1e-12));
  CHECK(pce_loss(p, ys, true) == doctest::Approx(ln2).epsilon(1e-12));
}

TEST_CASE("kl closed forms") {
  LatentGaussian<double> q;
  q.mu = ArrayXd::Zero(3);
  q.logvar = ArrayXd::Zero(3);
  CHECK(kl_loss(q) == doctest::Approx(0.0).epsilon(1e-15));

  q.mu = ArrayXd::Constant(1, 1.0);
  q.logvar = ArrayXd::Zero(1);
  CHECK(kl_loss(q) == doctest::Approx(0.5).epsilon(1e-12));

  q.mu = ArrayXd::Zero(2);
  q.logvar = ArrayXd::Constant(2, 1.0);  // variance e
  CHECK(kl_loss(q) == doctest::Approx(std::exp(1.0) - 2.0).epsilon(1e-12));
}

TEST_CASE("kl matches a Monte Carlo estimate of E_q[log q - log p]") {
  const Index d = 4;
  const int n_samples = 100000;
  for (std::uint64_t seed : {11u, 22u, 33u, 44u, 55u}) {
    Rng rng(seed);
    LatentGaussian<double> q;
    q.mu = ArrayXd(d);
    q.logvar = ArrayXd(d);
    for (Index i = 0; i < d; ++i) {
      q.mu[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(1.0, 2.0);
      q.logvar[i] = rng.uniform(-1.0, 1.0);
    }
    double acc = 0.0;
    for (int s = 0; s < n_samples; ++s) {
      double term = 0.0;
      for (Index i = 0; i < d; ++i) {
        const double sigma2 = std::exp(q.logvar[i]);
        const double eps = rng.normal();
        const double z = q.mu[i] + std::sqrt(sigma2) * eps;
        term += -0.5 * q.logvar[i] - 0.5 * eps * eps + 0.5 * z * z;
      }
      acc += term;
    }
    const double mc = acc / n_samples;
    const double closed = kl_loss(q);
    CHECK(std::abs(mc - closed) / closed < 0.02);
  }
}

TEST_CASE("reconstruction loss closed forms") {
  Image x{1, 1, 2, ArrayXd(2)};
  x.v << 0.0, 1.0;
  Image same = x;
  CHECK(recon_loss(same, x) == 0.0);

  Image shifted = x;
  shifted.v += 1.0;
  CHECK(recon_loss(shifted, x) == doctest::Approx(1.0).epsilon(1e-15));

  Image swapped{1, 1, 2, ArrayXd(2)};
  swapped.v << 1.0, 0.0;
  CHECK(recon_loss(swapped, x) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gaussian kernel closed forms and invariants") {
  // two pixels at distance sigma_xy with identical intensity: exp(-1/2)
  Image x{1, 1, 2, ArrayXd(2)};
  x.v << 0.4, 0.4;
  KernelMatrix km = gaussian_kernel(x, 1.0, 0.1);
  CHECK(km.k(0, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
  CHECK(km.k(0, 0) == 0.0);
  CHECK(km.k(1, 1) == 0.0);

  // intensity gap vanishes in the large-sigma_int limit
  Image y{1, 1, 2, ArrayXd(2)};
  y.v << 0.0, 1.0;
  KernelMatrix wide = gaussian_kernel(y, 1.0, 1e9);
  CHECK(wide.k(0, 1) == doctest::Approx(std::exp(-0.5)).epsilon(1e-9));

  // symmetric, entries in [0,1]
  Rng rng(5);
  KernelMatrix r = random_kernel_matrix(6, 7, rng);
  CHECK((r.k - r.k.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(r.k.minCoeff() >= 0.0);
  CHECK(r.k.maxCoeff() <= 1.0);

  // cap is a resource error
  Image big{1, 8, 8, ArrayXd::Zero(64)};
  CHECK_THROWS_AS(gaussian_kernel(big, 1.0, 0.1, 63), ResourceError);
}

TEST_CASE("dense crf closed forms") {
  // single pixel: zero-diagonal kernel makes the loss vanish
  ProbMap p1{2, 1, 1, ArrayXd(2)};
  p1.v << 0.3, 0.7;
  KernelMatrix k1;
  k1.k = MatrixXd::Zero(1, 1);
  CHECK(dense_crf_loss(p1, k1) == 0.0);

  // two pixels, uniform probabilities: loss equals k
  const double kv = 0.37;
  ProbMap p2{2, 1, 2, ArrayXd::Constant(4, 0.5)};
  KernelMatrix k2;
  k2.k = MatrixXd::Zero(2, 2);
  k2.k(0, 1) = k2.k(1, 0) = kv;
  CHECK(dense_crf_loss(p2, k2) == doctest::Approx(kv).epsilon(1e-13));
  CHECK(dense_crf_loss(p2, k2) == doctest::Approx(crf_brute_force(p2, k2.k)).epsilon(1e-13));

  // identical one-hot predictions agree: zero pairwise cost
  ProbMap p3{2, 1, 2, ArrayXd(4)};
  p3.v << 1.0, 1.0, 0.0, 0.0;
  CHECK(dense_crf_loss(p3, k2) == 0.0);
}

TEST_CASE("dense crf equals the brute-force triple loop on 50 random instances") {
  for (int inst = 0; inst < 50; ++inst) {
    Rng rng = Rng(777).fork(inst);
    const Index h = 1 + Index(rng.integer(8));
    const Index w = 1 + Index(rng.integer(8));
    const Index c = 2 + Index(rng.integer(4));  // C <= 5
    ProbMap p = random_simplex_map(c, h, w, rng);
    KernelMatrix km = random_kernel_matrix(h, w, rng);
    const double fast = dense_crf_loss(p, km);
    const double slow = crf_brute_force(p, km.k);
    CHECK(std::abs(fast - slow) <= 1e-12 * std::max(1.0, std::abs(slow)));
  }
}

TEST_CASE("dense crf gradient equals K(1-2y) per class for symmetric K") {
  Rng rng(31);
  const Index h = 4, w = 4, c = 3, n = h * w;
  ProbMap p = random_simplex_map(c, h, w, rng);
  KernelMatrix km = random_kernel_matrix(h, w, rng);

  Tape<double> t;
  auto y = t.leaf({c, h, w}, p.v);
  auto K = std::make_shared<const MatrixXd>(km.k);
  auto loss = dense_crf_loss_graph(y, K);
  t.backward(loss);
  const ArrayXd& g = y.grad();
  for (Index cl = 0; cl < c; ++cl) {
    Eigen::VectorXd yc = p.v.segment(cl * n, n).matrix();
    Eigen::VectorXd want = km.k * (Eigen::VectorXd::Ones(n) - 2.0 * yc);
    Eigen::VectorXd got = g.segment(cl * n, n).matrix();
    CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("dense crf is invariant under simultaneous pixel permutation") {
  Rng rng(13);
  const Index h = 2, w = 3, c = 3, n = h * w;
  ProbMap p = random_simplex_map(c, h, w, rng);
  KernelMatrix km = random_kernel_matrix(h, w, rng);
  const double base = dense_crf_loss(p, km);

  std::vector<Index> perm(n);
  for (Index i = 0; i < n; ++i) perm[i] = i;
  for (Index i = n - 1; i > 0; --i) std::swap(perm[i], perm[Index(rng.integer(i + 1))]);

  ProbMap pp = p;
  KernelMatrix kp = km;
  for (Index cl = 0; cl < c; ++cl)
    for (Index i = 0; i < n; ++i) pp.v[cl * n + perm[i]] = p.v[cl * n + i];
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) kp.k(perm[i], perm[j]) = km.k(i, j);
  CHECK(dense_crf_loss(pp, kp) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("ce closed forms") {
  // perfect one-hot prediction: bounded by the log floor
  ProbMap p{4, 1, 1, ArrayXd(4)};
  p.v << 1.0, 0.0, 0.0, 0.0;
  LabelMap y{1, 1, {0}};
  CHECK(ce_loss(p, y) <= 1e-11);

  // uniform prediction over four classes: ln 4
  ProbMap u = make_uniform_probmap(4, 2, 2);
  LabelMap y4{2, 2, {0, 1, 2, 3}};
  CHECK(ce_loss(u, y4) == doctest::Approx(1.3862943611198906).epsilon(1e-12));

  // single pixel with probability 1/4 at the true class: ln 4
  ProbMap q{4, 1, 1, ArrayXd(4)};
  q.v << 0.25, 0.25, 0.25, 0.25;
  LabelMap y1{1, 1, {2}};
  CHECK(ce_loss(q, y1) == doctest::Approx(1.3862943611198906).epsilon(1e-12));

  // unlabeled marker in a dense map is a contract error
  LabelMap holes{1, 1, {kUnlabeled}};
  CHECK_THROWS_AS(ce_loss(q, holes), ContractError);
}

TEST_CASE("elbo weighting") {
  Rng rng(9);
  ProbMap p = random_simplex_map(3, 4, 4, rng);
  ScribbleMap ys{4, 4, std::vector<std::uint8_t>(16, kUnlabeled)};
  ys.v[3] = 1;
  ys.v[9] = 2;
  LatentGaussian<double> q;
  q.mu = ArrayXd::Constant(4, 0.3);
  q.logvar = ArrayXd::Constant(4, -0.2);
  Image x{1, 4, 4, ArrayXd(16)};
  for (Index i = 0; i < 16; ++i) x.v[i] = rng.uniform();
  Image xrec = x;
  xrec.v += 0.1;
  KernelMatrix km = random_kernel_matrix(4, 4, rng);

  // all weights zero: the objective is the pce term alone
  ElboValues z = elbo_objective(p, ys, q, xrec, x, km, LossWeights{0, 0, 0});
  CHECK(z.total == doctest::Approx(z.pce).epsilon(1e-15));

  // defaults match the published configuration
  LossWeights def;
  CHECK(def.alpha == 1e-3);
  CHECK(def.beta == 1e-1);
  CHECK(def.gamma == 1e-8);

  // linear in each weight: doubling gamma doubles the crf contribution
  ElboValues a = elbo_objective(p, ys, q, xrec, x, km, LossWeights{0.5, 0.25, 0.125});
  ElboValues b = elbo_objective(p, ys, q, xrec, x, km, LossWeights{0.5, 0.25, 0.25});
  CHECK(b.total - a.total == doctest::Approx(0.125 * a.crf).epsilon(1e-12));

  // component values are reported
  CHECK(a.total == doctest::Approx(a.pce + 0.5 * a.kl + 0.25 * a.recon + 0.125 * a.crf)
                       .epsilon(1e-12));

  // negative weights rejected
  CHECK_THROWS_AS(elbo_objective(p, ys, q, xrec, x, km, LossWeights{-1, 0, 0}), ContractError);
}

TEST_CASE("zero components give a zero objective") {
  ProbMap p{2, 1, 1, ArrayXd(2)};
  p.v << 1.0, 0.0;
  ScribbleMap ys{1, 1, {kUnlabeled}};
  LatentGaussian<double> q;
  q.mu = ArrayXd::Zero(2);
  q.logvar = ArrayXd::Zero(2);
  Image x{1, 1, 1, ArrayXd::Zero(1)};
  KernelMatrix km;
  km.k = MatrixXd::Zero(1, 1);
  ElboValues e = elbo_objective(p, ys, q, x, x, km, LossWeights{1, 1, 1});
  CHECK(e.total == 0.0);
}

TEST_CASE("every loss gradient matches finite differences on 10 seeds") {
  for (const auto& row : loss_gradchecks<double>(424242ull, 10)) {
    INFO(row.name);
    CHECK(row.max_rel_err < 1e-5);
  }
}
