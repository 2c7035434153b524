#pragma once

#include <memory>

#include "bws/nets.hpp"
#include "bws/params.hpp"
#include "bws/tensor.hpp"
#include "bws/types.hpp"

namespace bws {

struct LossWeights {
  double alpha = 1e-3;  // KL
  double beta = 1e-1;   // reconstruction
  double gamma = 1e-8;  // pairwise CRF

  void validate() const {
    for (double v : {alpha, beta, gamma})
      if (!(v >= 0.0) || !std::isfinite(v))
        throw ContractError("LossWeights: coefficients must be finite and non-negative");
  }
};

// Dense symmetric matrix of pairwise discontinuity costs with zero diagonal.
struct KernelMatrix {
  MatrixXd k;
  double sigma_xy = 0.0;
  double sigma_int = 0.0;

  Index n() const { return k.rows(); }
};

inline constexpr Index kKernelPixelCap = 4096;

// k_{a,b} = exp(-|p_a-p_b|^2 / 2 sxy^2 - |I_a-I_b|^2 / 2 sint^2), zero diagonal.
// Intensity distance runs over all image channels.
inline KernelMatrix gaussian_kernel(const Image& x, double sigma_xy, double sigma_int,
                                    Index pixel_cap = kKernelPixelCap) {
  if (!(sigma_xy > 0.0) || !(sigma_int > 0.0))
    throw ContractError("gaussian_kernel: bandwidths must be positive");
  const Index n = x.pixels();
  if (n > pixel_cap)
    throw ResourceError("gaussian_kernel: " + std::to_string(n) + " pixels exceed the cap of " +
                        std::to_string(pixel_cap) + "; subsample or use a crop");

  KernelMatrix km;
  km.sigma_xy = sigma_xy;
  km.sigma_int = sigma_int;
  km.k.resize(n, n);
  const double cxy = 1.0 / (2.0 * sigma_xy * sigma_xy);
  const double cint = 1.0 / (2.0 * sigma_int * sigma_int);

  ArrayXd rows(n), cols(n);
  for (Index i = 0; i < n; ++i) {
    rows[i] = double(i / x.w);
    cols[i] = double(i % x.w);
  }
  ArrayXd arg(n);
  for (Index b = 0; b < n; ++b) {
    arg = -cxy * ((rows - rows[b]).square() + (cols - cols[b]).square());
    for (Index ch = 0; ch < x.c; ++ch) {
      const auto plane = x.plane(ch);
      arg -= cint * (plane - plane[b]).square();
    }
    km.k.col(b) = arg.exp().matrix();
    km.k(b, b) = 0.0;
  }
  return km;
}

namespace losses_detail {

inline void check_plane_shape(const char* who, const Shape& s, Index c, Index h, Index w) {
  const bool ok4 = s.size() == 4 && s[0] == 1 && s[1] == c && s[2] == h && s[3] == w;
  const bool ok3 = s.size() == 3 && s[0] == c && s[1] == h && s[2] == w;
  if (!ok4 && !ok3)
    throw ShapeError(std::string(who) + ": probability map " + shape_str(s) +
                     " does not match [" + std::to_string(c) + "," + std::to_string(h) + "," +
                     std::to_string(w) + "]");
}

}  // namespace losses_detail

// ---------------------------------------------------------------------------
// Graph builders (differentiable). Value-level overloads below evaluate the
// same graphs on a throwaway tape.
// ---------------------------------------------------------------------------

// Partial cross-entropy over the scribbled pixels: -sum_{a in labeled}
// log(probs at the annotated class). Plain sum by default; `normalize`
// divides by the number of labeled pixels.
template <class S>
Var<S> pce_loss_graph(Var<S> probs, const ScribbleMap& ys, bool normalize = false) {
  const Shape& ps = probs.shape();
  const Index c = ps.size() == 4 ? ps[1] : ps[0];
  losses_detail::check_plane_shape("pce_loss", ps, c, ys.h, ys.w);
  const Index hw = ys.h * ys.w;

  ArrayX<S> onehot = ArrayX<S>::Zero(c * hw);
  Index labeled = 0;
  for (Index i = 0; i < hw; ++i) {
    const std::uint8_t cls = ys.v[i];
    if (cls == kUnlabeled) continue;
    if (cls >= c)
      throw DomainError("pce_loss: scribble class " + std::to_string(cls) +
                        " out of range for " + std::to_string(c) + " classes");
    onehot[cls * hw + i] = S(1);
    ++labeled;
  }
  auto flat = reshape(probs, {c, ys.h, ys.w});
  auto picked = vsum(mul(vlog(flat), probs.tape->leaf({c, ys.h, ys.w}, std::move(onehot))));
  S factor = S(-1);
  if (normalize && labeled > 0) factor = S(-1) / S(labeled);
  return scale(picked, factor);
}

// Closed-form KL divergence of a diagonal Gaussian from N(0, I):
// 1/2 sum_i (mu_i^2 + sigma_i^2 - log sigma_i^2 - 1).
template <class S>
Var<S> kl_loss_graph(Var<S> mu, Var<S> logvar) {
  if (mu.shape() != logvar.shape())
    throw ShapeError("kl_loss: mu " + shape_str(mu.shape()) + " vs logvar " +
                     shape_str(logvar.shape()));
  auto terms = add_const(sub(add(mul(mu, mu), vexp(logvar)), logvar), S(-1));
  return scale(vsum(terms), S(0.5));
}

// Mean squared reconstruction error.
template <class S>
Var<S> recon_loss_graph(Var<S> xrec, Var<S> x) {
  return sq_diff_mean(xrec, x);
}

// Pairwise discontinuity cost sum_c y_c^T K (1 - y_c) over all pixels.
template <class S>
Var<S> dense_crf_loss_graph(Var<S> probs, std::shared_ptr<const MatrixX<S>> K) {
  Var<S> y4 = probs;
  if (probs.shape().size() == 3) {
    Shape s = probs.shape();
    y4 = reshape(probs, {1, s[0], s[1], s[2]});
  }
  return crf_pairwise(y4, std::move(K));
}

// Dense cross-entropy: mean over all pixels of -log prob at the true class.
template <class S>
Var<S> ce_loss_graph(Var<S> probs, const LabelMap& y) {
  const Shape& ps = probs.shape();
  const Index c = ps.size() == 4 ? ps[1] : ps[0];
  losses_detail::check_plane_shape("ce_loss", ps, c, y.h, y.w);
  const Index hw = y.h * y.w;

  ArrayX<S> onehot = ArrayX<S>::Zero(c * hw);
  for (Index i = 0; i < hw; ++i) {
    const std::uint8_t cls = y.v[i];
    if (cls == kUnlabeled)
      throw ContractError("ce_loss: dense labels required, found unlabeled pixel " +
                          std::to_string(i));
    if (cls >= c)
      throw DomainError("ce_loss: class " + std::to_string(cls) + " out of range for " +
                        std::to_string(c) + " classes");
    onehot[cls * hw + i] = S(1);
  }
  auto flat = reshape(probs, {c, y.h, y.w});
  auto picked = vsum(mul(vlog(flat), probs.tape->leaf({c, y.h, y.w}, std::move(onehot))));
  return scale(picked, S(-1) / S(hw));
}

// Weighted training objective: pce + alpha kl + beta recon + gamma crf.
template <class S>
struct ElboGraph {
  Var<S> pce, kl, recon, crf, total;
};

template <class S>
ElboGraph<S> elbo_objective_graph(Var<S> probs, const ScribbleMap& ys, Var<S> mu, Var<S> logvar,
                                  Var<S> xrec, Var<S> x, std::shared_ptr<const MatrixX<S>> K,
                                  const LossWeights& w, bool normalize_pce = false) {
  w.validate();
  ElboGraph<S> e;
  e.pce = pce_loss_graph(probs, ys, normalize_pce);
  e.kl = kl_loss_graph(mu, logvar);
  e.recon = recon_loss_graph(xrec, x);
  e.crf = dense_crf_loss_graph(probs, std::move(K));
  e.total = add(add(e.pce, scale(e.kl, S(w.alpha))),
                add(scale(e.recon, S(w.beta)), scale(e.crf, S(w.gamma))));
  return e;
}

// ---------------------------------------------------------------------------
// Value-level evaluation
// ---------------------------------------------------------------------------

inline Var<double> probmap_leaf(Tape<double>& t, const ProbMap& p) {
  return t.leaf({p.c, p.h, p.w}, p.v);
}

inline double pce_loss(const ProbMap& probs, const ScribbleMap& ys, bool normalize = false) {
  Tape<double> t;
  return pce_loss_graph(probmap_leaf(t, probs), ys, normalize).value()[0];
}

inline double kl_loss(const LatentGaussian<double>& q) {
  if (q.mu.size() != q.logvar.size())
    throw ShapeError("kl_loss: dimension mismatch between mu and logvar");
  Tape<double> t;
  return kl_loss_graph(t.leaf({q.mu.size()}, q.mu), t.leaf({q.logvar.size()}, q.logvar))
      .value()[0];
}

inline double recon_loss(const Image& xrec, const Image& x) {
  if (xrec.c != x.c || xrec.h != x.h || xrec.w != x.w)
    throw ShapeError("recon_loss: image shapes differ");
  Tape<double> t;
  return sq_diff_mean(t.leaf({x.c, x.h, x.w}, xrec.v), t.leaf({x.c, x.h, x.w}, x.v)).value()[0];
}

inline double dense_crf_loss(const ProbMap& probs, const KernelMatrix& km) {
  if (probs.pixels() != km.n())
    throw ShapeError("dense_crf_loss: " + std::to_string(probs.pixels()) +
                     " pixels vs kernel of dimension " + std::to_string(km.n()));
  Tape<double> t;
  auto K = std::make_shared<const MatrixXd>(km.k);
  return dense_crf_loss_graph(probmap_leaf(t, probs), K).value()[0];
}

inline double ce_loss(const ProbMap& probs, const LabelMap& y) {
  Tape<double> t;
  return ce_loss_graph(probmap_leaf(t, probs), y).value()[0];
}

struct ElboValues {
  double pce = 0, kl = 0, recon = 0, crf = 0, total = 0;
};

inline ElboValues elbo_objective(const ProbMap& probs, const ScribbleMap& ys,
                                 const LatentGaussian<double>& q, const Image& xrec,
                                 const Image& x, const KernelMatrix& km, const LossWeights& w,
                                 bool normalize_pce = false) {
  Tape<double> t;
  auto mu = t.leaf({q.mu.size()}, q.mu);
  auto lv = t.leaf({q.logvar.size()}, q.logvar);
  auto K = std::make_shared<const MatrixXd>(km.k);
  auto e = elbo_objective_graph(probmap_leaf(t, probs), ys, mu, lv,
                                t.leaf({xrec.c, xrec.h, xrec.w}, xrec.v),
                                t.leaf({x.c, x.h, x.w}, x.v), K, w, normalize_pce);
  return ElboValues{e.pce.value()[0], e.kl.value()[0], e.recon.value()[0], e.crf.value()[0],
                    e.total.value()[0]};
}

}  // namespace bws
