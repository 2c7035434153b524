#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bws/losses.hpp"
#include "bws/nets.hpp"
#include "bws/rng.hpp"
#include "bws/tensor.hpp"

namespace bws {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

namespace gradcheck_detail {

template <class S>
ArrayX<S> random_array(Index n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  ArrayX<S> a(n);
  for (Index i = 0; i < n; ++i) a[i] = static_cast<S>(rng.uniform(lo, hi));
  return a;
}

// Pushes values away from a kink so a central difference stays two-sided.
template <class S>
void avoid_kink(ArrayX<S>& a, S at, S margin) {
  for (Index i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - at) < margin) a[i] = at + (a[i] >= at ? margin : -margin);
}

}  // namespace gradcheck_detail

// Checks one analytic gradient against central finite differences. The graph
// builder receives leaf inputs and must return a scalar Var; `wrt` selects
// which input the gradient is taken with respect to.
template <class S>
double check_gradient(const std::vector<Shape>& shapes, const std::vector<ArrayX<S>>& inputs,
                      const std::function<Var<S>(Tape<S>&, std::vector<Var<S>>&)>& build,
                      size_t wrt, S eps = S(1e-6)) {
  Tape<S> tape;
  std::vector<Var<S>> vars;
  vars.reserve(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.leaf(shapes[i], inputs[i]));
  Var<S> loss = build(tape, vars);
  tape.backward(loss);
  ArrayX<S> analytic = tape.grad_or_zero(vars[wrt].id);

  auto f = [&](const ArrayX<S>& x) -> S {
    Tape<S> t2;
    std::vector<Var<S>> vs;
    for (size_t i = 0; i < inputs.size(); ++i)
      vs.push_back(t2.leaf(shapes[i], i == wrt ? x : inputs[i]));
    return build(t2, vs).value()[0];
  };
  ArrayX<S> numeric = finite_difference_grad(f, inputs[wrt], eps);
  return static_cast<double>(max_rel_err(analytic, numeric));
}

// Gradient checks for every recorded primitive, on randomized small shapes.
// Each op is probed through a random linear functional so the upstream
// gradient is non-degenerate.
template <class S = double>
std::vector<GradCheckEntry> primitive_gradchecks(std::uint64_t seed, int instances = 10) {
  using gradcheck_detail::avoid_kink;
  using gradcheck_detail::random_array;
  using Build = std::function<Var<S>(Tape<S>&, std::vector<Var<S>>&)>;

  std::vector<GradCheckEntry> table;
  auto run = [&](const std::string& name, const std::vector<Shape>& shapes,
                 const std::function<void(std::vector<ArrayX<S>>&, Rng&)>& fill,
                 const Build& build, size_t n_wrt) {
    double worst = 0.0;
    for (int k = 0; k < instances; ++k) {
      Rng rng = Rng(seed).fork(Rng::mix(Rng::tag(name.c_str()), k));
      std::vector<ArrayX<S>> inputs;
      for (const Shape& sh : shapes) inputs.push_back(random_array<S>(numel(sh), rng));
      fill(inputs, rng);
      for (size_t w = 0; w < n_wrt; ++w)
        worst = std::max(worst, check_gradient<S>(shapes, inputs, build, w));
    }
    table.push_back({name, worst});
  };

  auto probe = [](Tape<S>& t, Var<S> y, Rng& rng) {
    ArrayX<S> r = random_array<S>(numel(y.shape()), rng);
    return vsum(mul(y, t.leaf(y.shape(), r)));
  };
  auto nothing = [](std::vector<ArrayX<S>>&, Rng&) {};

  const Shape s4{2, 3, 4, 4};

  run("add", {s4, s4}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 1);
        return probe(t, add(v[0], v[1]), r);
      },
      2);
  run("sub", {s4, s4}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 2);
        return probe(t, sub(v[0], v[1]), r);
      },
      2);
  run("mul", {s4, s4}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 3);
        return probe(t, mul(v[0], v[1]), r);
      },
      2);
  run("scale", {s4}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 4);
        return probe(t, scale(v[0], S(-1.7)), r);
      },
      1);
  run("add_const", {s4}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 5);
        return probe(t, add_const(v[0], S(0.4)), r);
      },
      1);
  run("clamp_min", {s4},
      [](std::vector<ArrayX<S>>& in, Rng&) { avoid_kink<S>(in[0], S(0.1), S(1e-3)); },
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 6);
        return probe(t, clamp_min(v[0], S(0.1)), r);
      },
      1);
  run("exp", {s4}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 7);
        return probe(t, vexp(v[0]), r);
      },
      1);
  run("log", {s4},
      [](std::vector<ArrayX<S>>& in, Rng&) { in[0] = in[0].abs() + S(0.2); },
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 8);
        return probe(t, vlog(v[0]), r);
      },
      1);
  run("relu", {s4},
      [](std::vector<ArrayX<S>>& in, Rng&) { avoid_kink<S>(in[0], S(0), S(1e-3)); },
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 9);
        return probe(t, relu(v[0]), r);
      },
      1);
  run("linear", {{3, 5}, {4, 5}, {4}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 10);
        return probe(t, linear(v[0], v[1], v[2]), r);
      },
      3);
  run("conv2d_3x3", {{2, 2, 6, 6}, {3, 2, 3, 3}, {3}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 11);
        return probe(t, conv2d(v[0], v[1], v[2]), r);
      },
      3);
  run("conv2d_1x1", {{1, 3, 4, 4}, {2, 3, 1, 1}, {2}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 12);
        return probe(t, conv2d(v[0], v[1], v[2]), r);
      },
      3);
  run("max_pool2", {{2, 2, 6, 8}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 13);
        return probe(t, max_pool2(v[0]), r);
      },
      1);
  run("upsample2", {{2, 2, 3, 4}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 14);
        return probe(t, upsample2(v[0]), r);
      },
      1);
  run("concat_c", {{2, 2, 3, 3}, {2, 3, 3, 3}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 15);
        return probe(t, concat_c(v[0], v[1]), r);
      },
      2);
  run("softmax_c", {{2, 4, 3, 3}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 16);
        return probe(t, softmax_c(v[0]), r);
      },
      1);
  run("dropout", {{2, 2, 4, 4}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng mr(seed ^ 17);
        ArrayX<S> mask(numel(v[0].shape()));
        for (Index i = 0; i < mask.size(); ++i) mask[i] = mr.uniform() < 0.7 ? S(1) : S(0);
        Rng r(seed ^ 18);
        return probe(t, dropout_masked(v[0], mask, S(0.7)), r);
      },
      1);
  run("sum", {s4}, nothing,
      [&](Tape<S>&, std::vector<Var<S>>& v) { return vsum(v[0]); }, 1);
  run("mean", {s4}, nothing,
      [&](Tape<S>&, std::vector<Var<S>>& v) { return vmean(v[0]); }, 1);
  run("sq_diff_mean", {s4, s4}, nothing,
      [&](Tape<S>&, std::vector<Var<S>>& v) { return sq_diff_mean(v[0], v[1]); }, 2);
  run("reshape", {{2, 8}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 19);
        return probe(t, reshape(v[0], {4, 2, 2, 1}), r);
      },
      1);
  run("broadcast_hw", {{2, 3}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 20);
        return probe(t, broadcast_hw(v[0], 4, 5), r);
      },
      1);
  run("crop_hw", {{1, 2, 6, 6}}, nothing,
      [&](Tape<S>& t, std::vector<Var<S>>& v) {
        Rng r(seed ^ 21);
        return probe(t, crop_hw(v[0], 1, 2, 3, 3), r);
      },
      1);
  run("crf_pairwise", {{1, 3, 3, 3}},
      [](std::vector<ArrayX<S>>& in, Rng&) { in[0] = in[0].abs() * S(0.3); },
      [&](Tape<S>&, std::vector<Var<S>>& v) {
        Rng kr(seed ^ 22);
        auto K = std::make_shared<MatrixX<S>>(9, 9);
        for (Index i = 0; i < 9; ++i)
          for (Index j = 0; j <= i; ++j) {
            S val = i == j ? S(0) : static_cast<S>(kr.uniform());
            (*K)(i, j) = val;
            (*K)(j, i) = val;
          }
        return crf_pairwise(v[0], std::shared_ptr<const MatrixX<S>>(K));
      },
      1);

  return table;
}

namespace gradcheck_detail {

inline ScribbleMap random_scribbles(Index h, Index w, Index classes, Rng& rng) {
  ScribbleMap ys{h, w, std::vector<std::uint8_t>(h * w, kUnlabeled)};
  for (Index i = 0; i < h * w; ++i)
    if (rng.uniform() < 0.3) ys.v[i] = static_cast<std::uint8_t>(rng.integer(classes));
  return ys;
}

inline LabelMap random_labels(Index h, Index w, Index classes, Rng& rng) {
  LabelMap y{h, w, std::vector<std::uint8_t>(h * w, 0)};
  for (Index i = 0; i < h * w; ++i) y.v[i] = static_cast<std::uint8_t>(rng.integer(classes));
  return y;
}

template <class S>
std::shared_ptr<const MatrixX<S>> random_kernel(Index n, Rng& rng) {
  auto K = std::make_shared<MatrixX<S>>(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j <= i; ++j) {
      const S v = i == j ? S(0) : static_cast<S>(rng.uniform());
      (*K)(i, j) = v;
      (*K)(j, i) = v;
    }
  return std::shared_ptr<const MatrixX<S>>(K);
}

// Positive values bounded away from the log floor.
template <class S>
ArrayX<S> random_probs(Index n, Rng& rng) {
  ArrayX<S> a = random_array<S>(n, rng);
  return a.abs() * S(0.4) + S(0.1);
}

}  // namespace gradcheck_detail

// Gradient checks for every loss, with respect to every continuous input.
template <class S = double>
std::vector<GradCheckEntry> loss_gradchecks(std::uint64_t seed, int instances = 10) {
  using namespace gradcheck_detail;
  std::vector<GradCheckEntry> table;
  const Index C = 3, H = 5, W = 4, D = 6;

  auto record = [&](const std::string& name, auto&& per_instance) {
    double worst = 0;
    for (int k = 0; k < instances; ++k) {
      Rng rng = Rng(seed).fork(Rng::mix(Rng::tag(name.c_str()), k));
      worst = std::max(worst, per_instance(rng, k));
    }
    table.push_back({name, worst});
  };

  record("pce_loss", [&](Rng& rng, int k) {
    ScribbleMap ys = random_scribbles(H, W, C, rng);
    std::vector<ArrayX<S>> in{random_probs<S>(C * H * W, rng)};
    return check_gradient<S>({{C, H, W}}, in,
                             [&](Tape<S>&, std::vector<Var<S>>& v) {
                               return pce_loss_graph(v[0], ys, k % 2 == 1);
                             },
                             0);
  });

  record("kl_loss", [&](Rng& rng, int) {
    std::vector<ArrayX<S>> in{random_array<S>(D, rng, -2.0, 2.0),
                              random_array<S>(D, rng, -1.0, 1.0)};
    double worst = 0;
    for (size_t w = 0; w < 2; ++w)
      worst = std::max(worst, check_gradient<S>(
                                  {{D}, {D}}, in,
                                  [&](Tape<S>&, std::vector<Var<S>>& v) {
                                    return kl_loss_graph(v[0], v[1]);
                                  },
                                  w));
    return worst;
  });

  record("recon_loss", [&](Rng& rng, int) {
    std::vector<ArrayX<S>> in{random_array<S>(H * W, rng), random_array<S>(H * W, rng)};
    double worst = 0;
    for (size_t w = 0; w < 2; ++w)
      worst = std::max(worst, check_gradient<S>(
                                  {{1, H, W}, {1, H, W}}, in,
                                  [&](Tape<S>&, std::vector<Var<S>>& v) {
                                    return recon_loss_graph(v[0], v[1]);
                                  },
                                  w));
    return worst;
  });

  record("dense_crf_loss", [&](Rng& rng, int) {
    auto K = random_kernel<S>(H * W, rng);
    std::vector<ArrayX<S>> in{random_probs<S>(C * H * W, rng)};
    return check_gradient<S>({{C, H, W}}, in,
                             [&](Tape<S>&, std::vector<Var<S>>& v) {
                               return dense_crf_loss_graph(v[0], K);
                             },
                             0);
  });

  record("ce_loss", [&](Rng& rng, int) {
    LabelMap y = random_labels(H, W, C, rng);
    std::vector<ArrayX<S>> in{random_probs<S>(C * H * W, rng)};
    return check_gradient<S>({{C, H, W}}, in,
                             [&](Tape<S>&, std::vector<Var<S>>& v) {
                               return ce_loss_graph(v[0], y);
                             },
                             0);
  });

  record("elbo_objective", [&](Rng& rng, int) {
    ScribbleMap ys = random_scribbles(H, W, C, rng);
    auto K = random_kernel<S>(H * W, rng);
    const LossWeights w{0.7, 0.3, 0.05};
    std::vector<Shape> shapes{{C, H, W}, {D}, {D}, {1, H, W}, {1, H, W}};
    std::vector<ArrayX<S>> in{random_probs<S>(C * H * W, rng),
                              random_array<S>(D, rng, -2.0, 2.0),
                              random_array<S>(D, rng, -1.0, 1.0),
                              random_array<S>(H * W, rng), random_array<S>(H * W, rng)};
    double worst = 0;
    for (size_t i = 0; i < 4; ++i)  // probs, mu, logvar, xrec
      worst = std::max(worst, check_gradient<S>(
                                  shapes, in,
                                  [&](Tape<S>&, std::vector<Var<S>>& v) {
                                    return elbo_objective_graph(v[0], ys, v[1], v[2], v[3], v[4],
                                                                K, w)
                                        .total;
                                  },
                                  i));
    return worst;
  });

  return table;
}

// Finite-difference check of every backbone parameter through a dropout-
// active forward pass and dense cross-entropy, on a tiny configuration. The
// dropout masks are replayed from a fixed stream so the function stays
// deterministic under perturbation.
template <class S = double>
GradCheckEntry seg_gradcheck(std::uint64_t seed, int instances = 10) {
  using namespace gradcheck_detail;
  double worst = 0;
  for (int k = 0; k < instances; ++k) {
    Rng rng = Rng(seed).fork(Rng::mix(Rng::tag("seg"), k));
    UNetConfig cfg{1, 2, 4, 1, 0.2};
    Rng init_rng = rng.fork(1);
    SegNet<S> net = SegNet<S>::init(cfg, init_rng);

    Rng data_rng = rng.fork(2);
    ArrayX<S> xv = random_probs<S>(64, data_rng);
    LabelMap y = random_labels(8, 8, cfg.classes, data_rng);
    const std::uint64_t mask_seed = rng.fork(3).seed();

    auto loss_value = [&](ParamStore<S>& params, GradMap<S>* grads) -> S {
      GraphContext<S> g(params);
      Rng mask_rng(mask_seed);
      auto probs = seg_forward(g, cfg, g.c({1, 1, 8, 8}, xv), true, &mask_rng);
      auto loss = ce_loss_graph(probs, y);
      if (grads) {
        g.backward(loss);
        g.grads_into(*grads);
      }
      return loss.value()[0];
    };

    GradMap<S> grads;
    loss_value(net.params, &grads);
    for (const auto& name : net.params.names()) {
      if (name == "w._config") continue;
      auto& entry = net.params.at(name);
      ArrayX<S> analytic =
          grads.count(name) ? grads.at(name) : ArrayX<S>::Zero(entry.value.size());
      auto f = [&](const ArrayX<S>& v) -> S {
        ArrayX<S> saved = entry.value;
        entry.value = v;
        S out = loss_value(net.params, nullptr);
        entry.value = saved;
        return out;
      };
      ArrayX<S> numeric = finite_difference_grad(f, entry.value, S(1e-6));
      worst = std::max(worst, double(max_rel_err(analytic, numeric)));
    }
  }
  return {"seg_forward", worst};
}

// Finite-difference check of every generator parameter through a full
// stage-1 forward pass (reparameterized draw, reconstruction, probability
// maps, and the weighted objective) on a tiny configuration.
template <class S = double>
GradCheckEntry stage1_gradcheck(std::uint64_t seed, int instances = 10) {
  using namespace gradcheck_detail;
  double worst = 0;

  for (int k = 0; k < instances; ++k) {
    Rng rng = Rng(seed).fork(Rng::mix(Rng::tag("stage1"), k));
    GeneratorConfig cfg;
    cfg.in_ch = 1 + Index(k % 2);
    cfg.classes = 2;
    cfg.base = 4;
    cfg.depth = 1;
    cfg.latent = 4;
    cfg.height = 8;
    cfg.width = 8;
    Rng init_rng = rng.fork(1);
    Generator<S> gen = Generator<S>::init(cfg, init_rng);

    Rng data_rng = rng.fork(2);
    ArrayX<S> xv = random_probs<S>(cfg.in_ch * 64, data_rng);
    ScribbleMap ys = random_scribbles(8, 8, cfg.classes, data_rng);
    ArrayX<S> eps(cfg.latent);
    for (Index i = 0; i < cfg.latent; ++i) eps[i] = static_cast<S>(data_rng.normal());
    Image img{cfg.in_ch, 8, 8, ArrayXd(xv.template cast<double>())};
    KernelMatrix km = gaussian_kernel(img, 2.0, 0.3);
    auto K = std::make_shared<const MatrixX<S>>(km.k.template cast<S>());
    const LossWeights w{0.5, 0.5, 0.01};

    auto loss_value = [&](ParamStore<S>& params, GradMap<S>* grads) -> S {
      GraphContext<S> g(params);
      auto x = g.c({1, cfg.in_ch, 8, 8}, xv);
      auto [mu, logvar] = encode_e1(g, cfg, x);
      auto sigma = vexp(scale(clamp_min(logvar, S(kLogVarFloor)), S(0.5)));
      auto z = add(mu, mul(sigma, g.c({1, cfg.latent}, eps)));
      auto xrec = decode_d1(g, cfg, z);
      auto feats = encode_e2(g, cfg, x);
      auto probs = decode_d2(g, cfg, feats, z);
      auto e = elbo_objective_graph(probs, ys, mu, logvar, xrec, x, K, w);
      if (grads) {
        g.backward(e.total);
        g.grads_into(*grads);
      }
      return e.total.value()[0];
    };

    GradMap<S> grads;
    loss_value(gen.params, &grads);

    for (const auto& name : gen.params.names()) {
      if (name == "gen._config") continue;
      auto& entry = gen.params.at(name);
      ArrayX<S> analytic = grads.count(name) ? grads.at(name)
                                             : ArrayX<S>::Zero(entry.value.size());
      auto f = [&](const ArrayX<S>& v) -> S {
        ArrayX<S> saved = entry.value;
        entry.value = v;
        S out = loss_value(gen.params, nullptr);
        entry.value = saved;
        return out;
      };
      ArrayX<S> numeric = finite_difference_grad(f, entry.value, S(1e-6));
      worst = std::max(worst, double(max_rel_err(analytic, numeric)));
    }
  }
  return {"stage1_forward", worst};
}

}  // namespace bws
