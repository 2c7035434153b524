#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bws/params.hpp"
#include "bws/rng.hpp"
#include "bws/tensor.hpp"

namespace bws {

// ---------------------------------------------------------------------------
// Toy-scale U-Net family. Encoder stage i has width base<<i, the bottleneck
// base<<depth; spatial scaling is exclusively 2x pool / nearest upsample.
// Final classification layers are zero-initialized so an untrained network
// emits exactly-uniform probability maps.
// ---------------------------------------------------------------------------

struct UNetConfig {
  Index in_ch = 1;
  Index classes = 4;
  Index base = 8;
  Index depth = 2;
  double dropout = 0.1;

  void validate() const {
    if (depth < 1) throw ContractError("UNetConfig: depth must be >= 1");
    if (base < 4) throw ContractError("UNetConfig: base width must be >= 4");
    if (classes < 2) throw ContractError("UNetConfig: class count must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ContractError("UNetConfig: dropout rate must be in [0,1)");
  }
};

struct GeneratorConfig {
  Index in_ch = 1;
  Index classes = 4;
  Index base = 8;
  Index depth = 2;
  Index latent = 16;
  Index height = 64;
  Index width = 64;

  UNetConfig unet() const { return UNetConfig{in_ch, classes, base, depth, 0.0}; }
  Index bottleneck_h() const { return height >> depth; }
  Index bottleneck_w() const { return width >> depth; }

  void validate() const {
    unet().validate();
    if (latent < 1) throw ContractError("GeneratorConfig: latent dimension must be >= 1");
    const Index div = Index(1) << depth;
    if (height % div != 0 || width % div != 0)
      throw ContractError("GeneratorConfig: spatial extents must be divisible by 2^depth");
  }
};

// Channels of the 1x1 reduction in front of the latent heads.
inline constexpr Index kLatentHeadCh = 4;
// Floor applied to log-variances before exponentiation.
inline constexpr double kLogVarFloor = -20.0;

template <class S>
struct LatentGaussian {
  ArrayX<S> mu;
  ArrayX<S> logvar;
};

namespace nets_detail {

template <class S>
void add_conv(ParamStore<S>& p, const std::string& name, Index out_ch, Index in_ch, Index k,
              Rng& rng, bool zero_init = false) {
  if (zero_init) {
    p.add_zeros(name + ".w", {out_ch, in_ch, k, k});
  } else {
    p.add_kaiming(name + ".w", {out_ch, in_ch, k, k}, in_ch * k * k, rng);
  }
  p.add_zeros(name + ".b", {out_ch});
}

template <class S>
void add_linear(ParamStore<S>& p, const std::string& name, Index out_n, Index in_n, Rng& rng) {
  p.add_kaiming(name + ".w", {out_n, in_n}, in_n, rng);
  p.add_zeros(name + ".b", {out_n});
}

template <class S>
Var<S> conv_relu(GraphContext<S>& g, const std::string& name, Var<S> x) {
  return relu(conv2d(x, g.p(name + ".w"), g.p(name + ".b")));
}

template <class S>
Var<S> conv_plain(GraphContext<S>& g, const std::string& name, Var<S> x) {
  return conv2d(x, g.p(name + ".w"), g.p(name + ".b"));
}

template <class S>
Var<S> maybe_dropout(GraphContext<S>& g, Var<S> x, double rate, bool active, Rng* rng) {
  if (!active || rate <= 0.0) return x;
  if (!rng) throw ContractError("dropout requested without an Rng");
  const S keep = S(1.0 - rate);
  ArrayX<S> mask(numel(x.shape()));
  for (Index i = 0; i < mask.size(); ++i) mask[i] = rng->uniform() < 1.0 - rate ? S(1) : S(0);
  (void)g;
  return dropout_masked(x, std::move(mask), keep);
}

}  // namespace nets_detail

template <class S>
void add_encoder_params(ParamStore<S>& p, const std::string& prefix, const UNetConfig& cfg,
                        Rng& rng) {
  Index in = cfg.in_ch;
  for (Index i = 0; i < cfg.depth; ++i) {
    const Index w = cfg.base << i;
    nets_detail::add_conv(p, prefix + ".enc" + std::to_string(i) + ".c1", w, in, 3, rng);
    nets_detail::add_conv(p, prefix + ".enc" + std::to_string(i) + ".c2", w, w, 3, rng);
    in = w;
  }
  const Index wb = cfg.base << cfg.depth;
  nets_detail::add_conv(p, prefix + ".bott.c1", wb, in, 3, rng);
  nets_detail::add_conv(p, prefix + ".bott.c2", wb, wb, 3, rng);
}

template <class S>
void add_decoder_params(ParamStore<S>& p, const std::string& prefix, const UNetConfig& cfg,
                        Rng& rng) {
  for (Index i = cfg.depth - 1; i >= 0; --i) {
    const Index w = cfg.base << i;
    const Index in = (cfg.base << (i + 1)) + w;  // upsampled + skip
    nets_detail::add_conv(p, prefix + ".dec" + std::to_string(i) + ".c1", w, in, 3, rng);
    nets_detail::add_conv(p, prefix + ".dec" + std::to_string(i) + ".c2", w, w, 3, rng);
  }
}

template <class S>
struct EncoderOut {
  std::vector<Var<S>> skips;
  Var<S> bottleneck;
};

template <class S>
EncoderOut<S> encoder_forward(GraphContext<S>& g, const std::string& prefix, const UNetConfig& cfg,
                              Var<S> x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[1] != cfg.in_ch)
    throw ShapeError(prefix + ": expected input [N," + std::to_string(cfg.in_ch) +
                     ",H,W], got " + shape_str(xs));
  const Index div = Index(1) << cfg.depth;
  if (xs[2] % div != 0 || xs[3] % div != 0)
    throw ShapeError(prefix + ": spatial extents of " + shape_str(xs) +
                     " must be divisible by " + std::to_string(div));
  EncoderOut<S> out;
  Var<S> h = x;
  for (Index i = 0; i < cfg.depth; ++i) {
    const std::string stage = prefix + ".enc" + std::to_string(i);
    h = nets_detail::conv_relu(g, stage + ".c1", h);
    h = nets_detail::conv_relu(g, stage + ".c2", h);
    out.skips.push_back(h);
    h = max_pool2(h);
  }
  h = nets_detail::conv_relu(g, prefix + ".bott.c1", h);
  h = nets_detail::conv_relu(g, prefix + ".bott.c2", h);
  out.bottleneck = h;
  return out;
}

template <class S>
Var<S> decoder_forward(GraphContext<S>& g, const std::string& prefix, const UNetConfig& cfg,
                       Var<S> bottleneck, const std::vector<Var<S>>& skips, bool dropout_active,
                       Rng* rng) {
  Var<S> h = bottleneck;
  for (Index i = cfg.depth - 1; i >= 0; --i) {
    const std::string stage = prefix + ".dec" + std::to_string(i);
    h = concat_c(upsample2(h), skips[i]);
    h = nets_detail::conv_relu(g, stage + ".c1", h);
    h = nets_detail::conv_relu(g, stage + ".c2", h);
    h = nets_detail::maybe_dropout(g, h, cfg.dropout, dropout_active, rng);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Segmentation backbone w: U-Net with dropout after every decoder stage.
// ---------------------------------------------------------------------------

template <class S = double>
struct SegNet {
  UNetConfig cfg;
  ParamStore<S> params;

  static SegNet init(const UNetConfig& cfg, Rng& rng) {
    cfg.validate();
    SegNet net;
    net.cfg = cfg;
    net.params.add("w._config", {5},
                   ArrayX<S>{{S(cfg.in_ch), S(cfg.classes), S(cfg.base), S(cfg.depth),
                              S(cfg.dropout)}});
    add_encoder_params(net.params, "w", cfg, rng);
    add_decoder_params(net.params, "w", cfg, rng);
    nets_detail::add_conv(net.params, "w.head", cfg.classes, cfg.base, 1, rng, /*zero_init=*/true);
    return net;
  }

  static SegNet from_params(ParamStore<S> params) {
    const auto& meta = params.at("w._config").value;
    SegNet net;
    net.cfg = UNetConfig{Index(meta[0]), Index(meta[1]), Index(meta[2]), Index(meta[3]),
                         double(meta[4])};
    net.params = std::move(params);
    return net;
  }
};

// Forward pass of the backbone; with dropout_active=false the map is
// deterministic for fixed parameters.
template <class S>
Var<S> seg_forward(GraphContext<S>& g, const UNetConfig& cfg, Var<S> x, bool dropout_active,
                   Rng* rng) {
  auto enc = encoder_forward(g, "w", cfg, x);
  auto feat = decoder_forward(g, "w", cfg, enc.bottleneck, enc.skips, dropout_active, rng);
  return softmax_c(nets_detail::conv_plain(g, "w.head", feat));
}

// ---------------------------------------------------------------------------
// Generator of the joint image/label model: e1 maps images to a latent
// Gaussian, d1 reconstructs images from z, e2 encodes image features, and d2
// fuses features with z to emit probability maps.
// ---------------------------------------------------------------------------

template <class S = double>
struct Generator {
  GeneratorConfig cfg;
  ParamStore<S> params;

  static Generator init(const GeneratorConfig& cfg, Rng& rng) {
    cfg.validate();
    Generator gen;
    gen.cfg = cfg;
    gen.params.add("gen._config", {7},
                   ArrayX<S>{{S(cfg.in_ch), S(cfg.classes), S(cfg.base), S(cfg.depth),
                              S(cfg.latent), S(cfg.height), S(cfg.width)}});
    const UNetConfig u = cfg.unet();
    const Index hb = cfg.bottleneck_h(), wb = cfg.bottleneck_w();
    const Index wide = cfg.base << cfg.depth;

    // e1: encoder + latent heads
    add_encoder_params(gen.params, "e1", u, rng);
    nets_detail::add_conv(gen.params, "e1.red", kLatentHeadCh, wide, 1, rng);
    nets_detail::add_linear(gen.params, "e1.mu", cfg.latent, kLatentHeadCh * hb * wb, rng);
    nets_detail::add_linear(gen.params, "e1.logvar", cfg.latent, kLatentHeadCh * hb * wb, rng);

    // d1: latent -> image
    nets_detail::add_linear(gen.params, "d1.in", cfg.base * hb * wb, cfg.latent, rng);
    nets_detail::add_conv(gen.params, "d1.c0", wide, cfg.base, 3, rng);
    Index prev = wide;
    for (Index i = cfg.depth - 1; i >= 0; --i) {
      const Index w = cfg.base << i;
      nets_detail::add_conv(gen.params, "d1.up" + std::to_string(i), w, prev, 3, rng);
      prev = w;
    }
    nets_detail::add_conv(gen.params, "d1.head", cfg.in_ch, cfg.base, 1, rng);

    // e2: feature encoder with skips
    add_encoder_params(gen.params, "e2", u, rng);

    // d2: latent fusion + decoder + zero-init classifier
    nets_detail::add_conv(gen.params, "d2.fuse.c1", wide, wide + cfg.latent, 3, rng);
    nets_detail::add_conv(gen.params, "d2.fuse.c2", wide, wide, 3, rng);
    add_decoder_params(gen.params, "d2", u, rng);
    nets_detail::add_conv(gen.params, "d2.head", cfg.classes, cfg.base, 1, rng,
                          /*zero_init=*/true);
    return gen;
  }

  static Generator from_params(ParamStore<S> params) {
    const auto& meta = params.at("gen._config").value;
    Generator gen;
    gen.cfg = GeneratorConfig{Index(meta[0]), Index(meta[1]), Index(meta[2]), Index(meta[3]),
                              Index(meta[4]), Index(meta[5]), Index(meta[6])};
    gen.params = std::move(params);
    return gen;
  }
};

// q(z|x): mean and log-variance heads over the e1 bottleneck.
template <class S>
std::pair<Var<S>, Var<S>> encode_e1(GraphContext<S>& g, const GeneratorConfig& cfg, Var<S> x) {
  if (x.shape().size() != 4 || x.shape()[2] != cfg.height || x.shape()[3] != cfg.width)
    throw ShapeError("encode_e1: expected [N," + std::to_string(cfg.in_ch) + "," +
                     std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "], got " +
                     shape_str(x.shape()));
  auto enc = encoder_forward(g, "e1", cfg.unet(), x);
  auto red = nets_detail::conv_relu(g, "e1.red", enc.bottleneck);
  const Index n = x.shape()[0];
  auto flat = reshape(red, {n, kLatentHeadCh * cfg.bottleneck_h() * cfg.bottleneck_w()});
  auto mu = linear(flat, g.p("e1.mu.w"), g.p("e1.mu.b"));
  auto logvar = linear(flat, g.p("e1.logvar.w"), g.p("e1.logvar.b"));
  return {mu, logvar};
}

// Reparameterized draw z = mu + exp(logvar/2) * eps with eps recorded as a
// constant, so z stays differentiable w.r.t. mu and logvar.
template <class S>
Var<S> sample_z(GraphContext<S>& g, Var<S> mu, Var<S> logvar, Rng& rng) {
  if (mu.shape() != logvar.shape())
    throw ShapeError("sample_z: mu " + shape_str(mu.shape()) + " vs logvar " +
                     shape_str(logvar.shape()));
  ArrayX<S> eps(numel(mu.shape()));
  for (Index i = 0; i < eps.size(); ++i) eps[i] = static_cast<S>(rng.normal());
  auto sigma = vexp(scale(clamp_min(logvar, S(kLogVarFloor)), S(0.5)));
  return add(mu, mul(sigma, g.c(mu.shape(), std::move(eps))));
}

// Deterministic variant used when the prior p(z) = N(0, I) is requested.
template <class S>
Var<S> prior_z(GraphContext<S>& g, Index n, Index latent, Rng& rng) {
  ArrayX<S> z(n * latent);
  for (Index i = 0; i < z.size(); ++i) z[i] = static_cast<S>(rng.normal());
  return g.c({n, latent}, std::move(z));
}

// p(x|z): image reconstruction from the latent draw.
template <class S>
Var<S> decode_d1(GraphContext<S>& g, const GeneratorConfig& cfg, Var<S> z) {
  const Index n = z.shape()[0];
  const Index hb = cfg.bottleneck_h(), wb = cfg.bottleneck_w();
  auto h0 = relu(linear(z, g.p("d1.in.w"), g.p("d1.in.b")));
  Var<S> h = reshape(h0, {n, cfg.base, hb, wb});
  h = nets_detail::conv_relu(g, "d1.c0", h);
  for (Index i = cfg.depth - 1; i >= 0; --i)
    h = nets_detail::conv_relu(g, "d1.up" + std::to_string(i), upsample2(h));
  return nets_detail::conv_plain(g, "d1.head", h);
}

template <class S>
EncoderOut<S> encode_e2(GraphContext<S>& g, const GeneratorConfig& cfg, Var<S> x) {
  return encoder_forward(g, "e2", cfg.unet(), x);
}

// p(y|x,z): broadcast z over the bottleneck plane, fuse with e2 features and
// decode through the skip path to a channel-simplex probability map.
template <class S>
Var<S> decode_d2(GraphContext<S>& g, const GeneratorConfig& cfg, const EncoderOut<S>& feats,
                 Var<S> z) {
  const Shape& bs = feats.bottleneck.shape();
  auto zmap = broadcast_hw(z, bs[2], bs[3]);
  auto h = concat_c(feats.bottleneck, zmap);
  h = nets_detail::conv_relu(g, "d2.fuse.c1", h);
  h = nets_detail::conv_relu(g, "d2.fuse.c2", h);
  auto feat = decoder_forward(g, "d2", cfg.unet(), h, feats.skips, /*dropout_active=*/false,
                              nullptr);
  return softmax_c(nets_detail::conv_plain(g, "d2.head", feat));
}

}  // namespace bws
