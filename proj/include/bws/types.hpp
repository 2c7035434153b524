#pragma once

#include <cstdint>
#include <vector>

#include "bws/common.hpp"

namespace bws {

// Sentinel for pixels without annotation in 8-bit label files.
inline constexpr std::uint8_t kUnlabeled = 255;

// Observed image x: channel-major planes, intensities nominally in [0,1].
struct Image {
  Index c = 0, h = 0, w = 0;
  ArrayXd v;

  Index pixels() const { return h * w; }
  double at(Index ch, Index r, Index col) const { return v[ch * h * w + r * w + col]; }
  auto plane(Index ch) const { return v.segment(ch * h * w, h * w); }
};

// Per-pixel, per-class probability field (channel-simplex per pixel).
struct ProbMap {
  Index c = 0, h = 0, w = 0;
  ArrayXd v;

  Index pixels() const { return h * w; }
  double at(Index ch, Index r, Index col) const { return v[ch * h * w + r * w + col]; }
  auto plane(Index ch) const { return v.segment(ch * h * w, h * w); }
};

// Dense per-pixel class indices in {0..C-1}.
struct LabelMap {
  Index h = 0, w = 0;
  std::vector<std::uint8_t> v;

  std::uint8_t at(Index r, Index c) const { return v[r * w + c]; }
  std::uint8_t& at(Index r, Index c) { return v[r * w + c]; }
};

// Sparse annotations: class indices on scribbled pixels, kUnlabeled elsewhere.
struct ScribbleMap {
  Index h = 0, w = 0;
  std::vector<std::uint8_t> v;

  std::uint8_t at(Index r, Index c) const { return v[r * w + c]; }
  std::uint8_t& at(Index r, Index c) { return v[r * w + c]; }
  Index labeled_count() const {
    Index n = 0;
    for (auto x : v) n += x != kUnlabeled;
    return n;
  }
};

// Binary raster; also serves as the unlabeled mask (0 = labeled, 1 = not).
struct BinaryMask {
  Index h = 0, w = 0;
  std::vector<std::uint8_t> v;

  std::uint8_t at(Index r, Index c) const { return v[r * w + c]; }
  std::uint8_t& at(Index r, Index c) { return v[r * w + c]; }
  Index count() const {
    Index n = 0;
    for (auto x : v) n += x != 0;
    return n;
  }
};

// Per-pixel entropy in nats, bounded by ln(classes).
struct UncertaintyMap {
  Index h = 0, w = 0;
  ArrayXd v;
};

inline ProbMap make_uniform_probmap(Index c, Index h, Index w) {
  return ProbMap{c, h, w, ArrayXd::Constant(c * h * w, 1.0 / double(c))};
}

// Per-pixel argmax of a probability map (first maximum wins ties).
inline LabelMap argmax_labels(const ProbMap& p) {
  LabelMap out{p.h, p.w, std::vector<std::uint8_t>(p.h * p.w, 0)};
  const Index hw = p.pixels();
  for (Index i = 0; i < hw; ++i) {
    Index best = 0;
    double bv = p.v[i];
    for (Index c = 1; c < p.c; ++c)
      if (p.v[c * hw + i] > bv) {
        bv = p.v[c * hw + i];
        best = c;
      }
    out.v[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace bws
