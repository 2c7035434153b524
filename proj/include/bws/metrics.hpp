#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "bws/types.hpp"

namespace bws {

// ---------------------------------------------------------------------------
// Overlap metrics on dense label maps, one-vs-rest per class, plus the
// symmetric 95th-percentile Hausdorff boundary distance.
// ---------------------------------------------------------------------------

struct ConfusionCounts {
  Index classes = 0;
  std::vector<std::int64_t> tp, fp, tn, fn;

  bool present_in_gt(Index c) const { return tp[c] + fn[c] > 0; }
  bool absent_everywhere(Index c) const { return tp[c] + fn[c] + fp[c] == 0; }
};

inline ConfusionCounts confusion(const LabelMap& pred, const LabelMap& gt, Index classes) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw ShapeError("confusion: prediction and ground truth shapes differ");
  ConfusionCounts c;
  c.classes = classes;
  c.tp.assign(classes, 0);
  c.fp.assign(classes, 0);
  c.tn.assign(classes, 0);
  c.fn.assign(classes, 0);
  for (Index i = 0; i < pred.h * pred.w; ++i) {
    const Index p = pred.v[i], g = gt.v[i];
    if (p >= classes || g >= classes)
      throw DomainError("confusion: label value out of range at pixel " + std::to_string(i));
    for (Index k = 0; k < classes; ++k) {
      const bool pp = p == k, gg = g == k;
      if (pp && gg)
        ++c.tp[k];
      else if (pp && !gg)
        ++c.fp[k];
      else if (!pp && gg)
        ++c.fn[k];
      else
        ++c.tn[k];
    }
  }
  return c;
}

struct MetricReport {
  std::vector<double> per_class;      // percent; 0 where degenerate
  std::vector<bool> degenerate;       // empty denominator with the class present
  double mean = 0.0;                  // macro-mean over classes present in gt
};

struct MeanOptions {
  bool include_background = true;  // class 0 participates in the macro-mean
};

namespace metrics_detail {

template <class F>
MetricReport rate_metric(const ConfusionCounts& c, F&& f, const MeanOptions& opt) {
  MetricReport r;
  r.per_class.assign(c.classes, 0.0);
  r.degenerate.assign(c.classes, false);
  double acc = 0.0;
  Index n = 0;
  for (Index k = 0; k < c.classes; ++k) {
    const auto [num, den] = f(k);
    if (den > 0) {
      r.per_class[k] = 100.0 * double(num) / double(den);
    } else {
      r.per_class[k] = 0.0;
      r.degenerate[k] = !c.absent_everywhere(k);
    }
    const bool in_mean = c.present_in_gt(k) && (opt.include_background || k != 0);
    if (in_mean) {
      acc += r.per_class[k];
      ++n;
    }
  }
  r.mean = n > 0 ? acc / double(n) : 0.0;
  return r;
}

}  // namespace metrics_detail

inline MetricReport dice(const ConfusionCounts& c, const MeanOptions& opt = {}) {
  return metrics_detail::rate_metric(
      c, [&](Index k) { return std::pair(2 * c.tp[k], 2 * c.tp[k] + c.fp[k] + c.fn[k]); }, opt);
}

inline MetricReport jaccard(const ConfusionCounts& c, const MeanOptions& opt = {}) {
  return metrics_detail::rate_metric(
      c, [&](Index k) { return std::pair(c.tp[k], c.tp[k] + c.fp[k] + c.fn[k]); }, opt);
}

inline MetricReport sensitivity(const ConfusionCounts& c, const MeanOptions& opt = {}) {
  return metrics_detail::rate_metric(
      c, [&](Index k) { return std::pair(c.tp[k], c.tp[k] + c.fn[k]); }, opt);
}

inline MetricReport specificity(const ConfusionCounts& c, const MeanOptions& opt = {}) {
  return metrics_detail::rate_metric(
      c, [&](Index k) { return std::pair(c.tn[k], c.tn[k] + c.fp[k]); }, opt);
}

// ---------------------------------------------------------------------------
// 95th-percentile Hausdorff distance
// ---------------------------------------------------------------------------

struct Spacing {
  double row = 1.0;
  double col = 1.0;
};

// A foreground pixel is boundary if any 4-neighbour is background or lies
// outside the frame.
inline std::vector<std::pair<Index, Index>> boundary_pixels(const BinaryMask& m) {
  std::vector<std::pair<Index, Index>> out;
  for (Index r = 0; r < m.h; ++r)
    for (Index c = 0; c < m.w; ++c) {
      if (!m.at(r, c)) continue;
      const bool edge = r == 0 || r == m.h - 1 || c == 0 || c == m.w - 1;
      if (edge || !m.at(r - 1, c) || !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1))
        out.emplace_back(r, c);
    }
  return out;
}

// Percentile by linear interpolation between order statistics (q in [0,1]).
inline double interpolated_percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double rank = q * double(values.size() - 1);
  const Index lo = Index(std::floor(rank));
  const Index hi = std::min<Index>(lo + 1, Index(values.size()) - 1);
  const double frac = rank - double(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace metrics_detail {

inline std::vector<double> directed_boundary_distances(
    const std::vector<std::pair<Index, Index>>& from,
    const std::vector<std::pair<Index, Index>>& to, const Spacing& sp) {
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& [ra, ca] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [rb, cb] : to) {
      const double dr = double(ra - rb) * sp.row;
      const double dc = double(ca - cb) * sp.col;
      best = std::min(best, dr * dr + dc * dc);
    }
    d.push_back(std::sqrt(best));
  }
  return d;
}

}  // namespace metrics_detail

// Symmetric 95th percentile of directed boundary distances; nullopt when
// either mask is empty (callers exclude such cases from means).
inline std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& gt,
                                  const Spacing& sp = {}) {
  if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("hd95: mask shapes differ");
  if (pred.count() == 0 || gt.count() == 0) return std::nullopt;
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  const double fwd =
      interpolated_percentile(metrics_detail::directed_boundary_distances(bp, bg, sp), 0.95);
  const double bwd =
      interpolated_percentile(metrics_detail::directed_boundary_distances(bg, bp, sp), 0.95);
  return std::max(fwd, bwd);
}

// Binary mask of one class of a label map.
inline BinaryMask class_mask(const LabelMap& y, Index cls) {
  BinaryMask m{y.h, y.w, std::vector<std::uint8_t>(y.h * y.w, 0)};
  for (Index i = 0; i < y.h * y.w; ++i) m.v[i] = y.v[i] == cls;
  return m;
}

}  // namespace bws
