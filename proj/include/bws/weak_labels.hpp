#pragma once

#include <vector>

#include "bws/rng.hpp"
#include "bws/types.hpp"

namespace bws {

// ---------------------------------------------------------------------------
// Scribble simulation from dense ground truth: per class and per 8-connected
// component, the annotation is the Zhang-Suen skeleton of the region.
// ---------------------------------------------------------------------------

namespace thinning_detail {

// 8-neighbourhood in the order p2..p9 (N, NE, E, SE, S, SW, W, NW).
inline constexpr int kDr[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
inline constexpr int kDc[8] = {0, 1, 1, 1, 0, -1, -1, -1};

inline void neighbours(const BinaryMask& m, Index r, Index c, int p[8]) {
  for (int i = 0; i < 8; ++i) {
    const Index rr = r + kDr[i], cc = c + kDc[i];
    p[i] = (rr >= 0 && rr < m.h && cc >= 0 && cc < m.w) ? (m.at(rr, cc) != 0) : 0;
  }
}

// One directional sub-iteration in raster order; returns the number of
// deletions. Conditions are evaluated against the current mask and deletions
// take effect immediately, so every removal is a simple-point deletion
// (A(p) = 1 on the live image) and 8-connectivity is never broken. The
// parallel formulation can erase small round components entirely.
inline Index thinning_pass(BinaryMask& m, int subiter) {
  Index deleted = 0;
  for (Index r = 0; r < m.h; ++r) {
    for (Index c = 0; c < m.w; ++c) {
      if (!m.at(r, c)) continue;
      int p[8];
      neighbours(m, r, c, p);
      int b = 0;
      for (int i = 0; i < 8; ++i) b += p[i];
      if (b < 2 || b > 6) continue;
      int a = 0;
      for (int i = 0; i < 8; ++i) a += (p[i] == 0 && p[(i + 1) % 8] == 1);
      if (a != 1) continue;
      // p2*p4*p6 / p4*p6*p8 in sub-iteration 1, rotated in sub-iteration 2
      const bool cond = subiter == 0 ? (p[0] * p[2] * p[4] == 0 && p[2] * p[4] * p[6] == 0)
                                     : (p[0] * p[2] * p[6] == 0 && p[0] * p[4] * p[6] == 0);
      if (cond) {
        m.at(r, c) = 0;
        ++deleted;
      }
    }
  }
  return deleted;
}

}  // namespace thinning_detail

// Zhang-Suen iterative thinning to a fixpoint: stops when a full
// two-sub-iteration pass deletes nothing. The output is a subset of the
// input; an empty mask yields an empty skeleton.
inline BinaryMask skeletonize(const BinaryMask& mask) {
  BinaryMask m = mask;
  for (auto& x : m.v) x = x ? 1 : 0;
  while (true) {
    Index deleted = thinning_detail::thinning_pass(m, 0);
    deleted += thinning_detail::thinning_pass(m, 1);
    if (deleted == 0) break;
  }
  return m;
}

// 8-connected component labelling; labels start at 1, 0 is background.
inline std::pair<std::vector<Index>, Index> label_components8(const BinaryMask& mask) {
  std::vector<Index> labels(mask.h * mask.w, 0);
  Index next = 0;
  std::vector<Index> stack;
  for (Index start = 0; start < mask.h * mask.w; ++start) {
    if (!mask.v[start] || labels[start]) continue;
    ++next;
    stack.assign(1, start);
    labels[start] = next;
    while (!stack.empty()) {
      const Index i = stack.back();
      stack.pop_back();
      const Index r = i / mask.w, c = i % mask.w;
      for (int d = 0; d < 8; ++d) {
        const Index rr = r + thinning_detail::kDr[d], cc = c + thinning_detail::kDc[d];
        if (rr < 0 || rr >= mask.h || cc < 0 || cc >= mask.w) continue;
        const Index j = rr * mask.w + cc;
        if (mask.v[j] && !labels[j]) {
          labels[j] = next;
          stack.push_back(j);
        }
      }
    }
  }
  return {std::move(labels), next};
}

// Weak annotations from dense ground truth. Every class present in y
// (background included) contributes the skeleton of each of its 8-connected
// components; everything else is unlabeled. The optional jitter flag walks
// each scribble pixel one random step, constrained to stay on its own class.
inline ScribbleMap simulate_scribbles(const LabelMap& y, Index classes, Rng& rng,
                                      bool jitter = false) {
  ScribbleMap out{y.h, y.w, std::vector<std::uint8_t>(y.h * y.w, kUnlabeled)};
  for (Index cls = 0; cls < classes; ++cls) {
    BinaryMask class_mask{y.h, y.w, std::vector<std::uint8_t>(y.h * y.w, 0)};
    bool present = false;
    for (Index i = 0; i < y.h * y.w; ++i) {
      if (y.v[i] == cls) {
        class_mask.v[i] = 1;
        present = true;
      }
    }
    if (!present) continue;
    auto [labels, count] = label_components8(class_mask);
    for (Index comp = 1; comp <= count; ++comp) {
      BinaryMask comp_mask{y.h, y.w, std::vector<std::uint8_t>(y.h * y.w, 0)};
      for (Index i = 0; i < y.h * y.w; ++i) comp_mask.v[i] = labels[i] == comp;
      BinaryMask skel = skeletonize(comp_mask);
      for (Index i = 0; i < y.h * y.w; ++i)
        if (skel.v[i]) out.v[i] = static_cast<std::uint8_t>(cls);
    }
  }
  if (jitter) {
    ScribbleMap moved{y.h, y.w, std::vector<std::uint8_t>(y.h * y.w, kUnlabeled)};
    for (Index r = 0; r < y.h; ++r)
      for (Index c = 0; c < y.w; ++c) {
        const std::uint8_t cls = out.at(r, c);
        if (cls == kUnlabeled) continue;
        const int d = static_cast<int>(rng.integer(8));
        const Index rr = r + thinning_detail::kDr[d], cc = c + thinning_detail::kDc[d];
        if (rr >= 0 && rr < y.h && cc >= 0 && cc < y.w && y.at(rr, cc) == cls)
          moved.at(rr, cc) = cls;
        else
          moved.at(r, c) = cls;
      }
    return moved;
  }
  return out;
}

// The binary mask: 0 on labeled pixels, 1 on unlabeled ones.
inline BinaryMask unlabeled_mask(const ScribbleMap& ys) {
  BinaryMask m{ys.h, ys.w, std::vector<std::uint8_t>(ys.h * ys.w, 0)};
  for (Index i = 0; i < ys.h * ys.w; ++i) m.v[i] = ys.v[i] == kUnlabeled;
  return m;
}

// y = (1 - mask) * ys + mask * pseudo: scribbles win wherever they exist.
inline LabelMap merge_labels(const ScribbleMap& ys, const LabelMap& pseudo,
                             const BinaryMask& mask) {
  if (ys.h != pseudo.h || ys.w != pseudo.w || ys.h != mask.h || ys.w != mask.w)
    throw ShapeError("merge_labels: shapes disagree");
  LabelMap out{ys.h, ys.w, std::vector<std::uint8_t>(ys.h * ys.w, 0)};
  for (Index i = 0; i < ys.h * ys.w; ++i) {
    const bool unlabeled = ys.v[i] == kUnlabeled;
    if (static_cast<bool>(mask.v[i]) != unlabeled)
      throw ContractError("merge_labels: mask inconsistent with scribbles at pixel " +
                          std::to_string(i));
    out.v[i] = unlabeled ? pseudo.v[i] : ys.v[i];
    if (out.v[i] == kUnlabeled)
      throw ContractError("merge_labels: pseudo-labels must be dense at pixel " +
                          std::to_string(i));
  }
  return out;
}

}  // namespace bws
