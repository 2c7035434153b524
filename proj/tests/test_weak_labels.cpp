#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>

#include "bws/rng.hpp"
#include "bws/weak_labels.hpp"

using namespace bws;

namespace {

// ---------------------------------------------------------------------------
// Reference thinning oracle: same published deletion rules, realized through
// precomputed 256-entry lookup tables over the packed neighbourhood code, so
// the code path shares nothing with the implementation under test.
// ---------------------------------------------------------------------------

struct ThinningTables {
  std::array<bool, 256> del1{}, del2{};
};

ThinningTables build_tables() {
  ThinningTables t;
  for (int code = 0; code < 256; ++code) {
    // bit i of code = neighbour p_{2+i}
    auto bit = [&](int i) { return (code >> (((i % 8) + 8) % 8)) & 1; };
    int b = 0;
    for (int i = 0; i < 8; ++i) b += bit(i);
    int a = 0;
    for (int i = 0; i < 8; ++i) a += (!bit(i) && bit(i + 1)) ? 1 : 0;
    const bool base = b >= 2 && b <= 6 && a == 1;
    t.del1[code] = base && !(bit(0) && bit(2) && bit(4)) && !(bit(2) && bit(4) && bit(6));
    t.del2[code] = base && !(bit(0) && bit(2) && bit(6)) && !(bit(0) && bit(4) && bit(6));
  }
  return t;
}

BinaryMask reference_skeletonize(const BinaryMask& mask) {
  static const ThinningTables tables = build_tables();
  BinaryMask m = mask;
  for (auto& x : m.v) x = x ? 1 : 0;
  auto code_at = [&](Index r, Index c) {
    // p2..p9 clockwise from north
    static const int dr[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
    static const int dc[8] = {0, 1, 1, 1, 0, -1, -1, -1};
    int code = 0;
    for (int i = 0; i < 8; ++i) {
      const Index rr = r + dr[i], cc = c + dc[i];
      if (rr >= 0 && rr < m.h && cc >= 0 && cc < m.w && m.at(rr, cc)) code |= 1 << i;
    }
    return code;
  };
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& table : {tables.del1, tables.del2}) {
      for (Index r = 0; r < m.h; ++r)
        for (Index c = 0; c < m.w; ++c)
          if (m.at(r, c) && table[code_at(r, c)]) {
            m.at(r, c) = 0;  // immediate update, matching the sequential variant
            changed = true;
          }
    }
  }
  return m;
}

// Simply-connected star-convex blob.
BinaryMask random_blob(Index h, Index w, Rng& rng) {
  const double cx = rng.uniform(w * 0.3, w * 0.7);
  const double cy = rng.uniform(h * 0.3, h * 0.7);
  const double base = rng.uniform(4.0, std::min(h, w) * 0.28);
  const double wobble = rng.uniform(0.0, 0.35);
  const double phase = rng.uniform(0.0, 2 * M_PI);
  const int lobes = 2 + int(rng.integer(4));
  BinaryMask m{h, w, std::vector<std::uint8_t>(h * w, 0)};
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) {
      const double dy = r - cy, dx = c - cx;
      const double theta = std::atan2(dy, dx);
      const double rad = base * (1.0 + wobble * std::sin(lobes * theta + phase));
      if (std::sqrt(dx * dx + dy * dy) <= rad) m.at(r, c) = 1;
    }
  return m;
}

bool subset_of(const BinaryMask& a, const BinaryMask& b) {
  for (Index i = 0; i < a.h * a.w; ++i)
    if (a.v[i] && !b.v[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("single foreground pixel is its own skeleton") {
  BinaryMask m{5, 5, std::vector<std::uint8_t>(25, 0)};
  m.at(2, 2) = 1;
  BinaryMask s = skeletonize(m);
  CHECK(s.v == m.v);
}

TEST_CASE("a 1-pixel-wide segment of length 5 is unchanged") {
  BinaryMask m{3, 7, std::vector<std::uint8_t>(21, 0)};
  for (Index c = 1; c <= 5; ++c) m.at(1, c) = 1;
  BinaryMask s = skeletonize(m);
  CHECK(s.v == m.v);
}

TEST_CASE("empty mask gives an empty skeleton") {
  BinaryMask m{4, 4, std::vector<std::uint8_t>(16, 0)};
  CHECK(skeletonize(m).count() == 0);
}

TEST_CASE("solid 9x9 square thins to a small connected curve inside itself") {
  BinaryMask m{13, 13, std::vector<std::uint8_t>(169, 0)};
  for (Index r = 2; r < 11; ++r)
    for (Index c = 2; c < 11; ++c) m.at(r, c) = 1;
  BinaryMask s = skeletonize(m);
  CHECK(s.count() >= 1);
  CHECK(s.count() <= 9);
  CHECK(subset_of(s, m));
  auto [labels, count] = label_components8(s);
  CHECK(count == 1);
  // pixel-set agreement with the lookup-table reference
  BinaryMask ref = reference_skeletonize(m);
  CHECK(s.v == ref.v);
}

TEST_CASE("skeletonize matches the reference implementation on random blobs") {
  for (int k = 0; k < 25; ++k) {
    Rng rng = Rng(902).fork(k);
    BinaryMask m = random_blob(24, 28, rng);
    CHECK(skeletonize(m).v == reference_skeletonize(m).v);
  }
}

TEST_CASE("skeleton subset, fixpoint, and component preservation on 20 blobs") {
  int preserved = 0;
  for (int k = 0; k < 20; ++k) {
    Rng rng = Rng(515).fork(k);
    BinaryMask m = random_blob(32, 32, rng);
    REQUIRE(m.count() > 0);
    BinaryMask s = skeletonize(m);
    CHECK(subset_of(s, m));
    BinaryMask s2 = skeletonize(s);
    CHECK(s2.v == s.v);  // a full pass deletes nothing
    auto [l1, c1] = label_components8(m);
    auto [l2, c2] = label_components8(s);
    preserved += (c1 == c2);
  }
  CHECK(preserved == 20);
}

TEST_CASE("scribbles from a constant label map are the full-frame skeleton") {
  LabelMap y{16, 16, std::vector<std::uint8_t>(256, 0)};
  Rng rng(1);
  ScribbleMap ys = simulate_scribbles(y, 4, rng);
  BinaryMask full{16, 16, std::vector<std::uint8_t>(256, 1)};
  BinaryMask skel = skeletonize(full);
  for (Index i = 0; i < 256; ++i) {
    if (skel.v[i])
      CHECK(ys.v[i] == 0);
    else
      CHECK(ys.v[i] == kUnlabeled);
  }
}

TEST_CASE("scribbles are strictly sparser than dense labels for thick blobs") {
  LabelMap y{24, 24, std::vector<std::uint8_t>(24 * 24, 0)};
  Rng rng(33);
  BinaryMask blob = random_blob(24, 24, rng);
  for (Index i = 0; i < 24 * 24; ++i)
    if (blob.v[i]) y.v[i] = 1;
  ScribbleMap ys = simulate_scribbles(y, 2, rng);
  CHECK(ys.labeled_count() < Index(24 * 24));
  CHECK(ys.labeled_count() > 0);
}

TEST_CASE("scribble classes always agree with the dense labels") {
  for (int k = 0; k < 5; ++k) {
    Rng rng = Rng(77).fork(k);
    LabelMap y{20, 20, std::vector<std::uint8_t>(400, 0)};
    for (int b = 0; b < 3; ++b) {
      BinaryMask blob = random_blob(20, 20, rng);
      const std::uint8_t cls = 1 + std::uint8_t(rng.integer(3));
      for (Index i = 0; i < 400; ++i)
        if (blob.v[i]) y.v[i] = cls;
    }
    ScribbleMap ys = simulate_scribbles(y, 4, rng);
    for (Index i = 0; i < 400; ++i)
      if (ys.v[i] != kUnlabeled) CHECK(ys.v[i] == y.v[i]);
    // and the same with jitter enabled
    ScribbleMap yj = simulate_scribbles(y, 4, rng, true);
    for (Index i = 0; i < 400; ++i)
      if (yj.v[i] != kUnlabeled) CHECK(yj.v[i] == y.v[i]);
  }
}

TEST_CASE("classes absent from the labels contribute nothing") {
  LabelMap y{8, 8, std::vector<std::uint8_t>(64, 0)};
  Rng rng(5);
  ScribbleMap ys = simulate_scribbles(y, 4, rng);
  for (Index i = 0; i < 64; ++i) CHECK((ys.v[i] == 0 || ys.v[i] == kUnlabeled));
}

TEST_CASE("unlabeled mask definition") {
  ScribbleMap full{1, 3, {0, 1, 2}};
  CHECK(unlabeled_mask(full).count() == 0);

  ScribbleMap none{1, 3, {kUnlabeled, kUnlabeled, kUnlabeled}};
  CHECK(unlabeled_mask(none).count() == 3);

  ScribbleMap mixed{1, 3, {1, kUnlabeled, 0}};
  BinaryMask m = unlabeled_mask(mixed);
  CHECK(m.v == std::vector<std::uint8_t>{0, 1, 0});
}

TEST_CASE("merge keeps scribbles and fills the rest from pseudo-labels") {
  ScribbleMap ys{1, 3, {2, kUnlabeled, kUnlabeled}};
  LabelMap pseudo{1, 3, {0, 1, 3}};
  BinaryMask gamma = unlabeled_mask(ys);

  LabelMap merged = merge_labels(ys, pseudo, gamma);
  CHECK(merged.v == std::vector<std::uint8_t>{2, 1, 3});  // scribble wins at pixel 0

  // gamma all ones: output equals pseudo
  ScribbleMap empty{1, 3, {kUnlabeled, kUnlabeled, kUnlabeled}};
  CHECK(merge_labels(empty, pseudo, unlabeled_mask(empty)).v == pseudo.v);

  // gamma all zeros (dense scribbles): output equals the scribbles
  ScribbleMap dense{1, 3, {0, 1, 2}};
  CHECK(merge_labels(dense, pseudo, unlabeled_mask(dense)).v ==
        std::vector<std::uint8_t>{0, 1, 2});

  // inconsistent mask is a contract error
  BinaryMask bad = gamma;
  bad.v[0] = 1;
  CHECK_THROWS_AS(merge_labels(ys, pseudo, bad), ContractError);
}

TEST_CASE("merged labels restricted to the scribble set equal the scribbles") {
  Rng rng(220);
  LabelMap y{16, 16, std::vector<std::uint8_t>(256, 0)};
  BinaryMask blob = random_blob(16, 16, rng);
  for (Index i = 0; i < 256; ++i)
    if (blob.v[i]) y.v[i] = 2;
  ScribbleMap ys = simulate_scribbles(y, 3, rng);
  LabelMap pseudo{16, 16, std::vector<std::uint8_t>(256, 1)};
  LabelMap merged = merge_labels(ys, pseudo, unlabeled_mask(ys));
  for (Index i = 0; i < 256; ++i)
    if (ys.v[i] != kUnlabeled) CHECK(merged.v[i] == ys.v[i]);
}
