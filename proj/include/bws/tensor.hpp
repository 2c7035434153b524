#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "bws/common.hpp"

namespace bws {

// ---------------------------------------------------------------------------
// Reverse-mode automatic differentiation on dense n-d tensors.
//
// A Tape owns an append-only sequence of nodes in topological order; every
// primitive evaluates eagerly and records itself, and backward() replays the
// records in exact reverse order, accumulating gradients additively across
// fan-out. Node values are immutable once recorded. Tapes are single-threaded;
// independent tapes may run concurrently.
// ---------------------------------------------------------------------------

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddConst,
  ClampMin,
  Exp,
  Log,
  Relu,
  Linear,
  Conv2d,
  MaxPool2,
  Upsample2,
  ConcatC,
  SoftmaxC,
  Dropout,
  Sum,
  Mean,
  SqDiffMean,
  Reshape,
  BroadcastHW,
  CropHW,
  CrfPairwise,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::ClampMin: return "clamp_min";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Relu: return "relu";
    case Op::Linear: return "linear";
    case Op::Conv2d: return "conv2d";
    case Op::MaxPool2: return "max_pool2";
    case Op::Upsample2: return "upsample2";
    case Op::ConcatC: return "concat_c";
    case Op::SoftmaxC: return "softmax_c";
    case Op::Dropout: return "dropout";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SqDiffMean: return "sq_diff_mean";
    case Op::Reshape: return "reshape";
    case Op::BroadcastHW: return "broadcast_hw";
    case Op::CropHW: return "crop_hw";
    case Op::CrfPairwise: return "crf_pairwise";
  }
  return "?";
}

template <class S>
class Tape;

// Lightweight handle to one tape node.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Shape& shape() const;
  const ArrayX<S>& value() const;
  const ArrayX<S>& grad() const;
  Index size() const { return numel(shape()); }
};

template <class S>
class Tape {
 public:
  struct Node {
    Op op = Op::Leaf;
    Shape shape;
    ArrayX<S> value;
    ArrayX<S> grad;  // allocated lazily during backward
    std::array<int, 3> in{-1, -1, -1};
    S a = S(0);        // scale factor / constant / keep-prob / log floor
    bool flag = false;  // log: clamp enabled
    std::vector<Index> idx;  // pool argmax, crop offsets
    std::shared_ptr<const MatrixX<S>> mat;  // pairwise cost matrix
  };

  int record(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Var<S> leaf(Shape shape, ArrayX<S> value) {
    if (value.size() != numel(shape))
      throw ShapeError("leaf: value size " + std::to_string(value.size()) +
                       " does not match shape " + shape_str(shape));
    Node n;
    n.op = Op::Leaf;
    n.shape = std::move(shape);
    n.value = std::move(value);
    return Var<S>{this, record(std::move(n))};
  }

  Var<S> leaf(Shape shape, std::initializer_list<S> vals) {
    ArrayX<S> v(static_cast<Index>(vals.size()));
    Index i = 0;
    for (S x : vals) v[i++] = x;
    return leaf(std::move(shape), std::move(v));
  }

  const Node& node(int id) const { return nodes_.at(id); }
  Node& node(int id) { return nodes_.at(id); }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Populates gradient slots of every node reachable from `loss`, which must
  // be scalar. Gradients accumulate additively across fan-out.
  void backward(Var<S> loss) {
    if (loss.tape != this) throw ContractError("backward: loss from another tape");
    Node& ln = nodes_.at(loss.id);
    if (numel(ln.shape) != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(ln.shape));
    ln.grad = ArrayX<S>::Ones(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;  // not an ancestor of the loss
      backward_node(n);
    }
  }

  const ArrayX<S>& grad(int id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.size() == 0) {
      static const ArrayX<S> empty;
      return empty;
    }
    return n.grad;
  }

  // Gradient of a node, zeros if the node was unreachable from the loss.
  ArrayX<S> grad_or_zero(int id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.size() == 0) return ArrayX<S>::Zero(numel(n.shape));
    return n.grad;
  }

 private:
  std::vector<Node> nodes_;

  ArrayX<S>& acc(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() == 0) n.grad = ArrayX<S>::Zero(numel(n.shape));
    return n.grad;
  }

  void backward_node(Node& n);

 public:
  // -- recorded primitives; free-function wrappers below ---------------------

  Var<S> binary_ew(Op op, Var<S> a, Var<S> b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    if (na.shape != nb.shape)
      throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(na.shape) +
                       " vs " + shape_str(nb.shape));
    Node n;
    n.op = op;
    n.shape = na.shape;
    n.in = {a.id, b.id, -1};
    switch (op) {
      case Op::Add: n.value = na.value + nb.value; break;
      case Op::Sub: n.value = na.value - nb.value; break;
      case Op::Mul: n.value = na.value * nb.value; break;
      default: throw ContractError("binary_ew: bad op");
    }
    return Var<S>{this, record(std::move(n))};
  }

  Var<S> unary(Op op, Var<S> a, S c = S(0), bool flag = false) {
    const Node& na = node(a.id);
    Node n;
    n.op = op;
    n.shape = na.shape;
    n.in = {a.id, -1, -1};
    n.a = c;
    n.flag = flag;
    switch (op) {
      case Op::Scale: n.value = na.value * c; break;
      case Op::AddConst: n.value = na.value + c; break;
      case Op::ClampMin: n.value = na.value.max(c); break;
      case Op::Exp: n.value = na.value.exp(); break;
      case Op::Relu: n.value = na.value.max(S(0)); break;
      case Op::Log:
        if (flag) {
          n.value = na.value.max(c).log();
        } else {
          if ((na.value <= S(0)).any())
            throw DomainError("log: non-positive input without clamp enabled");
          n.value = na.value.log();
        }
        break;
      default: throw ContractError("unary: bad op");
    }
    return Var<S>{this, record(std::move(n))};
  }
};

template <class S>
const Shape& Var<S>::shape() const { return tape->node(id).shape; }
template <class S>
const ArrayX<S>& Var<S>::value() const { return tape->node(id).value; }
template <class S>
const ArrayX<S>& Var<S>::grad() const { return tape->grad(id); }

// --------------------------------------------------------------------------
// Elementwise primitives
// --------------------------------------------------------------------------

template <class S> Var<S> add(Var<S> a, Var<S> b) { return a.tape->binary_ew(Op::Add, a, b); }
template <class S> Var<S> sub(Var<S> a, Var<S> b) { return a.tape->binary_ew(Op::Sub, a, b); }
template <class S> Var<S> mul(Var<S> a, Var<S> b) { return a.tape->binary_ew(Op::Mul, a, b); }
template <class S> Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <class S> Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <class S> Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }

template <class S> Var<S> scale(Var<S> a, S c) { return a.tape->unary(Op::Scale, a, c); }
template <class S> Var<S> add_const(Var<S> a, S c) { return a.tape->unary(Op::AddConst, a, c); }
template <class S> Var<S> clamp_min(Var<S> a, S c) { return a.tape->unary(Op::ClampMin, a, c); }
template <class S> Var<S> vexp(Var<S> a) { return a.tape->unary(Op::Exp, a); }
template <class S> Var<S> relu(Var<S> a) { return a.tape->unary(Op::Relu, a); }

inline constexpr double kLogFloor = 1e-12;

// Natural log; the argument is clamped at 1e-12 by default so saturated
// probabilities stay finite. With clamp=false a non-positive input is a
// domain error.
template <class S>
Var<S> vlog(Var<S> a, bool clamp = true, S floor = S(kLogFloor)) {
  return a.tape->unary(Op::Log, a, floor, clamp);
}

// --------------------------------------------------------------------------
// Structured primitives
// --------------------------------------------------------------------------

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using ColMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

// Gathers zero-padded k x k windows of one [C,H,W] plane stack into a
// [C*kh*kw, H*W] matrix, one column per output pixel.
template <class S>
void im2col(const S* x, Index c, Index h, Index w, Index kh, Index kw, ColMat<S>& col) {
  const Index ph = kh / 2, pw = kw / 2;
  col.setZero(c * kh * kw, h * w);
  for (Index r = 0; r < h; ++r) {
    for (Index cc = 0; cc < w; ++cc) {
      S* out = col.col(r * w + cc).data();
      for (Index ch = 0; ch < c; ++ch) {
        const S* plane = x + ch * h * w;
        for (Index i = 0; i < kh; ++i) {
          const Index rr = r + i - ph;
          if (rr < 0 || rr >= h) { out += kw; continue; }
          const S* row = plane + rr * w;
          for (Index j = 0; j < kw; ++j) {
            const Index cw = cc + j - pw;
            *out++ = (cw < 0 || cw >= w) ? S(0) : row[cw];
          }
        }
      }
    }
  }
}

// Scatter-adds a [C*kh*kw, H*W] column matrix back onto the input layout.
template <class S>
void col2im_add(const ColMat<S>& col, Index c, Index h, Index w, Index kh, Index kw, S* gx) {
  const Index ph = kh / 2, pw = kw / 2;
  for (Index r = 0; r < h; ++r) {
    for (Index cc = 0; cc < w; ++cc) {
      const S* in = col.col(r * w + cc).data();
      for (Index ch = 0; ch < c; ++ch) {
        S* plane = gx + ch * h * w;
        for (Index i = 0; i < kh; ++i) {
          const Index rr = r + i - ph;
          if (rr < 0 || rr >= h) { in += kw; continue; }
          S* row = plane + rr * w;
          for (Index j = 0; j < kw; ++j) {
            const Index cw = cc + j - pw;
            S v = *in++;
            if (cw >= 0 && cw < w) row[cw] += v;
          }
        }
      }
    }
  }
}

}  // namespace detail

// Dense linear map y = x W^T + b with x [B,n] (or [n]), W [m,n], b [m].
template <class S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const Shape& bs = b.shape();
  if (ws.size() != 2 || (xs.size() != 1 && xs.size() != 2))
    throw ShapeError("linear: expected x [B,n] or [n] and w [m,n], got x=" + shape_str(xs) +
                     " w=" + shape_str(ws));
  const Index batch = xs.size() == 2 ? xs[0] : 1;
  const Index nin = xs.back();
  const Index nout = ws[0];
  if (ws[1] != nin || bs != Shape{nout})
    throw ShapeError("linear: inconsistent shapes x=" + shape_str(xs) + " w=" + shape_str(ws) +
                     " b=" + shape_str(bs));

  typename Tape<S>::Node n;
  n.op = Op::Linear;
  n.shape = xs.size() == 2 ? Shape{batch, nout} : Shape{nout};
  n.in = {x.id, w.id, b.id};
  n.value.resize(batch * nout);
  Eigen::Map<const detail::RowMat<S>> X(x.value().data(), batch, nin);
  Eigen::Map<const detail::RowMat<S>> W(w.value().data(), nout, nin);
  Eigen::Map<detail::RowMat<S>> Y(n.value.data(), batch, nout);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += b.value().matrix().transpose();
  return Var<S>{&t, t.record(std::move(n))};
}

// 2-D convolution, stride 1, zero padding preserving spatial size.
// x [N,C,H,W], w [F,C,kh,kw] (odd kernel extents), b [F].
template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw ShapeError("conv2d: expected x [N,C,H,W] and w [F,C,kh,kw], got x=" + shape_str(xs) +
                     " w=" + shape_str(ws));
  const Index N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const Index F = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != C)
    throw ShapeError("conv2d: weight channels do not match input, x=" + shape_str(xs) +
                     " w=" + shape_str(ws));
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ShapeError("conv2d: kernel extents must be odd, w=" + shape_str(ws));
  if (b.shape() != Shape{F})
    throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " does not match filters " +
                     std::to_string(F));

  typename Tape<S>::Node n;
  n.op = Op::Conv2d;
  n.shape = {N, F, H, W};
  n.in = {x.id, w.id, b.id};
  n.value.resize(N * F * H * W);
  Eigen::Map<const detail::RowMat<S>> Wm(w.value().data(), F, C * kh * kw);
  detail::ColMat<S> col;
  for (Index i = 0; i < N; ++i) {
    detail::im2col(x.value().data() + i * C * H * W, C, H, W, kh, kw, col);
    Eigen::Map<detail::RowMat<S>> Y(n.value.data() + i * F * H * W, F, H * W);
    Y.noalias() = Wm * col;
    Y.colwise() += b.value().matrix();
  }
  return Var<S>{&t, t.record(std::move(n))};
}

// 2x2 max-pool, stride 2. Ties break toward the first element in scan order.
template <class S>
Var<S> max_pool2(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0)
    throw ShapeError("max_pool2: expected [N,C,H,W] with even H,W, got " + shape_str(xs));
  const Index N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const Index oh = H / 2, ow = W / 2;

  typename Tape<S>::Node n;
  n.op = Op::MaxPool2;
  n.shape = {N, C, oh, ow};
  n.in = {x.id, -1, -1};
  n.value.resize(N * C * oh * ow);
  n.idx.resize(N * C * oh * ow);
  const S* xv = x.value().data();
  Index o = 0;
  for (Index nc = 0; nc < N * C; ++nc) {
    const S* plane = xv + nc * H * W;
    for (Index r = 0; r < oh; ++r) {
      for (Index c = 0; c < ow; ++c) {
        Index best = (2 * r) * W + 2 * c;
        S bv = plane[best];
        for (Index dr = 0; dr < 2; ++dr)
          for (Index dc = 0; dc < 2; ++dc) {
            Index p = (2 * r + dr) * W + (2 * c + dc);
            if (plane[p] > bv) { bv = plane[p]; best = p; }
          }
        n.value[o] = bv;
        n.idx[o] = nc * H * W + best;
        ++o;
      }
    }
  }
  return Var<S>{&t, t.record(std::move(n))};
}

// Nearest-neighbour upsample by a factor of 2.
template <class S>
Var<S> upsample2(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("upsample2: expected [N,C,H,W], got " + shape_str(xs));
  const Index N = xs[0], C = xs[1], H = xs[2], W = xs[3];

  typename Tape<S>::Node n;
  n.op = Op::Upsample2;
  n.shape = {N, C, 2 * H, 2 * W};
  n.in = {x.id, -1, -1};
  n.value.resize(N * C * 4 * H * W);
  const S* xv = x.value().data();
  for (Index nc = 0; nc < N * C; ++nc) {
    const S* src = xv + nc * H * W;
    S* dst = n.value.data() + nc * 4 * H * W;
    for (Index r = 0; r < 2 * H; ++r)
      for (Index c = 0; c < 2 * W; ++c) dst[r * 2 * W + c] = src[(r / 2) * W + c / 2];
  }
  return Var<S>{&t, t.record(std::move(n))};
}

// Channel concatenation of [N,C1,H,W] and [N,C2,H,W].
template <class S>
Var<S> concat_c(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
    throw ShapeError("concat_c: incompatible shapes " + shape_str(as) + " vs " + shape_str(bs));
  const Index N = as[0], C1 = as[1], C2 = bs[1], H = as[2], W = as[3];

  typename Tape<S>::Node n;
  n.op = Op::ConcatC;
  n.shape = {N, C1 + C2, H, W};
  n.in = {a.id, b.id, -1};
  n.value.resize(N * (C1 + C2) * H * W);
  for (Index i = 0; i < N; ++i) {
    n.value.segment(i * (C1 + C2) * H * W, C1 * H * W) = a.value().segment(i * C1 * H * W, C1 * H * W);
    n.value.segment(i * (C1 + C2) * H * W + C1 * H * W, C2 * H * W) =
        b.value().segment(i * C2 * H * W, C2 * H * W);
  }
  return Var<S>{&t, t.record(std::move(n))};
}

// Channel-wise softmax over dim 1 of [N,C,...] (or dim 0 of a rank-1 tensor).
template <class S>
Var<S> softmax_c(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  Index N = 1, C, sp = 1;
  if (xs.size() == 1) {
    C = xs[0];
  } else {
    N = xs[0];
    C = xs[1];
    for (size_t i = 2; i < xs.size(); ++i) sp *= xs[i];
  }
  if (C < 1) throw ShapeError("softmax_c: no channels in " + shape_str(xs));

  typename Tape<S>::Node n;
  n.op = Op::SoftmaxC;
  n.shape = xs;
  n.in = {x.id, -1, -1};
  n.value.resize(x.value().size());
  const S* xv = x.value().data();
  S* yv = n.value.data();
  for (Index i = 0; i < N; ++i) {
    for (Index s = 0; s < sp; ++s) {
      const Index base = i * C * sp + s;
      S mx = xv[base];
      for (Index c = 1; c < C; ++c) mx = std::max(mx, xv[base + c * sp]);
      S z = S(0);
      for (Index c = 0; c < C; ++c) {
        S e = std::exp(xv[base + c * sp] - mx);
        yv[base + c * sp] = e;
        z += e;
      }
      for (Index c = 0; c < C; ++c) yv[base + c * sp] /= z;
    }
  }
  return Var<S>{&t, t.record(std::move(n))};
}

// Masked dropout: the binary mask is precomputed from an explicit Rng and
// stored on the tape so forward and backward see the same draw.
template <class S>
Var<S> dropout_masked(Var<S> x, ArrayX<S> mask, S keep_prob) {
  Tape<S>& t = *x.tape;
  if (mask.size() != x.value().size())
    throw ShapeError("dropout: mask size " + std::to_string(mask.size()) +
                     " does not match input " + shape_str(x.shape()));
  if (!(keep_prob > S(0)) || keep_prob > S(1))
    throw ContractError("dropout: keep probability must be in (0,1]");

  typename Tape<S>::Node n;
  n.op = Op::Dropout;
  n.shape = x.shape();
  n.in = {x.id, -1, -1};
  n.a = keep_prob;
  n.value = x.value() * mask / keep_prob;
  n.idx.resize(mask.size());
  for (Index i = 0; i < mask.size(); ++i) n.idx[i] = mask[i] != S(0) ? 1 : 0;
  return Var<S>{&t, t.record(std::move(n))};
}

template <class S>
Var<S> vsum(Var<S> x) {
  Tape<S>& t = *x.tape;
  typename Tape<S>::Node n;
  n.op = Op::Sum;
  n.shape = {1};
  n.in = {x.id, -1, -1};
  n.value = ArrayX<S>::Constant(1, x.value().sum());
  return Var<S>{&t, t.record(std::move(n))};
}

template <class S>
Var<S> vmean(Var<S> x) {
  Tape<S>& t = *x.tape;
  typename Tape<S>::Node n;
  n.op = Op::Mean;
  n.shape = {1};
  n.in = {x.id, -1, -1};
  n.value = ArrayX<S>::Constant(1, x.value().mean());
  return Var<S>{&t, t.record(std::move(n))};
}

// mean((a - b)^2), the reconstruction error primitive.
template <class S>
Var<S> sq_diff_mean(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.shape() != b.shape())
    throw ShapeError("sq_diff_mean: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  typename Tape<S>::Node n;
  n.op = Op::SqDiffMean;
  n.shape = {1};
  n.in = {a.id, b.id, -1};
  n.value = ArrayX<S>::Constant(1, (a.value() - b.value()).square().mean());
  return Var<S>{&t, t.record(std::move(n))};
}

template <class S>
Var<S> reshape(Var<S> x, Shape shape) {
  Tape<S>& t = *x.tape;
  if (numel(shape) != numel(x.shape()))
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  typename Tape<S>::Node n;
  n.op = Op::Reshape;
  n.shape = std::move(shape);
  n.in = {x.id, -1, -1};
  n.value = x.value();
  return Var<S>{&t, t.record(std::move(n))};
}

// Broadcast [N,D] to [N,D,H,W] (each scalar replicated over the plane).
template <class S>
Var<S> broadcast_hw(Var<S> z, Index h, Index w) {
  Tape<S>& t = *z.tape;
  const Shape& zs = z.shape();
  if (zs.size() != 2) throw ShapeError("broadcast_hw: expected [N,D], got " + shape_str(zs));
  const Index N = zs[0], D = zs[1];

  typename Tape<S>::Node n;
  n.op = Op::BroadcastHW;
  n.shape = {N, D, h, w};
  n.in = {z.id, -1, -1};
  n.value.resize(N * D * h * w);
  for (Index i = 0; i < N * D; ++i) n.value.segment(i * h * w, h * w).setConstant(z.value()[i]);
  return Var<S>{&t, t.record(std::move(n))};
}

// Spatial crop of [N,C,H,W] starting at (r0, c0).
template <class S>
Var<S> crop_hw(Var<S> x, Index r0, Index c0, Index h, Index w) {
  Tape<S>& t = *x.tape;
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("crop_hw: expected [N,C,H,W], got " + shape_str(xs));
  const Index N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (r0 < 0 || c0 < 0 || h < 1 || w < 1 || r0 + h > H || c0 + w > W)
    throw ShapeError("crop_hw: window out of range for " + shape_str(xs));

  typename Tape<S>::Node n;
  n.op = Op::CropHW;
  n.shape = {N, C, h, w};
  n.in = {x.id, -1, -1};
  n.idx = {r0, c0};
  n.value.resize(N * C * h * w);
  for (Index nc = 0; nc < N * C; ++nc) {
    const S* src = x.value().data() + nc * H * W;
    S* dst = n.value.data() + nc * h * w;
    for (Index r = 0; r < h; ++r)
      for (Index c = 0; c < w; ++c) dst[r * w + c] = src[(r0 + r) * W + (c0 + c)];
  }
  return Var<S>{&t, t.record(std::move(n))};
}

// Pairwise discontinuity cost sum_c y_c^T K (1 - y_c) over flattened pixels,
// summed over batch. K must match the spatial pixel count of y [N,C,h,w].
// Gradient per class is K (1 - y_c) - K^T y_c.
template <class S>
Var<S> crf_pairwise(Var<S> y, std::shared_ptr<const MatrixX<S>> K) {
  Tape<S>& t = *y.tape;
  const Shape& ys = y.shape();
  if (ys.size() != 4) throw ShapeError("crf_pairwise: expected [N,C,H,W], got " + shape_str(ys));
  const Index n_pix = ys[2] * ys[3];
  if (!K || K->rows() != n_pix || K->cols() != n_pix)
    throw ShapeError("crf_pairwise: cost matrix " +
                     (K ? std::to_string(K->rows()) + "x" + std::to_string(K->cols())
                        : std::string("null")) +
                     " does not match pixel count " + std::to_string(n_pix));

  typename Tape<S>::Node n;
  n.op = Op::CrfPairwise;
  n.shape = {1};
  n.in = {y.id, -1, -1};
  n.mat = std::move(K);
  S total = S(0);
  const Index planes = ys[0] * ys[1];
  for (Index p = 0; p < planes; ++p) {
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> yc(y.value().data() + p * n_pix, n_pix);
    total += yc.dot((*n.mat) * (Eigen::Matrix<S, Eigen::Dynamic, 1>::Ones(n_pix) - yc));
  }
  n.value = ArrayX<S>::Constant(1, total);
  return Var<S>{&t, t.record(std::move(n))};
}

// --------------------------------------------------------------------------
// Backward dispatch
// --------------------------------------------------------------------------

template <class S>
void Tape<S>::backward_node(Node& n) {
  const ArrayX<S>& g = n.grad;
  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::Add:
      acc(n.in[0]) += g;
      acc(n.in[1]) += g;
      break;
    case Op::Sub:
      acc(n.in[0]) += g;
      acc(n.in[1]) -= g;
      break;
    case Op::Mul:
      acc(n.in[0]) += g * nodes_[n.in[1]].value;
      acc(n.in[1]) += g * nodes_[n.in[0]].value;
      break;
    case Op::Scale:
      acc(n.in[0]) += g * n.a;
      break;
    case Op::AddConst:
      acc(n.in[0]) += g;
      break;
    case Op::ClampMin:
      acc(n.in[0]) += g * (nodes_[n.in[0]].value > n.a).template cast<S>();
      break;
    case Op::Exp:
      acc(n.in[0]) += g * n.value;
      break;
    case Op::Log: {
      const ArrayX<S>& xv = nodes_[n.in[0]].value;
      if (n.flag) {
        acc(n.in[0]) += g * (xv > n.a).template cast<S>() / xv.max(n.a);
      } else {
        acc(n.in[0]) += g / xv;
      }
      break;
    }
    case Op::Relu:
      acc(n.in[0]) += g * (nodes_[n.in[0]].value > S(0)).template cast<S>();
      break;
    case Op::Linear: {
      const Node& xn = nodes_[n.in[0]];
      const Node& wn = nodes_[n.in[1]];
      const Index nout = wn.shape[0], nin = wn.shape[1];
      const Index batch = xn.shape.size() == 2 ? xn.shape[0] : 1;
      Eigen::Map<const detail::RowMat<S>> G(g.data(), batch, nout);
      Eigen::Map<const detail::RowMat<S>> X(xn.value.data(), batch, nin);
      Eigen::Map<const detail::RowMat<S>> W(wn.value.data(), nout, nin);
      Eigen::Map<detail::RowMat<S>> GX(acc(n.in[0]).data(), batch, nin);
      Eigen::Map<detail::RowMat<S>> GW(acc(n.in[1]).data(), nout, nin);
      GX.noalias() += G * W;
      GW.noalias() += G.transpose() * X;
      acc(n.in[2]).matrix() += G.colwise().sum().transpose();
      break;
    }
    case Op::Conv2d: {
      const Node& xn = nodes_[n.in[0]];
      const Node& wn = nodes_[n.in[1]];
      const Index N = xn.shape[0], C = xn.shape[1], H = xn.shape[2], W = xn.shape[3];
      const Index F = wn.shape[0], kh = wn.shape[2], kw = wn.shape[3];
      Eigen::Map<const detail::RowMat<S>> Wm(wn.value.data(), F, C * kh * kw);
      Eigen::Map<detail::RowMat<S>> GW(acc(n.in[1]).data(), F, C * kh * kw);
      ArrayX<S>& gx = acc(n.in[0]);
      ArrayX<S>& gb = acc(n.in[2]);
      detail::ColMat<S> col, gcol;
      for (Index i = 0; i < N; ++i) {
        Eigen::Map<const detail::RowMat<S>> G(g.data() + i * F * H * W, F, H * W);
        detail::im2col(xn.value.data() + i * C * H * W, C, H, W, kh, kw, col);
        GW.noalias() += G * col.transpose();
        gb.matrix() += G.rowwise().sum();
        gcol.noalias() = Wm.transpose() * G;
        detail::col2im_add(gcol, C, H, W, kh, kw, gx.data() + i * C * H * W);
      }
      break;
    }
    case Op::MaxPool2: {
      ArrayX<S>& gx = acc(n.in[0]);
      for (Index i = 0; i < g.size(); ++i) gx[n.idx[i]] += g[i];
      break;
    }
    case Op::Upsample2: {
      const Node& xn = nodes_[n.in[0]];
      const Index NC = xn.shape[0] * xn.shape[1], H = xn.shape[2], W = xn.shape[3];
      ArrayX<S>& gx = acc(n.in[0]);
      for (Index nc = 0; nc < NC; ++nc) {
        const S* gsrc = g.data() + nc * 4 * H * W;
        S* gdst = gx.data() + nc * H * W;
        for (Index r = 0; r < 2 * H; ++r)
          for (Index c = 0; c < 2 * W; ++c) gdst[(r / 2) * W + c / 2] += gsrc[r * 2 * W + c];
      }
      break;
    }
    case Op::ConcatC: {
      const Node& an = nodes_[n.in[0]];
      const Node& bn = nodes_[n.in[1]];
      const Index N = an.shape[0], HW = an.shape[2] * an.shape[3];
      const Index C1 = an.shape[1], C2 = bn.shape[1];
      ArrayX<S>& ga = acc(n.in[0]);
      ArrayX<S>& gb = acc(n.in[1]);
      for (Index i = 0; i < N; ++i) {
        ga.segment(i * C1 * HW, C1 * HW) += g.segment(i * (C1 + C2) * HW, C1 * HW);
        gb.segment(i * C2 * HW, C2 * HW) += g.segment(i * (C1 + C2) * HW + C1 * HW, C2 * HW);
      }
      break;
    }
    case Op::SoftmaxC: {
      const Shape& xs = n.shape;
      Index N = 1, C, sp = 1;
      if (xs.size() == 1) {
        C = xs[0];
      } else {
        N = xs[0];
        C = xs[1];
        for (size_t i = 2; i < xs.size(); ++i) sp *= xs[i];
      }
      ArrayX<S>& gx = acc(n.in[0]);
      const S* yv = n.value.data();
      const S* gv = g.data();
      for (Index i = 0; i < N; ++i) {
        for (Index s = 0; s < sp; ++s) {
          const Index base = i * C * sp + s;
          S dot = S(0);
          for (Index c = 0; c < C; ++c) dot += gv[base + c * sp] * yv[base + c * sp];
          for (Index c = 0; c < C; ++c)
            gx[base + c * sp] += yv[base + c * sp] * (gv[base + c * sp] - dot);
        }
      }
      break;
    }
    case Op::Dropout: {
      ArrayX<S>& gx = acc(n.in[0]);
      for (Index i = 0; i < g.size(); ++i)
        if (n.idx[i]) gx[i] += g[i] / n.a;
      break;
    }
    case Op::Sum:
      acc(n.in[0]) += g[0];
      break;
    case Op::Mean:
      acc(n.in[0]) += g[0] / S(numel(nodes_[n.in[0]].shape));
      break;
    case Op::SqDiffMean: {
      const ArrayX<S>& av = nodes_[n.in[0]].value;
      const ArrayX<S>& bv = nodes_[n.in[1]].value;
      const S c = g[0] * S(2) / S(av.size());
      acc(n.in[0]) += c * (av - bv);
      acc(n.in[1]) -= c * (av - bv);
      break;
    }
    case Op::Reshape:
      acc(n.in[0]) += g;
      break;
    case Op::BroadcastHW: {
      const Index hw = n.shape[2] * n.shape[3];
      ArrayX<S>& gz = acc(n.in[0]);
      for (Index i = 0; i < gz.size(); ++i) gz[i] += g.segment(i * hw, hw).sum();
      break;
    }
    case Op::CropHW: {
      const Node& xn = nodes_[n.in[0]];
      const Index NC = xn.shape[0] * xn.shape[1], H = xn.shape[2], W = xn.shape[3];
      const Index h = n.shape[2], w = n.shape[3];
      const Index r0 = n.idx[0], c0 = n.idx[1];
      ArrayX<S>& gx = acc(n.in[0]);
      for (Index nc = 0; nc < NC; ++nc) {
        const S* gs = g.data() + nc * h * w;
        S* gd = gx.data() + nc * H * W;
        for (Index r = 0; r < h; ++r)
          for (Index c = 0; c < w; ++c) gd[(r0 + r) * W + (c0 + c)] += gs[r * w + c];
      }
      break;
    }
    case Op::CrfPairwise: {
      const Node& yn = nodes_[n.in[0]];
      const Index n_pix = yn.shape[2] * yn.shape[3];
      const Index planes = yn.shape[0] * yn.shape[1];
      ArrayX<S>& gy = acc(n.in[0]);
      const MatrixX<S>& K = *n.mat;
      using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
      for (Index p = 0; p < planes; ++p) {
        Eigen::Map<const Vec> yc(yn.value.data() + p * n_pix, n_pix);
        Eigen::Map<Vec> gc(gy.data() + p * n_pix, n_pix);
        gc.noalias() += g[0] * (K * (Vec::Ones(n_pix) - yc) - K.transpose() * yc);
      }
      break;
    }
  }
}

// --------------------------------------------------------------------------
// Central finite-difference oracle: (f(x + eps e_i) - f(x - eps e_i)) / 2 eps.
// --------------------------------------------------------------------------

template <class S, class F>
ArrayX<S> finite_difference_grad(F&& f, const ArrayX<S>& x, S eps) {
  if (!(eps > S(0))) throw ContractError("finite_difference_grad: eps must be positive");
  ArrayX<S> g(x.size());
  ArrayX<S> xp = x;
  for (Index i = 0; i < x.size(); ++i) {
    const S xi = x[i];
    xp[i] = xi + eps;
    const S fp = f(static_cast<const ArrayX<S>&>(xp));
    xp[i] = xi - eps;
    const S fm = f(static_cast<const ArrayX<S>&>(xp));
    xp[i] = xi;
    g[i] = (fp - fm) / (S(2) * eps);
  }
  return g;
}

// Scaled max deviation between an analytic and a reference gradient:
// |a - r| / max(1, |a|, |r|), elementwise maximum.
template <class S>
S max_rel_err(const ArrayX<S>& analytic, const ArrayX<S>& reference) {
  if (analytic.size() != reference.size())
    throw ShapeError("max_rel_err: size mismatch");
  S worst = S(0);
  for (Index i = 0; i < analytic.size(); ++i) {
    const S denom = std::max(S(1), std::max(std::abs(analytic[i]), std::abs(reference[i])));
    worst = std::max(worst, std::abs(analytic[i] - reference[i]) / denom);
  }
  return worst;
}

}  // namespace bws
