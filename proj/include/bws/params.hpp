#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "bws/common.hpp"
#include "bws/rng.hpp"
#include "bws/tensor.hpp"

namespace bws {

template <class S>
using GradMap = std::map<std::string, ArrayX<S>>;

// Named parameter tensors with a stable iteration order.
template <class S>
class ParamStore {
 public:
  struct Entry {
    Shape shape;
    ArrayX<S> value;
  };

  ArrayX<S>& add(const std::string& name, Shape shape, ArrayX<S> value) {
    if (entries_.count(name)) throw ContractError("ParamStore: duplicate parameter " + name);
    if (value.size() != numel(shape))
      throw ShapeError("ParamStore: value for " + name + " does not match " + shape_str(shape));
    names_.push_back(name);
    auto& e = entries_[name];
    e.shape = std::move(shape);
    e.value = std::move(value);
    return e.value;
  }

  ArrayX<S>& add_zeros(const std::string& name, Shape shape) {
    return add(name, shape, ArrayX<S>::Zero(numel(shape)));
  }

  // Kaiming-style fan-in scaled normal init.
  ArrayX<S>& add_kaiming(const std::string& name, Shape shape, Index fan_in, Rng& rng) {
    ArrayX<S> v(numel(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(rng.normal(0.0, std));
    return add(name, std::move(shape), std::move(v));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("ParamStore: unknown parameter " + name);
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("ParamStore: unknown parameter " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  bool all_finite() const {
    for (const auto& name : names_)
      if (!entries_.at(name).value.isFinite().all()) return false;
    return true;
  }

  bool operator==(const ParamStore& o) const {
    if (names_ != o.names_) return false;
    for (const auto& n : names_) {
      const auto& a = entries_.at(n);
      const auto& b = o.entries_.at(n);
      if (a.shape != b.shape || a.value.size() != b.value.size() || !(a.value == b.value).all())
        return false;
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Optimizers. Adam uses decoupled weight decay; SGD uses momentum with
// polynomial learning-rate decay. Parameters absent from the gradient map are
// left untouched.
// ---------------------------------------------------------------------------

enum class OptimizerKind { Adam, SgdPoly };

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::SgdPoly;
  throw ContractError("unknown optimizer '" + s + "' (expected adam or sgd)");
}

template <class S>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, S lr, S weight_decay, Index total_steps = 0)
      : kind_(kind), lr_(lr), weight_decay_(weight_decay), total_steps_(total_steps) {}

  void step(ParamStore<S>& params, const GradMap<S>& grads) {
    ++t_;
    for (const auto& [name, g] : grads) {
      auto& p = params.at(name).value;
      if (g.size() != p.size())
        throw ShapeError("optimizer: gradient for " + name + " has wrong size");
      auto& st = state_[name];
      if (st.m.size() == 0) {
        st.m = ArrayX<S>::Zero(p.size());
        st.v = ArrayX<S>::Zero(p.size());
      }
      if (kind_ == OptimizerKind::Adam) {
        p -= lr_ * weight_decay_ * p;
        st.m = beta1_ * st.m + (S(1) - beta1_) * g;
        st.v = beta2_ * st.v + (S(1) - beta2_) * g.square();
        const S c1 = S(1) - std::pow(beta1_, S(t_));
        const S c2 = S(1) - std::pow(beta2_, S(t_));
        p -= lr_ * (st.m / c1) / ((st.v / c2).sqrt() + eps_);
      } else {
        const S frac = total_steps_ > 0 ? S(t_ - 1) / S(total_steps_) : S(0);
        const S lr_t = lr_ * std::pow(std::max(S(0), S(1) - frac), S(0.9));
        st.m = momentum_ * st.m + g + weight_decay_ * p;
        p -= lr_t * st.m;
      }
    }
  }

  Index steps_taken() const { return t_; }

 private:
  struct State {
    ArrayX<S> m, v;
  };
  OptimizerKind kind_;
  S lr_, weight_decay_;
  Index total_steps_;
  S beta1_ = S(0.9), beta2_ = S(0.999), eps_ = S(1e-8), momentum_ = S(0.9);
  Index t_ = 0;
  std::map<std::string, State> state_;
};

// ---------------------------------------------------------------------------
// Checkpoint file: little-endian binary with magic, version, a named
// parameter table (name, shape, raw 64-bit floats) and a trailing CRC-32 of
// everything before it.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'B', 'W', 'S', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const std::string& s, std::size_t& off) {
  if (off + 4 > s.size()) throw ParseError("checkpoint: truncated at byte " + std::to_string(off));
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  off += 4;
  return v;
}
inline std::uint64_t get_u64(const std::string& s, std::size_t& off) {
  if (off + 8 > s.size()) throw ParseError("checkpoint: truncated at byte " + std::to_string(off));
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  off += 8;
  return v;
}

}  // namespace detail

// Writes a file atomically: payload goes to a sibling temp file which is then
// renamed over the destination.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& payload) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return data;
}

template <class S>
void save_checkpoint(const ParamStore<S>& params, const std::filesystem::path& path) {
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& name : params.names()) {
    const auto& e = params.at(name);
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (Index d : e.shape) detail::put_u64(out, static_cast<std::uint64_t>(d));
    for (Index i = 0; i < e.value.size(); ++i) {
      const double v = static_cast<double>(e.value[i]);
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      detail::put_u64(out, bits);
    }
  }
  detail::put_u32(out, crc32(out.data(), out.size()));
  write_file_atomic(path, out);
}

template <class S>
ParamStore<S> load_checkpoint(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  if (data.size() < sizeof(kCheckpointMagic) + 12)
    throw ParseError("checkpoint " + path.string() + ": file too short (" +
                     std::to_string(data.size()) + " bytes)");
  if (std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw ParseError("checkpoint " + path.string() + ": bad magic at byte 0");
  const std::uint32_t stored_crc = [&] {
    std::size_t off = data.size() - 4;
    return detail::get_u32(data, off);
  }();
  if (crc32(data.data(), data.size() - 4) != stored_crc)
    throw ParseError("checkpoint " + path.string() + ": CRC mismatch");

  std::size_t off = sizeof(kCheckpointMagic);
  const std::uint32_t version = detail::get_u32(data, off);
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint " + path.string() + ": unsupported version " +
                     std::to_string(version));
  const std::uint32_t count = detail::get_u32(data, off);
  ParamStore<S> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(data, off);
    if (off + name_len > data.size() - 4)
      throw ParseError("checkpoint " + path.string() + ": truncated name at byte " +
                       std::to_string(off));
    std::string name = data.substr(off, name_len);
    off += name_len;
    const std::uint32_t rank = detail::get_u32(data, off);
    Shape shape(rank);
    for (std::uint32_t r = 0; r < rank; ++r)
      shape[r] = static_cast<Index>(detail::get_u64(data, off));
    ArrayX<S> value(numel(shape));
    for (Index k = 0; k < value.size(); ++k) {
      const std::uint64_t bits = detail::get_u64(data, off);
      double v;
      std::memcpy(&v, &bits, sizeof(v));
      value[k] = static_cast<S>(v);
    }
    params.add(name, std::move(shape), std::move(value));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Graph context: one forward/backward pass over a tape, with parameter leaves
// memoized by name so fan-out accumulates on a single node per parameter.
// ---------------------------------------------------------------------------

template <class S>
class GraphContext {
 public:
  explicit GraphContext(ParamStore<S>& params) : params_(&params) {}

  Tape<S>& tape() { return tape_; }

  // Parameter leaf (memoized).
  Var<S> p(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return Var<S>{&tape_, it->second};
    auto& e = params_->at(name);
    Var<S> v = tape_.leaf(e.shape, e.value);
    leaves_.emplace(name, v.id);
    return v;
  }

  // Constant leaf.
  Var<S> c(Shape shape, ArrayX<S> value) { return tape_.leaf(std::move(shape), std::move(value)); }
  Var<S> c(Shape shape, std::initializer_list<S> vals) {
    return tape_.leaf(std::move(shape), vals);
  }

  void backward(Var<S> loss) { tape_.backward(loss); }

  // Accumulates parameter gradients (scaled) into `out`, skipping parameters
  // the loss never reached.
  void grads_into(GradMap<S>& out, S scale = S(1)) const {
    for (const auto& [name, id] : leaves_) {
      const ArrayX<S>& g = tape_.grad(id);
      if (g.size() == 0) continue;
      auto it = out.find(name);
      if (it == out.end())
        out.emplace(name, g * scale);
      else
        it->second += g * scale;
    }
  }

 private:
  ParamStore<S>* params_;
  Tape<S> tape_;
  std::unordered_map<std::string, int> leaves_;
};

}  // namespace bws
