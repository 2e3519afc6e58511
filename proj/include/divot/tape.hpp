#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "divot/errors.hpp"
#include "divot/kernels.hpp"
#include "divot/param.hpp"
#include "divot/shape.hpp"

// Reverse-mode autodiff on an eager tape. Every op computes its value
// immediately and records a closure that routes the output gradient to its
// inputs. backward() walks the tape once in reverse creation order (creation
// order is already topological), so each node's closure runs exactly once and
// shared subexpressions accumulate gradient from all consumers.
//
// Templated on the scalar type: float for training, double for verification
// (finite-difference checks run the same graph code in f64).

namespace divot::ad {

template <typename T>
class Tape;

// Cheap handle into a tape. Values are only valid until the tape is reset.
template <typename T>
struct Ref {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const { return tape->node_shape(id); }
  int dim(int i) const { return shape()[i < 0 ? shape().size() + i : i]; }
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t count() const { return numel(shape()); }
  std::span<const T> value() const { return tape->node_value(id); }
  std::span<const T> grad() const { return tape->node_grad(id); }
  T scalar() const {
    if (count() != 1) fail_runtime("scalar(): tensor has shape " + shape_str(shape()));
    return value()[0];
  }
};

// Bump allocator backing node values/gradients for one tape. reset() rewinds
// without freeing, so steady-state training does no per-step allocation.
template <typename T>
class Arena {
public:
  T* alloc(int64_t n) {
    const int64_t need = (n + 7) & ~int64_t(7);
    if (used_ + need > cap_) grow(need);
    T* p = cur_ + used_;
    used_ += need;
    return p;
  }
  T* alloc_zero(int64_t n) {
    T* p = alloc(n);
    std::memset(p, 0, sizeof(T) * n);
    return p;
  }
  void reset() {
    used_ = 0;
    if (blocks_.size() > 1) {  // coalesce into one block sized for the peak
      int64_t total = 0;
      for (const auto& b : blocks_) total += b.size;
      blocks_.clear();
      blocks_.push_back({std::make_unique<T[]>(total), total});
      cur_ = blocks_.back().data.get();
      cap_ = total;
    }
  }

private:
  struct Block {
    std::unique_ptr<T[]> data;
    int64_t size;
  };
  void grow(int64_t need) {
    const int64_t sz = std::max<int64_t>(need, 4 << 20);
    blocks_.push_back({std::make_unique<T[]>(sz), sz});
    cur_ = blocks_.back().data.get();
    cap_ = sz;
    used_ = 0;
  }
  std::vector<Block> blocks_;
  T* cur_ = nullptr;
  int64_t cap_ = 0, used_ = 0;
};

template <typename T>
class Tape {
public:
  using K = kern::Kern<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When false, params enter as constants and no backward closures are kept:
  // the same model code then runs in inference mode.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  void reset() {
    nodes_.clear();
    param_leaves_.clear();
    arena_.reset();
    backward_ran_ = false;
  }

  size_t num_nodes() const { return nodes_.size(); }

  // ---- leaves ----

  Ref<T> input(Shape shape, const std::vector<T>& data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      fail_runtime("input: data size " + std::to_string(data.size()) + " != shape " + shape_str(shape));
    Ref<T> r = fresh(std::move(shape), requires_grad && grad_enabled_);
    std::memcpy(mut_value(r.id), data.data(), sizeof(T) * data.size());
    return r;
  }

  // Borrows external memory (caller keeps it alive until reset).
  Ref<T> borrow(Shape shape, const T* data, bool requires_grad = false) {
    Ref<T> r = fresh_view(std::move(shape), data, requires_grad && grad_enabled_);
    return r;
  }

  Ref<T> param(Param<T>& p) {
    Ref<T> r = fresh_view(p.shape, p.value.data(), grad_enabled_);
    if (grad_enabled_) param_leaves_.push_back({r.id, &p});
    return r;
  }

  Ref<T> full(Shape shape, T v) {
    Ref<T> r = fresh(std::move(shape), false);
    T* out = mut_value(r.id);
    std::fill(out, out + r.count(), v);
    return r;
  }
  Ref<T> zeros(Shape shape) { return full(std::move(shape), T(0)); }
  Ref<T> scalar_const(T v) { return full({1}, v); }

  // ---- elementwise binary (suffix broadcast over leading axes) ----

  Ref<T> add(Ref<T> a, Ref<T> b) { return binary("add", a, b, BinOp::add); }
  Ref<T> sub(Ref<T> a, Ref<T> b) { return binary("sub", a, b, BinOp::sub); }
  Ref<T> mul(Ref<T> a, Ref<T> b) { return binary("mul", a, b, BinOp::mul); }
  Ref<T> div(Ref<T> a, Ref<T> b) { return binary("div", a, b, BinOp::div); }

  // rhs has the lhs shape minus its last axis: y[..., c] = x[..., c] op r[...].
  Ref<T> add_last(Ref<T> x, Ref<T> r) { return binary_last("add_last", x, r, BinOp::add); }
  Ref<T> sub_last(Ref<T> x, Ref<T> r) { return binary_last("sub_last", x, r, BinOp::sub); }
  Ref<T> mul_last(Ref<T> x, Ref<T> r) { return binary_last("mul_last", x, r, BinOp::mul); }
  Ref<T> div_last(Ref<T> x, Ref<T> r) { return binary_last("div_last", x, r, BinOp::div); }

  Ref<T> scale(Ref<T> x, T c) {
    Ref<T> y = fresh(x.shape(), needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    const int64_t n = x.count();
    for (int64_t i = 0; i < n; ++i) yv[i] = xv[i] * c;
    if (y_requires(y)) record(y, [this, x, y, c, n] { K::axpy(c, grad_ptr(y.id), ensure_grad(x.id), n); });
    return y;
  }

  Ref<T> add_const(Ref<T> x, T c) {
    Ref<T> y = fresh(x.shape(), needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    const int64_t n = x.count();
    for (int64_t i = 0; i < n; ++i) yv[i] = xv[i] + c;
    if (y_requires(y)) record(y, [this, x, y, n] { K::axpy(T(1), grad_ptr(y.id), ensure_grad(x.id), n); });
    return y;
  }

  Ref<T> neg(Ref<T> x) { return scale(x, T(-1)); }

  // ---- elementwise unary ----

  Ref<T> exp(Ref<T> x) {
    Ref<T> y = map_unary(x, [](const T* in, T* out, int64_t n) { K::vexp(in, out, n); });
    if (y_requires(y)) {
      record(y, [this, x, y] {
        const T* yv = value_ptr(y.id);
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        const int64_t n = x.count();
        for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] * yv[i];
      });
    }
    return y;
  }

  Ref<T> log(Ref<T> x) {
    Ref<T> y = fresh(x.shape(), needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    const int64_t n = x.count();
    for (int64_t i = 0; i < n; ++i) yv[i] = std::log(xv[i]);
    if (y_requires(y)) {
      record(y, [this, x, y, n] {
        const T* xv2 = value_ptr(x.id);
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] / xv2[i];
      });
    }
    return y;
  }

  Ref<T> sqrt(Ref<T> x) {
    Ref<T> y = fresh(x.shape(), needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    const int64_t n = x.count();
    for (int64_t i = 0; i < n; ++i) yv[i] = std::sqrt(xv[i]);
    if (y_requires(y)) {
      record(y, [this, x, y, n] {
        const T* yv2 = value_ptr(y.id);
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] * T(0.5) / yv2[i];
      });
    }
    return y;
  }

  Ref<T> tanh(Ref<T> x) {
    Ref<T> y = map_unary(x, [](const T* in, T* out, int64_t n) { K::vtanh(in, out, n); });
    if (y_requires(y))
      record(y, [this, x, y] { K::tanh_bwd(value_ptr(y.id), grad_ptr(y.id), ensure_grad(x.id), x.count()); });
    return y;
  }

  Ref<T> gelu(Ref<T> x) {
    Ref<T> y = map_unary(x, [](const T* in, T* out, int64_t n) { K::vgelu(in, out, n); });
    if (y_requires(y))
      record(y, [this, x, y] { K::gelu_bwd(value_ptr(x.id), grad_ptr(y.id), ensure_grad(x.id), x.count()); });
    return y;
  }

  // Pass-through gradient strictly inside (lo, hi); zero where clipped.
  Ref<T> clamp(Ref<T> x, T lo, T hi) {
    Ref<T> y = fresh(x.shape(), needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    const int64_t n = x.count();
    for (int64_t i = 0; i < n; ++i) yv[i] = xv[i] < lo ? lo : (xv[i] > hi ? hi : xv[i]);
    if (y_requires(y)) {
      record(y, [this, x, y, lo, hi, n] {
        const T* xv2 = value_ptr(x.id);
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        for (int64_t i = 0; i < n; ++i)
          if (xv2[i] > lo && xv2[i] < hi) gx[i] += gy[i];
      });
    }
    return y;
  }

  // ---- matmul ----

  // Last two axes multiply; leading axes are batch dims. b may be 2D (shared
  // across the batch) or carry identical leading axes. ta/tb transpose the
  // last two axes of a/b respectively.
  Ref<T> matmul(Ref<T> a, Ref<T> b, bool ta = false, bool tb = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) fail_runtime("matmul: need rank>=2, got " + shape_str(sa) + " x " + shape_str(sb));
    const int am = sa[sa.size() - 2], an = sa[sa.size() - 1];
    const int bm = sb[sb.size() - 2], bn = sb[sb.size() - 1];
    const int M = ta ? an : am, Ka = ta ? am : an;
    const int Kb = tb ? bn : bm, N = tb ? bm : bn;
    if (Ka != Kb) fail_runtime("matmul: inner dims differ: " + shape_str(sa) + (ta ? "^T" : "") + " x " + shape_str(sb) + (tb ? "^T" : ""));
    const bool batched_b = sb.size() > 2;
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
    if (batched_b) {
      if (sb.size() != sa.size()) fail_runtime("matmul: rank mismatch " + shape_str(sa) + " x " + shape_str(sb));
      for (size_t i = 0; i + 2 < sb.size(); ++i)
        if (sb[i] != sa[i]) fail_runtime("matmul: batch dims differ " + shape_str(sa) + " x " + shape_str(sb));
    }
    Shape out(sa.begin(), sa.end() - 2);
    out.push_back(M);
    out.push_back(N);
    Ref<T> y = fresh(std::move(out), needs_grad(a) || needs_grad(b));

    const int64_t a_stride = int64_t(am) * an, b_stride = batched_b ? int64_t(bm) * bn : 0, y_stride = int64_t(M) * N;
    const T* av = value_ptr(a.id);
    const T* bv = value_ptr(b.id);
    T* yv = mut_value(y.id);

    // A fold: [G,M,K] x [K,N] with no transposes collapses to one gemm.
    if (!ta && !tb && !batched_b) {
      K::gemm(av, bv, yv, static_cast<int>(batch * M), N, Ka, false);
    } else {
      for (int64_t g = 0; g < batch; ++g)
        gemm_t(av + g * a_stride, am, an, ta, bv + g * b_stride, bm, bn, tb, yv + g * y_stride, false);
    }

    if (y_requires(y)) {
      record(y, [this, a, b, y, ta, tb, am, an, bm, bn, M, N, Ka, batch, a_stride, b_stride, y_stride, batched_b] {
        const T* av2 = value_ptr(a.id);
        const T* bv2 = value_ptr(b.id);
        const T* gy = grad_ptr(y.id);
        // dA and dB per batch slice; the math is the standard four-case table.
        // The linear-layer case (no transposes, 2D shared b) folds the batch
        // into the row dimension so each gradient is a single gemm.
        if (needs_grad(a)) {
          T* ga = ensure_grad(a.id);
          if (!batched_b && !ta && !tb) {
            gemm_t(gy, static_cast<int>(batch * M), N, false, bv2, bm, bn, true, ga, true);  // dA += dY B^T
          } else {
            for (int64_t g = 0; g < batch; ++g) {
              const T* gys = gy + g * y_stride;
              const T* bs = bv2 + g * b_stride;
              T* gas = ga + g * a_stride;
              if (!ta)
                gemm_t(gys, M, N, false, bs, bm, bn, !tb, gas, true);  // dA += dY op(B)^T
              else
                gemm_t(bs, bm, bn, tb, gys, M, N, true, gas, true);  // dA += op(B) dY^T
            }
          }
        }
        if (needs_grad(b)) {
          T* gb = ensure_grad(b.id);
          if (!batched_b && !ta && !tb) {
            // folded: dB += A^T dY with batch rows collapsed
            gemm_t(av2, static_cast<int>(batch * am), Ka, true, gy, static_cast<int>(batch * M), N, false, gb, true);
          } else {
            for (int64_t g = 0; g < batch; ++g) {
              const T* gys = gy + g * y_stride;
              const T* as = av2 + g * a_stride;
              T* gbs = gb + g * b_stride;
              if (!tb)
                gemm_t(as, am, an, !ta, gys, M, N, false, gbs, true);  // dB += op(A)^T dY
              else
                gemm_t(gys, M, N, true, as, am, an, ta, gbs, true);  // dB += dY^T op(A)
            }
          }
        }
      });
    }
    return y;
  }

  // ---- data movement ----

  Ref<T> reshape(Ref<T> x, Shape shape) {
    if (numel(shape) != x.count()) fail_runtime("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    Ref<T> y = fresh_view(std::move(shape), value_ptr(x.id), needs_grad(x));
    if (y_requires(y))
      record(y, [this, x, y] { K::axpy(T(1), grad_ptr(y.id), ensure_grad(x.id), x.count()); });
    return y;
  }

  Ref<T> permute(Ref<T> x, std::vector<int> perm) {
    const Shape sx = x.shape();  // by value: fresh() may reallocate the node table
    if (perm.size() != sx.size()) fail_runtime("permute: perm rank mismatch for " + shape_str(sx));
    Shape out(sx.size());
    for (size_t i = 0; i < perm.size(); ++i) out[i] = sx[perm[i]];
    Ref<T> y = fresh(out, needs_grad(x));
    permute_copy(value_ptr(x.id), sx, perm, mut_value(y.id));
    if (y_requires(y)) {
      std::vector<int> inv(perm.size());
      for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
      record(y, [this, x, y, out, inv] {
        // permute dY back, then accumulate
        scratch_.resize(x.count());
        permute_copy(grad_ptr(y.id), out, inv, scratch_.data());
        K::axpy(T(1), scratch_.data(), ensure_grad(x.id), x.count());
      });
    }
    return y;
  }

  Ref<T> transpose(Ref<T> x) {
    std::vector<int> perm(x.rank());
    for (int i = 0; i < x.rank(); ++i) perm[i] = i;
    std::swap(perm[x.rank() - 2], perm[x.rank() - 1]);
    return permute(x, perm);
  }

  Ref<T> slice(Ref<T> x, int axis, int start, int len) {
    const Shape& sx = x.shape();
    if (axis < 0 || axis >= static_cast<int>(sx.size()) || start < 0 || len <= 0 || start + len > sx[axis])
      fail_runtime("slice: bad range axis=" + std::to_string(axis) + " [" + std::to_string(start) + "," +
                   std::to_string(start + len) + ") for " + shape_str(sx));
    Shape out = sx;
    out[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sx[i];
    for (size_t i = axis + 1; i < sx.size(); ++i) inner *= sx[i];
    const int64_t x_ax = sx[axis] * inner, y_ax = int64_t(len) * inner;
    Ref<T> y = fresh(out, needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(yv + o * y_ax, xv + o * x_ax + start * inner, sizeof(T) * y_ax);
    if (y_requires(y)) {
      record(y, [this, x, y, outer, inner, x_ax, y_ax, start] {
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        for (int64_t o = 0; o < outer; ++o)
          K::axpy(T(1), gy + o * y_ax, gx + o * x_ax + start * inner, y_ax);
      });
    }
    return y;
  }

  Ref<T> concat(const std::vector<Ref<T>>& xs, int axis) {
    if (xs.empty()) fail_runtime("concat: no inputs");
    const Shape& s0 = xs[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size())) fail_runtime("concat: bad axis for " + shape_str(s0));
    Shape out = s0;
    bool rg = false;
    int total = 0;
    for (const auto& x : xs) {
      const Shape& sx = x.shape();
      if (sx.size() != s0.size()) fail_runtime("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(sx));
      for (size_t i = 0; i < sx.size(); ++i)
        if (static_cast<int>(i) != axis && sx[i] != s0[i])
          fail_runtime("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(sx));
      total += sx[axis];
      rg = rg || needs_grad(x);
    }
    out[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[i];
    for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    Ref<T> y = fresh(out, rg);
    T* yv = mut_value(y.id);
    const int64_t y_ax = int64_t(total) * inner;
    int off = 0;
    for (const auto& x : xs) {
      const int len = x.shape()[axis];
      const T* xv = value_ptr(x.id);
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(yv + o * y_ax + off * inner, xv + o * int64_t(len) * inner, sizeof(T) * len * inner);
      off += len;
    }
    if (y_requires(y)) {
      std::vector<Ref<T>> inputs = xs;
      std::vector<int> lens;
      lens.reserve(xs.size());
      for (const auto& x : xs) lens.push_back(x.shape()[axis]);
      record(y, [this, inputs, lens, y, outer, inner, y_ax] {
        const T* gy = grad_ptr(y.id);
        int pos = 0;
        for (size_t i = 0; i < inputs.size(); ++i) {
          const int64_t span = int64_t(lens[i]) * inner;
          if (needs_grad(inputs[i])) {
            T* gx = ensure_grad(inputs[i].id);
            for (int64_t o = 0; o < outer; ++o)
              K::axpy(T(1), gy + o * y_ax + pos * inner, gx + o * span, span);
          }
          pos += lens[i];
        }
      });
    }
    return y;
  }

  // Gather rows along axis 0. x is [R, ...]; ids index into R.
  Ref<T> rows(Ref<T> x, const std::vector<int>& ids) {
    const Shape& sx = x.shape();
    if (sx.size() < 1) fail_runtime("rows: rank-0 input");
    int64_t inner = 1;
    for (size_t i = 1; i < sx.size(); ++i) inner *= sx[i];
    for (int id : ids)
      if (id < 0 || id >= sx[0]) fail_runtime("rows: index " + std::to_string(id) + " out of range for " + shape_str(sx));
    Shape out = sx;
    out[0] = static_cast<int>(ids.size());
    Ref<T> y = fresh(out, needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    for (size_t i = 0; i < ids.size(); ++i) std::memcpy(yv + i * inner, xv + ids[i] * inner, sizeof(T) * inner);
    if (y_requires(y)) {
      record(y, [this, x, y, ids, inner] {
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        for (size_t i = 0; i < ids.size(); ++i) K::axpy(T(1), gy + i * inner, gx + ids[i] * inner, inner);
      });
    }
    return y;
  }

  // Embedding lookup is a row gather whose backward scatters into the table.
  Ref<T> embedding(Ref<T> table, const std::vector<int>& ids) { return rows(table, ids); }

  // y[r] = x[r, idx[r]] for 2D x.
  Ref<T> take_per_row(Ref<T> x, const std::vector<int>& idx) {
    const Shape& sx = x.shape();
    if (sx.size() != 2) fail_runtime("take_per_row: need 2D, got " + shape_str(sx));
    if (static_cast<int>(idx.size()) != sx[0]) fail_runtime("take_per_row: index count != rows");
    for (int i : idx)
      if (i < 0 || i >= sx[1]) fail_runtime("take_per_row: column index out of range");
    const int nrows = sx[0], cols = sx[1];
    Ref<T> y = fresh({nrows}, needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    for (int r = 0; r < nrows; ++r) yv[r] = xv[int64_t(r) * cols + idx[r]];
    if (y_requires(y)) {
      record(y, [this, x, y, idx, cols] {
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        for (size_t r = 0; r < idx.size(); ++r) gx[int64_t(r) * cols + idx[r]] += gy[r];
      });
    }
    return y;
  }

  // Repeat along a (new or existing) axis: x [pre, post] -> [pre, times, post].
  // Used to broadcast data against per-component tensors (e.g. GMM mixtures).
  Ref<T> repeat_axis(Ref<T> x, int axis, int times) {
    const Shape& sx = x.shape();
    if (axis < 0 || axis > static_cast<int>(sx.size())) fail_runtime("repeat_axis: bad axis for " + shape_str(sx));
    int64_t pre = 1, post = 1;
    for (int i = 0; i < axis; ++i) pre *= sx[i];
    for (size_t i = axis; i < sx.size(); ++i) post *= sx[i];
    Shape out;
    out.insert(out.end(), sx.begin(), sx.begin() + axis);
    out.push_back(times);
    out.insert(out.end(), sx.begin() + axis, sx.end());
    Ref<T> y = fresh(out, needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    for (int64_t p = 0; p < pre; ++p)
      for (int t = 0; t < times; ++t) std::memcpy(yv + (p * times + t) * post, xv + p * post, sizeof(T) * post);
    if (y_requires(y)) {
      record(y, [this, x, y, pre, post, times] {
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        for (int64_t p = 0; p < pre; ++p)
          for (int t = 0; t < times; ++t) K::axpy(T(1), gy + (p * times + t) * post, gx + p * post, post);
      });
    }
    return y;
  }

  // ---- rows/softmax/normalization (last axis) ----

  Ref<T> softmax(Ref<T> x) {
    const int cols = x.dim(-1);
    const int rows = static_cast<int>(x.count() / cols);
    Ref<T> y = fresh(x.shape(), needs_grad(x));
    K::softmax_rows(value_ptr(x.id), mut_value(y.id), rows, cols);
    if (y_requires(y))
      record(y, [this, x, y, rows, cols] { K::softmax_bwd_rows(value_ptr(y.id), grad_ptr(y.id), ensure_grad(x.id), rows, cols); });
    return y;
  }

  // Drops the last axis; 1D input yields shape {1}.
  Ref<T> logsumexp(Ref<T> x) {
    const int cols = x.dim(-1);
    const int rows = static_cast<int>(x.count() / cols);
    Shape out(x.shape().begin(), x.shape().end() - 1);
    if (out.empty()) out = {1};
    Ref<T> y = fresh(out, needs_grad(x));
    K::logsumexp_rows(value_ptr(x.id), mut_value(y.id), rows, cols);
    if (y_requires(y)) {
      record(y, [this, x, y, rows, cols] {
        // dx += softmax(x) * dy, row-broadcast
        const T* xv = value_ptr(x.id);
        const T* lse = value_ptr(y.id);
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        scratch_.resize(cols);
        for (int r = 0; r < rows; ++r) {
          const T* xr = xv + int64_t(r) * cols;
          T* gxr = gx + int64_t(r) * cols;
          for (int c = 0; c < cols; ++c) scratch_[c] = xr[c] - lse[r];
          K::vexp(scratch_.data(), scratch_.data(), cols);
          K::axpy(gy[r], scratch_.data(), gxr, cols);
        }
      });
    }
    return y;
  }

  Ref<T> layer_norm(Ref<T> x, Ref<T> gamma, Ref<T> beta, T eps) {
    const int cols = x.dim(-1);
    const int rows = static_cast<int>(x.count() / cols);
    if (gamma.rank() != 1 || gamma.dim(0) != cols || beta.rank() != 1 || beta.dim(0) != cols)
      fail_runtime("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) + " vs x " + shape_str(x.shape()));
    Ref<T> y = fresh(x.shape(), needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
    T* mean = arena_.alloc(rows);
    T* rstd = arena_.alloc(rows);
    K::layernorm_rows(value_ptr(x.id), value_ptr(gamma.id), value_ptr(beta.id), mut_value(y.id), mean, rstd, rows, cols, eps);
    if (y_requires(y)) {
      record(y, [this, x, gamma, beta, y, mean, rstd, rows, cols] {
        // The kernel wants all three sinks; route unused ones to scratch.
        T* gx = needs_grad(x) ? ensure_grad(x.id) : scratch_sink(int64_t(rows) * cols);
        T* gg = needs_grad(gamma) ? ensure_grad(gamma.id) : scratch_sink(cols);
        T* gb = needs_grad(beta) ? ensure_grad(beta.id) : scratch_sink(cols);
        K::layernorm_bwd_rows(value_ptr(x.id), value_ptr(gamma.id), mean, rstd, grad_ptr(y.id), gx, gg, gb, rows, cols);
      });
    }
    return y;
  }

  // ---- reductions ----

  Ref<T> sum(Ref<T> x) {
    Ref<T> y = fresh({1}, needs_grad(x));
    mut_value(y.id)[0] = static_cast<T>(K::reduce_sum(value_ptr(x.id), x.count()));
    if (y_requires(y)) {
      record(y, [this, x, y] {
        const T g = grad_ptr(y.id)[0];
        T* gx = ensure_grad(x.id);
        const int64_t n = x.count();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
      });
    }
    return y;
  }

  Ref<T> mean(Ref<T> x) { return scale(sum(x), T(1) / static_cast<T>(x.count())); }

  // Sum over the last axis: [..., C] -> [...] ({1} for 1D).
  Ref<T> sum_last(Ref<T> x) {
    const int cols = x.dim(-1);
    const int64_t rows = x.count() / cols;
    Shape out(x.shape().begin(), x.shape().end() - 1);
    if (out.empty()) out = {1};
    Ref<T> y = fresh(out, needs_grad(x));
    const T* xv = value_ptr(x.id);
    T* yv = mut_value(y.id);
    for (int64_t r = 0; r < rows; ++r) {
      T s = T(0);
      const T* xr = xv + r * cols;
      for (int c = 0; c < cols; ++c) s += xr[c];
      yv[r] = s;
    }
    if (y_requires(y)) {
      record(y, [this, x, y, rows, cols] {
        const T* gy = grad_ptr(y.id);
        T* gx = ensure_grad(x.id);
        for (int64_t r = 0; r < rows; ++r) {
          const T g = gy[r];
          T* gxr = gx + r * cols;
          for (int c = 0; c < cols; ++c) gxr[c] += g;
        }
      });
    }
    return y;
  }

  Ref<T> mean_last(Ref<T> x) { return scale(sum_last(x), T(1) / static_cast<T>(x.dim(-1))); }

  // ---- fused scaled-dot-product attention ----

  // q [G, Lq, D], k/v [G, Lk, D], optional additive mask [Lq, Lk] (shared
  // across groups) or [G, Lq, Lk]. One primitive with its own backward: the
  // softmax matrix P is checkpointed in the arena and reused, which keeps the
  // memory profile and op count of attention predictable.
  Ref<T> sdpa(Ref<T> q, Ref<T> k, Ref<T> v, Ref<T> mask, T scale) {
    const Shape& sq = q.shape();
    const Shape& sk = k.shape();
    const Shape& sv = v.shape();
    if (sq.size() != 3 || sk.size() != 3 || sv.size() != 3)
      fail_runtime("sdpa: q/k/v must be rank-3 [groups, len, depth], got " + shape_str(sq) + ", " + shape_str(sk) + ", " + shape_str(sv));
    const int G = sq[0], Lq = sq[1], D = sq[2], Lk = sk[1];
    if (sk[0] != G || sv[0] != G || sk[2] != D || sv[1] != Lk || sv[2] != D)
      fail_runtime("sdpa: inconsistent shapes " + shape_str(sq) + ", " + shape_str(sk) + ", " + shape_str(sv));
    bool has_mask = mask.valid();
    bool mask_per_group = false;
    if (has_mask) {
      const Shape& sm = mask.shape();
      if (sm.size() == 2 && sm[0] == Lq && sm[1] == Lk) {
        mask_per_group = false;
      } else if (sm.size() == 3 && sm[0] == G && sm[1] == Lq && sm[2] == Lk) {
        mask_per_group = true;
      } else {
        fail_runtime("sdpa: mask " + shape_str(sm) + " must be [Lq,Lk] or [G,Lq,Lk]");
      }
    }
    Ref<T> y = fresh({G, Lq, D}, needs_grad(q) || needs_grad(k) || needs_grad(v));
    T* probs = arena_.alloc(int64_t(G) * Lq * Lk);  // checkpointed softmax
    const T* qv = value_ptr(q.id);
    const T* kv = value_ptr(k.id);
    const T* vv = value_ptr(v.id);
    const T* mv = has_mask ? value_ptr(mask.id) : nullptr;
    T* yv = mut_value(y.id);
    scratch_.resize(int64_t(Lq) * std::max(Lk, D) + int64_t(Lk) * D);
    T* s_mat = scratch_.data();
    T* kt = scratch_.data() + int64_t(Lq) * std::max(Lk, D);
    for (int g = 0; g < G; ++g) {
      const T* qg = qv + int64_t(g) * Lq * D;
      const T* kg = kv + int64_t(g) * Lk * D;
      const T* vg = vv + int64_t(g) * Lk * D;
      T* pg = probs + int64_t(g) * Lq * Lk;
      // S = scale * q k^T (+ mask)
      K::transpose2d(kg, kt, Lk, D);
      K::gemm(qg, kt, s_mat, Lq, Lk, D, false);
      const int64_t cells = int64_t(Lq) * Lk;
      if (has_mask) {
        const T* mg = mask_per_group ? mv + int64_t(g) * cells : mv;
        for (int64_t i = 0; i < cells; ++i) s_mat[i] = s_mat[i] * scale + mg[i];
      } else {
        for (int64_t i = 0; i < cells; ++i) s_mat[i] *= scale;
      }
      K::softmax_rows(s_mat, pg, Lq, Lk);
      K::gemm(pg, vg, yv + int64_t(g) * Lq * D, Lq, D, Lk, false);
    }
    if (y_requires(y)) {
      record(y, [this, q, k, v, y, probs, G, Lq, Lk, D, scale] {
        const T* qv2 = value_ptr(q.id);
        const T* kv2 = value_ptr(k.id);
        const T* vv2 = value_ptr(v.id);
        const T* gy = grad_ptr(y.id);
        T* gq = needs_grad(q) ? ensure_grad(q.id) : nullptr;
        T* gk = needs_grad(k) ? ensure_grad(k.id) : nullptr;
        T* gv = needs_grad(v) ? ensure_grad(v.id) : nullptr;
        scratch_.resize(2 * int64_t(Lq) * Lk + int64_t(Lq) * Lk /*spare*/ + std::max({int64_t(Lk) * Lq, int64_t(D) * Lk, int64_t(D) * Lq}));
        T* dp = scratch_.data();
        T* ds = dp + int64_t(Lq) * Lk;
        T* tr = ds + int64_t(Lq) * Lk;
        for (int g = 0; g < G; ++g) {
          const T* pg = probs + int64_t(g) * Lq * Lk;
          const T* gyg = gy + int64_t(g) * Lq * D;
          const T* qg = qv2 + int64_t(g) * Lq * D;
          const T* kg = kv2 + int64_t(g) * Lk * D;
          const T* vg = vv2 + int64_t(g) * Lk * D;
          if (gv) {
            // dV += P^T dY
            K::transpose2d(pg, tr, Lq, Lk);
            K::gemm(tr, gyg, gv + int64_t(g) * Lk * D, Lk, D, Lq, true);
          }
          // dP = dY V^T
          K::transpose2d(vg, tr, Lk, D);
          K::gemm(gyg, tr, dp, Lq, Lk, D, false);
          // dS = P ⊙ (dP - rowdot(dP, P)), then scale
          std::memset(ds, 0, sizeof(T) * int64_t(Lq) * Lk);
          K::softmax_bwd_rows(pg, dp, ds, Lq, Lk);
          const int64_t cells = int64_t(Lq) * Lk;
          for (int64_t i = 0; i < cells; ++i) ds[i] *= scale;
          if (gq) K::gemm(ds, kg, gq + int64_t(g) * Lq * D, Lq, D, Lk, true);  // dQ += dS K
          if (gk) {
            K::transpose2d(ds, tr, Lq, Lk);
            K::gemm(tr, qg, gk + int64_t(g) * Lk * D, Lk, D, Lq, true);  // dK += dS^T Q
          }
        }
      });
    }
    return y;
  }

  Ref<T> sdpa(Ref<T> q, Ref<T> k, Ref<T> v, T scale) { return sdpa(q, k, v, Ref<T>{}, scale); }

  // ---- escape hatch (tests build deliberately broken ops through this) ----

  Ref<T> custom(const std::string& /*name*/, std::vector<Ref<T>> ins, Shape out_shape,
                const std::function<void(const std::vector<std::span<const T>>&, std::span<T>)>& fwd,
                std::function<void(const std::vector<std::span<const T>>&, std::span<const T>, std::span<const T>,
                                   const std::vector<std::span<T>>&)>
                    bwd) {
    bool rg = false;
    for (auto& i : ins) rg = rg || needs_grad(i);
    Ref<T> y = fresh(std::move(out_shape), rg);
    std::vector<std::span<const T>> invals;
    invals.reserve(ins.size());
    for (auto& i : ins) invals.push_back(std::span<const T>(value_ptr(i.id), i.count()));
    fwd(invals, std::span<T>(mut_value(y.id), y.count()));
    if (y_requires(y)) {
      record(y, [this, ins, y, bwd] {
        std::vector<std::span<const T>> invals2;
        invals2.reserve(ins.size());
        for (auto& i : ins) invals2.push_back(std::span<const T>(value_ptr(i.id), i.count()));
        std::vector<std::span<T>> grads;
        grads.reserve(ins.size());
        for (auto& i : ins)
          grads.push_back(needs_grad(i) ? std::span<T>(ensure_grad(i.id), i.count()) : std::span<T>());
        bwd(invals2, std::span<const T>(value_ptr(y.id), y.count()), std::span<const T>(grad_ptr(y.id), y.count()), grads);
      });
    }
    return y;
  }

  // ---- backward ----

  void backward(Ref<T> loss) {
    if (!grad_enabled_) fail_runtime("backward: tape is in inference mode");
    if (loss.count() != 1) fail_runtime("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (backward_ran_) fail_runtime("backward: already ran on this tape; reset() first");
    const T lv = value_ptr(loss.id)[0];
    if (!std::isfinite(static_cast<double>(lv))) fail_runtime("backward: loss is not finite");
    backward_ran_ = true;
    ensure_grad(loss.id)[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad == nullptr || !n.bwd) continue;
      n.bwd();
    }
    for (auto& [id, p] : param_leaves_) {
      if (nodes_[id].grad == nullptr) continue;
      K::axpy(T(1), nodes_[id].grad, p->grad.data(), p->count());
    }
  }

  // Throws if any element is non-finite; `what` names the tensor in the error.
  void check_finite(Ref<T> x, const std::string& what) const {
    const T* v = value_ptr(x.id);
    const int64_t n = x.count();
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(static_cast<double>(v[i])))
        fail_runtime(what + ": non-finite value at flat index " + std::to_string(i));
  }

  // ---- internals exposed for Ref ----

  const Shape& node_shape(int id) const { return nodes_[id].shape; }
  bool has_grad(int id) const { return nodes_[id].grad != nullptr; }
  std::span<const T> node_value(int id) const { return {nodes_[id].val, static_cast<size_t>(numel(nodes_[id].shape))}; }
  std::span<const T> node_grad(int id) const {
    if (nodes_[id].grad == nullptr) fail_runtime("grad(): no gradient present (did backward run?)");
    return {nodes_[id].grad, static_cast<size_t>(numel(nodes_[id].shape))};
  }

private:
  enum class BinOp { add, sub, mul, div };

  struct Node {
    Shape shape;
    const T* val = nullptr;  // arena or external
    T* own = nullptr;        // arena storage when owned
    T* grad = nullptr;       // lazily allocated, zero-filled
    bool requires_grad = false;
    std::function<void()> bwd;
  };

  bool needs_grad(Ref<T> x) const { return nodes_[x.id].requires_grad; }
  bool y_requires(Ref<T> y) const { return grad_enabled_ && nodes_[y.id].requires_grad; }

  Ref<T> fresh(Shape shape, bool requires_grad) {
    Node n;
    n.shape = std::move(shape);
    n.own = arena_.alloc(numel(n.shape));
    n.val = n.own;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  Ref<T> fresh_view(Shape shape, const T* data, bool requires_grad) {
    Node n;
    n.shape = std::move(shape);
    n.val = data;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  void record(Ref<T> y, std::function<void()> fn) { nodes_[y.id].bwd = std::move(fn); }

  const T* value_ptr(int id) const { return nodes_[id].val; }
  T* mut_value(int id) { return nodes_[id].own; }

  T* ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad == nullptr) n.grad = arena_.alloc_zero(numel(n.shape));
    return n.grad;
  }
  const T* grad_ptr(int id) const { return nodes_[id].grad; }

  T* scratch_sink(int64_t n) {
    sink_.resize(n);
    return sink_.data();
  }

  template <typename Fn>
  Ref<T> map_unary(Ref<T> x, Fn&& fn) {
    Ref<T> y = fresh(x.shape(), needs_grad(x));
    fn(value_ptr(x.id), mut_value(y.id), x.count());
    return y;
  }

  // gemm with optional operand transposes, materialized through scratch.
  void gemm_t(const T* a, int am, int an, bool ta, const T* b, int bm, int bn, bool tb, T* c, bool acc) {
    const T* A = a;
    const T* B = b;
    if (ta) {
      t_scratch_a_.resize(int64_t(am) * an);
      K::transpose2d(a, t_scratch_a_.data(), am, an);
      A = t_scratch_a_.data();
      std::swap(am, an);
    }
    if (tb) {
      t_scratch_b_.resize(int64_t(bm) * bn);
      K::transpose2d(b, t_scratch_b_.data(), bm, bn);
      B = t_scratch_b_.data();
      std::swap(bm, bn);
    }
    K::gemm(A, B, c, am, bn, an, acc);
  }

  static void permute_copy(const T* src, const Shape& s, const std::vector<int>& perm, T* dst) {
    const int r = static_cast<int>(s.size());
    // strides of the source
    std::vector<int64_t> sstride(r, 1);
    for (int i = r - 2; i >= 0; --i) sstride[i] = sstride[i + 1] * s[i + 1];
    Shape out(r);
    for (int i = 0; i < r; ++i) out[i] = s[perm[i]];
    // When the last axis is preserved, copy contiguous runs.
    const bool last_kept = perm[r - 1] == r - 1;
    const int64_t run = last_kept ? s[r - 1] : 1;
    const int loop_rank = last_kept ? r - 1 : r;
    std::vector<int64_t> idx(loop_rank, 0);
    int64_t off = 0;
    const int64_t total = numel(s) / run;
    for (int64_t cnt = 0; cnt < total; ++cnt) {
      int64_t src_off = 0;
      for (int i = 0; i < loop_rank; ++i) src_off += idx[i] * sstride[perm[i]];
      if (run > 1)
        std::memcpy(dst + off, src + src_off, sizeof(T) * run);
      else
        dst[off] = src[src_off];
      off += run;
      for (int i = loop_rank - 1; i >= 0; --i) {
        if (++idx[i] < out[i]) break;
        idx[i] = 0;
      }
    }
  }

  Ref<T> binary(const char* opname, Ref<T> a, Ref<T> b, BinOp op) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    // identical shapes, or one operand's shape is a suffix of the other's
    const bool a_big = sa.size() >= sb.size();
    const Shape& big = a_big ? sa : sb;
    const Shape& small = a_big ? sb : sa;
    const size_t off = big.size() - small.size();
    for (size_t i = 0; i < small.size(); ++i)
      if (big[off + i] != small[i])
        fail_runtime(std::string(opname) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
                     " are not equal or suffix-broadcastable");
    const int64_t nb = numel(big), ns = numel(small);
    const int64_t rep = nb / ns;
    Ref<T> y = fresh(big, needs_grad(a) || needs_grad(b));
    const T* av = value_ptr(a.id);
    const T* bv = value_ptr(b.id);
    T* yv = mut_value(y.id);
    auto apply = [&](const T* xbig, const T* xsmall, bool small_is_rhs) {
      for (int64_t r0 = 0; r0 < rep; ++r0) {
        const T* xb = xbig + r0 * ns;
        T* yo = yv + r0 * ns;
        for (int64_t i = 0; i < ns; ++i) {
          const T lhs = small_is_rhs ? xb[i] : xsmall[i];
          const T rhs = small_is_rhs ? xsmall[i] : xb[i];
          switch (op) {
            case BinOp::add: yo[i] = lhs + rhs; break;
            case BinOp::sub: yo[i] = lhs - rhs; break;
            case BinOp::mul: yo[i] = lhs * rhs; break;
            case BinOp::div: yo[i] = lhs / rhs; break;
          }
        }
      }
    };
    if (a_big)
      apply(av, bv, true);
    else
      apply(bv, av, false);

    if (y_requires(y)) {
      record(y, [this, a, b, y, op, a_big, ns, rep] {
        const T* av2 = value_ptr(a.id);
        const T* bv2 = value_ptr(b.id);
        const T* gy = grad_ptr(y.id);
        if (op == BinOp::add) {
          if (needs_grad(a)) accumulate_bcast(gy, ensure_grad(a.id), a.count(), ns, rep, T(1));
          if (needs_grad(b)) accumulate_bcast(gy, ensure_grad(b.id), b.count(), ns, rep, T(1));
        } else if (op == BinOp::sub) {
          if (needs_grad(a)) accumulate_bcast(gy, ensure_grad(a.id), a.count(), ns, rep, T(1));
          if (needs_grad(b)) accumulate_bcast(gy, ensure_grad(b.id), b.count(), ns, rep, T(-1));
        } else if (op == BinOp::mul) {
          // d(a) = gy*b, d(b) = gy*a, with the small side reduced
          if (needs_grad(a)) mul_grad(gy, bv2, ensure_grad(a.id), a.count(), ns, rep, a_big);
          if (needs_grad(b)) mul_grad(gy, av2, ensure_grad(b.id), b.count(), ns, rep, !a_big);
        } else {  // div: y = a / b
          const T* yv2 = value_ptr(y.id);
          if (needs_grad(a)) {
            // da = gy / b
            T* ga = ensure_grad(a.id);
            if (a_big) {
              for (int64_t r0 = 0; r0 < rep; ++r0)
                for (int64_t i = 0; i < ns; ++i) ga[r0 * ns + i] += gy[r0 * ns + i] / bv2[i];
            } else {
              for (int64_t r0 = 0; r0 < rep; ++r0)
                for (int64_t i = 0; i < ns; ++i) ga[i] += gy[r0 * ns + i] / bv2[r0 * ns + i];
            }
          }
          if (needs_grad(b)) {
            // db = -gy * y / b
            T* gb = ensure_grad(b.id);
            if (a_big) {
              for (int64_t r0 = 0; r0 < rep; ++r0)
                for (int64_t i = 0; i < ns; ++i) gb[i] -= gy[r0 * ns + i] * yv2[r0 * ns + i] / bv2[i];
            } else {
              for (int64_t r0 = 0; r0 < rep; ++r0)
                for (int64_t i = 0; i < ns; ++i) gb[r0 * ns + i] -= gy[r0 * ns + i] * yv2[r0 * ns + i] / bv2[r0 * ns + i];
            }
          }
        }
      });
    }
    return y;
  }

  // dy accumulated into a gradient that may be the small (suffix) operand.
  void accumulate_bcast(const T* gy, T* g, int64_t gcount, int64_t ns, int64_t rep, T sign) {
    if (gcount == ns * rep) {
      K::axpy(sign, gy, g, gcount);
    } else {
      // reduce over leading repeats
      for (int64_t r0 = 0; r0 < rep; ++r0) K::axpy(sign, gy + r0 * ns, g, ns);
    }
  }

  void mul_grad(const T* gy, const T* other, T* g, int64_t gcount, int64_t ns, int64_t rep, bool target_is_big) {
    if (target_is_big) {
      // other is small: g[r,i] += gy[r,i] * other[i]
      if (gcount == ns * rep) {
        for (int64_t r0 = 0; r0 < rep; ++r0)
          for (int64_t i = 0; i < ns; ++i) g[r0 * ns + i] += gy[r0 * ns + i] * other[i];
      }
    } else {
      // target is small: g[i] += sum_r gy[r,i] * other[r,i]
      for (int64_t r0 = 0; r0 < rep; ++r0)
        for (int64_t i = 0; i < ns; ++i) g[i] += gy[r0 * ns + i] * other[r0 * ns + i];
    }
  }

  Ref<T> binary_last(const char* opname, Ref<T> x, Ref<T> r, BinOp op) {
    const Shape& sx = x.shape();
    Shape expect(sx.begin(), sx.end() - 1);
    if (expect.empty()) expect = {1};
    if (r.shape() != expect)
      fail_runtime(std::string(opname) + ": rhs " + shape_str(r.shape()) + " must equal lhs minus last axis, lhs " + shape_str(sx));
    const int cols = sx.back();
    const int64_t rows = x.count() / cols;
    Ref<T> y = fresh(sx, needs_grad(x) || needs_grad(r));
    const T* xv = value_ptr(x.id);
    const T* rv = value_ptr(r.id);
    T* yv = mut_value(y.id);
    for (int64_t row = 0; row < rows; ++row) {
      const T rval = rv[row];
      const T* xr = xv + row * cols;
      T* yr = yv + row * cols;
      for (int c = 0; c < cols; ++c) {
        switch (op) {
          case BinOp::add: yr[c] = xr[c] + rval; break;
          case BinOp::sub: yr[c] = xr[c] - rval; break;
          case BinOp::mul: yr[c] = xr[c] * rval; break;
          case BinOp::div: yr[c] = xr[c] / rval; break;
        }
      }
    }
    if (y_requires(y)) {
      record(y, [this, x, r, y, op, rows, cols] {
        const T* xv2 = value_ptr(x.id);
        const T* rv2 = value_ptr(r.id);
        const T* yv2 = value_ptr(y.id);
        const T* gy = grad_ptr(y.id);
        if (needs_grad(x)) {
          T* gx = ensure_grad(x.id);
          for (int64_t row = 0; row < rows; ++row) {
            const T rval = rv2[row];
            const T* gyr = gy + row * cols;
            T* gxr = gx + row * cols;
            switch (op) {
              case BinOp::add:
              case BinOp::sub:
                K::axpy(T(1), gyr, gxr, cols);
                break;
              case BinOp::mul:
                K::axpy(rval, gyr, gxr, cols);
                break;
              case BinOp::div:
                K::axpy(T(1) / rval, gyr, gxr, cols);
                break;
            }
          }
        }
        if (needs_grad(r)) {
          T* gr = ensure_grad(r.id);
          for (int64_t row = 0; row < rows; ++row) {
            const T* gyr = gy + row * cols;
            T s = T(0);
            switch (op) {
              case BinOp::add:
                for (int c = 0; c < cols; ++c) s += gyr[c];
                break;
              case BinOp::sub:
                for (int c = 0; c < cols; ++c) s -= gyr[c];
                break;
              case BinOp::mul: {
                const T* xr = xv2 + row * cols;
                for (int c = 0; c < cols; ++c) s += gyr[c] * xr[c];
                break;
              }
              case BinOp::div: {
                const T* yr = yv2 + row * cols;
                const T rval = rv2[row];
                for (int c = 0; c < cols; ++c) s -= gyr[c] * yr[c] / rval;
                break;
              }
            }
            gr[row] += s;
          }
        }
      });
    }
    return y;
  }

  bool grad_enabled_ = true;
  bool backward_ran_ = false;
  std::vector<Node> nodes_;
  std::vector<std::pair<int, Param<T>*>> param_leaves_;
  Arena<T> arena_;
  std::vector<T> scratch_, sink_, t_scratch_a_, t_scratch_b_;
};

// Lightweight operator sugar; all allocation still goes through the tape.
template <typename T>
Ref<T> operator+(Ref<T> a, Ref<T> b) {
  return a.tape->add(a, b);
}
template <typename T>
Ref<T> operator-(Ref<T> a, Ref<T> b) {
  return a.tape->sub(a, b);
}
template <typename T>
Ref<T> operator*(Ref<T> a, Ref<T> b) {
  return a.tape->mul(a, b);
}

}  // namespace divot::ad
