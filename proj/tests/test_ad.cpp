// Gradient verification for the autodiff tape: every primitive and several
// model-shaped composite graphs are checked against central finite
// differences in double precision, across many random seeds. A deliberately
// broken custom op confirms the harness actually catches wrong gradients.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <vector>

#include "divot/check.hpp"
#include "divot/errors.hpp"
#include "divot/param.hpp"
#include "divot/rng.hpp"
#include "divot/tape.hpp"

using divot::Error;
using divot::ErrKind;
using divot::kern::Rng;
namespace ad = divot::ad;
using ad::Ref;
using ad::Shape;
using ad::Tape;

namespace {

constexpr int kSeeds = 20;
constexpr double kTol = 1e-4;

std::vector<double> rand_vec(Rng& rng, int64_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Projects a tensor onto fixed random weights so every output element
// contributes a distinct gradient; catches transposed/misindexed backwards
// that a plain sum() would miss.
Ref<double> wsum(Tape<double>& t, Ref<double> y, const std::vector<double>& w) {
  return t.sum(t.mul(y, t.input(y.shape(), w)));
}

void require_fd(const ad::FdFn& f, std::vector<double> x, double tol = kTol) {
  const ad::FdReport rep = ad::finite_difference_check(f, std::move(x));
  CAPTURE(rep.max_rel_err);
  CAPTURE(rep.max_abs_err);
  CAPTURE(rep.worst_index);
  CHECK(rep.max_rel_err < tol);
}

}  // namespace

TEST_CASE("binary ops, same shape, both operands") {
  const Shape sh{3, 4};
  const int64_t n = ad::numel(sh);
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed);
    // keep divisors away from zero
    auto fixed = rand_vec(rng, n, 0.6, 1.7);
    auto probe0 = rand_vec(rng, n, 0.6, 1.7);
    auto w = rand_vec(rng, n, -1.0, 1.0);
    for (int op = 0; op < 4; ++op) {
      CAPTURE(op);
      auto apply = [op](Tape<double>& t, Ref<double> a, Ref<double> b) {
        switch (op) {
          case 0: return t.add(a, b);
          case 1: return t.sub(a, b);
          case 2: return t.mul(a, b);
          default: return t.div(a, b);
        }
      };
      // probe the left operand
      require_fd(
          [&, fixed, w](Tape<double>& t, const std::vector<double>& xv) {
            auto a = t.input(sh, xv, true);
            auto b = t.input(sh, fixed);
            return wsum(t, apply(t, a, b), w);
          },
          probe0);
      // probe the right operand
      require_fd(
          [&, fixed, w](Tape<double>& t, const std::vector<double>& xv) {
            auto b = t.input(sh, xv, true);
            auto a = t.input(sh, fixed);
            return wsum(t, apply(t, a, b), w);
          },
          probe0);
    }
  }
}

TEST_CASE("binary ops, suffix broadcast, both sides and both roles") {
  const Shape big{3, 4, 5};
  const Shape small{4, 5};
  const int64_t nb = ad::numel(big), ns = ad::numel(small);
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 100);
    auto bigv = rand_vec(rng, nb, 0.6, 1.7);
    auto smallv = rand_vec(rng, ns, 0.6, 1.7);
    auto w = rand_vec(rng, nb, -1.0, 1.0);
    for (int op = 0; op < 4; ++op) {
      CAPTURE(op);
      auto apply = [op](Tape<double>& t, Ref<double> a, Ref<double> b) {
        switch (op) {
          case 0: return t.add(a, b);
          case 1: return t.sub(a, b);
          case 2: return t.mul(a, b);
          default: return t.div(a, b);
        }
      };
      // a big, b small: probe big
      require_fd(
          [&, smallv, w](Tape<double>& t, const std::vector<double>& xv) {
            auto a = t.input(big, xv, true);
            auto b = t.input(small, smallv);
            return wsum(t, apply(t, a, b), w);
          },
          bigv);
      // a big, b small: probe small
      require_fd(
          [&, bigv, w](Tape<double>& t, const std::vector<double>& xv) {
            auto b = t.input(small, xv, true);
            auto a = t.input(big, bigv);
            return wsum(t, apply(t, a, b), w);
          },
          smallv);
      // a small, b big: probe small
      require_fd(
          [&, bigv, w](Tape<double>& t, const std::vector<double>& xv) {
            auto a = t.input(small, xv, true);
            auto b = t.input(big, bigv);
            return wsum(t, apply(t, a, b), w);
          },
          smallv);
      // a small, b big: probe big
      require_fd(
          [&, smallv, w](Tape<double>& t, const std::vector<double>& xv) {
            auto b = t.input(big, xv, true);
            auto a = t.input(small, smallv);
            return wsum(t, apply(t, a, b), w);
          },
          bigv);
    }
  }
}

TEST_CASE("rowwise *_last ops") {
  const Shape sh{4, 6};
  const int64_t n = ad::numel(sh);
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 200);
    auto xv0 = rand_vec(rng, n, 0.6, 1.7);
    auto rv0 = rand_vec(rng, 4, 0.6, 1.7);
    auto w = rand_vec(rng, n, -1.0, 1.0);
    for (int op = 0; op < 4; ++op) {
      CAPTURE(op);
      auto apply = [op](Tape<double>& t, Ref<double> x, Ref<double> r) {
        switch (op) {
          case 0: return t.add_last(x, r);
          case 1: return t.sub_last(x, r);
          case 2: return t.mul_last(x, r);
          default: return t.div_last(x, r);
        }
      };
      require_fd(
          [&, rv0, w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input(sh, xv, true);
            auto r = t.input({4}, rv0);
            return wsum(t, apply(t, x, r), w);
          },
          xv0);
      require_fd(
          [&, xv0, w](Tape<double>& t, const std::vector<double>& xv) {
            auto r = t.input({4}, xv, true);
            auto x = t.input(sh, xv0);
            return wsum(t, apply(t, x, r), w);
          },
          rv0);
    }
  }
}

TEST_CASE("scale, add_const, neg, clamp") {
  const Shape sh{2, 7};
  const int64_t n = ad::numel(sh);
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 300);
    auto w = rand_vec(rng, n, -1.0, 1.0);
    // keep samples clear of the clamp breakpoints so finite differences stay valid
    std::vector<double> xv0(n);
    for (auto& x : xv0) {
      do {
        x = rng.uniform(-1.0, 1.0);
      } while (std::abs(std::abs(x) - 0.5) < 1e-3);
    }
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.scale(x, -2.5), w);
        },
        xv0);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.add_const(x, 3.25), w);
        },
        xv0);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.neg(x), w);
        },
        xv0);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.clamp(x, -0.5, 0.5), w);
        },
        xv0);
  }
}

TEST_CASE("unary transcendentals: exp, log, sqrt, tanh, gelu") {
  const Shape sh{3, 5};
  const int64_t n = ad::numel(sh);
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 400);
    auto w = rand_vec(rng, n, -1.0, 1.0);
    auto anyv = rand_vec(rng, n, -2.0, 2.0);
    auto posv = rand_vec(rng, n, 0.4, 2.5);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.exp(x), w);
        },
        anyv);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.log(x), w);
        },
        posv);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.sqrt(x), w);
        },
        posv);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.tanh(x), w);
        },
        anyv);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.gelu(x), w);
        },
        anyv);
  }
}

TEST_CASE("matmul: all transpose combinations, 2D") {
  const int M = 3, K = 4, N = 5;
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 500);
    for (int ta = 0; ta <= 1; ++ta) {
      for (int tb = 0; tb <= 1; ++tb) {
        CAPTURE(ta);
        CAPTURE(tb);
        const Shape sa = ta ? Shape{K, M} : Shape{M, K};
        const Shape sb = tb ? Shape{N, K} : Shape{K, N};
        auto av = rand_vec(rng, ad::numel(sa), -1.0, 1.0);
        auto bv = rand_vec(rng, ad::numel(sb), -1.0, 1.0);
        auto w = rand_vec(rng, int64_t(M) * N, -1.0, 1.0);
        require_fd(
            [=](Tape<double>& t, const std::vector<double>& xv) {
              auto a = t.input(sa, xv, true);
              auto b = t.input(sb, bv);
              return wsum(t, t.matmul(a, b, ta != 0, tb != 0), w);
            },
            av);
        require_fd(
            [=](Tape<double>& t, const std::vector<double>& xv) {
              auto b = t.input(sb, xv, true);
              auto a = t.input(sa, av);
              return wsum(t, t.matmul(a, b, ta != 0, tb != 0), w);
            },
            bv);
      }
    }
  }
}

TEST_CASE("matmul: batched against shared and batched right operand") {
  const int G = 2, M = 3, K = 4, N = 5;
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 600);
    auto av = rand_vec(rng, int64_t(G) * M * K, -1.0, 1.0);
    auto b2v = rand_vec(rng, int64_t(K) * N, -1.0, 1.0);
    auto b3v = rand_vec(rng, int64_t(G) * K * N, -1.0, 1.0);
    auto w = rand_vec(rng, int64_t(G) * M * N, -1.0, 1.0);
    // [G,M,K] x [K,N]: the folded fast path
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto a = t.input({G, M, K}, xv, true);
          auto b = t.input({K, N}, b2v);
          return wsum(t, t.matmul(a, b), w);
        },
        av);
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto b = t.input({K, N}, xv, true);
          auto a = t.input({G, M, K}, av);
          return wsum(t, t.matmul(a, b), w);
        },
        b2v);
    // [G,M,K] x [G,K,N]: per-group path
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto a = t.input({G, M, K}, xv, true);
          auto b = t.input({G, K, N}, b3v);
          return wsum(t, t.matmul(a, b), w);
        },
        av);
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto b = t.input({G, K, N}, xv, true);
          auto a = t.input({G, M, K}, av);
          return wsum(t, t.matmul(a, b), w);
        },
        b3v);
    // batched with a transpose: [G,K,M]^T x [G,K,N]
    auto atv = rand_vec(rng, int64_t(G) * K * M, -1.0, 1.0);
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto a = t.input({G, K, M}, xv, true);
          auto b = t.input({G, K, N}, b3v);
          return wsum(t, t.matmul(a, b, true, false), w);
        },
        atv);
  }
}

TEST_CASE("movement ops: reshape, permute, transpose, slice, concat, repeat") {
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 700);
    auto xv0 = rand_vec(rng, 2 * 3 * 4, -1.5, 1.5);
    {
      auto w = rand_vec(rng, 2 * 3 * 4, -1.0, 1.0);
      require_fd(
          [w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({2, 3, 4}, xv, true);
            return wsum(t, t.reshape(x, {6, 4}), w);
          },
          xv0);
      // permute that moves the last axis (element path)
      require_fd(
          [w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({2, 3, 4}, xv, true);
            return wsum(t, t.permute(x, {2, 0, 1}), w);
          },
          xv0);
      // permute that keeps the last axis (contiguous-run path)
      require_fd(
          [w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({2, 3, 4}, xv, true);
            return wsum(t, t.permute(x, {1, 0, 2}), w);
          },
          xv0);
      require_fd(
          [w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({2, 3, 4}, xv, true);
            return wsum(t, t.transpose(x), w);
          },
          xv0);
    }
    {
      auto w = rand_vec(rng, 2 * 2 * 4, -1.0, 1.0);
      require_fd(
          [w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({2, 3, 4}, xv, true);
            return wsum(t, t.slice(x, 1, 1, 2), w);
          },
          xv0);
    }
    {
      // concat of three pieces along the middle axis; only the probed piece
      // carries gradient, the others check the no-grad skip
      auto p2 = rand_vec(rng, 2 * 2 * 4, -1.0, 1.0);
      auto p3 = rand_vec(rng, 2 * 1 * 4, -1.0, 1.0);
      auto w = rand_vec(rng, 2 * 6 * 4, -1.0, 1.0);
      require_fd(
          [p2, p3, w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({2, 3, 4}, xv, true);
            auto b = t.input({2, 2, 4}, p2);
            auto c = t.input({2, 1, 4}, p3);
            return wsum(t, t.concat({x, b, c}, 1), w);
          },
          xv0);
    }
    {
      auto w = rand_vec(rng, 2 * 3 * 2 * 4, -1.0, 1.0);
      require_fd(
          [w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({2, 3, 4}, xv, true);
            return wsum(t, t.repeat_axis(x, 2, 2), w);
          },
          xv0);
    }
  }
}

TEST_CASE("gather ops: rows with repeated indices, take_per_row") {
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 800);
    auto table = rand_vec(rng, 5 * 3, -1.0, 1.0);
    {
      // row 2 appears twice: its gradient must accumulate both contributions
      const std::vector<int> ids{2, 0, 2, 4};
      auto w = rand_vec(rng, 4 * 3, -1.0, 1.0);
      require_fd(
          [ids, w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({5, 3}, xv, true);
            return wsum(t, t.rows(x, ids), w);
          },
          table);
    }
    {
      std::vector<int> idx(4);
      for (auto& i : idx) i = rng.uniform_int(6);
      auto w = rand_vec(rng, 4, -1.0, 1.0);
      auto xv0 = rand_vec(rng, 4 * 6, -1.0, 1.0);
      require_fd(
          [idx, w](Tape<double>& t, const std::vector<double>& xv) {
            auto x = t.input({4, 6}, xv, true);
            return wsum(t, t.take_per_row(x, idx), w);
          },
          xv0);
    }
  }
}

TEST_CASE("softmax, logsumexp, layer_norm") {
  const Shape sh{3, 6};
  const int64_t n = ad::numel(sh);
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 900);
    auto xv0 = rand_vec(rng, n, -2.0, 2.0);
    auto w = rand_vec(rng, n, -1.0, 1.0);
    auto wrow = rand_vec(rng, 3, -1.0, 1.0);
    require_fd(
        [w, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.softmax(x), w);
        },
        xv0);
    require_fd(
        [wrow, sh](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          return wsum(t, t.logsumexp(x), wrow);
        },
        xv0);
    auto gv = rand_vec(rng, 6, 0.7, 1.3);
    auto bv = rand_vec(rng, 6, -0.3, 0.3);
    require_fd(
        [w, sh, gv, bv](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input(sh, xv, true);
          auto g = t.input({6}, gv);
          auto b = t.input({6}, bv);
          return wsum(t, t.layer_norm(x, g, b, 1e-5), w);
        },
        xv0);
    require_fd(
        [w, sh, xv0, bv](Tape<double>& t, const std::vector<double>& gvp) {
          auto g = t.input({6}, gvp, true);
          auto x = t.input(sh, xv0);
          auto b = t.input({6}, bv);
          return wsum(t, t.layer_norm(x, g, b, 1e-5), w);
        },
        gv);
    require_fd(
        [w, sh, xv0, gv](Tape<double>& t, const std::vector<double>& bvp) {
          auto b = t.input({6}, bvp, true);
          auto x = t.input(sh, xv0);
          auto g = t.input({6}, gv);
          return wsum(t, t.layer_norm(x, g, b, 1e-5), w);
        },
        bv);
  }
}

TEST_CASE("reductions: sum, mean, sum_last, mean_last") {
  const Shape sh{3, 4};
  const int64_t n = ad::numel(sh);
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 1000);
    auto xv0 = rand_vec(rng, n, -1.5, 1.5);
    auto wrow = rand_vec(rng, 3, -1.0, 1.0);
    require_fd(
        [](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input({3, 4}, xv, true);
          return t.sum(x);
        },
        xv0);
    require_fd(
        [](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input({3, 4}, xv, true);
          return t.mean(x);
        },
        xv0);
    require_fd(
        [wrow](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input({3, 4}, xv, true);
          return wsum(t, t.sum_last(x), wrow);
        },
        xv0);
    require_fd(
        [wrow](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input({3, 4}, xv, true);
          return wsum(t, t.mean_last(x), wrow);
        },
        xv0);
  }
}

TEST_CASE("attention primitive: q, k, v gradients, with and without mask") {
  const int G = 2, Lq = 3, Lk = 4, D = 4;
  const double scale = 1.0 / std::sqrt(double(D));
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 1100);
    auto qv = rand_vec(rng, int64_t(G) * Lq * D, -1.0, 1.0);
    auto kv = rand_vec(rng, int64_t(G) * Lk * D, -1.0, 1.0);
    auto vv = rand_vec(rng, int64_t(G) * Lk * D, -1.0, 1.0);
    auto w = rand_vec(rng, int64_t(G) * Lq * D, -1.0, 1.0);
    // block the upper-right corner, shared across groups
    std::vector<double> mask(int64_t(Lq) * Lk, 0.0);
    mask[0 * Lk + 3] = -1e9;
    mask[1 * Lk + 3] = -1e9;
    // per-group mask variant
    std::vector<double> gmask(int64_t(G) * Lq * Lk, 0.0);
    gmask[0 * Lq * Lk + 2] = -1e9;
    gmask[1 * Lq * Lk + 7] = -1e9;

    for (int variant = 0; variant < 3; ++variant) {
      CAPTURE(variant);
      auto attn = [&, variant](Tape<double>& t, Ref<double> q, Ref<double> k, Ref<double> v) {
        if (variant == 0) return t.sdpa(q, k, v, scale);
        if (variant == 1) return t.sdpa(q, k, v, t.input({Lq, Lk}, mask), scale);
        return t.sdpa(q, k, v, t.input({G, Lq, Lk}, gmask), scale);
      };
      require_fd(
          [&, kv, vv, w](Tape<double>& t, const std::vector<double>& xv) {
            auto q = t.input({G, Lq, D}, xv, true);
            auto k = t.input({G, Lk, D}, kv);
            auto v = t.input({G, Lk, D}, vv);
            return wsum(t, attn(t, q, k, v), w);
          },
          qv);
      require_fd(
          [&, qv, vv, w](Tape<double>& t, const std::vector<double>& xv) {
            auto k = t.input({G, Lk, D}, xv, true);
            auto q = t.input({G, Lq, D}, qv);
            auto v = t.input({G, Lk, D}, vv);
            return wsum(t, attn(t, q, k, v), w);
          },
          kv);
      require_fd(
          [&, qv, kv, w](Tape<double>& t, const std::vector<double>& xv) {
            auto v = t.input({G, Lk, D}, xv, true);
            auto q = t.input({G, Lq, D}, qv);
            auto k = t.input({G, Lk, D}, kv);
            return wsum(t, attn(t, q, k, v), w);
          },
          vv);
    }
  }
}

namespace {

// [L, Dm] -> [H, L, Dh] head split used by the composite below.
Ref<double> split_heads(Tape<double>& t, Ref<double> x, int L, int H, int Dh) {
  return t.permute(t.reshape(x, {L, H, Dh}), {1, 0, 2});
}

}  // namespace

TEST_CASE("composite: pre-norm causal attention block") {
  const int L = 4, Dm = 8, H = 2, Dh = 4;
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 1200);
    auto Wqkv = rand_vec(rng, int64_t(Dm) * 3 * Dm, -0.4, 0.4);
    auto bqkv = rand_vec(rng, 3 * Dm, -0.1, 0.1);
    auto Wo = rand_vec(rng, int64_t(Dm) * Dm, -0.4, 0.4);
    auto gv = rand_vec(rng, Dm, 0.8, 1.2);
    auto bv = rand_vec(rng, Dm, -0.1, 0.1);
    auto Xv = rand_vec(rng, int64_t(L) * Dm, -1.0, 1.0);
    auto w = rand_vec(rng, int64_t(L) * Dm, -1.0, 1.0);
    std::vector<double> causal(int64_t(L) * L, 0.0);
    for (int i = 0; i < L; ++i)
      for (int j = i + 1; j < L; ++j) causal[int64_t(i) * L + j] = -1e9;

    auto block = [=](Tape<double>& t, Ref<double> X, Ref<double> Wq) {
      auto g = t.input({Dm}, gv);
      auto b = t.input({Dm}, bv);
      auto h = t.layer_norm(X, g, b, 1e-5);
      auto qkv = t.add(t.matmul(h, Wq), t.input({3 * Dm}, bqkv));
      auto q = split_heads(t, t.slice(qkv, 1, 0, Dm), L, H, Dh);
      auto k = split_heads(t, t.slice(qkv, 1, Dm, Dm), L, H, Dh);
      auto v = split_heads(t, t.slice(qkv, 1, 2 * Dm, Dm), L, H, Dh);
      auto o = t.sdpa(q, k, v, t.input({L, L}, causal), 1.0 / std::sqrt(double(Dh)));
      auto merged = t.reshape(t.permute(o, {1, 0, 2}), {L, Dm});
      return t.add(X, t.matmul(merged, t.input({Dm, Dm}, Wo)));
    };
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto X = t.input({L, Dm}, xv, true);
          auto Wq = t.input({Dm, 3 * Dm}, Wqkv);
          return wsum(t, block(t, X, Wq), w);
        },
        Xv);
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto Wq = t.input({Dm, 3 * Dm}, xv, true);
          auto X = t.input({L, Dm}, Xv);
          return wsum(t, block(t, X, Wq), w);
        },
        Wqkv);
  }
}

TEST_CASE("composite: norm-mlp residual chain") {
  const int R = 2, Dm = 8, Dh = 16;
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 1300);
    auto W1 = rand_vec(rng, int64_t(Dm) * Dh, -0.4, 0.4);
    auto b1 = rand_vec(rng, Dh, -0.1, 0.1);
    auto W2 = rand_vec(rng, int64_t(Dh) * Dm, -0.4, 0.4);
    auto g1 = rand_vec(rng, Dm, 0.8, 1.2);
    auto be1 = rand_vec(rng, Dm, -0.1, 0.1);
    auto g2 = rand_vec(rng, Dm, 0.8, 1.2);
    auto be2 = rand_vec(rng, Dm, -0.1, 0.1);
    auto Xv = rand_vec(rng, int64_t(R) * Dm, -1.0, 1.0);
    auto w = rand_vec(rng, int64_t(R) * Dm, -1.0, 1.0);
    auto chain = [=](Tape<double>& t, Ref<double> X, Ref<double> W1r) {
      auto h = t.layer_norm(X, t.input({Dm}, g1), t.input({Dm}, be1), 1e-5);
      auto m = t.matmul(t.gelu(t.add(t.matmul(h, W1r), t.input({Dh}, b1))), t.input({Dh, Dm}, W2));
      auto y = t.add(X, m);
      return t.layer_norm(y, t.input({Dm}, g2), t.input({Dm}, be2), 1e-5);
    };
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto X = t.input({R, Dm}, xv, true);
          auto W1r = t.input({Dm, Dh}, W1);
          return wsum(t, chain(t, X, W1r), w);
        },
        Xv);
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto W1r = t.input({Dm, Dh}, xv, true);
          auto X = t.input({R, Dm}, Xv);
          return wsum(t, chain(t, X, W1r), w);
        },
        W1);
  }
}

TEST_CASE("composite: mixture negative log-likelihood projection") {
  // conditioning vector -> (logits, means, log-variances) -> NLL of a point.
  // Exercises matmul, reshape, repeat, clamp, exp, div and logsumexp end to
  // end, the same graph the probabilistic head trains on.
  const int Hc = 6, Kc = 3, Dc = 2;
  const double ln2pi = std::log(2.0 * std::numbers::pi);
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 1400);
    auto hv = rand_vec(rng, Hc, -1.0, 1.0);
    auto Wl = rand_vec(rng, int64_t(Hc) * Kc, -0.5, 0.5);
    auto Wm = rand_vec(rng, int64_t(Hc) * Kc * Dc, -0.5, 0.5);
    auto Wv = rand_vec(rng, int64_t(Hc) * Kc * Dc, -0.5, 0.5);
    auto xd = rand_vec(rng, Dc, -1.0, 1.0);
    auto nll = [=](Tape<double>& t, Ref<double> h, Ref<double> wl, Ref<double> wm, Ref<double> wv) {
      auto mus = t.reshape(t.matmul(h, wm), {Kc, Dc});
      auto logvar = t.clamp(t.reshape(t.matmul(h, wv), {Kc, Dc}), -10.0, 5.0);
      auto logits = t.reshape(t.matmul(h, wl), {Kc});
      auto xk = t.repeat_axis(t.input({Dc}, xd), 0, Kc);
      auto diff = t.sub(xk, mus);
      auto quad = t.div(t.mul(diff, diff), t.exp(logvar));
      auto percomp = t.scale(t.sum_last(t.add_const(t.add(quad, logvar), ln2pi)), -0.5);
      auto logsoft = t.sub_last(logits, t.logsumexp(logits));
      return t.neg(t.logsumexp(t.add(percomp, logsoft)));
    };
    // probe each projection separately (they flow through different paths)
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto wv = t.input({Hc, Kc * Dc}, xv, true);
          auto h = t.input({1, Hc}, hv);
          auto wl = t.input({Hc, Kc}, Wl);
          auto wm = t.input({Hc, Kc * Dc}, Wm);
          return nll(t, h, wl, wm, wv);
        },
        Wv);
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto wm = t.input({Hc, Kc * Dc}, xv, true);
          auto h = t.input({1, Hc}, hv);
          auto wl = t.input({Hc, Kc}, Wl);
          auto wv = t.input({Hc, Kc * Dc}, Wv);
          return nll(t, h, wl, wm, wv);
        },
        Wm);
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto wl = t.input({Hc, Kc}, xv, true);
          auto h = t.input({1, Hc}, hv);
          auto wm = t.input({Hc, Kc * Dc}, Wm);
          auto wv = t.input({Hc, Kc * Dc}, Wv);
          return nll(t, h, wl, wm, wv);
        },
        Wl);
  }
}

TEST_CASE("composite: conditioned denoising step") {
  // noisy point + timestep embedding, modulated by a conditioning projection,
  // regressed onto a target: the skeleton of one diffusion training step.
  const int D = 6, Hd = 8;
  for (uint64_t seed = 1; seed <= kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng(seed + 1500);
    auto tv = rand_vec(rng, D, -0.5, 0.5);
    auto cv = rand_vec(rng, Hd, -1.0, 1.0);
    auto W1 = rand_vec(rng, int64_t(D) * Hd, -0.4, 0.4);
    auto b1 = rand_vec(rng, Hd, -0.1, 0.1);
    auto W2 = rand_vec(rng, int64_t(Hd) * Hd, -0.4, 0.4);
    auto W3 = rand_vec(rng, int64_t(Hd) * D, -0.4, 0.4);
    auto gv = rand_vec(rng, Hd, 0.8, 1.2);
    auto bev = rand_vec(rng, Hd, -0.1, 0.1);
    auto target = rand_vec(rng, D, -1.0, 1.0);
    auto xv0 = rand_vec(rng, D, -1.0, 1.0);
    auto step = [=](Tape<double>& t, Ref<double> x, Ref<double> W1r) {
      auto h0 = t.add(x, t.input({1, D}, tv));
      auto h1 = t.gelu(t.add(t.matmul(h0, W1r), t.input({Hd}, b1)));
      auto film = t.matmul(t.input({1, Hd}, cv), t.input({Hd, Hd}, W2));
      auto h2 = t.layer_norm(t.mul(h1, film), t.input({Hd}, gv), t.input({Hd}, bev), 1e-5);
      auto out = t.matmul(h2, t.input({Hd, D}, W3));
      auto err = t.sub(out, t.input({1, D}, target));
      return t.mean(t.mul(err, err));
    };
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto x = t.input({1, D}, xv, true);
          auto W1r = t.input({D, Hd}, W1);
          return step(t, x, W1r);
        },
        xv0);
    require_fd(
        [=](Tape<double>& t, const std::vector<double>& xv) {
          auto W1r = t.input({D, Hd}, xv, true);
          auto x = t.input({1, D}, xv0);
          return step(t, x, W1r);
        },
        W1);
  }
}

TEST_CASE("custom op: correct backward passes, broken backward is caught") {
  Rng rng(42);
  auto xv0 = rand_vec(rng, 8, 0.5, 1.5);
  auto w = rand_vec(rng, 8, -1.0, 1.0);
  auto square_fwd = [](const std::vector<std::span<const double>>& in, std::span<double> out) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = in[0][i] * in[0][i];
  };
  // healthy: d/dx x^2 = 2x
  {
    auto f = [w, square_fwd](Tape<double>& t, const std::vector<double>& xv) {
      auto x = t.input({8}, xv, true);
      auto y = t.custom("square", {x}, {8}, square_fwd,
                        [](const std::vector<std::span<const double>>& in, std::span<const double>,
                           std::span<const double> gy, const std::vector<std::span<double>>& gx) {
                          for (size_t i = 0; i < gy.size(); ++i) gx[0][i] += 2.0 * in[0][i] * gy[i];
                        });
      return t.sum(t.mul(y, t.input({8}, w)));
    };
    const auto rep = ad::finite_difference_check(f, xv0);
    CHECK(rep.max_rel_err < kTol);
  }
  // sabotaged: reports 3x instead of 2x; the checker must flag it loudly
  {
    auto f = [w, square_fwd](Tape<double>& t, const std::vector<double>& xv) {
      auto x = t.input({8}, xv, true);
      auto y = t.custom("square_broken", {x}, {8}, square_fwd,
                        [](const std::vector<std::span<const double>>& in, std::span<const double>,
                           std::span<const double> gy, const std::vector<std::span<double>>& gx) {
                          for (size_t i = 0; i < gy.size(); ++i) gx[0][i] += 3.0 * in[0][i] * gy[i];
                        });
      return t.sum(t.mul(y, t.input({8}, w)));
    };
    const auto rep = ad::finite_difference_check(f, xv0);
    CHECK(rep.max_rel_err > 1e-2);
  }
}

TEST_CASE("shared subexpression accumulates gradient from every consumer") {
  Rng rng(7);
  auto xv0 = rand_vec(rng, 6, 0.5, 1.5);
  // y = sum(x*x) + 3*sum(x)  =>  dy/dx = 2x + 3 exactly
  Tape<double> t;
  auto x = t.input({6}, xv0, true);
  auto loss = t.add(t.sum(t.mul(x, x)), t.scale(t.sum(x), 3.0));
  t.backward(loss);
  auto g = x.grad();
  for (int i = 0; i < 6; ++i) CHECK(g[i] == doctest::Approx(2.0 * xv0[i] + 3.0).epsilon(1e-12));
}

TEST_CASE("parameter leaves fold into Param::grad, tied use accumulates") {
  divot::ad::ParamStore<double> store;
  auto& p = store.make("tied", {2, 2});
  Rng rng(11);
  for (auto& v : p.value) v = rng.uniform(-1.0, 1.0);
  std::vector<double> c1 = rand_vec(rng, 4, -1.0, 1.0);
  std::vector<double> c2 = rand_vec(rng, 4, -1.0, 1.0);

  Tape<double> t;
  auto a = t.param(p);  // same parameter mounted twice
  auto b = t.param(p);
  auto loss = t.add(t.sum(t.mul(a, t.input({2, 2}, c1))), t.sum(t.mul(b, t.input({2, 2}, c2))));
  t.backward(loss);
  for (int i = 0; i < 4; ++i) CHECK(p.grad[i] == doctest::Approx(c1[i] + c2[i]).epsilon(1e-12));

  // grads accumulate across steps until zero_grad
  t.reset();
  auto a2 = t.param(p);
  t.backward(t.sum(t.mul(a2, t.input({2, 2}, c1))));
  for (int i = 0; i < 4; ++i) CHECK(p.grad[i] == doctest::Approx(2.0 * c1[i] + c2[i]).epsilon(1e-12));
  store.zero_grad();
  for (int i = 0; i < 4; ++i) CHECK(p.grad[i] == 0.0);
}

TEST_CASE("inference mode: same forward values, no backward") {
  Rng rng(13);
  auto xv = rand_vec(rng, 12, -1.0, 1.0);
  auto Wv = rand_vec(rng, 12 * 3, -0.5, 0.5);

  divot::ad::ParamStore<double> store;
  auto& W = store.make("w", {4, 3});
  // x is [3,4] so x W is [3,3]
  for (int i = 0; i < 12; ++i) W.value[i] = Wv[i];

  auto run = [&](bool grad) {
    Tape<double> t;
    t.set_grad_enabled(grad);
    auto x = t.input({3, 4}, xv, true);
    auto y = t.gelu(t.matmul(x, t.param(W)));
    std::vector<double> out(y.value().begin(), y.value().end());
    if (grad) t.backward(t.sum(y));
    return out;
  };
  auto with_grad = run(true);
  auto without = run(false);
  REQUIRE(with_grad.size() == without.size());
  for (size_t i = 0; i < with_grad.size(); ++i) CHECK(with_grad[i] == without[i]);

  Tape<double> t;
  t.set_grad_enabled(false);
  auto x = t.input({3}, {1.0, 2.0, 3.0}, true);
  auto y = t.sum(x);
  CHECK_THROWS_AS(t.backward(y), Error);
}

TEST_CASE("frozen subgraph: no gradient crosses a grad-disabled section") {
  divot::ad::ParamStore<double> store;
  auto& Wf = store.make("frozen", {3, 3});
  auto& Wt = store.make("trainable", {3, 3});
  Rng rng(17);
  for (auto& v : Wf.value) v = rng.uniform(-0.5, 0.5);
  for (auto& v : Wt.value) v = rng.uniform(-0.5, 0.5);
  auto xv = rand_vec(rng, 3 * 3, -1.0, 1.0);

  Tape<double> t;
  t.set_grad_enabled(false);  // encoder section
  auto enc = t.tanh(t.matmul(t.input({3, 3}, xv), t.param(Wf)));
  t.set_grad_enabled(true);  // trainable head
  auto out = t.matmul(enc, t.param(Wt));
  t.backward(t.sum(out));

  double frozen_abs = 0.0, trained_abs = 0.0;
  for (double g : Wf.grad) frozen_abs += std::abs(g);
  for (double g : Wt.grad) trained_abs += std::abs(g);
  CHECK(frozen_abs == 0.0);
  CHECK(trained_abs > 0.0);
}

TEST_CASE("structured errors name the op and the offending shapes") {
  Tape<double> t;
  auto a = t.input({3, 4}, std::vector<double>(12, 1.0));
  auto b = t.input({5}, std::vector<double>(5, 1.0));

  try {
    t.add(a, b);
    FAIL("add should have thrown");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrKind::runtime);
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[3,4]") != std::string::npos);
    CHECK(msg.find("[5]") != std::string::npos);
  }

  try {
    t.matmul(a, t.input({3, 4}, std::vector<double>(12, 1.0)));
    FAIL("matmul should have thrown");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[3,4]") != std::string::npos);
  }

  CHECK_THROWS_AS(t.reshape(a, {5, 5}), Error);
  CHECK_THROWS_AS(t.slice(a, 1, 3, 4), Error);
  CHECK_THROWS_AS(t.rows(a, {0, 3}), Error);

  // backward demands a scalar loss
  CHECK_THROWS_AS(t.backward(a), Error);

  // grad() before backward
  CHECK_THROWS_AS((void)a.grad(), Error);

  // backward may run once per tape generation
  auto loss = t.sum(a);
  t.backward(loss);
  CHECK_THROWS_AS(t.backward(loss), Error);
  t.reset();

  // non-finite loss is rejected up front
  auto neg = t.input({1}, {-1.0}, true);
  auto bad = t.log(neg);  // NaN
  CHECK_THROWS_AS(t.backward(bad), Error);
}

TEST_CASE("tape reuse: reset gives bit-identical reruns") {
  Rng rng(23);
  auto xv = rand_vec(rng, 4 * 6, -1.0, 1.0);
  auto Wv = rand_vec(rng, 6 * 6, -0.5, 0.5);
  auto run = [&](Tape<float>& t) {
    std::vector<float> xf(xv.begin(), xv.end()), wf(Wv.begin(), Wv.end());
    auto x = t.input({4, 6}, xf, true);
    auto y = t.softmax(t.gelu(t.matmul(x, t.input({6, 6}, wf))));
    auto loss = t.mean(y);
    t.backward(loss);
    std::vector<float> out(y.value().begin(), y.value().end());
    auto g = x.grad();
    out.insert(out.end(), g.begin(), g.end());
    return out;
  };
  Tape<float> t;
  auto first = run(t);
  t.reset();
  auto second = run(t);
  REQUIRE(first.size() == second.size());
  CHECK(std::memcmp(first.data(), second.data(), first.size() * sizeof(float)) == 0);
}

TEST_CASE("float and double graphs agree") {
  Rng rng(29);
  auto xv = rand_vec(rng, 3 * 8, -1.0, 1.0);
  auto W1 = rand_vec(rng, 8 * 16, -0.4, 0.4);
  auto W2 = rand_vec(rng, 16 * 8, -0.4, 0.4);
  auto run = [&]<typename T>() {
    Tape<T> t;
    std::vector<T> x0(xv.begin(), xv.end()), w1(W1.begin(), W1.end()), w2(W2.begin(), W2.end());
    auto x = t.input({3, 8}, x0, true);
    auto h = t.gelu(t.matmul(x, t.input({8, 16}, w1)));
    auto y = t.softmax(t.matmul(h, t.input({16, 8}, w2)));
    auto loss = t.mean(t.mul(y, y));
    t.backward(loss);
    std::vector<double> out{static_cast<double>(loss.scalar())};
    for (T g : x.grad()) out.push_back(static_cast<double>(g));
    return out;
  };
  auto f32 = run.template operator()<float>();
  auto f64 = run.template operator()<double>();
  REQUIRE(f32.size() == f64.size());
  for (size_t i = 0; i < f32.size(); ++i) {
    const double scale = std::max({1e-3, std::abs(f32[i]), std::abs(f64[i])});
    CHECK(std::abs(f32[i] - f64[i]) / scale < 1e-3);
  }
}
