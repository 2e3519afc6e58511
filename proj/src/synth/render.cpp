#include <algorithm>
#include <cmath>
#include <cstring>

#include "divot/errors.hpp"
#include "divot/synth.hpp"

namespace divot::synth {

const float kPalette[kNumColors][3] = {
    {1.0f, 0.0f, 0.0f},  // red
    {0.0f, 1.0f, 0.0f},  // green
    {0.0f, 0.0f, 1.0f},  // blue
    {1.0f, 1.0f, 0.0f},  // yellow
    {0.0f, 1.0f, 1.0f},  // cyan
    {1.0f, 0.0f, 1.0f},  // magenta
};

std::vector<int> sparse_frame_indices(int dense_frames) {
  std::vector<int> idx;
  for (int t = 0; t < dense_frames; t += 4) idx.push_back(t);
  if (idx.back() != dense_frames - 1) idx.push_back(dense_frames - 1);
  return idx;
}

DiscreteFactors discretize(const FactorSpec& spec) {
  DiscreteFactors f;
  f.shape = static_cast<int>(spec.shape);
  f.color = spec.color;
  f.pos_q = (spec.px >= 0.5f ? 2 : 0) | (spec.py >= 0.5f ? 1 : 0);
  f.vel_q = (spec.vx > 0.0f ? 2 : 0) | (spec.vy > 0.0f ? 1 : 0);
  return f;
}

namespace {

// Sampler margins. Wall clearance keeps the full object inside the frame at
// t=0; the bounce-free term keeps it clear of the walls through the first
// sparse step (4 dense frames), so the first sparse displacement always
// carries the initial velocity's signs; the midline margin keeps the position
// quadrant unambiguous under mild reconstruction blur.
constexpr float kWallPad = 0.02f;
constexpr float kBouncePad = 0.005f;
constexpr float kMidlineMargin = 0.04f;
constexpr int kFirstSparseStep = 4;

// One axis: a feasible interval for the start coordinate given size and
// velocity, intersected with one of the two quadrant bands. At least one band
// is always non-empty for in-distribution sizes and speeds.
float sample_axis(Rng& rng, float size, float v) {
  float lo = size + kWallPad;
  float hi = 1.0f - size - kWallPad;
  if (v > 0.0f)
    hi = std::min(hi, 1.0f - size - kFirstSparseStep * v - kBouncePad);
  else
    lo = std::max(lo, size + kFirstSparseStep * (-v) + kBouncePad);

  const float low_hi = std::min(hi, 0.5f - kMidlineMargin);
  const float high_lo = std::max(lo, 0.5f + kMidlineMargin);
  const bool low_ok = low_hi - lo > 1e-3f;
  const bool high_ok = hi - high_lo > 1e-3f;
  if (!low_ok && !high_ok) fail_runtime("sampler: empty start interval (size/velocity out of range)");
  bool use_low = low_ok;
  if (low_ok && high_ok) use_low = rng.bernoulli(0.5);
  return use_low ? static_cast<float>(rng.uniform(lo, low_hi)) : static_cast<float>(rng.uniform(high_lo, hi));
}

}  // namespace

FactorSpec sample_spec(Rng& rng) {
  FactorSpec s;
  s.shape = static_cast<ShapeKind>(rng.uniform_int(kNumShapes));
  s.color = rng.uniform_int(kNumColors);
  s.size = static_cast<float>(rng.uniform(0.13, 0.22));
  const float mx = static_cast<float>(rng.uniform(0.03, 0.12));
  const float my = static_cast<float>(rng.uniform(0.03, 0.12));
  s.vx = rng.bernoulli(0.5) ? mx : -mx;
  s.vy = rng.bernoulli(0.5) ? my : -my;
  s.px = sample_axis(rng, s.size, s.vx);
  s.py = sample_axis(rng, s.size, s.vy);
  return s;
}

namespace {

// Reflect x0 + v*t into [m, 1-m]: the closed form of elastic wall bounces.
// Evaluated independently per frame, so there is no integration drift.
float fold(float x0, float v, int t, float m) {
  const float span = 1.0f - 2.0f * m;
  if (span <= 0.0f) return 0.5f;  // object fills the frame; degenerate spec
  float u = std::fmod(x0 - m + v * static_cast<float>(t), 2.0f * span);
  if (u < 0.0f) u += 2.0f * span;
  return m + (u <= span ? u : 2.0f * span - u);
}

}  // namespace

void center_at(const FactorSpec& spec, int t, float* cx, float* cy) {
  *cx = fold(spec.px, spec.vx, t, spec.size);
  *cy = fold(spec.py, spec.vy, t, spec.size);
}

namespace {

constexpr float kSqrt3Half = 0.8660254037844386f;  // sqrt(3)/2
constexpr float kInvSqrt2 = 0.7071067811865476f;   // 1/sqrt(2)

// Inside tests in world units, relative to the object center, y pointing
// down. All shapes are inscribed in the circle of radius `size`.
inline bool inside_circle(float dx, float dy, float s) { return dx * dx + dy * dy <= s * s; }

inline bool inside_square(float dx, float dy, float s) {
  const float h = s * kInvSqrt2;
  return dx >= -h && dx <= h && dy >= -h && dy <= h;
}

// Equilateral triangle, apex up (smaller y): vertices (0,-s),
// (+-sqrt(3)/2 s, s/2). Inside = left of each directed edge (clockwise in
// y-down coordinates).
inline bool inside_triangle(float dx, float dy, float s) {
  const float ax = 0.0f, ay = -s;
  const float bx = kSqrt3Half * s, by = 0.5f * s;
  const float cx = -kSqrt3Half * s, cy = 0.5f * s;
  const float e1 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
  const float e2 = (cx - bx) * (dy - by) - (cy - by) * (dx - bx);
  const float e3 = (ax - cx) * (dy - cy) - (ay - cy) * (dx - cx);
  return e1 >= 0.0f && e2 >= 0.0f && e3 >= 0.0f;
}

inline bool inside(ShapeKind k, float dx, float dy, float s) {
  switch (k) {
    case ShapeKind::circle: return inside_circle(dx, dy, s);
    case ShapeKind::square: return inside_square(dx, dy, s);
    default: return inside_triangle(dx, dy, s);
  }
}

}  // namespace

void render_frame(const FactorSpec& spec, int t, float* out) {
  std::memset(out, 0, sizeof(float) * kFramePixels);
  float cx, cy;
  center_at(spec, t, &cx, &cy);
  const float s = spec.size;
  const float* rgb = kPalette[spec.color];

  // Pixels only inside the bounding box can be covered; 4x4 supersampling
  // resolves the edge. Pixel (r, c) spans [c/W,(c+1)/W) x [r/H,(r+1)/H).
  const int c0 = std::max(0, static_cast<int>((cx - s) * kW) - 1);
  const int c1 = std::min(kW - 1, static_cast<int>((cx + s) * kW) + 1);
  const int r0 = std::max(0, static_cast<int>((cy - s) * kH) - 1);
  const int r1 = std::min(kH - 1, static_cast<int>((cy + s) * kH) + 1);
  constexpr int kSS = 4;
  constexpr float kInv = 1.0f / (kSS * kSS);
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      int hit = 0;
      for (int sy = 0; sy < kSS; ++sy) {
        const float y = (static_cast<float>(r) + (static_cast<float>(sy) + 0.5f) / kSS) / kH;
        for (int sx = 0; sx < kSS; ++sx) {
          const float x = (static_cast<float>(c) + (static_cast<float>(sx) + 0.5f) / kSS) / kW;
          hit += inside(spec.shape, x - cx, y - cy, s) ? 1 : 0;
        }
      }
      if (hit) {
        const float cov = static_cast<float>(hit) * kInv;
        float* px = out + (static_cast<int64_t>(r) * kW + c) * kC;
        px[0] = rgb[0] * cov;
        px[1] = rgb[1] * cov;
        px[2] = rgb[2] * cov;
      }
    }
  }
}

void render_dense_clip(const FactorSpec& spec, float* out) {
  for (int t = 0; t < kDenseFrames; ++t) render_frame(spec, t, out + static_cast<int64_t>(t) * kFramePixels);
}

void extract_sparse(const float* dense, float* sparse) {
  const auto idx = sparse_frame_indices();
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(sparse + i * kFramePixels, dense + static_cast<int64_t>(idx[i]) * kFramePixels, sizeof(float) * kFramePixels);
}

// ---- captions ----

std::array<int, kCaptionLen> encode_caption(const DiscreteFactors& f) {
  return {kTokBoc, kTokShapeBase + f.shape, kTokColorBase + f.color, kTokPosBase + f.pos_q, kTokVelBase + f.vel_q, kTokEoc};
}

DiscreteFactors decode_caption(const int* tokens, int len) {
  if (len != kCaptionLen) fail_runtime("caption: expected " + std::to_string(kCaptionLen) + " tokens, got " + std::to_string(len));
  auto expect_range = [&](int v, int base, int n, const char* what) {
    if (v < base || v >= base + n) fail_runtime(std::string("caption: token out of range for ") + what);
    return v - base;
  };
  if (tokens[0] != kTokBoc) fail_runtime("caption: missing begin marker");
  if (tokens[kCaptionLen - 1] != kTokEoc) fail_runtime("caption: missing end marker");
  DiscreteFactors f;
  f.shape = expect_range(tokens[1], kTokShapeBase, 3, "shape");
  f.color = expect_range(tokens[2], kTokColorBase, 6, "color");
  f.pos_q = expect_range(tokens[3], kTokPosBase, 4, "position");
  f.vel_q = expect_range(tokens[4], kTokVelBase, 4, "motion");
  return f;
}

}  // namespace divot::synth
