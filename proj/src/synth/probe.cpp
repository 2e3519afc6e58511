#include <cmath>
#include <vector>

#include "divot/errors.hpp"
#include "divot/synth.hpp"

namespace divot::synth {

namespace {

// Summed-channel brightness below this counts as background. In-distribution
// object interiors sum to >= 1.0 (every palette color has a saturated
// channel), while a +-0.05 global brightness shift lifts the background to at
// most 0.15, so the cutoff separates the two with a wide margin.
constexpr double kForegroundCutoff = 0.25;

// Generated frames can wander outside [0,1]; the probe clamps before reading.
inline double px_mass(const float* px) {
  double m = 0.0;
  for (int c = 0; c < kC; ++c) m += std::min(1.0, std::max(0.0, static_cast<double>(px[c])));
  return m < kForegroundCutoff ? 0.0 : m;
}

struct Moments {
  double mass = 0.0;
  double cx = 0.0, cy = 0.0;  // in [0,1] units
};

Moments moments(const float* frame) {
  Moments mo;
  double sx = 0.0, sy = 0.0;
  for (int r = 0; r < kH; ++r) {
    for (int c = 0; c < kW; ++c) {
      const double m = px_mass(frame + (static_cast<int64_t>(r) * kW + c) * kC);
      if (m <= 0.0) continue;
      mo.mass += m;
      sx += m * ((c + 0.5) / kW);
      sy += m * ((r + 0.5) / kH);
    }
  }
  if (mo.mass > 0.0) {
    mo.cx = sx / mo.mass;
    mo.cy = sy / mo.mass;
  }
  return mo;
}

// Below this total mass the frame is treated as empty. The smallest
// in-distribution object covers ~50 pixels, far above the cutoff.
constexpr double kMinMass = 10.0;

}  // namespace

OracleProbe::OracleProbe() {
  // Calibrate shape signatures from canonical renders instead of hand-typed
  // constants: the classifier and the generator can never drift apart.
  std::vector<float> frame(kFramePixels);
  for (int s = 0; s < kNumShapes; ++s) {
    FactorSpec spec;
    spec.shape = static_cast<ShapeKind>(s);
    spec.color = 0;
    spec.px = spec.py = 0.5f;
    spec.vx = spec.vy = 0.0f;
    spec.size = 0.175f;
    render_frame(spec, 0, frame.data());
    const Moments mo = moments(frame.data());
    auto& sig = shape_sig_[s];
    sig = {};
    double norm = 0.0;
    for (int r = 0; r < kH; ++r) {
      for (int c = 0; c < kW; ++c) {
        const double m = px_mass(frame.data() + (static_cast<int64_t>(r) * kW + c) * kC);
        if (m <= 0.0) continue;
        const double dx = (c + 0.5) / kW - mo.cx;
        const double dy = (r + 0.5) / kH - mo.cy;
        const double rho2 = dx * dx + dy * dy;
        const double th = std::atan2(dy, dx);
        norm += m * rho2;
        sig.re3 += m * rho2 * std::cos(3.0 * th);
        sig.im3 += m * rho2 * std::sin(3.0 * th);
        sig.re4 += m * rho2 * std::cos(4.0 * th);
        sig.im4 += m * rho2 * std::sin(4.0 * th);
      }
    }
    if (norm > 0.0) {
      sig.re3 /= norm;
      sig.im3 /= norm;
      sig.re4 /= norm;
      sig.im4 /= norm;
    }
  }
}

ProbeResult OracleProbe::probe(const float* frames, int n_frames) const {
  if (n_frames < 2) fail_runtime("probe: needs at least two frames");
  ProbeResult res;
  const Moments m0 = moments(frames);
  const Moments m1 = moments(frames + kFramePixels);
  if (m0.mass < kMinMass || m1.mass < kMinMass) {
    res.abstained = true;
    return res;
  }

  // color: mean clamped RGB over the first frame's foreground, brightest
  // channel normalized out, nearest palette entry
  double rgb[3] = {0, 0, 0};
  for (int i = 0; i < kH * kW; ++i) {
    const float* px = frames + static_cast<int64_t>(i) * kC;
    if (px_mass(px) <= 0.0) continue;
    for (int c = 0; c < kC; ++c) rgb[c] += std::min(1.0, std::max(0.0, static_cast<double>(px[c])));
  }
  const double peak = std::max({rgb[0], rgb[1], rgb[2], 1e-12});
  for (double& c : rgb) c /= peak;
  int best_color = 0;
  double best_d = 1e30;
  for (int k = 0; k < kNumColors; ++k) {
    double d = 0.0;
    for (int c = 0; c < kC; ++c) d += (rgb[c] - kPalette[k][c]) * (rgb[c] - kPalette[k][c]);
    if (d < best_d) {
      best_d = d;
      best_color = k;
    }
  }
  res.factors.color = best_color;

  // position quadrant from the first frame's centroid
  res.cx = m0.cx;
  res.cy = m0.cy;
  res.factors.pos_q = (m0.cx >= 0.5 ? 2 : 0) | (m0.cy >= 0.5 ? 1 : 0);

  // motion quadrant from the first sparse displacement
  res.dx = m1.cx - m0.cx;
  res.dy = m1.cy - m0.cy;
  res.factors.vel_q = (res.dx > 0.0 ? 2 : 0) | (res.dy > 0.0 ? 1 : 0);

  // shape from angular harmonics about the centroid
  Signature sig{};
  double norm = 0.0;
  for (int r = 0; r < kH; ++r) {
    for (int c = 0; c < kW; ++c) {
      const double m = px_mass(frames + (static_cast<int64_t>(r) * kW + c) * kC);
      if (m <= 0.0) continue;
      const double ddx = (c + 0.5) / kW - m0.cx;
      const double ddy = (r + 0.5) / kH - m0.cy;
      const double rho2 = ddx * ddx + ddy * ddy;
      const double th = std::atan2(ddy, ddx);
      norm += m * rho2;
      sig.re3 += m * rho2 * std::cos(3.0 * th);
      sig.im3 += m * rho2 * std::sin(3.0 * th);
      sig.re4 += m * rho2 * std::cos(4.0 * th);
      sig.im4 += m * rho2 * std::sin(4.0 * th);
    }
  }
  if (norm <= 0.0) {
    res.abstained = true;
    return res;
  }
  sig.re3 /= norm;
  sig.im3 /= norm;
  sig.re4 /= norm;
  sig.im4 /= norm;
  int best_shape = 0;
  double best_s = 1e30;
  for (int k = 0; k < kNumShapes; ++k) {
    const auto& ref = shape_sig_[k];
    const double d = (sig.re3 - ref.re3) * (sig.re3 - ref.re3) + (sig.im3 - ref.im3) * (sig.im3 - ref.im3) +
                     (sig.re4 - ref.re4) * (sig.re4 - ref.re4) + (sig.im4 - ref.im4) * (sig.im4 - ref.im4);
    if (d < best_s) {
      best_s = d;
      best_shape = k;
    }
  }
  res.factors.shape = best_shape;
  return res;
}

double OracleProbe::factor_match(const ProbeResult& got, const DiscreteFactors& truth) {
  if (got.abstained) return 0.0;
  int hits = 0;
  hits += got.factors.shape == truth.shape;
  hits += got.factors.color == truth.color;
  hits += got.factors.pos_q == truth.pos_q;
  hits += got.factors.vel_q == truth.vel_q;
  return hits / 4.0;
}

}  // namespace divot::synth
