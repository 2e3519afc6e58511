#pragma once

#include <cstdint>

// Conversions between frame pixels [F, H, W, C] and flattened non-overlapping
// square patches [F, (H/P)*(W/P), P*P*C]. Patches are the latent space the
// denoiser works in and the unit the tokenizer embeds, so both directions
// must be exact inverses.

namespace divot::vid {

inline int64_t patch_count(int h, int w, int p) { return (static_cast<int64_t>(h) / p) * (w / p); }

template <typename T>
void patchify(const T* frames, int f, int h, int w, int c, int p, T* out) {
  const int gh = h / p, gw = w / p;
  const int pd = p * p * c;
  for (int t = 0; t < f; ++t) {
    const T* frame = frames + static_cast<int64_t>(t) * h * w * c;
    T* dst_frame = out + static_cast<int64_t>(t) * gh * gw * pd;
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        T* dst = dst_frame + static_cast<int64_t>(gy * gw + gx) * pd;
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px) {
            const T* src = frame + (static_cast<int64_t>(gy * p + py) * w + (gx * p + px)) * c;
            for (int ch = 0; ch < c; ++ch) *dst++ = src[ch];
          }
      }
  }
}

template <typename T>
void unpatchify(const T* patches, int f, int h, int w, int c, int p, T* frames) {
  const int gh = h / p, gw = w / p;
  const int pd = p * p * c;
  for (int t = 0; t < f; ++t) {
    const T* src_frame = patches + static_cast<int64_t>(t) * gh * gw * pd;
    T* frame = frames + static_cast<int64_t>(t) * h * w * c;
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const T* src = src_frame + static_cast<int64_t>(gy * gw + gx) * pd;
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px) {
            T* dst = frame + (static_cast<int64_t>(gy * p + py) * w + (gx * p + px)) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] = *src++;
          }
      }
  }
}

}  // namespace divot::vid
