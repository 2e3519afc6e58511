#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "divot/rng.hpp"

// Synthetic bouncing-shape videos with exactly known factors. One object per
// clip: a colored shape with an initial position and velocity, moving with
// elastic wall bounces. Because every clip is generated from a closed-form
// spec, evaluation can ask "did the model keep the shape / color / position /
// motion?" without any learned perception in the loop.

namespace divot::synth {

using kern::Rng;

// Canvas and timing. Clips are rendered densely at 8 fps; the tokenizer sees
// the sparse 2 fps subset (every 4th frame plus the terminal one), while the
// de-tokenizer is trained to restore all dense frames.
inline constexpr int kH = 32;
inline constexpr int kW = 32;
inline constexpr int kC = 3;
inline constexpr int kDenseFrames = 16;
inline constexpr int kFramePixels = kH * kW * kC;
inline constexpr int kClipFloats = kDenseFrames * kFramePixels;

// Indices of the sparse frames within a dense clip: {0, 4, 8, 12, 15}.
std::vector<int> sparse_frame_indices(int dense_frames = kDenseFrames);
inline constexpr int kSparseFrames = 5;

enum class ShapeKind : int { circle = 0, square = 1, triangle = 2 };
inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 6;

// Saturated palette: red, green, blue, yellow, cyan, magenta.
extern const float kPalette[kNumColors][3];

// Continuous generative factors. Position is the object center in [0,1]^2
// (x right, y down), velocity is per dense frame, size is the circumradius
// as a fraction of the canvas width.
struct FactorSpec {
  ShapeKind shape = ShapeKind::circle;
  int color = 0;
  float px = 0.5f, py = 0.5f;
  float vx = 0.0f, vy = 0.0f;
  float size = 0.15f;
};

// The discrete view of a spec: what captions and the matching metric use.
// pos_q / vel_q quadrants: bit 1 = x in the high half / moving right,
// bit 0 = y in the high half / moving down.
struct DiscreteFactors {
  int shape = 0;
  int color = 0;
  int pos_q = 0;
  int vel_q = 0;

  bool operator==(const DiscreteFactors&) const = default;
};

DiscreteFactors discretize(const FactorSpec& spec);

// Draws a spec from the in-distribution region: sizes in [0.13, 0.22],
// velocity components with magnitude in [0.03, 0.12], starting positions
// clear of the walls, clear of the quadrant midlines, and placed so the
// object cannot bounce before the second sparse frame (the motion probe
// reads the first sparse displacement, which must still carry the initial
// velocity's signs).
FactorSpec sample_spec(Rng& rng);

// Object center at dense frame t (elastic bounces folded analytically).
void center_at(const FactorSpec& spec, int t, float* cx, float* cy);

// Anti-aliased rendering into float RGB in [0,1], row-major [H][W][3].
// Pure arithmetic (no libm), so output bytes depend only on the spec.
void render_frame(const FactorSpec& spec, int t, float* out);
void render_dense_clip(const FactorSpec& spec, float* out);  // [F][H][W][3]

// Extracts the sparse frames of a dense clip into [kSparseFrames][H][W][3].
void extract_sparse(const float* dense, float* sparse);

// ---- oracle probe ----

struct ProbeResult {
  DiscreteFactors factors;
  bool abstained = false;  // not enough foreground to read anything
  // Continuous readouts behind the quadrant decisions, for feature embeddings:
  // first-frame centroid and first inter-frame displacement, in [0,1] units.
  double cx = 0.0, cy = 0.0;
  double dx = 0.0, dy = 0.0;
};

// Reads the discrete factors back off rendered (or generated) sparse frames
// with fixed image processing: color from the mean foreground hue, position
// from the first frame's centroid, motion from the first sparse displacement,
// shape from angular harmonics of the mass distribution. Calibrates its shape
// references by rendering canonical shapes at construction. Pixels below a
// summed-channel brightness cutoff count as background, which keeps every
// readout stable under per-frame brightness shifts of up to +-0.05.
class OracleProbe {
public:
  OracleProbe();

  // frames: [n_frames][kH][kW][kC], n_frames >= 2.
  ProbeResult probe(const float* frames, int n_frames) const;

  // Fraction of the four factors recovered correctly; an abstention scores 0.
  static double factor_match(const ProbeResult& got, const DiscreteFactors& truth);

private:
  struct Signature {
    double re3, im3, re4, im4;
  };
  Signature shape_sig_[kNumShapes];
};

// ---- captions ----

// Fixed-length caption: [BOC, shape, color, position, motion, EOC].
inline constexpr int kCaptionLen = 6;
inline constexpr int kTokBoc = 0;
inline constexpr int kTokEoc = 1;
inline constexpr int kTokShapeBase = 2;                      // +3
inline constexpr int kTokColorBase = kTokShapeBase + 3;      // +6
inline constexpr int kTokPosBase = kTokColorBase + 6;        // +4
inline constexpr int kTokVelBase = kTokPosBase + 4;          // +4
inline constexpr int kVocab = kTokVelBase + 4;               // 19

std::array<int, kCaptionLen> encode_caption(const DiscreteFactors& f);
DiscreteFactors decode_caption(const int* tokens, int len);  // throws on malformed input

// ---- corpus files ----

// "DVTS" shards: a header (dims + clip count) followed by fixed-size records
// of spec + raw dense frames. Shards hold at most `shard_cap` clips so a
// corpus streams from disk instead of living in memory.
class CorpusWriter {
public:
  CorpusWriter(std::string prefix, int shard_cap = 500);
  ~CorpusWriter();
  CorpusWriter(const CorpusWriter&) = delete;
  CorpusWriter& operator=(const CorpusWriter&) = delete;

  void add(uint64_t seed, const FactorSpec& spec, const float* dense);
  void finish();  // flushes and seals the open shard; add() is invalid after

  int clips_written() const { return total_; }

private:
  void open_shard();
  void close_shard();
  std::string prefix_;
  int shard_cap_;
  int total_ = 0;
  int in_shard_ = 0;
  int shard_index_ = 0;
  void* file_ = nullptr;
};

struct ClipRecord {
  uint64_t seed = 0;
  FactorSpec spec;
  std::vector<float> dense;  // kClipFloats
};

class CorpusReader {
public:
  explicit CorpusReader(const std::string& prefix);
  ~CorpusReader();
  CorpusReader(const CorpusReader&) = delete;
  CorpusReader& operator=(const CorpusReader&) = delete;

  int count() const { return count_; }
  void read(int index, ClipRecord* out) const;

private:
  struct Shard {
    int fd = -1;
    int clips = 0;
  };
  std::vector<Shard> shards_;
  int count_ = 0;
};

}  // namespace divot::synth
