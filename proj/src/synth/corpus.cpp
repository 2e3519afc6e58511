#include <fcntl.h>
#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstring>

#include "divot/errors.hpp"
#include "divot/synth.hpp"

// DVTS shard layout (all little-endian):
//   u32 magic 'DVTS', u32 version, u32 clip_count,
//   u32 dense_frames, u32 height, u32 width, u32 channels,
// then clip_count fixed-size records:
//   u64 seed, i32 shape, i32 color, f32 px py vx vy size,
//   f32 dense[frames*h*w*c]

namespace divot::synth {

namespace {

constexpr uint32_t kMagic = 0x53545644;  // "DVTS"
constexpr uint32_t kVersion = 1;
constexpr int64_t kHeaderBytes = 7 * 4;
constexpr int64_t kRecordBytes = 8 + 2 * 4 + 5 * 4 + int64_t(kClipFloats) * 4;

std::string shard_path(const std::string& prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_%04d.dvts", index);
  return prefix + buf;
}

}  // namespace

CorpusWriter::CorpusWriter(std::string prefix, int shard_cap) : prefix_(std::move(prefix)), shard_cap_(shard_cap) {
  if (shard_cap_ <= 0) fail_runtime("corpus: shard capacity must be positive");
}

CorpusWriter::~CorpusWriter() {
  if (file_) finish();
}

void CorpusWriter::open_shard() {
  const std::string path = shard_path(prefix_, shard_index_);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail_runtime("corpus: cannot create shard: " + path);
  const uint32_t header[7] = {kMagic, kVersion, 0, kDenseFrames, kH, kW, kC};
  if (std::fwrite(header, 4, 7, f) != 7) {
    std::fclose(f);
    fail_runtime("corpus: header write failed: " + path);
  }
  file_ = f;
  in_shard_ = 0;
}

void CorpusWriter::close_shard() {
  std::FILE* f = static_cast<std::FILE*>(file_);
  // back-patch the clip count
  const uint32_t n = static_cast<uint32_t>(in_shard_);
  if (std::fseek(f, 8, SEEK_SET) != 0 || std::fwrite(&n, 4, 1, f) != 1 || std::fflush(f) != 0) {
    std::fclose(f);
    file_ = nullptr;
    fail_runtime("corpus: shard finalize failed: " + shard_path(prefix_, shard_index_));
  }
  std::fclose(f);
  file_ = nullptr;
  ++shard_index_;
}

void CorpusWriter::add(uint64_t seed, const FactorSpec& spec, const float* dense) {
  if (!file_) open_shard();
  std::FILE* f = static_cast<std::FILE*>(file_);
  const int32_t shape = static_cast<int32_t>(spec.shape);
  const int32_t color = spec.color;
  const float fields[5] = {spec.px, spec.py, spec.vx, spec.vy, spec.size};
  bool ok = std::fwrite(&seed, 8, 1, f) == 1;
  ok = ok && std::fwrite(&shape, 4, 1, f) == 1;
  ok = ok && std::fwrite(&color, 4, 1, f) == 1;
  ok = ok && std::fwrite(fields, 4, 5, f) == 5;
  ok = ok && std::fwrite(dense, 4, kClipFloats, f) == static_cast<size_t>(kClipFloats);
  if (!ok) fail_runtime("corpus: clip write failed: " + shard_path(prefix_, shard_index_));
  ++in_shard_;
  ++total_;
  if (in_shard_ >= shard_cap_) close_shard();
}

void CorpusWriter::finish() {
  if (file_) close_shard();
}

CorpusReader::CorpusReader(const std::string& prefix) {
  for (int index = 0;; ++index) {
    const std::string path = shard_path(prefix, index);
    const int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) {
      if (index == 0) fail_runtime("corpus: no shards found at prefix: " + prefix);
      break;
    }
    uint32_t header[7];
    if (::pread(fd, header, sizeof(header), 0) != static_cast<ssize_t>(sizeof(header))) {
      ::close(fd);
      fail_runtime("corpus: unreadable shard header: " + path);
    }
    if (header[0] != kMagic) {
      ::close(fd);
      fail_runtime("corpus: not a corpus shard: " + path);
    }
    if (header[1] != kVersion) {
      ::close(fd);
      fail_runtime("corpus: unsupported shard version: " + path);
    }
    if (header[3] != kDenseFrames || header[4] != kH || header[5] != kW || header[6] != kC) {
      ::close(fd);
      fail_runtime("corpus: shard dimensions do not match this build: " + path);
    }
    shards_.push_back({fd, static_cast<int>(header[2])});
    count_ += static_cast<int>(header[2]);
  }
}

CorpusReader::~CorpusReader() {
  for (auto& s : shards_)
    if (s.fd >= 0) ::close(s.fd);
}

void CorpusReader::read(int index, ClipRecord* out) const {
  if (index < 0 || index >= count_) fail_runtime("corpus: clip index " + std::to_string(index) + " out of range");
  int local = index;
  size_t shard = 0;
  while (local >= shards_[shard].clips) {
    local -= shards_[shard].clips;
    ++shard;
  }
  const int64_t off = kHeaderBytes + static_cast<int64_t>(local) * kRecordBytes;
  unsigned char head[8 + 2 * 4 + 5 * 4];
  if (::pread(shards_[shard].fd, head, sizeof(head), off) != static_cast<ssize_t>(sizeof(head)))
    fail_runtime("corpus: clip header read failed");
  std::memcpy(&out->seed, head, 8);
  int32_t shape32 = 0, color32 = 0;
  std::memcpy(&shape32, head + 8, 4);
  std::memcpy(&color32, head + 12, 4);
  float fields[5];
  std::memcpy(fields, head + 16, 20);
  out->spec.shape = static_cast<ShapeKind>(shape32);
  out->spec.color = color32;
  out->spec.px = fields[0];
  out->spec.py = fields[1];
  out->spec.vx = fields[2];
  out->spec.vy = fields[3];
  out->spec.size = fields[4];
  out->dense.resize(kClipFloats);
  const int64_t bytes = static_cast<int64_t>(kClipFloats) * 4;
  if (::pread(shards_[shard].fd, out->dense.data(), bytes, off + sizeof(head)) != bytes)
    fail_runtime("corpus: clip payload read failed");
}

}  // namespace divot::synth
