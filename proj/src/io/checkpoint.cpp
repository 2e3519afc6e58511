#include "divot/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>

#include "divot/errors.hpp"
#include "divot/shape.hpp"

namespace divot::io {

namespace {

constexpr uint32_t kMagic = 0x4b435644;  // "DVCK" little-endian
constexpr uint32_t kVersion = 1;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

void put(std::FILE* f, const void* p, size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n) fail_runtime("checkpoint write failed: " + path);
}

void get(std::FILE* f, void* p, size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n) fail_runtime("checkpoint truncated or unreadable: " + path);
}

void put_u32(std::FILE* f, uint32_t v, const std::string& path) { put(f, &v, 4, path); }

uint32_t get_u32(std::FILE* f, const std::string& path) {
  uint32_t v = 0;
  get(f, &v, 4, path);
  return v;
}

void put_str(std::FILE* f, const std::string& s, const std::string& path) {
  put_u32(f, static_cast<uint32_t>(s.size()), path);
  put(f, s.data(), s.size(), path);
}

std::string get_str(std::FILE* f, const std::string& path) {
  const uint32_t n = get_u32(f, path);
  if (n > (1u << 20)) fail_runtime("checkpoint string field implausibly large: " + path);
  std::string s(n, '\0');
  get(f, s.data(), n, path);
  return s;
}

Meta read_meta(std::FILE* f, const std::string& path) {
  if (get_u32(f, path) != kMagic) fail_runtime("not a checkpoint file: " + path);
  const uint32_t ver = get_u32(f, path);
  if (ver != kVersion) fail_runtime("unsupported checkpoint version " + std::to_string(ver) + ": " + path);
  const uint32_t n = get_u32(f, path);
  Meta meta;
  for (uint32_t i = 0; i < n; ++i) {
    std::string k = get_str(f, path);
    meta[k] = get_str(f, path);
  }
  return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<ad::Param<float>*>& params, const Meta& meta) {
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) fail_runtime("cannot open checkpoint for writing: " + path);
  put_u32(f.get(), kMagic, path);
  put_u32(f.get(), kVersion, path);
  put_u32(f.get(), static_cast<uint32_t>(meta.size()), path);
  for (const auto& [k, v] : meta) {
    put_str(f.get(), k, path);
    put_str(f.get(), v, path);
  }
  put_u32(f.get(), static_cast<uint32_t>(params.size()), path);
  for (const auto* p : params) {
    put_str(f.get(), p->name, path);
    put_u32(f.get(), static_cast<uint32_t>(p->shape.size()), path);
    for (int d : p->shape) {
      const int32_t d32 = d;
      put(f.get(), &d32, 4, path);
    }
    put(f.get(), p->value.data(), p->value.size() * sizeof(float), path);
  }
  if (std::fflush(f.get()) != 0) fail_runtime("checkpoint flush failed: " + path);
}

Meta load_checkpoint(const std::string& path, const std::vector<ad::Param<float>*>& params) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) fail_runtime("cannot open checkpoint: " + path);
  Meta meta = read_meta(f.get(), path);
  const uint32_t n = get_u32(f.get(), path);
  if (n != params.size())
    fail_runtime("checkpoint has " + std::to_string(n) + " tensors, model wants " + std::to_string(params.size()) + ": " + path);
  // entries were written in registration order, so a single pass matches
  for (uint32_t i = 0; i < n; ++i) {
    const std::string name = get_str(f.get(), path);
    ad::Param<float>* p = params[i];
    if (name != p->name) fail_runtime("checkpoint tensor '" + name + "' does not match expected '" + p->name + "': " + path);
    const uint32_t rank = get_u32(f.get(), path);
    ad::Shape shape(rank);
    for (auto& d : shape) {
      int32_t d32 = 0;
      get(f.get(), &d32, 4, path);
      d = d32;
    }
    if (shape != p->shape)
      fail_runtime("checkpoint tensor '" + name + "' has shape " + ad::shape_str(shape) + ", model wants " + ad::shape_str(p->shape) +
                   ": " + path);
    get(f.get(), p->value.data(), p->value.size() * sizeof(float), path);
  }
  return meta;
}

Meta peek_checkpoint_meta(const std::string& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) fail_runtime("cannot open checkpoint: " + path);
  return read_meta(f.get(), path);
}

}  // namespace divot::io
