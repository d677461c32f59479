#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "swayflow/common.hpp"
#include "swayflow/tensor.hpp"

namespace swayflow {
namespace detail {

// Explicit little-endian encoding so dumps are portable across hosts.
inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

inline void put_f64(std::string& buf, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(buf, bits);
}

// Cursor over an in-memory file image; every read checks remaining length.
struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  std::string what;  // context for error messages

  void need(std::size_t n) const {
    if (pos + n > buf.size()) fail(what, ": truncated file (needed ", n, " bytes at offset ", pos, ")");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  bool done() const { return pos == buf.size(); }
};

inline std::string slurp(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(what, ": cannot open ", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spill(const std::string& path, const std::string& buf, const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(what, ": cannot write ", path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) fail(what, ": write to ", path, " failed");
}

}  // namespace detail

// Feature-dump format: u32 rank, u32 per dimension, then float32 payload,
// all little endian. Trailing bytes or a short payload are rejected.
inline void write_f32_file(const std::string& path, const Shape& shape,
                           const std::vector<float>& data) {
  validate_shape(shape);
  if (static_cast<int64_t>(data.size()) != numel(shape))
    fail("write_f32_file: ", data.size(), " values do not match shape ", shape_str(shape));
  std::string buf;
  detail::put_u32(buf, static_cast<uint32_t>(shape.size()));
  for (int64_t d : shape) detail::put_u32(buf, static_cast<uint32_t>(d));
  for (float v : data) detail::put_f32(buf, v);
  detail::spill(path, buf, "write_f32_file");
}

template <class S>
void write_f32_file(const std::string& path, const Tensor<S>& t) {
  std::vector<float> data(t.data().begin(), t.data().end());
  write_f32_file(path, t.shape(), data);
}

struct F32File {
  Shape shape;
  std::vector<float> data;
};

inline F32File read_f32_file(const std::string& path) {
  const std::string buf = detail::slurp(path, "read_f32_file");
  detail::ByteReader r{buf, 0, "read_f32_file(" + path + ")"};
  const uint32_t rank = r.u32();
  if (rank > 8) fail("read_f32_file(", path, "): implausible rank ", rank);
  F32File f;
  for (uint32_t i = 0; i < rank; ++i) f.shape.push_back(static_cast<int64_t>(r.u32()));
  const int64_t n = numel(f.shape);
  f.data.reserve(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) f.data.push_back(r.f32());
  if (!r.done())
    fail("read_f32_file(", path, "): ", buf.size() - r.pos, " trailing bytes after payload");
  return f;
}

template <class S = float>
Tensor<S> read_f32_tensor(const std::string& path) {
  F32File f = read_f32_file(path);
  std::vector<S> v(f.data.begin(), f.data.end());
  return Tensor<S>(f.shape, std::move(v));
}

}  // namespace swayflow
