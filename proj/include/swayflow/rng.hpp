#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "swayflow/common.hpp"

namespace swayflow {

// Deterministic random source. Distributions are implemented here rather
// than with std::*_distribution so that sequences are identical across
// standard libraries and the full state can be serialized into checkpoints.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t raw() { return engine_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the paired draw is kept as a spare so
  // consecutive calls consume the engine at a predictable rate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer on [0, n).
  uint64_t below(uint64_t n) {
    if (n == 0) fail("Rng::below requires n > 0");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  // Uniform integer on [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    if (hi < lo) fail("Rng::range requires lo <= hi, got ", lo, "..", hi);
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Text round-trip of the complete state (engine + Box-Muller spare).
  std::string serialize() const {
    std::ostringstream os;
    os << engine_ << " " << (has_spare_ ? 1 : 0) << " " << std::hexfloat << spare_;
    return os.str();
  }

  static Rng deserialize(const std::string& text) {
    Rng r;
    std::istringstream is(text);
    int has = 0;
    std::string spare_hex;
    if (!(is >> r.engine_ >> has >> spare_hex)) fail("malformed Rng state string");
    r.has_spare_ = has != 0;
    r.spare_ = std::strtod(spare_hex.c_str(), nullptr);
    return r;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace swayflow
