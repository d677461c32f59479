#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace swayflow {

inline constexpr double kPi = 3.14159265358979323846;

// Dimensions of a dense row-major tensor. A dimension of zero yields an
// empty tensor; negative dimensions are rejected at construction.
using Shape = std::vector<int64_t>;

// Library-wide exception: every precondition violation and malformed input
// surfaces as an Error with a descriptive message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

template <class... Parts>
std::string msg(const Parts&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}

}  // namespace detail

template <class... Parts>
[[noreturn]] void fail(const Parts&... parts) {
  throw Error(detail::msg(parts...));
}

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline void validate_shape(const Shape& shape) {
  for (int64_t d : shape)
    if (d < 0) fail("invalid shape ", shape_str(shape), ": negative dimension");
}

template <class S>
bool all_finite(const std::vector<S>& v) {
  for (S x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// Row-major strides for a shape.
inline std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * shape[i + 1];
  return st;
}

}  // namespace swayflow
