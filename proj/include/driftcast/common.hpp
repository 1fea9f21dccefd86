#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace driftcast {

inline constexpr const char* kVersion = "0.1.0";

// Precondition / dimension-mismatch failures. These indicate caller bugs,
// not bad data.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed files, bad config keys, truncated checkpoints.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double c) const { return {x * c, y * c}; }
  bool operator==(const Vec2&) const = default;
};

inline double norm(Vec2 v) { return std::hypot(v.x, v.y); }
inline double dist(Vec2 a, Vec2 b) { return norm(a - b); }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * M_PI;
  a = std::fmod(a, two_pi);
  if (a <= -M_PI) a += two_pi;
  if (a > M_PI) a -= two_pi;
  return a;
}

// Shortest decimal that round-trips the exact double. Used everywhere a
// float touches a file, so reruns are byte-identical.
inline std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, end);
}

inline double parse_double(std::string_view s, bool& ok) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  ok = (ec == std::errc{} && ptr == s.data() + s.size());
  return v;
}

inline long long parse_int(std::string_view s, bool& ok) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  ok = (ec == std::errc{} && ptr == s.data() + s.size());
  return v;
}

}  // namespace driftcast
