#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace polyharm {

using Real = double;
using Cplx = std::complex<double>;
using Vec3 = std::array<double, 3>;
using CVec3 = std::array<Cplx, 3>;
using Index3 = std::array<int, 3>;

inline constexpr double kPi = std::numbers::pi;

// Computational domain: cube [-kBoxHalf, kBoxHalf]^3.  Coefficients live in the
// interior ball of radius kSupportRadius so every boundary-layer argument sees
// an unperturbed operator near the faces.
inline constexpr double kBoxHalf = 1.0;
inline constexpr double kSupportRadius = 0.5;

// Error taxonomy.  The CLI maps these onto its exit codes.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataInconsistencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnsupportedOrderError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(const Vec3& a) {
  double s = norm(a);
  if (s == 0.0) throw ConfigError("normalized: zero vector");
  return (1.0 / s) * a;
}

inline Cplx dot(const CVec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Cplx dot(const CVec3& a, const CVec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

// Fixed binary-tree summation: the reduction order depends only on the element
// count, never on threading or chunking, so every norm and integral is
// bit-reproducible.
template <class T>
inline T pairwise_sum(const T* p, std::size_t n) {
  if (n == 0) return T{};
  if (n <= 16) {
    T s = p[0];
    for (std::size_t i = 1; i < n; ++i) s += p[i];
    return s;
  }
  std::size_t half = n / 2;
  return pairwise_sum(p, half) + pairwise_sum(p + half, n - half);
}

template <class T>
inline T pairwise_sum(const std::vector<T>& v) {
  return pairwise_sum(v.data(), v.size());
}

// Work-sharing helper.  Results must not depend on the split: callers give
// each index an independent slot, so any thread count yields identical bits.
inline int& worker_threads() {
  static int n = 1;
  return n;
}

template <class F>
inline void parallel_for(std::size_t count, F&& body) {
  int threads = worker_threads();
  if (threads <= 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<std::size_t> next{0};
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        body(i);
      }
    });
  for (auto& th : pool) th.join();
}

}  // namespace polyharm
