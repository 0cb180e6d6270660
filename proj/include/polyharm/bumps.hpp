#pragma once

#include <random>

#include "polyharm/coefficients.hpp"

namespace polyharm {

// Polynomial bump amp * (1 - |x-c|^2/R^2)^p on its ball, identically zero
// outside; C^{p-1} across the support sphere.  center and radius must keep
// the ball inside the coefficient support region.
struct BumpSpec {
  Vec3 center{0.0, 0.0, 0.0};
  double radius = 0.35;
  Cplx amp = 1.0;
  int power = 5;
};

namespace detail {
inline double int_pow(double base, int n) {
  double r = 1.0;
  for (; n > 0; n >>= 1, base *= base)
    if (n & 1) r *= base;
  return r;
}
}  // namespace detail

inline Cplx bump_value(const BumpSpec& b, const Vec3& x) {
  Vec3 u = x - b.center;
  double s = dot(u, u) / (b.radius * b.radius);
  if (s >= 1.0) return Cplx{};
  return b.amp * detail::int_pow(1.0 - s, b.power);
}

inline CVec3 bump_gradient(const BumpSpec& b, const Vec3& x) {
  Vec3 u = x - b.center;
  double r2 = b.radius * b.radius;
  double s = dot(u, u) / r2;
  if (s >= 1.0) return CVec3{};
  Cplx f = -b.amp * double(b.power) * detail::int_pow(1.0 - s, b.power - 1) * (2.0 / r2);
  return {f * u[0], f * u[1], f * u[2]};
}

inline std::array<std::array<Cplx, 3>, 3> bump_hessian(const BumpSpec& b, const Vec3& x) {
  std::array<std::array<Cplx, 3>, 3> out{};
  Vec3 u = x - b.center;
  double r2 = b.radius * b.radius;
  double s = dot(u, u) / r2;
  if (s >= 1.0) return out;
  double p = b.power;
  Cplx c2 = b.amp * p * (p - 1) * detail::int_pow(1.0 - s, b.power - 2) * (4.0 / (r2 * r2));
  Cplx c1 = -b.amp * p * detail::int_pow(1.0 - s, b.power - 1) * (2.0 / r2);
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k) out[j][k] = c2 * u[j] * u[k] + (j == k ? c1 : Cplx{});
  return out;
}

// Coefficient sets described by bump lists per slot; evaluators and sampled
// fields stay consistent by construction.
struct CoefficientSpec {
  int m = 2;
  std::array<std::vector<BumpSpec>, 6> A;  // xx, xy, xz, yy, yz, zz
  std::array<std::vector<BumpSpec>, 3> B;
  std::vector<BumpSpec> q;

  // isotropic part: added to all three diagonal slots
  std::vector<BumpSpec> A_iso;
};

inline CoefficientSet build_coefficients(const CoefficientSpec& spec, const Grid& g) {
  CoefficientSet cs(spec.m, g);
  auto sum = [](const std::vector<BumpSpec>& list, const Vec3& p) {
    Cplx v{};
    for (const auto& b : list) v += bump_value(b, p);
    return v;
  };
  auto spec_copy = spec;
  cs.A_eval = [spec_copy, sum](Vec3 p) {
    std::array<std::array<Cplx, 3>, 3> out{};
    static constexpr int slot[3][3] = {{0, 1, 2}, {1, 3, 4}, {2, 4, 5}};
    Cplx iso = sum(spec_copy.A_iso, p);
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) out[j][k] = sum(spec_copy.A[slot[j][k]], p) + (j == k ? iso : Cplx{});
    return out;
  };
  cs.B_eval = [spec_copy, sum](Vec3 p) {
    return CVec3{sum(spec_copy.B[0], p), sum(spec_copy.B[1], p), sum(spec_copy.B[2], p)};
  };
  cs.q_eval = [spec_copy, sum](Vec3 p) { return sum(spec_copy.q, p); };
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 p = g.point(i, j, k);
        auto Am = cs.A_eval(p);
        for (int a = 0; a < 3; ++a)
          for (int b = a; b < 3; ++b) cs.A.entry(a, b).at(i, j, k) = Am[a][b];
        CVec3 Bv = cs.B_eval(p);
        for (int d = 0; d < 3; ++d) cs.B.comp[d].at(i, j, k) = Bv[d];
        cs.q.at(i, j, k) = cs.q_eval(p);
      }
  return cs;
}

struct RandomCoefficientOptions {
  double amp_A = 1.0;
  double amp_B = 1.0;
  double amp_q = 1.0;
  bool complex_parts = false;
  bool isotropic = false;  // forced when m == 2
  int power = 5;
};

// Deterministic planted coefficients: a couple of off-center bumps per slot,
// balls kept inside the support region.
inline CoefficientSpec random_coefficient_spec(int m, std::uint64_t seed,
                                               const RandomCoefficientOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  bool iso = opt.isotropic || m == 2;
  auto draw = [&](double amp) {
    BumpSpec b;
    b.radius = 0.28 + 0.06 * std::abs(unif(rng));
    double cap = kSupportRadius - b.radius - 0.02;
    b.center = Vec3{cap * unif(rng), cap * unif(rng), cap * unif(rng)};
    double re = amp * (0.4 + 0.6 * std::abs(unif(rng))) * (unif(rng) > 0 ? 1.0 : -1.0);
    double im = opt.complex_parts ? 0.35 * amp * unif(rng) : 0.0;
    b.amp = Cplx(re, im);
    b.power = opt.power;
    return b;
  };
  CoefficientSpec spec;
  spec.m = m;
  if (iso) {
    spec.A_iso.push_back(draw(opt.amp_A));
    spec.A_iso.push_back(draw(0.5 * opt.amp_A));
  } else {
    for (auto& slot : spec.A) slot.push_back(draw(opt.amp_A));
  }
  for (auto& slot : spec.B) slot.push_back(draw(opt.amp_B));
  spec.q.push_back(draw(opt.amp_q));
  return spec;
}

inline CoefficientSet random_coefficients(const Grid& g, int m, std::uint64_t seed,
                                          const RandomCoefficientOptions& opt = {}) {
  return build_coefficients(random_coefficient_spec(m, seed, opt), g);
}

}  // namespace polyharm
