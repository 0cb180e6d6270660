#pragma once

#include <optional>

#include "polyharm/derivative.hpp"
#include "polyharm/field.hpp"

namespace polyharm {

// Orthonormal pair (omega, omega_tilde) carrying the linear weight phi = omega.x,
// its conjugate psi = omega_tilde.x, and the null direction zeta = omega + i*omega_tilde.
struct Frame {
  Vec3 omega{};
  Vec3 omega_tilde{};
  std::optional<Vec3> xi;

  Frame(const Vec3& w, const Vec3& wt, std::optional<Vec3> xi_ = std::nullopt)
      : omega(w), omega_tilde(wt), xi(xi_) {
    if (std::abs(norm(omega) - 1.0) > 1e-14 || std::abs(norm(omega_tilde) - 1.0) > 1e-14)
      throw ConfigError("frame: omega and omega_tilde must be unit vectors");
    if (std::abs(dot(omega, omega_tilde)) > 1e-14)
      throw ConfigError("frame: omega and omega_tilde must be orthogonal");
    if (xi) {
      double s = norm(*xi);
      if (s == 0.0) throw ConfigError("frame: xi must be nonzero when present");
      if (std::abs(dot(*xi, omega)) > 1e-14 * s || std::abs(dot(*xi, omega_tilde)) > 1e-14 * s)
        throw ConfigError("frame: xi must be orthogonal to omega and omega_tilde");
    }
  }

  CVec3 zeta() const {
    return {Cplx(omega[0], omega_tilde[0]), Cplx(omega[1], omega_tilde[1]), Cplx(omega[2], omega_tilde[2])};
  }
};

// phi = omega.x and psi = omega_tilde.x sampled on the grid.
inline std::pair<ScalarField, ScalarField> weights(const Frame& fr, const Grid& g) {
  auto phi = ScalarField::sample(g, [&](Vec3 p) { return dot(fr.omega, p); });
  auto psi = ScalarField::sample(g, [&](Vec3 p) { return dot(fr.omega_tilde, p); });
  return {phi, psi};
}

struct XiBasis {
  Vec3 xi{};
  std::array<Vec3, 3> mu{};  // mu[2] = xi/|xi|
};

namespace detail {
// Scale xi by the power of two that brings its largest component into [1, 2).
// Exactly representable scalings (c = 2^k) then leave the canonical vector,
// and hence the whole basis, bitwise unchanged.
inline Vec3 canonical_direction(const Vec3& xi) {
  double m = std::max({std::abs(xi[0]), std::abs(xi[1]), std::abs(xi[2])});
  if (m == 0.0) throw ConfigError("basis_for_xi: xi must be nonzero");
  int e = 0;
  std::frexp(m, &e);
  double s = std::ldexp(1.0, 1 - e);
  return {xi[0] * s, xi[1] * s, xi[2] * s};
}
}  // namespace detail

// Deterministic xi-adapted orthonormal basis: mu3 = xi/|xi|, mu1 from
// Gram-Schmidt of the canonical axis least aligned with mu3 (smallest index on
// ties), mu2 = mu3 x mu1.
inline XiBasis basis_for_xi(const Vec3& xi) {
  Vec3 u = detail::canonical_direction(xi);
  Vec3 mu3 = normalized(u);
  int best = 0;
  double best_align = std::abs(mu3[0]);
  for (int k = 1; k < 3; ++k) {
    double a = std::abs(mu3[k]);
    if (a < best_align) {
      best_align = a;
      best = k;
    }
  }
  Vec3 ek{0.0, 0.0, 0.0};
  ek[best] = 1.0;
  Vec3 mu1 = normalized(ek - dot(ek, mu3) * mu3);
  Vec3 mu2 = cross(mu3, mu1);
  return XiBasis{xi, {mu1, mu2, mu3}};
}

// The four CGO frames attached to xi: ordered pairs (mu_p, +-mu_q), p != q <= 2.
inline std::vector<Frame> frames_for_xi(const Vec3& xi) {
  XiBasis b = basis_for_xi(xi);
  std::vector<Frame> out;
  out.emplace_back(b.mu[0], b.mu[1], xi);
  out.emplace_back(b.mu[0], -1.0 * b.mu[1], xi);
  out.emplace_back(b.mu[1], b.mu[0], xi);
  out.emplace_back(b.mu[1], -1.0 * b.mu[0], xi);
  return out;
}

}  // namespace polyharm
