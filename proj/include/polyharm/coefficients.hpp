#pragma once

#include <functional>

#include "polyharm/field.hpp"

namespace polyharm {

using MatrixEval = std::function<std::array<std::array<Cplx, 3>, 3>(Vec3)>;
using VectorEval = std::function<CVec3(Vec3)>;
using ScalarEval = std::function<Cplx(Vec3)>;

// Perturbation (A, B, q) of (-Lap)^m, compactly supported in the interior
// ball.  The optional analytic evaluators, when present, agree with the
// sampled fields and let quadrature code evaluate off grid exactly.
struct CoefficientSet {
  int m = 2;
  SymTensorField A;
  VectorField B;
  ScalarField q;
  MatrixEval A_eval;  // may be empty
  VectorEval B_eval;
  ScalarEval q_eval;

  CoefficientSet() = default;
  CoefficientSet(int m_, const Grid& g) : m(m_), A(g), B(g), q(g) {
    if (m < 2) throw ConfigError("coefficients: half-order m must be >= 2");
  }

  const Grid& grid() const { return q.grid; }

  static CoefficientSet zero(int m, const Grid& g) { return CoefficientSet(m, g); }

  bool analytic() const { return bool(A_eval) && bool(B_eval) && bool(q_eval); }
};

// Largest coefficient magnitude on nodes outside the support ball; the
// support invariant demands exactly 0.
inline double support_violation(const CoefficientSet& cs, double radius = kSupportRadius) {
  const Grid& g = cs.grid();
  double worst = 0.0;
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 p = g.point(i, j, k);
        if (dot(p, p) <= radius * radius) continue;
        for (const auto& c : cs.A.comp) worst = std::max(worst, std::abs(c.at(i, j, k)));
        for (const auto& c : cs.B.comp) worst = std::max(worst, std::abs(c.at(i, j, k)));
        worst = std::max(worst, std::abs(cs.q.at(i, j, k)));
      }
  return worst;
}

// Largest pointwise deviation of A from a(x) I (a = mean diagonal).
inline double anisotropy(const SymTensorField& A) {
  const Grid& g = A.grid();
  double worst = 0.0;
  for (std::size_t t = 0; t < g.size(); ++t) {
    Cplx a = (A.comp[0].values[t] + A.comp[3].values[t] + A.comp[5].values[t]) / 3.0;
    worst = std::max({worst, std::abs(A.comp[0].values[t] - a), std::abs(A.comp[3].values[t] - a),
                      std::abs(A.comp[5].values[t] - a), std::abs(A.comp[1].values[t]),
                      std::abs(A.comp[2].values[t]), std::abs(A.comp[4].values[t])});
  }
  return worst;
}

// Full validation used by configuration-driven entry points.  The gauge
// demonstrator constructs an intentionally anisotropic m = 2 set and skips
// the isotropy clause (the very obstruction it exhibits).
inline void validate_coefficients(const CoefficientSet& cs, bool enforce_isotropy = true) {
  if (cs.m < 2) throw ConfigError("coefficients: half-order m must be >= 2");
  if (support_violation(cs) != 0.0)
    throw ConfigError("coefficients: fields must vanish outside the support ball");
  if (enforce_isotropy && cs.m == 2 && anisotropy(cs.A) > 0.0)
    throw ConfigError("coefficients: m = 2 requires isotropic A");
}

}  // namespace polyharm
