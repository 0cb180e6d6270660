#pragma once

#include <algorithm>
#include <map>

#include "polyharm/core.hpp"

namespace polyharm {

// Sparse complex trivariate polynomial.  Small by construction: amplitude
// algebra never needs degree above four.
struct Poly3 {
  std::map<Index3, Cplx> terms;

  static Poly3 constant(Cplx c) {
    Poly3 p;
    if (c != 0.0) p.terms[{0, 0, 0}] = c;
    return p;
  }
  // Linear form v.x.
  static Poly3 linear(const Vec3& v) {
    Poly3 p;
    for (int d = 0; d < 3; ++d)
      if (v[d] != 0.0) {
        Index3 e{0, 0, 0};
        e[d] = 1;
        p.terms[e] = v[d];
      }
    return p;
  }

  Cplx eval(const Vec3& x) const {
    std::vector<Cplx> parts;
    parts.reserve(terms.size());
    for (const auto& [e, c] : terms) {
      Cplx v = c;
      for (int d = 0; d < 3; ++d)
        for (int r = 0; r < e[d]; ++r) v *= x[d];
      parts.push_back(v);
    }
    return pairwise_sum(parts);
  }

  Poly3& operator+=(const Poly3& o) {
    for (const auto& [e, c] : o.terms) {
      auto it = terms.find(e);
      if (it == terms.end())
        terms[e] = c;
      else {
        it->second += c;
        if (it->second == 0.0) terms.erase(it);
      }
    }
    return *this;
  }
  friend Poly3 operator+(Poly3 a, const Poly3& b) { return a += b; }
  Poly3 operator*(Cplx s) const {
    Poly3 out;
    if (s == 0.0) return out;
    for (const auto& [e, c] : terms) out.terms[e] = c * s;
    return out;
  }
  Poly3 operator*(const Poly3& o) const {
    Poly3 out;
    for (const auto& [e1, c1] : terms)
      for (const auto& [e2, c2] : o.terms) {
        Index3 e{e1[0] + e2[0], e1[1] + e2[1], e1[2] + e2[2]};
        out.terms[e] += c1 * c2;
      }
    for (auto it = out.terms.begin(); it != out.terms.end();)
      it = (it->second == 0.0) ? out.terms.erase(it) : std::next(it);
    return out;
  }

  Poly3 deriv(int axis) const {
    Poly3 out;
    for (const auto& [e, c] : terms)
      if (e[axis] > 0) {
        Index3 d = e;
        d[axis] -= 1;
        out.terms[d] += c * double(e[axis]);
      }
    return out;
  }

  bool zero() const { return terms.empty(); }
};

// Amplitude expression P(x) e^{i b.x}: the closed class containing every CGO
// amplitude kind, stable under directional derivatives and the Laplacian.
struct AnalyticAmp {
  Poly3 p;
  Vec3 b{0.0, 0.0, 0.0};

  Cplx eval(const Vec3& x) const { return p.eval(x) * std::exp(Cplx(0.0, dot(b, x))); }

  AnalyticAmp d(int axis) const {
    AnalyticAmp out;
    out.b = b;
    out.p = p.deriv(axis) + p * Cplx(0.0, b[axis]);
    return out;
  }
  AnalyticAmp apply_zeta_grad(const CVec3& zeta) const {
    AnalyticAmp out;
    out.b = b;
    for (int axis = 0; axis < 3; ++axis) out.p += (p.deriv(axis) + p * Cplx(0.0, b[axis])) * zeta[axis];
    return out;
  }
  AnalyticAmp laplacian() const {
    AnalyticAmp out;
    out.b = b;
    for (int axis = 0; axis < 3; ++axis) out.p += d(axis).d(axis).p;
    return out;
  }
  AnalyticAmp operator*(Cplx s) const { return {p * s, b}; }
  AnalyticAmp& operator+=(const AnalyticAmp& o) {
    if (!(b == o.b) && !o.p.zero() && !p.zero())
      throw DataInconsistencyError("analytic amplitude: mixed oscillation vectors");
    if (p.zero()) b = o.b;
    p += o.p;
    return *this;
  }
  bool zero() const { return p.zero(); }
};

}  // namespace polyharm
