#pragma once

#include "polyharm/field.hpp"

namespace polyharm {

namespace detail {
inline Index3 offset_axis(int axis, int d) {
  Index3 o{0, 0, 0};
  o[axis] = d;
  return o;
}
}  // namespace detail

// First derivative along one axis: central second-order in the interior,
// one-sided second-order on the two faces.
inline ScalarField d_axis(const ScalarField& f, int axis) {
  const Grid& g = f.grid;
  ScalarField out(g);
  double inv2h = 1.0 / (2.0 * g.spacing);
  int n = g.pts;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        Index3 ix{i, j, k};
        int p = ix[axis];
        auto v = [&](int d) {
          Index3 t = ix;
          t[axis] = p + d;
          return f.at(t);
        };
        Cplx r;
        if (p == 0)
          r = (-3.0 * v(0) + 4.0 * v(1) - v(2)) * inv2h;
        else if (p == n - 1)
          r = (3.0 * v(0) - 4.0 * v(-1) + v(-2)) * inv2h;
        else
          r = (v(1) - v(-1)) * inv2h;
        out.at(ix) = r;
      }
  return out;
}

// Periodic variant: wraps across the duplicated face pair (period pts-1).
// This is the stencil whose dft symbol is exactly i*sin(xi*spacing)/spacing.
inline ScalarField d_axis_periodic(const ScalarField& f, int axis) {
  const Grid& g = f.grid;
  ScalarField out(g);
  double inv2h = 1.0 / (2.0 * g.spacing);
  int m = g.modes();
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Index3 ix{i, j, k};
        auto v = [&](int d) {
          Index3 t = ix;
          t[axis] = ((ix[axis] + d) % m + m) % m;
          return f.at(t);
        };
        out.at(ix) = (v(1) - v(-1)) * inv2h;
      }
  return out;
}

inline Cplx d_symbol(const Grid& g, int freq_index) {
  return Cplx(0.0, std::sin(g.freq(freq_index) * g.spacing) / g.spacing);
}

// Second derivative along one axis: 3-point interior, 4-point one-sided faces.
inline ScalarField second_axis(const ScalarField& f, int axis) {
  const Grid& g = f.grid;
  ScalarField out(g);
  double invh2 = 1.0 / (g.spacing * g.spacing);
  int n = g.pts;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        Index3 ix{i, j, k};
        int p = ix[axis];
        auto v = [&](int d) {
          Index3 t = ix;
          t[axis] = p + d;
          return f.at(t);
        };
        Cplx r;
        if (p == 0)
          r = (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)) * invh2;
        else if (p == n - 1)
          r = (2.0 * v(0) - 5.0 * v(-1) + 4.0 * v(-2) - v(-3)) * invh2;
        else
          r = (v(1) - 2.0 * v(0) + v(-1)) * invh2;
        out.at(ix) = r;
      }
  return out;
}

inline ScalarField laplacian(const ScalarField& f) {
  ScalarField out = second_axis(f, 0);
  out += second_axis(f, 1);
  out += second_axis(f, 2);
  return out;
}

// Mixed partial d^alpha.  Per axis the order is split into compact
// second-derivative stencils plus at most one first-derivative stencil, so
// orders 1 and 2 per axis keep second-order accuracy up to the faces.
// Different axes commute exactly.  half_order caps |alpha| at 2m.
inline ScalarField derivative(const ScalarField& f, const Index3& alpha, int half_order) {
  int total = alpha[0] + alpha[1] + alpha[2];
  if (alpha[0] < 0 || alpha[1] < 0 || alpha[2] < 0 || total > 2 * half_order)
    throw UnsupportedOrderError("derivative: multi-index order exceeds 2m");
  ScalarField out = f;
  for (int axis = 0; axis < 3; ++axis) {
    for (int rep = 0; rep < alpha[axis] / 2; ++rep) out = second_axis(out, axis);
    if (alpha[axis] % 2 == 1) out = d_axis(out, axis);
  }
  return out;
}

// D^alpha = i^{-|alpha|} d^alpha, the self-adjoint normalization.
inline ScalarField derivative_D(const ScalarField& f, const Index3& alpha, int half_order) {
  ScalarField out = derivative(f, alpha, half_order);
  int total = alpha[0] + alpha[1] + alpha[2];
  static constexpr Cplx kIPow[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  out *= kIPow[((-total) % 4 + 4) % 4];
  return out;
}

inline VectorField gradient(const ScalarField& f) {
  VectorField out(f.grid);
  for (int d = 0; d < 3; ++d) out.comp[d] = d_axis(f, d);
  return out;
}

inline ScalarField divergence(const VectorField& v) {
  ScalarField out = d_axis(v.comp[0], 0);
  out += d_axis(v.comp[1], 1);
  out += d_axis(v.comp[2], 2);
  return out;
}

}  // namespace polyharm
