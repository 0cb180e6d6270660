#pragma once

#include <algorithm>
#include <functional>

#include "polyharm/grid.hpp"

namespace polyharm {

struct ScalarField {
  Grid grid;
  std::vector<Cplx> values;  // row-major: x slowest, z fastest

  ScalarField() = default;
  explicit ScalarField(const Grid& g) : grid(g), values(g.size(), Cplx{}) {}

  Cplx& at(int i, int j, int k) { return values[grid.flat(i, j, k)]; }
  const Cplx& at(int i, int j, int k) const { return values[grid.flat(i, j, k)]; }
  Cplx& at(const Index3& ix) { return at(ix[0], ix[1], ix[2]); }
  const Cplx& at(const Index3& ix) const { return at(ix[0], ix[1], ix[2]); }

  template <class F>
  static ScalarField sample(const Grid& g, F&& f) {
    ScalarField out(g);
    for (int i = 0; i < g.pts; ++i)
      for (int j = 0; j < g.pts; ++j)
        for (int k = 0; k < g.pts; ++k) out.at(i, j, k) = Cplx(f(g.point(i, j, k)));
    return out;
  }

  ScalarField& operator+=(const ScalarField& o) {
    require_same_grid(o);
    for (std::size_t t = 0; t < values.size(); ++t) values[t] += o.values[t];
    return *this;
  }
  ScalarField& operator-=(const ScalarField& o) {
    require_same_grid(o);
    for (std::size_t t = 0; t < values.size(); ++t) values[t] -= o.values[t];
    return *this;
  }
  ScalarField& operator*=(Cplx s) {
    for (auto& v : values) v *= s;
    return *this;
  }
  friend ScalarField operator+(ScalarField a, const ScalarField& b) { return a += b; }
  friend ScalarField operator-(ScalarField a, const ScalarField& b) { return a -= b; }
  friend ScalarField operator*(Cplx s, ScalarField a) { return a *= s; }

  void require_same_grid(const ScalarField& o) const {
    if (!(grid == o.grid)) throw DataInconsistencyError("field: grid mismatch");
  }
};

// Trapezoid quadrature of f over the box.
inline Cplx integrate(const ScalarField& f) {
  const Grid& g = f.grid;
  std::vector<Cplx> terms(g.size());
  std::size_t t = 0;
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k, ++t) terms[t] = trapezoid_weight(g, i, j, k) * f.values[t];
  double cell = g.spacing * g.spacing * g.spacing;
  return cell * pairwise_sum(terms);
}

inline double l2_norm(const ScalarField& f) {
  const Grid& g = f.grid;
  std::vector<double> terms(g.size());
  std::size_t t = 0;
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k, ++t) terms[t] = trapezoid_weight(g, i, j, k) * std::norm(f.values[t]);
  double cell = g.spacing * g.spacing * g.spacing;
  return std::sqrt(cell * pairwise_sum(terms));
}

inline double sup_norm(const ScalarField& f) {
  double m = 0.0;
  for (const auto& v : f.values) m = std::max(m, std::abs(v));
  return m;
}

// Inner product <f, g> = integral of f * conj(g).
inline Cplx inner(const ScalarField& f, const ScalarField& g) {
  f.require_same_grid(g);
  const Grid& gr = f.grid;
  std::vector<Cplx> terms(gr.size());
  std::size_t t = 0;
  for (int i = 0; i < gr.pts; ++i)
    for (int j = 0; j < gr.pts; ++j)
      for (int k = 0; k < gr.pts; ++k, ++t)
        terms[t] = trapezoid_weight(gr, i, j, k) * f.values[t] * std::conj(g.values[t]);
  double cell = gr.spacing * gr.spacing * gr.spacing;
  return cell * pairwise_sum(terms);
}

struct VectorField {
  std::array<ScalarField, 3> comp;

  VectorField() = default;
  explicit VectorField(const Grid& g) : comp{ScalarField(g), ScalarField(g), ScalarField(g)} {}
  const Grid& grid() const { return comp[0].grid; }

  template <class F>
  static VectorField sample(const Grid& g, F&& f) {
    VectorField out(g);
    for (int i = 0; i < g.pts; ++i)
      for (int j = 0; j < g.pts; ++j)
        for (int k = 0; k < g.pts; ++k) {
          auto v = f(g.point(i, j, k));
          for (int d = 0; d < 3; ++d) out.comp[d].at(i, j, k) = v[d];
        }
    return out;
  }
};

inline double sup_norm(const VectorField& f) {
  return std::max({sup_norm(f.comp[0]), sup_norm(f.comp[1]), sup_norm(f.comp[2])});
}
inline double l2_norm(const VectorField& f) {
  double s = 0.0;
  for (int d = 0; d < 3; ++d) {
    double c = l2_norm(f.comp[d]);
    s += c * c;
  }
  return std::sqrt(s);
}

// Symmetric 2-tensor with one storage slot per unordered pair, so reading
// (j,k) and (k,j) is bit-identical by construction.
struct SymTensorField {
  static constexpr int kPairs = 6;
  std::array<ScalarField, kPairs> comp;  // xx, xy, xz, yy, yz, zz

  SymTensorField() = default;
  explicit SymTensorField(const Grid& g)
      : comp{ScalarField(g), ScalarField(g), ScalarField(g), ScalarField(g), ScalarField(g), ScalarField(g)} {}
  const Grid& grid() const { return comp[0].grid; }

  static int pair_index(int j, int k) {
    if (j > k) std::swap(j, k);
    static constexpr int table[3][3] = {{0, 1, 2}, {-1, 3, 4}, {-1, -1, 5}};
    return table[j][k];
  }
  ScalarField& entry(int j, int k) { return comp[pair_index(j, k)]; }
  const ScalarField& entry(int j, int k) const { return comp[pair_index(j, k)]; }

  template <class F>
  static SymTensorField sample(const Grid& g, F&& f) {
    // f returns a 3x3 symmetric matrix as array of rows; only j <= k is read.
    SymTensorField out(g);
    for (int i = 0; i < g.pts; ++i)
      for (int j = 0; j < g.pts; ++j)
        for (int k = 0; k < g.pts; ++k) {
          auto m = f(g.point(i, j, k));
          for (int a = 0; a < 3; ++a)
            for (int b = a; b < 3; ++b) out.entry(a, b).at(i, j, k) = m[a][b];
        }
    return out;
  }
};

inline double sup_norm(const SymTensorField& f) {
  double m = 0.0;
  for (const auto& c : f.comp) m = std::max(m, sup_norm(c));
  return m;
}
inline double l2_norm(const SymTensorField& f) {
  // Frobenius: off-diagonal pairs counted twice.
  double s = 0.0;
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k) {
      double c = l2_norm(f.entry(j, k));
      s += c * c;
    }
  return std::sqrt(s);
}

}  // namespace polyharm
