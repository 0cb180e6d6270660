#pragma once

#include "polyharm/core.hpp"

namespace polyharm {

// Uniform closed grid over [-half, half]^3: pts nodes per axis, both faces
// included, spacing 2*half/(pts-1).  pts is odd and >= 9 so the spectral
// transform length pts-1 is even and the dual frequency set is symmetric.
struct Grid {
  int pts = 0;
  double half = kBoxHalf;
  double spacing = 0.0;

  Grid() = default;
  explicit Grid(int pts_, double half_ = kBoxHalf) : pts(pts_), half(half_) {
    if (pts < 9 || pts % 2 == 0) throw ConfigError("grid: points per axis must be odd and >= 9");
    if (!(half > 0.0)) throw ConfigError("grid: box half-width must be positive");
    spacing = 2.0 * half / (pts - 1);
  }

  std::size_t size() const { return std::size_t(pts) * pts * pts; }
  std::size_t flat(int i, int j, int k) const { return (std::size_t(i) * pts + j) * pts + k; }
  Index3 unflat(std::size_t f) const {
    int k = int(f % pts);
    f /= pts;
    int j = int(f % pts);
    int i = int(f / pts);
    return {i, j, k};
  }
  double coord(int i) const { return -half + spacing * i; }
  Vec3 point(int i, int j, int k) const { return {coord(i), coord(j), coord(k)}; }
  Vec3 point(const Index3& ix) const { return point(ix[0], ix[1], ix[2]); }
  bool in_range(int i) const { return i >= 0 && i < pts; }
  bool on_boundary(int i, int j, int k) const {
    return i == 0 || j == 0 || k == 0 || i == pts - 1 || j == pts - 1 || k == pts - 1;
  }

  // Spectral side.  Transform length per axis (the duplicated endpoint is
  // folded away), dual frequencies xi = (pi/half) * k for k in [-modes/2, modes/2).
  int modes() const { return pts - 1; }
  double freq(int k) const { return kPi / half * k; }
  int freq_lo() const { return -modes() / 2; }
  int freq_hi() const { return modes() / 2; }  // exclusive
  // Largest |xi| per axis at which recovered spectra are trusted.
  double half_nyquist() const { return kPi / (2.0 * spacing); }

  bool operator==(const Grid& o) const { return pts == o.pts && half == o.half; }
};

// Trapezoid weight for a closed-grid node: 1/2 per axis on a face.
inline double trapezoid_weight(const Grid& g, int i, int j, int k) {
  double w = 1.0;
  if (i == 0 || i == g.pts - 1) w *= 0.5;
  if (j == 0 || j == g.pts - 1) w *= 0.5;
  if (k == 0 || k == g.pts - 1) w *= 0.5;
  return w;
}

// Unique boundary nodes in face-lex order x-, x+, y-, y+, z-, z+; inside a
// face the two in-face axes run in lexicographic order.  A node on an edge or
// corner is listed once, owned by the first face containing it.
struct BoundaryIndex {
  std::vector<Index3> nodes;
  std::vector<int> owner_face;            // 0..5 per node
  std::vector<std::ptrdiff_t> boundary_of_flat;  // grid-flat -> boundary idx, -1 if interior

  explicit BoundaryIndex(const Grid& g) {
    boundary_of_flat.assign(g.size(), -1);
    auto push = [&](int i, int j, int k, int face) {
      std::size_t f = g.flat(i, j, k);
      if (boundary_of_flat[f] >= 0) return;
      boundary_of_flat[f] = std::ptrdiff_t(nodes.size());
      nodes.push_back({i, j, k});
      owner_face.push_back(face);
    };
    int n = g.pts;
    for (int face = 0; face < 6; ++face) {
      int axis = face / 2;
      int slab = (face % 2 == 0) ? 0 : n - 1;
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
          Index3 ix;
          ix[axis] = slab;
          int pos = 0;
          for (int d = 0; d < 3; ++d)
            if (d != axis) ix[d] = (pos++ == 0) ? a : b;
          push(ix[0], ix[1], ix[2], face);
        }
    }
  }

  std::size_t count() const { return nodes.size(); }
};

// Outward unit normal of a face in face-lex numbering.
inline Vec3 face_normal(int face) {
  Vec3 nrm{0.0, 0.0, 0.0};
  nrm[face / 2] = (face % 2 == 0) ? -1.0 : 1.0;
  return nrm;
}

}  // namespace polyharm
