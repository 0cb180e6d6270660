#include <catch2/catch_amalgamated.hpp>

#include "polyharm/bumps.hpp"
#include "polyharm/tensor.hpp"

using namespace polyharm;

namespace {

double rel_l2_diff(const ScalarField& a, const ScalarField& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < a.values.size(); ++t) {
    num += std::norm(a.values[t] - b.values[t]);
    den += std::norm(b.values[t]);
  }
  return std::sqrt(num / den);
}

ScalarField single_mode(const Grid& g, const Vec3& xi) {
  return ScalarField::sample(g, [&](const Vec3& x) { return std::exp(Cplx(0.0, dot(x, xi))); });
}

// Three offset compactly supported bumps, zero well before the box faces.
VectorField bump_vector(const Grid& g, double scale, int power) {
  BumpSpec b1{{0.1, 0.0, -0.05}, 0.35 * scale, {1.0, 0.0}, power};
  BumpSpec b2{{-0.1, 0.1, 0.0}, 0.3 * scale, {0.8, 0.0}, power};
  BumpSpec b3{{0.0, -0.1, 0.1}, 0.32 * scale, {-0.6, 0.0}, power};
  VectorField v(g);
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 x = g.point(i, j, k);
        v.comp[0].at(i, j, k) = bump_value(b1, x);
        v.comp[1].at(i, j, k) = bump_value(b2, x);
        v.comp[2].at(i, j, k) = bump_value(b3, x);
      }
  return v;
}

ScalarField gaussian(const Grid& g, double sigma) {
  return ScalarField::sample(g, [=](const Vec3& x) { return std::exp(-dot(x, x) / (2.0 * sigma * sigma)); });
}

ScalarField mean_free(const ScalarField& f) {
  const Grid& g = f.grid;
  double box = 2.0 * g.half;
  Cplx mean = integrate(f) / Cplx(box * box * box);
  ScalarField out = f;
  for (auto& v : out.values) v -= mean;
  return out;
}

ScalarField spectral_derivative2(const ScalarField& f, int a, int b) {
  FrequencyTable tab = dft(f);
  const Grid& g = f.grid;
  for (int kx = g.freq_lo(); kx < g.freq_hi(); ++kx)
    for (int ky = g.freq_lo(); ky < g.freq_hi(); ++ky)
      for (int kz = g.freq_lo(); kz < g.freq_hi(); ++kz) {
        Vec3 xi = tab.xi(kx, ky, kz);
        tab.at(kx, ky, kz) *= Cplx(0.0, xi[a]) * Cplx(0.0, xi[b]);
      }
  return idft(tab);
}

}  // namespace

TEST_CASE("symmetrized derivative of constant and linear fields") {
  Grid g(17);
  VectorField c = VectorField::sample(g, [](const Vec3&) { return Vec3{0.7, -0.3, 1.1}; });
  CHECK(sup_norm(d_s(c)) <= 1e-13);

  VectorField id = VectorField::sample(g, [](const Vec3& x) { return x; });
  SymTensorField dsi = d_s(id);
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      ScalarField want = ScalarField::sample(g, [&](const Vec3&) { return (j == k) ? 1.0 : 0.0; });
      ScalarField diff = dsi.entry(j, k);
      diff -= want;
      CHECK(sup_norm(diff) <= 1e-12);
    }

  VectorField swap = VectorField::sample(g, [](const Vec3& x) { return Vec3{x[1], x[0], 0.0}; });
  SymTensorField dss = d_s(swap);
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      double want = (j == 0 && k == 1) ? 1.0 : 0.0;
      ScalarField diff = dss.entry(j, k);
      for (auto& v : diff.values) v -= want;
      CHECK(sup_norm(diff) <= 1e-12);
    }
}

TEST_CASE("tensor divergence matches the split-operator identity") {
  Grid g(17);
  SymTensorField c = SymTensorField::sample(g, [](const Vec3&) {
    return std::array<std::array<double, 3>, 3>{{{1.0, 0.2, -0.4}, {0.2, -0.7, 0.9}, {-0.4, 0.9, 0.5}}};
  });
  CHECK(sup_norm(div_tensor(c)) <= 1e-12);

  // div(d_s V) = (lap V + grad div V) / 2 with both sides built from the same
  // first-derivative stencil; axes commute, so agreement is at roundoff.
  VectorField v = bump_vector(g, 1.0, 5);
  VectorField lhs = div_tensor(d_s(v));
  ScalarField divv(g);
  for (int k = 0; k < 3; ++k) divv += d_axis(v.comp[k], k);
  double scale = sup_norm(lhs);
  REQUIRE(scale > 1.0);
  for (int j = 0; j < 3; ++j) {
    ScalarField direct(g);
    for (int k = 0; k < 3; ++k) direct += d_axis(d_axis(v.comp[j], k), k);
    direct += d_axis(divv, j);
    direct *= 0.5;
    direct -= lhs.comp[j];
    CHECK(sup_norm(direct) <= 1e-10 * scale);
  }
}

TEST_CASE("saint venant annihilates affine tensors") {
  Grid g(17);
  SymTensorField aff = SymTensorField::sample(g, [](const Vec3& x) {
    std::array<std::array<double, 3>, 3> m{};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) m[a][b] = 0.3 * x[0] - 0.2 * x[1] + 0.15 * x[2] + 0.1 * (a + 1) * (b + 1);
    return m;
  });
  CHECK(sup_norm(saint_venant(aff)) <= 1e-10);
}

TEST_CASE("saint venant of symmetrized derivatives converges to zero under refinement") {
  // Kernel property: W(d_s V) = 0 in exact calculus, so the discrete value is
  // pure truncation and must shrink at second order when the step halves.
  // Frozen magnitudes for the reference bumps at both resolutions.
  auto wide = [](const Grid& g) {
    BumpSpec b1{{0.05, 0.0, -0.03}, 0.7, {1.0, 0.0}, 7};
    BumpSpec b2{{-0.04, 0.05, 0.0}, 0.68, {0.8, 0.0}, 7};
    BumpSpec b3{{0.0, -0.05, 0.04}, 0.72, {-0.6, 0.0}, 7};
    VectorField v(g);
    for (int i = 0; i < g.pts; ++i)
      for (int j = 0; j < g.pts; ++j)
        for (int k = 0; k < g.pts; ++k) {
          Vec3 x = g.point(i, j, k);
          v.comp[0].at(i, j, k) = bump_value(b1, x);
          v.comp[1].at(i, j, k) = bump_value(b2, x);
          v.comp[2].at(i, j, k) = bump_value(b3, x);
        }
    return v;
  };
  Grid coarse(33), fine(65);
  double w_coarse = sup_norm(saint_venant(d_s(wide(coarse))));
  double w_fine = sup_norm(saint_venant(d_s(wide(fine))));
  CHECK(w_coarse <= 9.5);
  CHECK(w_fine <= 2.5);
  CHECK(w_coarse / w_fine >= 3.0);
}

TEST_CASE("saint venant detects a gauge-shaped tensor") {
  Grid g(17);
  BumpSpec phi{{0.05, -0.05, 0.1}, 0.4, {0.6, 0.0}, 5};
  SymTensorField gauge(g);
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 x = g.point(i, j, k);
        auto h = bump_hessian(phi, x);
        auto gr = bump_gradient(phi, x);
        for (int a = 0; a < 3; ++a)
          for (int b = a; b < 3; ++b) gauge.entry(a, b).at(i, j, k) = h[a][b] + gr[a] * gr[b];
      }
  Rank4Field w = saint_venant(gauge);
  CHECK(sup_norm(w) >= 1e-3);

  // block symmetry holds bitwise, not just to roundoff
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c)
        for (int d = 0; d < 3; ++d) {
          const auto& lhs = w.at(a, b, c, d).values;
          const auto& rhs = w.at(c, d, a, b).values;
          bool same = true;
          for (std::size_t t = 0; t < lhs.size(); ++t)
            if (!(lhs[t] == rhs[t])) same = false;
          CHECK(same);
        }
}

TEST_CASE("riesz transform multiplier on a single mode") {
  Grid g(17);
  Vec3 xi0{g.freq(2), g.freq(-1), g.freq(3)};
  ScalarField f = single_mode(g, xi0);
  double len = norm(xi0);
  for (int j = 0; j < 3; ++j) {
    ScalarField r = riesz(j, f);
    ScalarField want = f;
    want *= Cplx(0.0, -1.0) * (xi0[j] / len);
    r -= want;
    CHECK(sup_norm(r) <= 1e-10);
  }
  CHECK_THROWS_AS(riesz(3, f), ConfigError);
}

TEST_CASE("riesz transforms square-sum to minus the mean-free part") {
  Grid g(17);
  ScalarField f = random_band_limited_field(g, 5, 4);
  for (auto& v : f.values) v += Cplx(0.3, -0.1);  // nonzero mean exercises the dropped mode

  ScalarField acc(g);
  for (int j = 0; j < 3; ++j) acc += riesz(j, riesz(j, f));
  ScalarField want = mean_free(f);
  want *= -1.0;
  ScalarField diff = acc;
  diff -= want;
  CHECK(sup_norm(diff) <= 1e-10 * sup_norm(want));

  double parts = 0.0;
  for (int j = 0; j < 3; ++j) {
    double nj = l2_norm(riesz(j, f));
    parts += nj * nj;
    CHECK(nj <= l2_norm(f) * (1.0 + 1e-12));
  }
  double base = l2_norm(mean_free(f));
  CHECK(std::abs(parts - base * base) <= 1e-9 * base * base);
}

TEST_CASE("riesz transform has odd parity along its axis") {
  Grid g(17);
  int n = g.pts;
  // real data, even in each coordinate separately, without Nyquist content:
  // the folded frequency set carries the -M/2 line without a +M/2 partner, so
  // anything landing there (e.g. box-truncation tails of a sampled gaussian)
  // has no cancelling mirror mode and would contaminate the measurement with
  // a grid artifact
  ScalarField raw = random_band_limited_field(g, 5, 4);
  ScalarField f(g);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        Cplx acc{};
        for (int s = 0; s < 8; ++s)
          acc += raw.at((s & 1) ? n - 1 - i : i, (s & 2) ? n - 1 - j : j, (s & 4) ? n - 1 - k : k);
        f.at(i, j, k) = Cplx(acc.real() / 8.0);
      }

  for (int axis = 0; axis < 3; ++axis) {
    ScalarField r = riesz(axis, f);
    double worst = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          Index3 ix{i, j, k};
          Index3 mir = ix;
          mir[axis] = n - 1 - mir[axis];
          worst = std::max(worst, std::abs(r.at(ix) + r.at(mir)));
        }
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("projector reconstruction on trivial and single-mode data") {
  Grid g(17);
  SymTensorField zero = projector_reconstruct(ScalarField(g));
  CHECK(sup_norm(zero) == 0.0);

  // axis-aligned mode: the stencil symbol is parallel to xi, so the projector
  // is exactly diag(1,1,0)
  ScalarField f = single_mode(g, {0.0, 0.0, g.freq(3)});
  SymTensorField p = projector_reconstruct(f);
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      ScalarField want = f;
      want *= (j == k && j != 2) ? 1.0 : 0.0;
      ScalarField diff = p.entry(j, k);
      diff -= want;
      CHECK(sup_norm(diff) <= 1e-10);
    }
}

TEST_CASE("projector reconstruction is divergence free with exact trace") {
  Grid g(17);
  for (ScalarField d : {gaussian(g, 0.2), random_band_limited_field(g, 11, 5)}) {
    SymTensorField f = projector_reconstruct(d);
    double fn = l2_norm(f);
    REQUIRE(fn > 0.0);
    // solenoidal on the period cell: the multiplier cancels the wraparound
    // stencil mode by mode
    CHECK(l2_norm(div_tensor(f, true)) <= 1e-12 * fn);

    ScalarField tr = trace_field(f);
    ScalarField want = d;
    want *= 2.0;
    tr -= want;
    CHECK(sup_norm(tr) <= 1e-12 * sup_norm(d));
  }
}

TEST_CASE("spectral poisson solver on trivial and single-mode data") {
  Grid g(17);
  PoissonFree z = poisson_free(ScalarField(g));
  CHECK(sup_norm(z.field) == 0.0);
  CHECK_FALSE(z.mean_removed);

  Vec3 xi0{g.freq(2), g.freq(-1), g.freq(3)};
  ScalarField f = single_mode(g, xi0);
  PoissonFree p = poisson_free(f);
  CHECK_FALSE(p.mean_removed);
  ScalarField want = f;
  want *= 1.0 / dot(xi0, xi0);
  ScalarField diff = p.field;
  diff -= want;
  CHECK(sup_norm(diff) <= 1e-10 * sup_norm(want));
}

TEST_CASE("spectral poisson solver satisfies the riesz cross-check") {
  Grid g(17);
  ScalarField d = mean_free(random_band_limited_field(g, 77, 4));
  PoissonFree p = poisson_free(d);
  CHECK_FALSE(p.mean_removed);

  // minus the spectral laplacian gives the datum back
  ScalarField md(g);
  {
    FrequencyTable tab = dft(p.field);
    for (int kx = g.freq_lo(); kx < g.freq_hi(); ++kx)
      for (int ky = g.freq_lo(); ky < g.freq_hi(); ++ky)
        for (int kz = g.freq_lo(); kz < g.freq_hi(); ++kz) {
          Vec3 xi = tab.xi(kx, ky, kz);
          tab.at(kx, ky, kz) *= dot(xi, xi);
        }
    md = idft(tab);
  }
  CHECK(rel_l2_diff(md, d) <= 1e-12);

  // standard property: second derivatives of the potential are the iterated
  // riesz transforms of the datum
  for (int a = 0; a < 3; ++a)
    for (int b = a; b < 3; ++b) {
      ScalarField lhs = spectral_derivative2(p.field, a, b);
      ScalarField rhs = riesz(a, riesz(b, d));
      lhs -= rhs;
      CHECK(sup_norm(lhs) <= 1e-12 * std::max(1.0, sup_norm(rhs)));
    }

  PoissonFree flagged = poisson_free(gaussian(g, 0.2));
  CHECK(flagged.mean_removed);
  CHECK(std::abs(flagged.mean) > 0.0);
}

TEST_CASE("solenoidal decomposition round trip") {
  Grid g(13);
  VectorField v0 = bump_vector(g, 1.0, 5);
  SymTensorField s = d_s(v0);
  Decomposition dec = solenoidal_decompose(s);

  double sn = l2_norm(s);
  VectorField dv(g);
  for (int j = 0; j < 3; ++j) {
    dv.comp[j] = dec.V.comp[j];
    dv.comp[j] -= v0.comp[j];
  }
  CHECK(l2_norm(dv) <= 1e-10 * l2_norm(v0));
  CHECK(l2_norm(dec.F) <= 1e-10 * sn);
  CHECK(dec.div_free_residual <= 1e-6 * sn);
  CHECK(dec.completeness_residual <= 1e-8 * sn);

  // boundary trace of the potential is pinned, not just small
  const BoundaryIndex bidx(g);
  double bmax = 0.0;
  for (const Index3& ix : bidx.nodes)
    for (int j = 0; j < 3; ++j) bmax = std::max(bmax, std::abs(dec.V.comp[j].at(ix)));
  CHECK(bmax == 0.0);

  // reported parts actually reassemble the input
  SymTensorField recon = d_s(dec.V);
  for (int c = 0; c < SymTensorField::kPairs; ++c) {
    recon.comp[c] += dec.F.comp[c];
    recon.comp[c] -= s.comp[c];
  }
  CHECK(l2_norm(recon) <= 1e-8 * sn);
}

TEST_CASE("solenoidal decomposition of divergence-free and zero inputs") {
  Grid g(13);
  Decomposition z = solenoidal_decompose(SymTensorField(g));
  CHECK(sup_norm(z.F) == 0.0);
  CHECK(sup_norm(z.V) == 0.0);

  SymTensorField f = projector_reconstruct(gaussian(g, 0.2));
  Decomposition dec = solenoidal_decompose(f);
  CHECK(l2_norm(dec.V) <= 1e-10 * l2_norm(f));
  SymTensorField diff = dec.F;
  for (int c = 0; c < SymTensorField::kPairs; ++c) diff.comp[c] -= f.comp[c];
  CHECK(l2_norm(diff) <= 1e-8 * l2_norm(f));
}

TEST_CASE("solenoidal decomposition is a projection") {
  Grid g(13);
  SymTensorField mix = projector_reconstruct(gaussian(g, 0.2));
  SymTensorField pot = d_s(bump_vector(g, 1.0, 5));
  for (int c = 0; c < SymTensorField::kPairs; ++c) mix.comp[c] += pot.comp[c];

  Decomposition first = solenoidal_decompose(mix);
  REQUIRE(l2_norm(first.F) > 0.0);
  REQUIRE(l2_norm(first.V) > 0.0);
  Decomposition second = solenoidal_decompose(first.F);
  CHECK(l2_norm(second.V) <= 1e-5 * l2_norm(first.F));
}
