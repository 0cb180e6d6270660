#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "polyharm/derivative.hpp"
#include "polyharm/fourier.hpp"

namespace polyharm {

// (d_s V)_jk = (d_j V_k + d_k V_j) / 2
inline SymTensorField d_s(const VectorField& v) {
  SymTensorField out(v.grid());
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      ScalarField t = d_axis(v.comp[k], j);
      t += d_axis(v.comp[j], k);
      t *= 0.5;
      out.comp[SymTensorField::pair_index(j, k)] = std::move(t);
    }
  return out;
}

// (delta F)_j = sum_k d_k F_jk.  The periodic flag selects the wraparound
// stencil for fields living on the period cell (transform outputs); interior
// rows coincide with the default closed-grid stencil.
inline VectorField div_tensor(const SymTensorField& f, bool periodic = false) {
  VectorField out(f.grid());
  for (int j = 0; j < 3; ++j) {
    ScalarField acc(f.grid());
    for (int k = 0; k < 3; ++k)
      acc += periodic ? d_axis_periodic(f.entry(j, k), k) : d_axis(f.entry(j, k), k);
    out.comp[j] = std::move(acc);
  }
  return out;
}

struct Rank4Field {
  Grid grid;
  std::vector<ScalarField> comp;  // 81 components, index ((i*3+j)*3+k)*3+l

  explicit Rank4Field(const Grid& g) : grid(g), comp(81, ScalarField(g)) {}
  ScalarField& at(int i, int j, int k, int l) { return comp[std::size_t(((i * 3 + j) * 3 + k) * 3 + l)]; }
  const ScalarField& at(int i, int j, int k, int l) const {
    return comp[std::size_t(((i * 3 + j) * 3 + k) * 3 + l)];
  }
};

inline double sup_norm(const Rank4Field& w) {
  double m = 0.0;
  for (const auto& c : w.comp) m = std::max(m, sup_norm(c));
  return m;
}

inline double l2_norm(const Rank4Field& w) {
  double s = 0.0;
  for (const auto& c : w.comp) {
    double v = l2_norm(c);
    s += v * v;
  }
  return std::sqrt(s);
}

// W_ijkl = d2_kl F_ij + d2_ij F_kl - d2_jk F_il - d2_il F_jk; the (ij)<->(kl)
// block symmetry is installed by copying, so it holds bitwise.
inline Rank4Field saint_venant(const SymTensorField& f) {
  const Grid& g = f.grid();
  std::array<std::array<ScalarField, 6>, 9> cache;  // [axis pair a<=b][tensor slot]
  std::array<bool, 9> have{};
  auto d2 = [&](int a, int b, int slot) -> const ScalarField& {
    int lo = std::min(a, b), hi = std::max(a, b);
    int key = lo * 3 + hi;
    if (!have[std::size_t(key)]) {
      Index3 alpha{0, 0, 0};
      alpha[lo] += 1;
      alpha[hi] += 1;
      for (int s = 0; s < 6; ++s) cache[std::size_t(key)][std::size_t(s)] = derivative(f.comp[std::size_t(s)], alpha, 1);
      have[std::size_t(key)] = true;
    }
    return cache[std::size_t(key)][std::size_t(slot)];
  };
  auto slot = [](int a, int b) { return SymTensorField::pair_index(a, b); };
  Rank4Field w(g);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) {
          int here = ((i * 3 + j) * 3 + k) * 3 + l;
          int mirror = ((k * 3 + l) * 3 + i) * 3 + j;
          if (mirror < here) {
            w.comp[std::size_t(here)] = w.comp[std::size_t(mirror)];
            continue;
          }
          ScalarField t = d2(k, l, slot(i, j));
          t += d2(i, j, slot(k, l));
          t -= d2(j, k, slot(i, l));
          t -= d2(i, l, slot(j, k));
          w.comp[std::size_t(here)] = std::move(t);
        }
  return w;
}

// Riesz transform: Fourier multiplier (1/i) xi_j / |xi|, zero at xi = 0.
inline ScalarField riesz(int axis, const ScalarField& f) {
  if (axis < 0 || axis > 2) throw ConfigError("riesz: axis must be 0, 1, or 2");
  FrequencyTable tab = dft(f);
  const Grid& g = f.grid;
  int lo = g.freq_lo(), hi = g.freq_hi();
  for (int kx = lo; kx < hi; ++kx)
    for (int ky = lo; ky < hi; ++ky)
      for (int kz = lo; kz < hi; ++kz) {
        Vec3 xi = tab.xi(kx, ky, kz);
        double len = norm(xi);
        Cplx mult = (len == 0.0) ? Cplx{} : Cplx(0.0, -1.0) * (xi[axis] / len);
        tab.at(kx, ky, kz) *= mult;
      }
  return idft(tab);
}

// Solenoidal extension of a scalar datum: F_jk = d_sharp (delta_jk - sigma_j
// sigma_k / |sigma|^2) mode by mode, with sigma the periodic first-derivative
// stencil symbol, so the discrete periodic divergence of F vanishes to
// roundoff.  Modes where sigma = 0 (the zero mode and pure Nyquist
// combinations) contribute nothing to any discrete divergence; they carry the
// direction-averaged projector (2/3) I, which keeps trace F = 2 d_sharp exact
// on every mode.
inline SymTensorField projector_reconstruct(const ScalarField& d_sharp) {
  const Grid& g = d_sharp.grid;
  FrequencyTable tab = dft(d_sharp);
  int lo = g.freq_lo(), hi = g.freq_hi();
  SymTensorField out(g);
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      FrequencyTable comp(g);
      for (int kx = lo; kx < hi; ++kx)
        for (int ky = lo; ky < hi; ++ky)
          for (int kz = lo; kz < hi; ++kz) {
            Vec3 xi = tab.xi(kx, ky, kz);
            Vec3 sigma{std::sin(xi[0] * g.spacing) / g.spacing, std::sin(xi[1] * g.spacing) / g.spacing,
                       std::sin(xi[2] * g.spacing) / g.spacing};
            double s2 = dot(sigma, sigma);
            double proj;
            if (s2 == 0.0)
              proj = (j == k) ? 2.0 / 3.0 : 0.0;
            else
              proj = ((j == k) ? 1.0 : 0.0) - sigma[j] * sigma[k] / s2;
            comp.at(kx, ky, kz) = proj * tab.at(kx, ky, kz);
          }
      out.comp[SymTensorField::pair_index(j, k)] = idft(comp);
    }
  return out;
}

inline ScalarField trace_field(const SymTensorField& f) {
  ScalarField out = f.comp[SymTensorField::pair_index(0, 0)];
  out += f.comp[SymTensorField::pair_index(1, 1)];
  out += f.comp[SymTensorField::pair_index(2, 2)];
  return out;
}

struct PoissonFree {
  ScalarField field;
  bool mean_removed = false;  // set when the zero mode was dropped
  Cplx mean{};                // the dropped mean value
};

// Solve -Lap dtilde = d_sharp spectrally (multiplier 1/|xi|^2), partnering the
// Riesz multipliers: d_j d_k dtilde = R_j R_k d_sharp holds in exact
// multiplier algebra.  A nonzero mean has no preimage; it is removed and
// flagged.
inline PoissonFree poisson_free(const ScalarField& d_sharp) {
  const Grid& g = d_sharp.grid;
  FrequencyTable tab = dft(d_sharp);
  double box = 2.0 * g.half;
  PoissonFree out;
  Cplx zero_mode = tab.at(0, 0, 0);
  double peak = 0.0;
  for (const auto& v : tab.values) peak = std::max(peak, std::abs(v));
  out.mean = zero_mode / (box * box * box);
  out.mean_removed = std::abs(zero_mode) > 1e-12 * peak;
  int lo = g.freq_lo(), hi = g.freq_hi();
  for (int kx = lo; kx < hi; ++kx)
    for (int ky = lo; ky < hi; ++ky)
      for (int kz = lo; kz < hi; ++kz) {
        Vec3 xi = tab.xi(kx, ky, kz);
        double q = dot(xi, xi);
        tab.at(kx, ky, kz) *= (q == 0.0) ? 0.0 : 1.0 / q;
      }
  out.field = idft(tab);
  return out;
}

struct Decomposition {
  SymTensorField F;   // solenoidal part
  VectorField V;      // potential, zero boundary trace
  double div_free_residual = 0.0;      // ||delta F||_L2 over interior nodes
  double completeness_residual = 0.0;  // ||S - F - d_s V||_L2
};

namespace detail {

// Sparse matrix of d_axis on the flattened grid (central interior rows,
// one-sided face rows), matching the field operator coefficient for
// coefficient.  Real-valued: the stencils have real weights, so the coupled
// system factors over the reals and complex data is solved part by part.
inline Eigen::SparseMatrix<double> d_axis_matrix(const Grid& g, int axis) {
  int n = g.pts;
  std::size_t total = std::size_t(n) * n * n;
  double inv2h = 1.0 / (2.0 * g.spacing);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(total * 3);
  auto flat_of = [&](const Index3& ix) { return Eigen::Index(g.flat(ix[0], ix[1], ix[2])); };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        Index3 ix{i, j, k};
        Eigen::Index row = flat_of(ix);
        int p = ix[axis];
        auto put = [&](int d, double c) {
          Index3 t = ix;
          t[axis] = p + d;
          trips.emplace_back(row, flat_of(t), c * inv2h);
        };
        if (p == 0) {
          put(0, -3.0);
          put(1, 4.0);
          put(2, -1.0);
        } else if (p == n - 1) {
          put(0, 3.0);
          put(-1, -4.0);
          put(-2, 1.0);
        } else {
          put(1, 1.0);
          put(-1, -1.0);
        }
      }
  Eigen::SparseMatrix<double> m{Eigen::Index(total), Eigen::Index(total)};
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

}  // namespace detail

// S = F + d_s V with V = 0 on the boundary: V solves the composed system
// (div_tensor . d_s) V = div_tensor S collocated at interior nodes, assembled
// as the product of the same stencil matrices, so the recovered F has
// interior discrete divergence at the solver's roundoff level.  Face rows
// host the Dirichlet condition instead of the equation, so the divergence
// diagnostic lives on interior nodes.
inline Decomposition solenoidal_decompose(const SymTensorField& s) {
  const Grid& g = s.grid();
  int n = g.pts;
  std::size_t nodes = std::size_t(n) * n * n;

  std::array<Eigen::SparseMatrix<double>, 3> d;
  for (int a = 0; a < 3; ++a) d[std::size_t(a)] = detail::d_axis_matrix(g, a);
  Eigen::SparseMatrix<double> lap = (d[0] * d[0]).eval();
  lap += (d[1] * d[1]).eval();
  lap += (d[2] * d[2]).eval();

  // interior re-numbering; boundary unknowns are pinned to zero and dropped
  std::vector<Eigen::Index> renum(nodes, -1);
  std::vector<std::size_t> interior;
  interior.reserve(nodes);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        if (!g.on_boundary(i, j, k)) {
          renum[g.flat(i, j, k)] = Eigen::Index(interior.size());
          interior.push_back(g.flat(i, j, k));
        }
  Eigen::Index ni = Eigen::Index(interior.size());

  std::vector<Eigen::Triplet<double>> trips;
  auto add_block = [&](int bj, int bk, const Eigen::SparseMatrix<double>& m, double scale) {
    for (int col = 0; col < m.outerSize(); ++col)
      for (Eigen::SparseMatrix<double>::InnerIterator it(m, col); it; ++it) {
        Eigen::Index r = renum[std::size_t(it.row())], c = renum[std::size_t(it.col())];
        if (r < 0 || c < 0) continue;
        trips.emplace_back(Eigen::Index(bj) * ni + r, Eigen::Index(bk) * ni + c, scale * it.value());
      }
  };
  for (int j = 0; j < 3; ++j) {
    for (int k = 0; k < 3; ++k) {
      Eigen::SparseMatrix<double> prod = (d[std::size_t(k)] * d[std::size_t(j)]).eval();
      add_block(j, k, prod, 0.5);
    }
    add_block(j, j, lap, 0.5);
  }
  Eigen::SparseMatrix<double> sys{3 * ni, 3 * ni};
  sys.setFromTriplets(trips.begin(), trips.end());

  VectorField div_s = div_tensor(s);
  Eigen::VectorXd rhs_re(3 * ni), rhs_im(3 * ni);
  for (int j = 0; j < 3; ++j)
    for (Eigen::Index t = 0; t < ni; ++t) {
      Cplx v = div_s.comp[std::size_t(j)].values[interior[std::size_t(t)]];
      rhs_re[Eigen::Index(j) * ni + t] = v.real();
      rhs_im[Eigen::Index(j) * ni + t] = v.imag();
    }

  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(sys);
  if (lu.info() != Eigen::Success) throw SolverError("solenoidal_decompose: singular interior system");
  Eigen::VectorXd sol_re = lu.solve(rhs_re);
  Eigen::VectorXd sol_im = lu.solve(rhs_im);
  if (lu.info() != Eigen::Success) throw SolverError("solenoidal_decompose: solve failed");

  Decomposition out{SymTensorField(g), VectorField(g), 0.0, 0.0};
  for (int j = 0; j < 3; ++j)
    for (Eigen::Index t = 0; t < ni; ++t)
      out.V.comp[std::size_t(j)].values[interior[std::size_t(t)]] =
          Cplx(sol_re[Eigen::Index(j) * ni + t], sol_im[Eigen::Index(j) * ni + t]);

  SymTensorField dsv = d_s(out.V);
  out.F = s;
  for (int c = 0; c < SymTensorField::kPairs; ++c) out.F.comp[std::size_t(c)] -= dsv.comp[std::size_t(c)];

  VectorField div_f = div_tensor(out.F);
  std::vector<double> terms;
  terms.reserve(interior.size() * 3);
  double w = g.spacing * g.spacing * g.spacing;
  for (int j = 0; j < 3; ++j)
    for (std::size_t t : interior) terms.push_back(w * std::norm(div_f.comp[std::size_t(j)].values[t]));
  out.div_free_residual = std::sqrt(pairwise_sum(terms));

  SymTensorField recon = dsv;
  for (int c = 0; c < SymTensorField::kPairs; ++c) {
    recon.comp[std::size_t(c)] += out.F.comp[std::size_t(c)];
    recon.comp[std::size_t(c)] -= s.comp[std::size_t(c)];
  }
  out.completeness_residual = l2_norm(recon);
  return out;
}

}  // namespace polyharm
