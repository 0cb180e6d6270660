#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <utility>
#include <vector>

#include "polyharm/bumps.hpp"
#include "polyharm/derivative.hpp"
#include "polyharm/fourier.hpp"
#include "polyharm/frame.hpp"
#include "polyharm/tensor.hpp"
#include "polyharm/transport.hpp"

namespace polyharm {

// ---------------------------------------------------------------------------
// Boundary data
// ---------------------------------------------------------------------------

// Navier-side data: traces[k][b] = (-Lap)^k u at boundary node b (face-lex
// order from BoundaryIndex), k = 0 .. m-1.
struct NavierData {
  int m = 0;
  std::vector<std::vector<Cplx>> traces;

  NavierData() = default;
  NavierData(int m_, std::size_t nb)
      : m(m_), traces(std::size_t(m_), std::vector<Cplx>(nb, Cplx{})) {}
};

// Neumann-side data: traces[k][b] = outward normal derivative of (-Lap)^k u
// at boundary node b, taken along the owner-face normal.
struct NeumannData {
  int m = 0;
  std::vector<std::vector<Cplx>> traces;

  NeumannData() = default;
  NeumannData(int m_, std::size_t nb)
      : m(m_), traces(std::size_t(m_), std::vector<Cplx>(nb, Cplx{})) {}
};

// (-Lap)^k u for k = 0 .. m-1 as full fields.
inline std::vector<ScalarField> laplace_powers(const ScalarField& u, int m) {
  if (m < 1) throw ConfigError("laplace_powers: m must be positive");
  std::vector<ScalarField> out;
  out.reserve(std::size_t(m));
  out.push_back(u);
  for (int k = 1; k < m; ++k) {
    ScalarField t = laplacian(out.back());
    t *= -1.0;
    out.push_back(std::move(t));
  }
  return out;
}

inline NavierData navier_traces(const ScalarField& u, int m) {
  BoundaryIndex bidx(u.grid);
  auto powers = laplace_powers(u, m);
  NavierData out(m, bidx.count());
  for (int k = 0; k < m; ++k)
    for (std::size_t b = 0; b < bidx.count(); ++b) out.traces[std::size_t(k)][b] = powers[std::size_t(k)].at(bidx.nodes[b]);
  return out;
}

namespace detail {

// Outward normal derivative at a boundary node, one-sided second order along
// the face normal: (3 w(b) - 4 w(b - nhat) + w(b - 2 nhat)) / (2 spacing).
// This is the d_axis face row times the sign of the outward normal.
inline Cplx normal_derivative(const ScalarField& w, const Index3& node, int face) {
  int axis = face / 2;
  int out_step = (face % 2 == 0) ? -1 : 1;
  Index3 n1 = node, n2 = node;
  n1[axis] -= out_step;
  n2[axis] -= 2 * out_step;
  return (3.0 * w.at(node) - 4.0 * w.at(n1) + w.at(n2)) / (2.0 * w.grid.spacing);
}

}  // namespace detail

inline NeumannData neumann_traces(const std::vector<ScalarField>& powers) {
  if (powers.empty()) throw DataInconsistencyError("neumann_traces: no fields");
  const Grid& g = powers.front().grid;
  BoundaryIndex bidx(g);
  NeumannData out(int(powers.size()), bidx.count());
  for (std::size_t k = 0; k < powers.size(); ++k) {
    powers[k].require_same_grid(powers.front());
    for (std::size_t b = 0; b < bidx.count(); ++b)
      out.traces[k][b] = detail::normal_derivative(powers[k], bidx.nodes[b], bidx.owner_face[b]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DN matrix
// ---------------------------------------------------------------------------

// Dense DN matrix over canonical Navier data: row and column index l * nb + b
// (trace level major, boundary nodes face-lex).  Column l * nb + b is the
// Neumann response to data that is 1 at node b in trace slot l, zero
// elsewhere.
struct DnMap {
  int m = 0;
  Grid grid;
  Eigen::MatrixXcd mat;
};

inline Eigen::VectorXcd flatten(const NavierData& f) {
  std::size_t nb = f.traces.empty() ? 0 : f.traces.front().size();
  Eigen::VectorXcd v(Eigen::Index(std::size_t(f.m) * nb));
  for (int k = 0; k < f.m; ++k)
    for (std::size_t b = 0; b < nb; ++b) v[Eigen::Index(std::size_t(k) * nb + b)] = f.traces[std::size_t(k)][b];
  return v;
}

inline Eigen::VectorXcd flatten(const NeumannData& f) {
  std::size_t nb = f.traces.empty() ? 0 : f.traces.front().size();
  Eigen::VectorXcd v(Eigen::Index(std::size_t(f.m) * nb));
  for (int k = 0; k < f.m; ++k)
    for (std::size_t b = 0; b < nb; ++b) v[Eigen::Index(std::size_t(k) * nb + b)] = f.traces[std::size_t(k)][b];
  return v;
}

inline NeumannData apply_dn(const DnMap& dn, const NavierData& f) {
  if (dn.m != f.m) throw DataInconsistencyError("apply_dn: order mismatch");
  std::size_t nb = f.traces.empty() ? 0 : f.traces.front().size();
  if (Eigen::Index(std::size_t(dn.m) * nb) != dn.mat.cols())
    throw DataInconsistencyError("apply_dn: data size does not match the matrix");
  Eigen::VectorXcd g = dn.mat * flatten(f);
  NeumannData out(dn.m, nb);
  for (int k = 0; k < dn.m; ++k)
    for (std::size_t b = 0; b < nb; ++b) out.traces[std::size_t(k)][b] = g[Eigen::Index(std::size_t(k) * nb + b)];
  return out;
}

// ---------------------------------------------------------------------------
// Grid operator
// ---------------------------------------------------------------------------

namespace detail {

using SparseC = Eigen::SparseMatrix<Cplx>;

// Sparse twin of second_axis: 3-point interior rows, 4-point one-sided rows
// on the two faces, identical coefficients.
inline Eigen::SparseMatrix<double> second_axis_matrix(const Grid& g, int axis) {
  int n = g.pts;
  std::size_t total = g.size();
  double invh2 = 1.0 / (g.spacing * g.spacing);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(total * 4);
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
          trips.emplace_back(row, flat_of(t), c * invh2);
        };
        if (p == 0) {
          put(0, 2.0);
          put(1, -5.0);
          put(2, 4.0);
          put(3, -1.0);
        } else if (p == n - 1) {
          put(0, 2.0);
          put(-1, -5.0);
          put(-2, 4.0);
          put(-3, -1.0);
        } else {
          put(-1, 1.0);
          put(0, -2.0);
          put(1, 1.0);
        }
      }
  Eigen::SparseMatrix<double> m{Eigen::Index(total), Eigen::Index(total)};
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

inline Eigen::SparseMatrix<double> neglap_matrix(const Grid& g) {
  Eigen::SparseMatrix<double> m = second_axis_matrix(g, 0);
  m += second_axis_matrix(g, 1);
  m += second_axis_matrix(g, 2);
  return (-m).eval();
}

inline ScalarField conj_field(const ScalarField& f) {
  ScalarField out = f;
  for (auto& v : out.values) v = std::conj(v);
  return out;
}

inline ScalarField pointwise(const ScalarField& a, const ScalarField& b) {
  a.require_same_grid(b);
  ScalarField out(a.grid);
  for (std::size_t t = 0; t < out.values.size(); ++t) out.values[t] = a.values[t] * b.values[t];
  return out;
}

// Matrix of sum A_jk D_jD_k + sum B_j D_j + q with D_j = -i F_j, F and S the
// first- and second-derivative stencil matrices: D_jD_j = -S_j and
// D_jD_k = -F_kF_j, the same compositions derivative_D performs.  The plain
// form multiplies by the coefficient first; the adjoint form conjugates each
// coefficient and applies the derivatives after the multiplication, which is
// the product-form transpose used by the adjoint solve.
inline SparseC perturbation_matrix(const CoefficientSet& cs, bool adjoint) {
  const Grid& g = cs.grid();
  Eigen::Index total = Eigen::Index(g.size());
  std::array<SparseC, 3> F, S;
  for (int d = 0; d < 3; ++d) {
    F[std::size_t(d)] = d_axis_matrix(g, d).cast<Cplx>();
    S[std::size_t(d)] = second_axis_matrix(g, d).cast<Cplx>();
  }
  auto diag_vec = [&](const ScalarField& f, Cplx scale) {
    Eigen::VectorXcd v(total);
    for (Eigen::Index t = 0; t < total; ++t)
      v[t] = scale * (adjoint ? std::conj(f.values[std::size_t(t)]) : f.values[std::size_t(t)]);
    return v;
  };
  SparseC P(total, total);
  auto add = [&](const Eigen::VectorXcd& c, const SparseC& op) {
    SparseC term = adjoint ? SparseC((op * c.asDiagonal()).eval()) : SparseC((c.asDiagonal() * op).eval());
    P += term;
  };
  for (int j = 0; j < 3; ++j) add(diag_vec(cs.A.entry(j, j), -1.0), S[std::size_t(j)]);
  for (int j = 0; j < 3; ++j)
    for (int k = j + 1; k < 3; ++k) {
      SparseC op = (F[std::size_t(k)] * F[std::size_t(j)]).eval();
      add(diag_vec(cs.A.entry(j, k), -2.0), op);
    }
  for (int j = 0; j < 3; ++j) add(diag_vec(cs.B.comp[std::size_t(j)], Cplx(0.0, -1.0)), F[std::size_t(j)]);
  {
    Eigen::VectorXcd qv = diag_vec(cs.q, 1.0);
    std::vector<Eigen::Triplet<Cplx>> trips;
    trips.reserve(std::size_t(total));
    for (Eigen::Index t = 0; t < total; ++t) trips.emplace_back(t, t, qv[t]);
    SparseC Q(total, total);
    Q.setFromTriplets(trips.begin(), trips.end());
    P += Q;
  }
  P.makeCompressed();
  return P;
}

}  // namespace detail

// Grid realization of (-Lap)^m + sum A_jk D_jD_k + sum B_j D_j + q.  The
// sparse matrices replicate the stencil routes row for row; apply() runs the
// stencil route, apply_vec() the matrix route, and the two agree to roundoff.
struct DiscreteOperator {
  CoefficientSet coeffs;
  Eigen::SparseMatrix<double> neglap;
  detail::SparseC pert;

  int order() const { return coeffs.m; }
  const Grid& grid() const { return coeffs.grid(); }

  ScalarField apply(const ScalarField& u) const {
    u.require_same_grid(coeffs.q);
    int m = coeffs.m;
    ScalarField out = u;
    for (int r = 0; r < m; ++r) {
      ScalarField t = laplacian(out);
      t *= -1.0;
      out = std::move(t);
    }
    for (int j = 0; j < 3; ++j)
      for (int k = j; k < 3; ++k) {
        Index3 alpha{0, 0, 0};
        alpha[j] += 1;
        alpha[k] += 1;
        ScalarField d = derivative_D(u, alpha, m);
        ScalarField t = detail::pointwise(coeffs.A.entry(j, k), d);
        if (j != k) t *= 2.0;
        out += t;
      }
    for (int j = 0; j < 3; ++j) {
      Index3 alpha{0, 0, 0};
      alpha[j] = 1;
      out += detail::pointwise(coeffs.B.comp[std::size_t(j)], derivative_D(u, alpha, m));
    }
    out += detail::pointwise(coeffs.q, u);
    return out;
  }

  Eigen::VectorXcd apply_vec(const Eigen::VectorXcd& u) const {
    Eigen::VectorXcd w = u;
    for (int r = 0; r < coeffs.m; ++r) w = (neglap * w).eval();
    return w + pert * u;
  }
};

inline DiscreteOperator assemble(const CoefficientSet& cs) {
  DiscreteOperator op;
  op.coeffs = cs;
  op.neglap = detail::neglap_matrix(cs.grid());
  op.pert = detail::perturbation_matrix(cs, false);
  return op;
}

// ---------------------------------------------------------------------------
// Navier boundary value problem
// ---------------------------------------------------------------------------

struct NavierSolution {
  // powers[k] = (-Lap)^k u with the prescribed data installed on the boundary.
  std::vector<ScalarField> powers;

  const ScalarField& u() const { return powers.front(); }
  NeumannData neumann() const { return neumann_traces(powers); }
};

// Interior collocation of the Navier problem, substituting the powers
// w_k = (-Lap)^k u as unknowns: rows (-Lap_h) w_k - w_{k+1} = 0 for k < m-1
// and (-Lap_h) w_{m-1} + P w_0 = rhs, with every power's boundary values
// supplied by the data.  One LU factorization serves all right-hand sides.
// The adjoint flag assembles P in the product-form transpose (conjugated
// coefficients, derivatives applied after the multiplication).
class NavierSystem {
 public:
  explicit NavierSystem(const CoefficientSet& cs, bool adjoint = false)
      : m_(cs.m), grid_(cs.grid()), coeffs_(cs), bidx_(grid_) {
    // Derived coefficient sets (expanded gauges, adjoint slots) spill a
    // stencil width past the ball; anything farther out breaks the
    // integration-by-parts identities the boundary pairing relies on.
    if (support_violation(cs, kSupportRadius + 3.0 * grid_.spacing) != 0.0)
      throw ConfigError("navier: coefficients must vanish outside the support ball");
    islot_of_flat_.assign(grid_.size(), -1);
    for (std::size_t f = 0; f < grid_.size(); ++f) {
      if (bidx_.boundary_of_flat[f] >= 0) continue;
      islot_of_flat_[f] = std::ptrdiff_t(interior_.size());
      interior_.push_back(Eigen::Index(f));
    }
    ni_ = Eigen::Index(interior_.size());
    nb_ = Eigen::Index(bidx_.count());
    auto neglap = detail::neglap_matrix(grid_).cast<Cplx>().eval();
    auto pert = detail::perturbation_matrix(cs, adjoint);
    split(neglap, lap_ii_, lap_ib_);
    split(pert, pert_ii_, pert_ib_);
    std::vector<Eigen::Triplet<Cplx>> trips;
    trips.reserve(std::size_t(m_) * (std::size_t(lap_ii_.nonZeros()) + std::size_t(ni_)) +
                  std::size_t(pert_ii_.nonZeros()));
    for (int k = 0; k < m_; ++k)
      for (Eigen::Index c = 0; c < lap_ii_.outerSize(); ++c)
        for (detail::SparseC::InnerIterator it(lap_ii_, c); it; ++it)
          trips.emplace_back(Eigen::Index(k) * ni_ + it.row(), Eigen::Index(k) * ni_ + it.col(), it.value());
    for (int k = 0; k + 1 < m_; ++k)
      for (Eigen::Index r = 0; r < ni_; ++r)
        trips.emplace_back(Eigen::Index(k) * ni_ + r, Eigen::Index(k + 1) * ni_ + r, Cplx(-1.0));
    for (Eigen::Index c = 0; c < pert_ii_.outerSize(); ++c)
      for (detail::SparseC::InnerIterator it(pert_ii_, c); it; ++it)
        trips.emplace_back(Eigen::Index(m_ - 1) * ni_ + it.row(), it.col(), it.value());
    detail::SparseC M(Eigen::Index(m_) * ni_, Eigen::Index(m_) * ni_);
    M.setFromTriplets(trips.begin(), trips.end());
    M.makeCompressed();
    lu_.compute(M);
    if (lu_.info() != Eigen::Success)
      throw SolverError("navier: factorization failed; zero appears to be a Navier eigenvalue of the operator");
  }

  int order() const { return m_; }
  const Grid& grid() const { return grid_; }
  const CoefficientSet& coefficients() const { return coeffs_; }
  const BoundaryIndex& boundary() const { return bidx_; }

  NavierSolution solve(const NavierData& f) const { return solve_impl(f, nullptr); }
  NavierSolution solve(const NavierData& f, const ScalarField& rhs) const { return solve_impl(f, &rhs); }

  // Canonical-column DN assembly on the shared factorization.  Column
  // l * nb + b is the Neumann data of the solution whose only nonzero Navier
  // value is a 1 at node b in slot l.
  DnMap dn_map() const {
    DnMap out;
    out.m = m_;
    out.grid = grid_;
    out.mat.resize(Eigen::Index(m_) * nb_, Eigen::Index(m_) * nb_);
    double inv2h = 1.0 / (2.0 * grid_.spacing);
    for (int l = 0; l < m_; ++l)
      for (Eigen::Index b = 0; b < nb_; ++b) {
        Eigen::VectorXcd rhsv = Eigen::VectorXcd::Zero(Eigen::Index(m_) * ni_);
        for (detail::SparseC::InnerIterator it(lap_ib_, b); it; ++it)
          rhsv[Eigen::Index(l) * ni_ + it.row()] -= it.value();
        if (l == 0)
          for (detail::SparseC::InnerIterator it(pert_ib_, b); it; ++it)
            rhsv[Eigen::Index(m_ - 1) * ni_ + it.row()] -= it.value();
        Eigen::VectorXcd x = lu_.solve(rhsv);
        auto value_of = [&](const Index3& node, int k) -> Cplx {
          std::size_t flat = grid_.flat(node[0], node[1], node[2]);
          std::ptrdiff_t is = islot_of_flat_[flat];
          if (is >= 0) return x[Eigen::Index(k) * ni_ + Eigen::Index(is)];
          return (k == l && bidx_.boundary_of_flat[flat] == std::ptrdiff_t(b)) ? Cplx(1.0) : Cplx{};
        };
        Eigen::Index col = Eigen::Index(l) * nb_ + b;
        for (int lp = 0; lp < m_; ++lp)
          for (Eigen::Index bp = 0; bp < nb_; ++bp) {
            const Index3& node = bidx_.nodes[std::size_t(bp)];
            int face = bidx_.owner_face[std::size_t(bp)];
            int axis = face / 2;
            int out_step = (face % 2 == 0) ? -1 : 1;
            Index3 n1 = node, n2 = node;
            n1[axis] -= out_step;
            n2[axis] -= 2 * out_step;
            out.mat(Eigen::Index(lp) * nb_ + bp, col) =
                (3.0 * value_of(node, lp) - 4.0 * value_of(n1, lp) + value_of(n2, lp)) * inv2h;
          }
      }
    return out;
  }

 private:
  void split(const detail::SparseC& full, detail::SparseC& ii, detail::SparseC& ib) const {
    std::vector<Eigen::Triplet<Cplx>> ti, tb;
    ti.reserve(std::size_t(full.nonZeros()));
    for (Eigen::Index c = 0; c < full.outerSize(); ++c)
      for (detail::SparseC::InnerIterator it(full, c); it; ++it) {
        std::ptrdiff_t ri = islot_of_flat_[std::size_t(it.row())];
        if (ri < 0) continue;
        std::ptrdiff_t ci = islot_of_flat_[std::size_t(it.col())];
        if (ci >= 0)
          ti.emplace_back(Eigen::Index(ri), Eigen::Index(ci), it.value());
        else
          tb.emplace_back(Eigen::Index(ri), Eigen::Index(bidx_.boundary_of_flat[std::size_t(it.col())]), it.value());
      }
    ii.resize(ni_, ni_);
    ii.setFromTriplets(ti.begin(), ti.end());
    ii.makeCompressed();
    ib.resize(ni_, nb_);
    ib.setFromTriplets(tb.begin(), tb.end());
    ib.makeCompressed();
  }

  NavierSolution solve_impl(const NavierData& f, const ScalarField* rhs) const {
    if (f.m != m_ || f.traces.size() != std::size_t(m_))
      throw DataInconsistencyError("navier: boundary data order mismatch");
    for (const auto& t : f.traces)
      if (t.size() != std::size_t(nb_)) throw DataInconsistencyError("navier: boundary data size mismatch");
    if (rhs) rhs->require_same_grid(coeffs_.q);
    Eigen::VectorXcd b = Eigen::VectorXcd::Zero(Eigen::Index(m_) * ni_);
    Eigen::VectorXcd fb(nb_);
    for (int k = 0; k < m_; ++k) {
      for (Eigen::Index i = 0; i < nb_; ++i) fb[i] = f.traces[std::size_t(k)][std::size_t(i)];
      b.segment(Eigen::Index(k) * ni_, ni_) -= lap_ib_ * fb;
      if (k == 0) b.segment(Eigen::Index(m_ - 1) * ni_, ni_) -= pert_ib_ * fb;
    }
    if (rhs)
      for (Eigen::Index s = 0; s < ni_; ++s)
        b[Eigen::Index(m_ - 1) * ni_ + s] += rhs->values[std::size_t(interior_[std::size_t(s)])];
    Eigen::VectorXcd x = lu_.solve(b);
    if (lu_.info() != Eigen::Success) throw SolverError("navier: back substitution failed");
    NavierSolution sol;
    sol.powers.assign(std::size_t(m_), ScalarField(grid_));
    for (int k = 0; k < m_; ++k) {
      ScalarField& w = sol.powers[std::size_t(k)];
      for (Eigen::Index s = 0; s < ni_; ++s)
        w.values[std::size_t(interior_[std::size_t(s)])] = x[Eigen::Index(k) * ni_ + s];
      for (std::size_t bb = 0; bb < bidx_.count(); ++bb)
        w.at(bidx_.nodes[bb]) = f.traces[std::size_t(k)][bb];
    }
    return sol;
  }

  int m_;
  Grid grid_;
  CoefficientSet coeffs_;
  BoundaryIndex bidx_;
  std::vector<Eigen::Index> interior_;
  std::vector<std::ptrdiff_t> islot_of_flat_;
  Eigen::Index ni_ = 0, nb_ = 0;
  detail::SparseC lap_ii_, lap_ib_, pert_ii_, pert_ib_;
  Eigen::SparseLU<detail::SparseC> lu_;
};

inline ScalarField solve_navier(const CoefficientSet& cs, const NavierData& f) {
  return NavierSystem(cs).solve(f).u();
}
inline ScalarField solve_navier(const CoefficientSet& cs, const NavierData& f, const ScalarField& rhs) {
  return NavierSystem(cs).solve(f, rhs).u();
}
inline ScalarField solve_navier_adjoint(const CoefficientSet& cs, const NavierData& f) {
  return NavierSystem(cs, true).solve(f).u();
}
inline DnMap dn_matrix(const CoefficientSet& cs) { return NavierSystem(cs).dn_map(); }

// ---------------------------------------------------------------------------
// Boundary pairing
// ---------------------------------------------------------------------------

// sum_l int_bd [(dn1 - dn2) f]_l conj((-Lap)^{m-1-l} v) dS with per-face 2D
// trapezoid quadrature; the traces of v are recomputed from the field.  For
// difference data the integrand vanishes identically on shared edges and
// corners (the one-sided normal stencil there reads only boundary nodes, and
// both maps install identical data on them), so visiting each node once under
// its owner face is exact.
inline Cplx pair_dn(const DnMap& dn1, const DnMap& dn2, const NavierData& f, const ScalarField& vfield) {
  if (dn1.m != dn2.m || !(dn1.grid == dn2.grid))
    throw DataInconsistencyError("pair_dn: maps live on different discretizations");
  if (f.m != dn1.m) throw DataInconsistencyError("pair_dn: data order mismatch");
  if (!(vfield.grid == dn1.grid)) throw DataInconsistencyError("pair_dn: field grid mismatch");
  NavierData v = navier_traces(vfield, dn1.m);
  BoundaryIndex bidx(dn1.grid);
  std::size_t nb = bidx.count();
  if (dn1.mat.cols() != Eigen::Index(std::size_t(dn1.m) * nb) || dn2.mat.cols() != dn1.mat.cols())
    throw DataInconsistencyError("pair_dn: matrix size mismatch");
  Eigen::VectorXcd fv = flatten(f);
  // two independent products, then subtract: identical maps give a bitwise
  // zero difference (a fused accumulating product would not)
  Eigen::VectorXcd g1 = dn1.mat * fv;
  Eigen::VectorXcd g2 = dn2.mat * fv;
  Eigen::VectorXcd g = g1 - g2;
  double h2 = dn1.grid.spacing * dn1.grid.spacing;
  int n = dn1.grid.pts;
  std::vector<Cplx> terms;
  terms.reserve(std::size_t(dn1.m) * nb);
  for (int l = 0; l < dn1.m; ++l)
    for (std::size_t b = 0; b < nb; ++b) {
      const Index3& node = bidx.nodes[b];
      int axis = bidx.owner_face[b] / 2;
      double w = h2;
      for (int d = 0; d < 3; ++d) {
        if (d == axis) continue;
        if (node[d] == 0 || node[d] == n - 1) w *= 0.5;
      }
      terms.push_back(w * g[Eigen::Index(std::size_t(l) * nb + b)] *
                      std::conj(v.traces[std::size_t(dn1.m - 1 - l)][b]));
    }
  return pairwise_sum(terms);
}

// ---------------------------------------------------------------------------
// Adjoint coefficients
// ---------------------------------------------------------------------------

// Coefficient slots of the adjoint operator, read off from the product form
// L* v = (-Lap)^m v + sum D_jD_k (conj A_jk v) + sum D_j (conj B_j v)
//        + conj q v
// by expanding the products:
//   A#      = conj A
//   B#_k    = conj B_k + 2 sum_j D_j conj A_jk
//   q#      = conj q + sum_j D_j conj B_j + sum_jk D_jD_k conj A_jk.
// The second-order slot carries the conjugate (not the raw tensor) and the
// potential sum closes over the first- and second-order slots; both facts are
// forced by the discrete transpose check in the test suite.
inline CoefficientSet adjoint_coeffs(const CoefficientSet& cs) {
  const Grid& g = cs.grid();
  int m = cs.m;
  CoefficientSet out(m, g);
  for (int c = 0; c < SymTensorField::kPairs; ++c) out.A.comp[std::size_t(c)] = detail::conj_field(cs.A.comp[std::size_t(c)]);
  for (int k = 0; k < 3; ++k) {
    ScalarField bk = detail::conj_field(cs.B.comp[std::size_t(k)]);
    for (int j = 0; j < 3; ++j) {
      Index3 alpha{0, 0, 0};
      alpha[j] = 1;
      ScalarField t = derivative_D(out.A.entry(j, k), alpha, m);
      t *= 2.0;
      bk += t;
    }
    out.B.comp[std::size_t(k)] = std::move(bk);
  }
  ScalarField q = detail::conj_field(cs.q);
  for (int j = 0; j < 3; ++j) {
    Index3 alpha{0, 0, 0};
    alpha[j] = 1;
    q += derivative_D(detail::conj_field(cs.B.comp[std::size_t(j)]), alpha, m);
  }
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      Index3 alpha{0, 0, 0};
      alpha[j] += 1;
      alpha[k] += 1;
      ScalarField t = derivative_D(out.A.entry(j, k), alpha, m);
      if (j != k) t *= 2.0;
      q += t;
    }
  out.q = std::move(q);
  return out;
}

// Apply L* from its slot set.  The slots are inverted back to
// (conj A, conj B, conj q) by the exact reverse of the adjoint_coeffs
// compositions (same stencil calls, subtracted), then the product form is
// applied; this keeps the application the literal discrete transpose instead
// of inheriting the discrete product-rule defect of the expanded slots.
inline ScalarField adjoint_apply(const CoefficientSet& sharp, const ScalarField& v) {
  v.require_same_grid(sharp.q);
  int m = sharp.m;
  const SymTensorField& ca = sharp.A;  // already the conjugated tensor
  VectorField cb(v.grid);
  for (int k = 0; k < 3; ++k) {
    ScalarField bk = sharp.B.comp[std::size_t(k)];
    for (int j = 0; j < 3; ++j) {
      Index3 alpha{0, 0, 0};
      alpha[j] = 1;
      ScalarField t = derivative_D(ca.entry(j, k), alpha, m);
      t *= 2.0;
      bk -= t;
    }
    cb.comp[std::size_t(k)] = std::move(bk);
  }
  ScalarField cq = sharp.q;
  for (int j = 0; j < 3; ++j) {
    Index3 alpha{0, 0, 0};
    alpha[j] = 1;
    cq -= derivative_D(cb.comp[std::size_t(j)], alpha, m);
  }
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      Index3 alpha{0, 0, 0};
      alpha[j] += 1;
      alpha[k] += 1;
      ScalarField t = derivative_D(ca.entry(j, k), alpha, m);
      if (j != k) t *= 2.0;
      cq -= t;
    }
  ScalarField out = v;
  for (int r = 0; r < m; ++r) {
    ScalarField t = laplacian(out);
    t *= -1.0;
    out = std::move(t);
  }
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      Index3 alpha{0, 0, 0};
      alpha[j] += 1;
      alpha[k] += 1;
      ScalarField t = derivative_D(detail::pointwise(ca.entry(j, k), v), alpha, m);
      if (j != k) t *= 2.0;
      out += t;
    }
  for (int j = 0; j < 3; ++j) {
    Index3 alpha{0, 0, 0};
    alpha[j] = 1;
    out += derivative_D(detail::pointwise(cb.comp[std::size_t(j)], v), alpha, m);
  }
  out += detail::pointwise(cq, v);
  return out;
}

// ---------------------------------------------------------------------------
// Conjugated operator
// ---------------------------------------------------------------------------

// e^{-Phi} h^{2m} L e^{Phi} u for the linear weight Phi = zvec.x / h, built
// term by term from stencils and coefficient fields; no exponential is ever
// formed.  With z = zvec:
//   [ -h^2 Lap - 2h z.grad - (z.z) ]^m u
//   - h^{2m-2} sum A_jk (z_j + h d_j)(z_k + h d_k) u
//   - i h^{2m-1} sum B_j (z_j u + h d_j u) + h^{2m} q u.
inline ScalarField conjugated_apply(const CoefficientSet& cs, const CVec3& zvec, double h, const ScalarField& u) {
  if (!(h > 0.0)) throw ConfigError("conjugated operator: h must be positive");
  u.require_same_grid(cs.q);
  int m = cs.m;
  Cplx z2 = dot(zvec, zvec);
  ScalarField v = u;
  for (int r = 0; r < m; ++r) {
    ScalarField t = laplacian(v);
    t *= -h * h;
    for (int d = 0; d < 3; ++d) {
      ScalarField g = d_axis(v, d);
      g *= -2.0 * h * zvec[std::size_t(d)];
      t += g;
    }
    ScalarField zz = v;
    zz *= -z2;
    t += zz;
    v = std::move(t);
  }
  ScalarField out = std::move(v);
  double hA = -std::pow(h, 2 * m - 2);
  std::array<ScalarField, 3> du;
  for (int d = 0; d < 3; ++d) du[std::size_t(d)] = d_axis(u, d);
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      Index3 alpha{0, 0, 0};
      alpha[j] += 1;
      alpha[k] += 1;
      ScalarField term = derivative(u, alpha, m);
      term *= h * h;
      ScalarField t1 = du[std::size_t(k)];
      t1 *= h * zvec[std::size_t(j)];
      term += t1;
      ScalarField t2 = du[std::size_t(j)];
      t2 *= h * zvec[std::size_t(k)];
      term += t2;
      ScalarField t0 = u;
      t0 *= zvec[std::size_t(j)] * zvec[std::size_t(k)];
      term += t0;
      ScalarField contrib = detail::pointwise(cs.A.entry(j, k), term);
      contrib *= (j == k) ? hA : 2.0 * hA;
      out += contrib;
    }
  Cplx hB = Cplx(0.0, -1.0) * std::pow(h, 2 * m - 1);
  for (int j = 0; j < 3; ++j) {
    ScalarField term = du[std::size_t(j)];
    term *= h;
    ScalarField t0 = u;
    t0 *= zvec[std::size_t(j)];
    term += t0;
    ScalarField contrib = detail::pointwise(cs.B.comp[std::size_t(j)], term);
    contrib *= hB;
    out += contrib;
  }
  ScalarField qq = detail::pointwise(cs.q, u);
  qq *= std::pow(h, 2 * m);
  out += qq;
  return out;
}

namespace detail {

// L2 norm over nodes inside the ball of the given radius (all interior, unit
// trapezoid weight).
inline double ball_l2(const ScalarField& f, double radius) {
  const Grid& g = f.grid;
  std::vector<double> terms;
  terms.reserve(g.size());
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 p = g.point(i, j, k);
        if (dot(p, p) > radius * radius) continue;
        terms.push_back(std::norm(f.at(i, j, k)));
      }
  double cell = g.spacing * g.spacing * g.spacing;
  return std::sqrt(cell * pairwise_sum(terms));
}

}  // namespace detail

// Geometric-optics amplitude pair for one frame: a0 from the closed-form
// catalogue, a1 from the transport solve against this coefficient set.
struct CgoAmplitudes {
  ScalarField a0;
  ScalarField a1;
  double transport_residual = 0.0;
  bool decay_warning = false;
};

inline CgoAmplitudes cgo_amplitudes(const CoefficientSet& cs, const Frame& fr, const AmplitudeKind& kind) {
  const Grid& g = cs.grid();
  int m = cs.m;
  CgoAmplitudes out;
  out.a0 = amplitude_a0(kind, fr, g, m);
  AmplitudeResult a1 = cs.analytic() ? amplitude_a1_analytic(cs, fr, kind, m, g)
                                     : amplitude_a1(cs, fr, out.a0, m);
  out.a1 = std::move(a1.a1);
  out.transport_residual = a1.residual;
  out.decay_warning = a1.decay_warning;
  return out;
}

// L2 norm over the support ball of the conjugated operator applied to
// a0 + h a1.  Decays like h^{m+2} when a1 solves its transport equation, up
// to the transport residual entering at order h^{m+1}.
inline double conjugated_residual(const CoefficientSet& cs, const Frame& fr, double h, const CgoAmplitudes& amps) {
  if (!(h > 0.0 && h < 1.0)) throw ConfigError("conjugated residual: h must lie in (0, 1)");
  amps.a0.require_same_grid(cs.q);
  amps.a1.require_same_grid(cs.q);
  ScalarField w = amps.a1;
  w *= h;
  w += amps.a0;
  ScalarField res = conjugated_apply(cs, fr.zeta(), h, w);
  return detail::ball_l2(res, kSupportRadius);
}

// ---------------------------------------------------------------------------
// Conjugation cross-check
// ---------------------------------------------------------------------------

namespace detail {

// Amplitude p(x) e^{c.x} with a complex exponent vector, closed under the
// derivative algebra of both conjugation routes.
struct CExpAmp {
  Poly3 p;
  CVec3 c{Cplx{}, Cplx{}, Cplx{}};

  CExpAmp d(int axis) const { return {p.deriv(axis) + p * c[std::size_t(axis)], c}; }
  CExpAmp lap() const {
    CExpAmp out{Poly3{}, c};
    for (int axis = 0; axis < 3; ++axis) out.p += d(axis).d(axis).p;
    return out;
  }
  Cplx eval(const Vec3& x) const { return p.eval(x) * std::exp(dot(c, x)); }
};

}  // namespace detail

// Cross-check of the term-by-term conjugation against honest conjugation of
// the exponential.  Both routes evaluate e^{-zeta.x/h} h^{2m} L(e^{zeta.x/h} a0)
// on the support-ball nodes: the first through the conjugated term list in
// exact amplitude algebra, the second by applying L to the exponential
// amplitude in closed form and unwrapping the sampled exponential
// numerically.  The mathematics is identical, the floating-point paths are
// not; the relative gap is returned.  Requires analytic coefficients, and
// h < 0.25 is rejected because the unwrap then multiplies exponentials large
// enough to wash out the comparison.
inline double conjugation_cross_check(const CoefficientSet& cs, const Frame& fr, double h,
                                      const AmplitudeKind& kind) {
  if (!cs.analytic()) throw ConfigError("conjugation cross-check: coefficient set has no evaluators");
  if (!(h >= 0.3 && h < 1.0))
    throw ConfigError("conjugation cross-check: h must lie in [0.3, 1) to keep the unwrap well scaled");
  const Grid& g = cs.grid();
  int m = cs.m;
  CVec3 zeta = fr.zeta();
  AnalyticAmp a0 = amplitude_a0_analytic(kind, fr, m);
  detail::CExpAmp w{a0.p, {Cplx(0.0, a0.b[0]), Cplx(0.0, a0.b[1]), Cplx(0.0, a0.b[2])}};

  // Symbolic route: conjugated terms in amplitude algebra.
  Cplx z2 = dot(zeta, zeta);
  detail::CExpAmp poly = w;
  for (int r = 0; r < m; ++r) {
    detail::CExpAmp t{poly.lap().p * Cplx(-h * h), poly.c};
    for (int d = 0; d < 3; ++d) t.p += poly.d(d).p * (Cplx(-2.0 * h) * zeta[std::size_t(d)]);
    t.p += poly.p * (-z2);
    poly = std::move(t);
  }
  std::array<std::array<detail::CExpAmp, 3>, 3> second;
  std::array<detail::CExpAmp, 3> first;
  std::array<detail::CExpAmp, 3> dw;
  for (int d = 0; d < 3; ++d) dw[std::size_t(d)] = w.d(d);
  for (int j = 0; j < 3; ++j) {
    first[std::size_t(j)] = {w.p * zeta[std::size_t(j)] + dw[std::size_t(j)].p * Cplx(h), w.c};
    for (int k = 0; k < 3; ++k) {
      Poly3 p = w.p * (zeta[std::size_t(j)] * zeta[std::size_t(k)]);
      p += dw[std::size_t(k)].p * (Cplx(h) * zeta[std::size_t(j)]);
      p += dw[std::size_t(j)].p * (Cplx(h) * zeta[std::size_t(k)]);
      p += dw[std::size_t(j)].d(k).p * Cplx(h * h);
      second[std::size_t(j)][std::size_t(k)] = {std::move(p), w.c};
    }
  }

  // Direct route: L applied to the exponential amplitude in closed form.
  detail::CExpAmp full{w.p, {w.c[0] + zeta[0] / h, w.c[1] + zeta[1] / h, w.c[2] + zeta[2] / h}};
  detail::CExpAmp lpoly = full;
  for (int r = 0; r < m; ++r) lpoly = {lpoly.lap().p * Cplx(-1.0), lpoly.c};
  std::array<std::array<detail::CExpAmp, 3>, 3> dd;
  std::array<detail::CExpAmp, 3> dfull;
  for (int d = 0; d < 3; ++d) dfull[std::size_t(d)] = full.d(d);
  for (int j = 0; j < 3; ++j)
    for (int k = 0; k < 3; ++k) dd[std::size_t(j)][std::size_t(k)] = dfull[std::size_t(j)].d(k);

  double hA = std::pow(h, 2 * m - 2);
  double hB = std::pow(h, 2 * m - 1);
  double hq = std::pow(h, 2 * m);
  std::vector<double> diff2, ref2;
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 x = g.point(i, j, k);
        if (dot(x, x) > kSupportRadius * kSupportRadius) continue;
        auto A = cs.A_eval(x);
        CVec3 B = cs.B_eval(x);
        Cplx q = cs.q_eval(x);
        Cplx sym = poly.eval(x);
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) sym -= hA * A[std::size_t(a)][std::size_t(b)] * second[std::size_t(a)][std::size_t(b)].eval(x);
        for (int a = 0; a < 3; ++a) sym += Cplx(0.0, -1.0) * hB * B[std::size_t(a)] * first[std::size_t(a)].eval(x);
        sym += hq * q * w.eval(x);

        Cplx lval = lpoly.eval(x);
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) lval -= A[std::size_t(a)][std::size_t(b)] * dd[std::size_t(a)][std::size_t(b)].eval(x);
        for (int a = 0; a < 3; ++a) lval += Cplx(0.0, -1.0) * B[std::size_t(a)] * dfull[std::size_t(a)].eval(x);
        lval += q * full.eval(x);
        Cplx direct = hq * std::exp(-dot(zeta, x) / h) * lval;

        diff2.push_back(std::norm(sym - direct));
        ref2.push_back(std::norm(sym));
      }
  double num = std::sqrt(pairwise_sum(diff2));
  double den = std::sqrt(pairwise_sum(ref2));
  if (den == 0.0) throw DataInconsistencyError("conjugation cross-check: reference route vanished");
  return num / den;
}

// ---------------------------------------------------------------------------
// Geometric-optics remainder
// ---------------------------------------------------------------------------

namespace detail {

// Sparse matrix of the conjugated operator's second-order core
// T = -h^2 Lap - 2h zvec.grad - (zvec.zvec), stencil rows matching
// conjugated_apply exactly.
inline SparseC conjugated_core_matrix(const Grid& g, const CVec3& zvec, double h) {
  Eigen::Index total = Eigen::Index(g.size());
  SparseC T(total, total);
  for (int d = 0; d < 3; ++d) {
    T -= Cplx(h * h) * second_axis_matrix(g, d).cast<Cplx>();
    T -= 2.0 * h * zvec[std::size_t(d)] * d_axis_matrix(g, d).cast<Cplx>();
  }
  SparseC I(total, total);
  I.setIdentity();
  T -= dot(zvec, zvec) * I;
  T.makeCompressed();
  return T;
}

// Sparse matrix of the conjugated perturbation part
// -h^{2m-2} sum A_jk (z_j + h d_j)(z_k + h d_k) - i h^{2m-1} sum B_j (z_j + h d_j)
// + h^{2m} q, with the same derivative compositions conjugated_apply uses.
inline SparseC conjugated_pert_matrix(const CoefficientSet& cs, const CVec3& zvec, double h) {
  const Grid& g = cs.grid();
  int m = cs.m;
  Eigen::Index total = Eigen::Index(g.size());
  std::array<SparseC, 3> F, S;
  for (int d = 0; d < 3; ++d) {
    F[std::size_t(d)] = d_axis_matrix(g, d).cast<Cplx>();
    S[std::size_t(d)] = second_axis_matrix(g, d).cast<Cplx>();
  }
  SparseC I(total, total);
  I.setIdentity();
  auto diag_of = [&](const ScalarField& f, Cplx scale) {
    Eigen::VectorXcd v(total);
    for (Eigen::Index t = 0; t < total; ++t) v[t] = scale * f.values[std::size_t(t)];
    return v;
  };
  SparseC P(total, total);
  double hA = -std::pow(h, 2 * m - 2);
  for (int j = 0; j < 3; ++j)
    for (int k = j; k < 3; ++k) {
      SparseC op = zvec[std::size_t(j)] * zvec[std::size_t(k)] * I;
      op += Cplx(h) * zvec[std::size_t(j)] * F[std::size_t(k)];
      op += Cplx(h) * zvec[std::size_t(k)] * F[std::size_t(j)];
      op += Cplx(h * h) * ((j == k) ? S[std::size_t(j)] : SparseC((F[std::size_t(k)] * F[std::size_t(j)]).eval()));
      Eigen::VectorXcd c = diag_of(cs.A.entry(j, k), (j == k) ? hA : 2.0 * hA);
      P += SparseC((c.asDiagonal() * op).eval());
    }
  Cplx hB = Cplx(0.0, -1.0) * std::pow(h, 2 * m - 1);
  for (int j = 0; j < 3; ++j) {
    SparseC op = zvec[std::size_t(j)] * I;
    op += Cplx(h) * F[std::size_t(j)];
    Eigen::VectorXcd c = diag_of(cs.B.comp[std::size_t(j)], hB);
    P += SparseC((c.asDiagonal() * op).eval());
  }
  {
    Eigen::VectorXcd c = diag_of(cs.q, std::pow(h, 2 * m));
    P += SparseC((c.asDiagonal() * I).eval());
  }
  P.makeCompressed();
  return P;
}

}  // namespace detail

// Remainder of the exponential solution, i.e. the corrector r with
// (conjugated operator)(a0 + h a1 + r) = 0.  The conjugated equation is
// solved directly in cascade form over the unknowns y_k = T^k r with zero
// boundary data on every y_k (never via the exponential field, which a fixed
// grid cannot resolve once h approaches the spacing).
inline ScalarField cgo_remainder(const CoefficientSet& cs, const Frame& fr, double h, const CgoAmplitudes& amps) {
  if (!(h > 0.0 && h < 1.0)) throw ConfigError("cgo remainder: h must lie in (0, 1)");
  amps.a0.require_same_grid(cs.q);
  amps.a1.require_same_grid(cs.q);
  const Grid& g = cs.grid();
  int m = cs.m;
  CVec3 zeta = fr.zeta();
  ScalarField w = amps.a1;
  w *= h;
  w += amps.a0;
  ScalarField forcing = conjugated_apply(cs, zeta, h, w);

  BoundaryIndex bidx(g);
  std::vector<std::ptrdiff_t> islot(g.size(), -1);
  std::vector<Eigen::Index> interior;
  for (std::size_t f = 0; f < g.size(); ++f)
    if (bidx.boundary_of_flat[f] < 0) {
      islot[f] = std::ptrdiff_t(interior.size());
      interior.push_back(Eigen::Index(f));
    }
  Eigen::Index ni = Eigen::Index(interior.size());

  detail::SparseC T = detail::conjugated_core_matrix(g, zeta, h);
  detail::SparseC P = detail::conjugated_pert_matrix(cs, zeta, h);
  auto interior_block = [&](const detail::SparseC& full) {
    std::vector<Eigen::Triplet<Cplx>> t;
    t.reserve(std::size_t(full.nonZeros()));
    for (Eigen::Index c = 0; c < full.outerSize(); ++c)
      for (detail::SparseC::InnerIterator it(full, c); it; ++it) {
        std::ptrdiff_t ri = islot[std::size_t(it.row())];
        std::ptrdiff_t ci = islot[std::size_t(it.col())];
        if (ri >= 0 && ci >= 0) t.emplace_back(Eigen::Index(ri), Eigen::Index(ci), it.value());
      }
    detail::SparseC out(ni, ni);
    out.setFromTriplets(t.begin(), t.end());
    return out;
  };
  detail::SparseC T_ii = interior_block(T);
  detail::SparseC P_ii = interior_block(P);

  std::vector<Eigen::Triplet<Cplx>> trips;
  trips.reserve(std::size_t(m) * (std::size_t(T_ii.nonZeros()) + std::size_t(ni)) + std::size_t(P_ii.nonZeros()));
  for (int k = 0; k < m; ++k)
    for (Eigen::Index c = 0; c < T_ii.outerSize(); ++c)
      for (detail::SparseC::InnerIterator it(T_ii, c); it; ++it)
        trips.emplace_back(Eigen::Index(k) * ni + it.row(), Eigen::Index(k) * ni + it.col(), it.value());
  for (int k = 0; k + 1 < m; ++k)
    for (Eigen::Index r = 0; r < ni; ++r)
      trips.emplace_back(Eigen::Index(k) * ni + r, Eigen::Index(k + 1) * ni + r, Cplx(-1.0));
  for (Eigen::Index c = 0; c < P_ii.outerSize(); ++c)
    for (detail::SparseC::InnerIterator it(P_ii, c); it; ++it)
      trips.emplace_back(Eigen::Index(m - 1) * ni + it.row(), it.col(), it.value());
  detail::SparseC M(Eigen::Index(m) * ni, Eigen::Index(m) * ni);
  M.setFromTriplets(trips.begin(), trips.end());
  M.makeCompressed();
  Eigen::SparseLU<detail::SparseC> lu;
  lu.compute(M);
  if (lu.info() != Eigen::Success)
    throw SolverError("cgo remainder: conjugated system factorization failed");
  Eigen::VectorXcd b = Eigen::VectorXcd::Zero(Eigen::Index(m) * ni);
  for (Eigen::Index s = 0; s < ni; ++s)
    b[Eigen::Index(m - 1) * ni + s] = -forcing.values[std::size_t(interior[std::size_t(s)])];
  Eigen::VectorXcd x = lu.solve(b);
  if (lu.info() != Eigen::Success) throw SolverError("cgo remainder: back substitution failed");
  ScalarField r(g);
  for (Eigen::Index s = 0; s < ni; ++s) r.values[std::size_t(interior[std::size_t(s)])] = x[s];
  return r;
}

// Two-point decay rate of the remainder norm: slope of log|r|_{H2_scl}
// against log h between h_hi and h_lo.  The grid resolves the conjugated
// core's near-characteristic modes once h falls below about three spacings;
// inside that regime the box solve amplifies instead of decaying, so rates
// should be read on the resolvable side (h_lo of at least ~3x spacing).
inline double remainder_decay_rate(const CoefficientSet& cs, const Frame& fr, double h_hi, double h_lo,
                                   const CgoAmplitudes& amps) {
  if (!(h_lo > 0.0 && h_lo < h_hi && h_hi < 1.0))
    throw ConfigError("remainder decay rate: need 0 < h_lo < h_hi < 1");
  double n_hi = semiclassical_norm(cgo_remainder(cs, fr, h_hi, amps), 2.0, h_hi);
  double n_lo = semiclassical_norm(cgo_remainder(cs, fr, h_lo, amps), 2.0, h_lo);
  if (n_lo == 0.0 || n_hi == 0.0) throw DataInconsistencyError("remainder decay rate: zero remainder norm");
  return std::log(n_hi / n_lo) / std::log(h_hi / h_lo);
}

// Full exponential solution e^{zeta.x/h} (a0 + h a1 + r); r may be empty.
inline ScalarField cgo_field(const Frame& fr, double h, const CgoAmplitudes& amps, const ScalarField* r = nullptr) {
  if (!(h > 0.0 && h < 1.0)) throw ConfigError("cgo field: h must lie in (0, 1)");
  const Grid& g = amps.a0.grid;
  ScalarField w = amps.a1;
  w *= h;
  w += amps.a0;
  if (r) w += *r;
  CVec3 zeta = fr.zeta();
  ScalarField out(g);
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 x = g.point(i, j, k);
        out.at(i, j, k) = std::exp(dot(zeta, x) / h) * w.at(i, j, k);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Gauge transform (m = 2)
// ---------------------------------------------------------------------------

struct GaugePair {
  CoefficientSet plain;         // operator slots of the factored pair (A, q)
  CoefficientSet shifted;       // operator slots after the tensor shift
  SymTensorField tensor_shift;  // Hess(phi) + grad phi (x) grad phi
};

namespace detail {

// Operator slots of sum_kl (D_kD_l + A_kl)^2 + q:
//   A' = 2A, B'_l = 2 sum_k D_k A_kl,
//   q' = sum_kl (D_kD_l A_kl + A_kl^2) + q.
inline CoefficientSet expand_factored(const SymTensorField& A, const ScalarField& q0) {
  const Grid& g = A.grid();
  CoefficientSet out(2, g);
  for (int c = 0; c < SymTensorField::kPairs; ++c) {
    out.A.comp[std::size_t(c)] = A.comp[std::size_t(c)];
    out.A.comp[std::size_t(c)] *= 2.0;
  }
  for (int l = 0; l < 3; ++l) {
    ScalarField bl(g);
    for (int k = 0; k < 3; ++k) {
      Index3 alpha{0, 0, 0};
      alpha[k] = 1;
      ScalarField t = derivative_D(A.entry(k, l), alpha, 2);
      t *= 2.0;
      bl += t;
    }
    out.B.comp[std::size_t(l)] = std::move(bl);
  }
  ScalarField q = q0;
  for (int k = 0; k < 3; ++k)
    for (int l = k; l < 3; ++l) {
      double mult = (k == l) ? 1.0 : 2.0;
      Index3 alpha{0, 0, 0};
      alpha[k] += 1;
      alpha[l] += 1;
      ScalarField t = derivative_D(A.entry(k, l), alpha, 2);
      t *= mult;
      q += t;
      ScalarField sq = pointwise(A.entry(k, l), A.entry(k, l));
      sq *= mult;
      q += sq;
    }
  out.q = std::move(q);
  return out;
}

}  // namespace detail

// Multiplicative gauge A -> A + Hess(phi) + grad phi (x) grad phi on the
// factored fourth-order form sum (D_kD_l + A_kl)^2 + q, with both members
// returned in operator slots.  phi must vanish identically outside the
// coefficient support ball and on every node within four cells of a face, so
// e^phi is exactly 1 near the boundary and the shifted tensor keeps the
// support constraint.  phi = 0 reproduces the plain slots bitwise.
inline GaugePair gauge_transform(const CoefficientSet& cs, const ScalarField& phi) {
  if (cs.m != 2) throw ConfigError("gauge transform: defined for the fourth-order operator (m = 2)");
  if (sup_norm(cs.B) != 0.0)
    throw ConfigError("gauge transform: the factored form has no first-order slot; B must vanish");
  phi.require_same_grid(cs.q);
  const Grid& g = phi.grid;
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        if (phi.at(i, j, k) == Cplx{}) continue;
        Vec3 p = g.point(i, j, k);
        int margin = std::min({i, j, k, g.pts - 1 - i, g.pts - 1 - j, g.pts - 1 - k});
        if (dot(p, p) > kSupportRadius * kSupportRadius || margin <= 4)
          throw ConfigError("gauge transform: the weight must vanish outside the support ball and near the boundary");
      }
  std::array<ScalarField, 3> grad;
  for (int d = 0; d < 3; ++d) {
    Index3 alpha{0, 0, 0};
    alpha[d] = 1;
    grad[std::size_t(d)] = derivative(phi, alpha, 2);
  }
  GaugePair out;
  out.tensor_shift = SymTensorField(g);
  for (int k = 0; k < 3; ++k)
    for (int l = k; l < 3; ++l) {
      Index3 alpha{0, 0, 0};
      alpha[k] += 1;
      alpha[l] += 1;
      ScalarField s = derivative(phi, alpha, 2);
      s += detail::pointwise(grad[std::size_t(k)], grad[std::size_t(l)]);
      out.tensor_shift.entry(k, l) = std::move(s);
    }
  SymTensorField shifted_A = cs.A;
  for (int c = 0; c < SymTensorField::kPairs; ++c) shifted_A.comp[std::size_t(c)] += out.tensor_shift.comp[std::size_t(c)];
  out.plain = detail::expand_factored(cs.A, cs.q);
  out.shifted = detail::expand_factored(shifted_A, cs.q);
  return out;
}

// ---------------------------------------------------------------------------
// Carleman quotient
// ---------------------------------------------------------------------------

// h^m |u|_{H^{s+2m}_scl} / |h^{2m} e^{x1/h} L e^{-x1/h} u|_{H^s_scl} for the
// linear weight along the first axis.  Bounded quotients over an h-sweep are
// the quantitative content of the a-priori estimate behind the solvability
// construction.
inline double carleman_ratio(const ScalarField& u, const CoefficientSet& cs, double h, double s) {
  if (!(h > 0.0 && h < 1.0)) throw ConfigError("carleman: h must lie in (0, 1)");
  int m = cs.m;
  if (s < -2.0 * m || s > 0.0) throw ConfigError("carleman: Sobolev index must lie in [-2m, 0]");
  u.require_same_grid(cs.q);
  CVec3 zvec{Cplx(-1.0), Cplx{}, Cplx{}};
  ScalarField image = conjugated_apply(cs, zvec, h, u);
  double num = std::pow(h, m) * semiclassical_norm(u, s + 2.0 * m, h);
  double den = semiclassical_norm(image, s, h);
  if (den == 0.0) throw DataInconsistencyError("carleman: conjugated image vanishes");
  return num / den;
}

}  // namespace polyharm
