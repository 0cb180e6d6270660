#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "polyharm/derivative.hpp"
#include "polyharm/fourier.hpp"
#include "polyharm/operator.hpp"

namespace polyharm {

// Pairing scale used when moments are extracted from boundary data.  Small
// enough that the quadratic weight row dominates its h-tail, large enough to
// stay above the pre-resonant window of the conjugated solve.
inline constexpr double kDefaultMomentH = 0.15;

// Frequency step of the auxiliary off-lattice moments that feed the
// derivative formulas.  Boundary-data moments carry an O(h) noise floor, so
// their step trades truncation against cancellation differently.
inline constexpr double kAuxStepOracle = kPi / 100.0;
inline constexpr double kAuxStepDn = kPi / 20.0;

enum class MomentMode { oracle, dn };

// ---------------------------------------------------------------------------
// Moment keys and tables
// ---------------------------------------------------------------------------

// One moment functional: dual-lattice frequency xi = (pi/half) k, one of the
// four frames attached to xi (omega = mu_p, omega_tilde = sign * mu_q), the
// amplitude kind pair, and the weight order (2, 1, 0) the value realizes.
struct MomentKey {
  Index3 k{0, 0, 0};
  int p = 1;
  int q = 2;
  int sign = 1;
  AmplitudeTag ku = AmplitudeTag::ExpMinus;
  AmplitudeTag kv = AmplitudeTag::One;
  int order = 2;

  friend bool operator<(const MomentKey& a, const MomentKey& b) {
    return std::tie(a.k, a.p, a.q, a.sign, a.ku, a.kv, a.order) <
           std::tie(b.k, b.p, b.q, b.sign, b.ku, b.kv, b.order);
  }
  friend bool operator==(const MomentKey& a, const MomentKey& b) {
    return std::tie(a.k, a.p, a.q, a.sign, a.ku, a.kv, a.order) ==
           std::tie(b.k, b.p, b.q, b.sign, b.ku, b.kv, b.order);
  }
};

namespace detail {

// Slot of (p, q, sign) in the frames_for_xi ordering.
inline int frame_slot(int p, int q, int sign) {
  if (p == 1 && q == 2) return sign > 0 ? 0 : 1;
  if (p == 2 && q == 1) return sign > 0 ? 2 : 3;
  throw ConfigError("moment key: frame labels must satisfy {p,q} = {1,2}");
}

inline const std::array<std::array<int, 3>, 4>& frame_labels() {
  static const std::array<std::array<int, 3>, 4> labels = {
      {{1, 2, 1}, {1, 2, -1}, {2, 1, 1}, {2, 1, -1}}};
  return labels;
}

inline bool tag_carries_xi(AmplitudeTag t) {
  return t == AmplitudeTag::ExpMinus || t == AmplitudeTag::ExpPlus ||
         t == AmplitudeTag::ExpPlusOmegaLin;
}

// Odd total power of omega.x in the amplitude: such factors flip sign when
// the weight vector omega is negated for the dual-side field.
inline bool tag_odd_in_omega(AmplitudeTag t) {
  return t == AmplitudeTag::OmegaLin || t == AmplitudeTag::ExpPlusOmegaLin;
}

inline AmplitudeKind with_xi(AmplitudeTag tag, const Vec3& xi) {
  AmplitudeKind k;
  k.tag = tag;
  if (tag_carries_xi(tag)) k.xi = xi;
  return k;
}

inline AmplitudeTag tag_from_name(const std::string& s) {
  for (AmplitudeTag t :
       {AmplitudeTag::One, AmplitudeTag::ExpMinus, AmplitudeTag::ExpPlus, AmplitudeTag::OmegaLin,
        AmplitudeTag::OmegaQuad, AmplitudeTag::ExpPlusOmegaLin})
    if (s == amplitude_name(t)) return t;
  throw DataInconsistencyError("moment table: unknown amplitude kind '" + s + "'");
}

}  // namespace detail

// Dual-lattice record of moment values over the ball 0 < |xi| <= k_max.  In
// dn mode each stored value is an h^order-scaled boundary pairing, so it
// carries the neighbouring weight rows as O(h) contamination; mode and h
// travel with the table so the peeling stages can model that.
struct MomentTable {
  Grid grid{3};
  double k_max = 0.0;
  MomentMode mode = MomentMode::oracle;
  double h = 0.0;
  std::map<MomentKey, Cplx> entries;

  Vec3 xi_of(const Index3& k) const {
    return {grid.freq(k[0]), grid.freq(k[1]), grid.freq(k[2])};
  }
  Index3 index_of(const Vec3& xi) const {
    double unit = kPi / grid.half;
    Index3 k{};
    for (int d = 0; d < 3; ++d) {
      k[std::size_t(d)] = int(std::llround(xi[std::size_t(d)] / unit));
      if (std::abs(xi[std::size_t(d)] - k[std::size_t(d)] * unit) > 1e-9)
        throw DataInconsistencyError("moment table: frequency off the dual lattice");
    }
    return k;
  }

  void set(const MomentKey& key, Cplx v) { entries[key] = v; }
  bool has(const MomentKey& key) const { return entries.count(key) != 0; }
  Cplx at(const MomentKey& key) const {
    auto it = entries.find(key);
    if (it == entries.end()) throw DataInconsistencyError("moment table: missing key");
    return it->second;
  }

  void save_csv(std::ostream& os) const {
    os << "# polyharm moments n=" << grid.pts << " half=" << grid.half << " k_max=" << k_max
       << " mode=" << (mode == MomentMode::oracle ? "oracle" : "dn") << " h=" << h << "\n";
    os << "xi1,xi2,xi3,p,q,sign,kind_a0tilde,kind_a0,order,re,im\n";
    char buf[360];
    for (const auto& [key, val] : entries) {
      Vec3 xi = xi_of(key.k);
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%d,%d,%d,%s,%s,%d,%.17g,%.17g\n", xi[0],
                    xi[1], xi[2], key.p, key.q, key.sign, amplitude_name(key.ku),
                    amplitude_name(key.kv), key.order, val.real(), val.imag());
      os << buf;
    }
  }

  static MomentTable load_csv(std::istream& is) {
    MomentTable out;
    std::string line;
    if (!std::getline(is, line) || line.rfind("# polyharm moments", 0) != 0)
      throw DataInconsistencyError("moment table: missing metadata line");
    {
      int n = 0;
      double half = 0.0, kmax = 0.0, h = 0.0;
      char mode[16] = {0};
      if (std::sscanf(line.c_str(), "# polyharm moments n=%d half=%lf k_max=%lf mode=%15s h=%lf",
                      &n, &half, &kmax, mode, &h) != 5)
        throw DataInconsistencyError("moment table: malformed metadata line");
      out.grid = Grid(n, half);
      out.k_max = kmax;
      out.h = h;
      std::string ms(mode);
      if (ms == "oracle")
        out.mode = MomentMode::oracle;
      else if (ms == "dn")
        out.mode = MomentMode::dn;
      else
        throw DataInconsistencyError("moment table: unknown mode '" + ms + "'");
    }
    if (!std::getline(is, line)) throw DataInconsistencyError("moment table: missing column header");
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::array<std::string, 11> cells;
      for (auto& c : cells)
        if (!std::getline(ls, c, ',')) throw DataInconsistencyError("moment table: short row");
      MomentKey key;
      key.k = out.index_of({std::stod(cells[0]), std::stod(cells[1]), std::stod(cells[2])});
      key.p = std::stoi(cells[3]);
      key.q = std::stoi(cells[4]);
      key.sign = std::stoi(cells[5]);
      key.ku = detail::tag_from_name(cells[6]);
      key.kv = detail::tag_from_name(cells[7]);
      key.order = std::stoi(cells[8]);
      out.entries[key] = Cplx(std::stod(cells[9]), std::stod(cells[10]));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Moment evaluation: quadrature route
// ---------------------------------------------------------------------------

namespace detail {

// Flattened sparse polynomial: map-free evaluation for the node loop.
struct FlatPoly {
  struct Term {
    Index3 e{0, 0, 0};
    Cplx c;
  };
  std::vector<Term> terms;

  static FlatPoly of(const Poly3& p, bool conjugate = false) {
    FlatPoly out;
    for (const auto& [e, c] : p.terms) out.terms.push_back({e, conjugate ? std::conj(c) : c});
    return out;
  }
  Cplx eval(const Vec3& x) const {
    Cplx acc{};
    for (const Term& t : terms) {
      Cplx v = t.c;
      for (int d = 0; d < 3; ++d)
        for (int r = 0; r < t.e[std::size_t(d)]; ++r) v *= x[std::size_t(d)];
      acc += v;
    }
    return acc;
  }
};

// Weight-row integrand for one amplitude pair on one frame:
//   order 2:  zeta^T A zeta  au conj(av)
//   order 1:  [(B.zeta) au + 2 (A zeta).(D au)] conj(av)
//   order 0:  [q au + B.(D au) + sum_jk A_jk D_j D_k au] conj(av)
// with D = (1/i) d.  The oscillation of both amplitudes is separable, so it
// is evaluated from per-axis phase tables; only the polynomial factors and
// coefficient samples vary per node.
inline ScalarField moment_integrand(const CoefficientSet& diff, const Frame& fr,
                                    const AmplitudeKind& ku, const AmplitudeKind& kv, int order) {
  if (order < 0 || order > 2) throw UnsupportedOrderError("moment: order must be 0, 1, or 2");
  const Grid& g = diff.grid();
  const CVec3 zeta = fr.zeta();
  AnalyticAmp au = amplitude_a0_analytic(ku, fr, diff.m);
  AnalyticAmp av = amplitude_a0_analytic(kv, fr, diff.m);

  FlatPoly pu = FlatPoly::of(au.p);
  FlatPoly pv = FlatPoly::of(av.p, true);
  std::array<FlatPoly, 3> pu_d;
  std::array<FlatPoly, 6> pu_dd;  // xx, xy, xz, yy, yz, zz
  if (order <= 1)
    for (int a = 0; a < 3; ++a) pu_d[std::size_t(a)] = FlatPoly::of(au.d(a).p);
  if (order == 0) {
    int slot = 0;
    for (int a = 0; a < 3; ++a)
      for (int b = a; b < 3; ++b) pu_dd[std::size_t(slot++)] = FlatPoly::of(au.d(a).d(b).p);
  }

  Vec3 b_net = au.b - av.b;
  std::array<std::vector<Cplx>, 3> phase;
  for (int d = 0; d < 3; ++d) {
    phase[std::size_t(d)].resize(std::size_t(g.pts));
    for (int i = 0; i < g.pts; ++i)
      phase[std::size_t(d)][std::size_t(i)] = std::exp(Cplx(0.0, b_net[std::size_t(d)] * g.coord(i)));
  }

  static constexpr std::array<std::array<int, 2>, 6> pairs = {
      {{0, 0}, {0, 1}, {0, 2}, {1, 1}, {1, 2}, {2, 2}}};
  const ScalarField* Ac[6];
  for (int s = 0; s < 6; ++s)
    Ac[s] = &diff.A.entry(pairs[std::size_t(s)][0], pairs[std::size_t(s)][1]);
  const ScalarField* Bc[3] = {&diff.B.comp[0], &diff.B.comp[1], &diff.B.comp[2]};

  // zeta_j zeta_k with the off-diagonal double count folded in.
  std::array<Cplx, 6> zz;
  for (int s = 0; s < 6; ++s) {
    auto [a, b] = pairs[std::size_t(s)];
    zz[std::size_t(s)] = (a == b ? 1.0 : 2.0) * zeta[std::size_t(a)] * zeta[std::size_t(b)];
  }

  const Cplx inv_i(0.0, -1.0);
  ScalarField out(g);
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 x = g.point(i, j, k);
        Cplx val{};
        if (order == 2) {
          Cplx zaz{};
          for (int s = 0; s < 6; ++s) zaz += zz[std::size_t(s)] * Ac[s]->at(i, j, k);
          val = zaz * pu.eval(x);
        } else if (order == 1) {
          Cplx bz{};
          for (int a = 0; a < 3; ++a) bz += Bc[a]->at(i, j, k) * zeta[std::size_t(a)];
          val = bz * pu.eval(x);
          std::array<Cplx, 3> du;
          for (int a = 0; a < 3; ++a) du[std::size_t(a)] = inv_i * pu_d[std::size_t(a)].eval(x);
          for (int s = 0; s < 6; ++s) {
            auto [a, b] = pairs[std::size_t(s)];
            Cplx t = zeta[std::size_t(b)] * du[std::size_t(a)];
            if (a != b) t += zeta[std::size_t(a)] * du[std::size_t(b)];
            val += 2.0 * Ac[s]->at(i, j, k) * t;
          }
        } else {
          val = diff.q.at(i, j, k) * pu.eval(x);
          for (int a = 0; a < 3; ++a)
            val += Bc[a]->at(i, j, k) * inv_i * pu_d[std::size_t(a)].eval(x);
          for (int s = 0; s < 6; ++s) {
            auto [a, b] = pairs[std::size_t(s)];
            val -= (a == b ? 1.0 : 2.0) * Ac[s]->at(i, j, k) * pu_dd[std::size_t(s)].eval(x);
          }
        }
        out.at(i, j, k) = val * pv.eval(x) *
                          (phase[0][std::size_t(i)] * phase[1][std::size_t(j)] * phase[2][std::size_t(k)]);
      }
  return out;
}

inline void bind_xi(AmplitudeKind& k, const Vec3& xi) {
  if (!tag_carries_xi(k.tag)) return;
  if (norm(k.xi) > 0.0 && norm(k.xi - xi) > 1e-12 * std::max(1.0, norm(xi)))
    throw ConfigError("moment: kind frequency disagrees with the requested frequency");
  k.xi = xi;
}

}  // namespace detail

// Limiting moment functional evaluated by quadrature against a known
// coefficient difference.  The frame may sit at any nonzero frequency, not
// just on the dual lattice; oscillating kinds inherit xi.
inline Cplx moment_oracle(const CoefficientSet& diff, const Frame& fr, const Vec3& xi,
                          std::pair<AmplitudeKind, AmplitudeKind> kinds, int order) {
  if (norm(xi) == 0.0) throw ConfigError("moment: xi must be nonzero");
  detail::bind_xi(kinds.first, xi);
  detail::bind_xi(kinds.second, xi);
  return integrate(detail::moment_integrand(diff, fr, kinds.first, kinds.second, order));
}

// ---------------------------------------------------------------------------
// Moment evaluation: boundary-data route
// ---------------------------------------------------------------------------

namespace detail {

inline std::string quant_key(const Vec3& a, const Vec3& b, int tag, const Vec3& xi) {
  char buf[224];
  std::snprintf(buf, sizeof buf, "%lld:%lld:%lld|%lld:%lld:%lld|%d|%lld:%lld:%lld",
                std::llround(a[0] * 1e9), std::llround(a[1] * 1e9), std::llround(a[2] * 1e9),
                std::llround(b[0] * 1e9), std::llround(b[1] * 1e9), std::llround(b[2] * 1e9), tag,
                std::llround(xi[0] * 1e9), std::llround(xi[1] * 1e9), std::llround(xi[2] * 1e9));
  return std::string(buf);
}

inline std::string point_key(const Vec3& xi) { return quant_key(xi, {0, 0, 0}, 0, {0, 0, 0}); }

}  // namespace detail

// Extracts moment values from a pair of boundary maps.  The probing field
// rides the frame weight with its leading amplitude only; the dual field is
// an adjoint solve of the sign-flipped weight carrying the matching
// amplitude, so the boundary pairing reproduces the volume expansion
//   -I2/h^2 + I1/(ih) + I0 + O(h)
// of the weight rows.  The stored value for order r is the pairing times
// {1, ih, -h^2}, which isolates row r up to O(h) of its neighbours.  The
// true coefficients enter through the adjoint solve: a declared crime,
// repeated in every downstream report.  The three orders of one kind pair
// share a single pairing, so raw pairings are cached alongside the probe
// traces and dual fields.
class DnMomentSource {
 public:
  DnMomentSource(const DnMap& dn, const DnMap& dn_ref, CoefficientSet truth, double h)
      : dn_(&dn), dn_ref_(&dn_ref), truth_(std::move(truth)), h_(h) {
    if (!(h_ > 0.0 && h_ < 1.0)) throw ConfigError("dn moments: h must lie in (0, 1)");
    if (dn_->grid.pts != truth_.grid().pts || dn_ref_->grid.pts != truth_.grid().pts)
      throw ConfigError("dn moments: maps and coefficients must share the grid");
    if (dn_->m != truth_.m || dn_ref_->m != truth_.m)
      throw ConfigError("dn moments: operator order mismatch");
    adjoint_ = std::make_shared<NavierSystem>(truth_, true);
  }

  const CoefficientSet& truth() const { return truth_; }
  double h() const { return h_; }

  Cplx eval(const Frame& fr, const Vec3& xi, AmplitudeKind ku, AmplitudeKind kv, int order) const {
    if (order < 0 || order > 2) throw UnsupportedOrderError("dn moments: order must be 0, 1, or 2");
    if (norm(xi) == 0.0) throw ConfigError("dn moments: xi must be nonzero");
    detail::bind_xi(ku, xi);
    detail::bind_xi(kv, xi);
    Cplx pr = raw_pair(fr, ku, kv);
    switch (order) {
      case 0: return pr;
      case 1: return Cplx(0.0, h_) * pr;
      default: return -h_ * h_ * pr;
    }
  }

 private:
  Cplx raw_pair(const Frame& fr, const AmplitudeKind& ku, const AmplitudeKind& kv) const {
    std::string ukey = detail::quant_key(fr.omega, fr.omega_tilde, int(ku.tag), ku.xi);
    std::string vkey = detail::quant_key(fr.omega, fr.omega_tilde, int(kv.tag), kv.xi);
    std::string pkey = ukey + "&" + vkey;
    if (auto it = pcache_.find(pkey); it != pcache_.end()) return it->second;
    if (pcache_.size() > 96) pcache_.clear();

    const Grid& g = truth_.grid();
    const int m = truth_.m;
    auto fit = fcache_.find(ukey);
    if (fit == fcache_.end()) {
      if (fcache_.size() > 64) fcache_.clear();
      CgoAmplitudes amps;
      amps.a0 = amplitude_a0(ku, fr, g, m);
      amps.a1 = ScalarField(g);
      fit = fcache_.emplace(ukey, navier_traces(cgo_field(fr, h_, amps), m)).first;
    }
    auto vit = vcache_.find(vkey);
    if (vit == vcache_.end()) {
      if (vcache_.size() > 48) vcache_.clear();
      Frame fr_v(-1.0 * fr.omega, fr.omega_tilde, fr.xi);
      CgoAmplitudes amps;
      amps.a0 = amplitude_a0(kv, fr_v, g, m);
      // The flipped weight turns omega.x into -omega.x inside the amplitude;
      // undo it so the pairing realizes the amplitude the stages expect.
      if (detail::tag_odd_in_omega(kv.tag)) amps.a0 *= Cplx(-1.0);
      amps.a1 = ScalarField(g);
      ScalarField v = adjoint_->solve(navier_traces(cgo_field(fr_v, h_, amps), m)).u();
      vit = vcache_.emplace(vkey, std::move(v)).first;
    }
    Cplx pr = pair_dn(*dn_, *dn_ref_, fit->second, vit->second);
    pcache_.emplace(std::move(pkey), pr);
    return pr;
  }

  const DnMap* dn_;
  const DnMap* dn_ref_;
  CoefficientSet truth_;
  double h_;
  std::shared_ptr<NavierSystem> adjoint_;
  mutable std::map<std::string, NavierData> fcache_;
  mutable std::map<std::string, ScalarField> vcache_;
  mutable std::map<std::string, Cplx> pcache_;
};

inline Cplx moment_from_dn(const DnMap& dn, const DnMap& dn_ref, const Frame& fr, const Vec3& xi,
                           std::pair<AmplitudeKind, AmplitudeKind> kinds, int order,
                           const CoefficientSet& true_coeffs, double h = kDefaultMomentH) {
  DnMomentSource src(dn, dn_ref, true_coeffs, h);
  return src.eval(fr, xi, kinds.first, kinds.second, order);
}

// Uniform evaluation interface over both moment routes, so the recovery
// stages can request auxiliary off-lattice values without knowing the source.
struct MomentSource {
  std::function<Cplx(const Frame&, const Vec3&, const AmplitudeKind&, const AmplitudeKind&, int)>
      eval;
  MomentMode mode = MomentMode::oracle;
  double h = 0.0;
};

inline MomentSource oracle_source(CoefficientSet diff) {
  MomentSource s;
  s.mode = MomentMode::oracle;
  auto held = std::make_shared<CoefficientSet>(std::move(diff));
  s.eval = [held](const Frame& fr, const Vec3& xi, const AmplitudeKind& ku,
                  const AmplitudeKind& kv, int order) {
    return moment_oracle(*held, fr, xi, {ku, kv}, order);
  };
  return s;
}

inline MomentSource dn_source(const DnMap& dn, const DnMap& dn_ref, CoefficientSet truth,
                              double h = kDefaultMomentH) {
  MomentSource s;
  s.mode = MomentMode::dn;
  s.h = h;
  auto held = std::make_shared<DnMomentSource>(dn, dn_ref, std::move(truth), h);
  s.eval = [held](const Frame& fr, const Vec3& xi, const AmplitudeKind& ku,
                  const AmplitudeKind& kv, int order) { return held->eval(fr, xi, ku, kv, order); };
  return s;
}

// ---------------------------------------------------------------------------
// Plane-tensor algebra
// ---------------------------------------------------------------------------

// In-plane trace-free slice of a tensor transform at one frequency, written
// in the deterministic plane basis (mu1, mu2) of xi:
//   G = t (mu1 mu1^T - mu2 mu2^T) + u (mu1 mu2^T + mu2 mu1^T).
struct PlaneTensor {
  Cplx t{};
  Cplx u{};
  double resid = 0.0;
  double scale = 0.0;
};

// Least-squares fit of quadratic frame values zeta^T G zeta over any spanning
// set of frames orthogonal to xi, not just the canonical four.  The in-plane
// isotropic multiple is invisible here (zeta.zeta = 0) and the fit residual
// measures the consistency of the overdetermined system.
inline PlaneTensor solve_plane_tensor(const std::vector<Frame>& frames,
                                      const std::vector<Cplx>& values, const Vec3& xi) {
  if (frames.size() != values.size() || frames.size() < 2)
    throw ConfigError("plane tensor: need matching frames and values, at least two");
  XiBasis basis = basis_for_xi(xi);
  Eigen::MatrixXcd Z(frames.size(), 2);
  Eigen::VectorXcd rhs(Eigen::Index(frames.size()));
  for (std::size_t r = 0; r < frames.size(); ++r) {
    CVec3 z = frames[r].zeta();
    Cplx z1 = dot(z, basis.mu[0]);
    Cplx z2 = dot(z, basis.mu[1]);
    Z(Eigen::Index(r), 0) = z1 * z1 - z2 * z2;
    Z(Eigen::Index(r), 1) = 2.0 * z1 * z2;
    rhs(Eigen::Index(r)) = values[r];
  }
  Eigen::Vector2cd sol = Z.colPivHouseholderQr().solve(rhs);
  PlaneTensor out;
  out.t = sol(0);
  out.u = sol(1);
  out.resid = (Z * sol - rhs).norm();
  out.scale = rhs.norm();
  return out;
}

namespace detail {

inline Eigen::Matrix3cd embed_plane_tensor(const PlaneTensor& pt, const Vec3& xi) {
  XiBasis b = basis_for_xi(xi);
  Eigen::Matrix3cd out;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      out(r, c) = pt.t * (b.mu[0][std::size_t(r)] * b.mu[0][std::size_t(c)] -
                          b.mu[1][std::size_t(r)] * b.mu[1][std::size_t(c)]) +
                  pt.u * (b.mu[0][std::size_t(r)] * b.mu[1][std::size_t(c)] +
                          b.mu[1][std::size_t(r)] * b.mu[0][std::size_t(c)]);
  return out;
}

inline std::vector<Cplx> frame_values(const MomentTable& table, const Index3& k, AmplitudeTag ku,
                                      AmplitudeTag kv, int order) {
  std::vector<Cplx> vals;
  vals.reserve(4);
  for (const auto& [p, q, s] : frame_labels())
    vals.push_back(table.at(MomentKey{k, p, q, s, ku, kv, order}));
  return vals;
}

inline Cplx cdot(const CVec3& a, const CVec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

inline CVec3 plane_vector(const XiBasis& basis, Cplx c1, Cplx c2) {
  CVec3 out;
  for (int d = 0; d < 3; ++d)
    out[std::size_t(d)] = c1 * basis.mu[0][std::size_t(d)] + c2 * basis.mu[1][std::size_t(d)];
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor stage
// ---------------------------------------------------------------------------

struct TensorSlice {
  Eigen::Matrix3cd trace_free = Eigen::Matrix3cd::Zero();
  PlaneTensor plane;
};

// Recovers the trace-free in-plane part of the tensor transform from the four
// quadratic constant-amplitude frame values.  Quadrature-sourced tables are
// exactly consistent, so a residual above 1e-6 x scale signals corrupted
// data; boundary-sourced tables carry O(h) inconsistency by construction and
// only record it.
inline TensorSlice recover_tensor_fourier(const Vec3& xi, const MomentTable& table) {
  Index3 k = table.index_of(xi);
  std::vector<Cplx> vals = detail::frame_values(table, k, AmplitudeTag::ExpMinus, AmplitudeTag::One, 2);
  TensorSlice out;
  out.plane = solve_plane_tensor(frames_for_xi(xi), vals, xi);
  if (table.mode == MomentMode::oracle && out.plane.resid > 1e-6 * std::max(out.plane.scale, 1e-300))
    throw DataInconsistencyError("tensor stage: inconsistent frame system");
  out.trace_free = detail::embed_plane_tensor(out.plane, xi);
  return out;
}

// ---------------------------------------------------------------------------
// Lattice bookkeeping and auxiliary evaluations
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
using LatticeMap = std::map<Index3, T>;

// Dual-lattice ball 0 < |xi| <= k_max in deterministic order.
inline std::vector<Index3> lattice_ball(const Grid& g, double k_max) {
  std::vector<Index3> out;
  int kcap = std::min(int(std::floor(k_max / (kPi / g.half) + 1e-9)), g.freq_hi() - 1);
  for (int a = -kcap; a <= kcap; ++a)
    for (int b = -kcap; b <= kcap; ++b)
      for (int c = -kcap; c <= kcap; ++c) {
        if (a == 0 && b == 0 && c == 0) continue;
        Vec3 xi{g.freq(a), g.freq(b), g.freq(c)};
        if (norm(xi) <= k_max + 1e-9) out.push_back({a, b, c});
      }
  return out;
}

// Directional derivative along w at lattice point k, one axis at a time:
// central stencils where both neighbours exist, second-order one-sided at
// the ball edge, first-order as a last resort, zero if isolated.
inline Cplx lattice_directional_fd(const LatticeMap<Cplx>& data, const Index3& k, const Vec3& w,
                                   double step) {
  Cplx acc{};
  for (int d = 0; d < 3; ++d) {
    if (w[std::size_t(d)] == 0.0) continue;
    auto value = [&](int off) -> std::optional<Cplx> {
      Index3 kk = k;
      kk[std::size_t(d)] += off;
      auto it = data.find(kk);
      if (it == data.end()) return std::nullopt;
      return it->second;
    };
    std::optional<Cplx> fp = value(1), fm = value(-1);
    Cplx deriv{};
    if (fp && fm) {
      deriv = (*fp - *fm) / (2.0 * step);
    } else if (fp) {
      std::optional<Cplx> fpp = value(2);
      Cplx f0 = data.at(k);
      deriv = fpp ? (-3.0 * f0 + 4.0 * *fp - *fpp) / (2.0 * step) : (*fp - f0) / step;
    } else if (fm) {
      std::optional<Cplx> fmm = value(-2);
      Cplx f0 = data.at(k);
      deriv = fmm ? (3.0 * f0 - 4.0 * *fm + *fmm) / (2.0 * step) : (f0 - *fm) / step;
    }
    acc += w[std::size_t(d)] * deriv;
  }
  return acc;
}

// Memoized auxiliary evaluations at arbitrary frequencies.  Lattice values
// are seeded from the assembled table; off-lattice fits use minimal spanning
// frame subsets, which matters when every value is a boundary solve.
class AuxEval {
 public:
  AuxEval(const MomentSource& src, double eps) : src_(&src), eps_(eps) {}

  double eps() const { return eps_; }

  void seed_plane(const Vec3& xi, const PlaneTensor& pt) { gfits_[point_key(xi)] = pt; }

  const PlaneTensor& plane_at(const Vec3& xi) {
    std::string key = point_key(xi);
    if (auto it = gfits_.find(key); it != gfits_.end()) return it->second;
    std::vector<Frame> all = frames_for_xi(xi);
    std::vector<Frame> frames = {all[0], all[1]};  // opposite signs: independent rows
    std::vector<Cplx> vals;
    for (const Frame& fr : frames)
      vals.push_back(
          src_->eval(fr, xi, with_xi(AmplitudeTag::ExpMinus, xi), with_xi(AmplitudeTag::One, xi), 2));
    return gfits_.emplace(std::move(key), solve_plane_tensor(frames, vals, xi)).first->second;
  }

  // zeta^T G(xi') zeta for an external zeta.
  Cplx g_contracted(const Vec3& xi_eval, const CVec3& zeta) {
    Eigen::Matrix3cd G = embed_plane_tensor(plane_at(xi_eval), xi_eval);
    Cplx acc{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) acc += zeta[std::size_t(r)] * G(r, c) * zeta[std::size_t(c)];
    return acc;
  }

  // Transverse part of the gradient-split vector data at any frequency:
  //   W.zeta = i d/dt [zeta^T F(xi + t omega) zeta](0) - (linear o2 moment),
  // a relation free of the in-plane isotropic and potential terms, which
  // enter the shifted contraction only at second order in t.
  CVec3 wsol_at(const Vec3& xi) {
    std::string key = point_key(xi);
    if (auto it = wsols_.find(key); it != wsols_.end()) return it->second;
    std::vector<Frame> all = frames_for_xi(xi);
    XiBasis basis = basis_for_xi(xi);
    std::array<int, 2> slots = {0, 2};  // omegas mu1 and mu2: independent rows
    Eigen::Matrix2cd Z;
    Eigen::Vector2cd rhs;
    for (int r = 0; r < 2; ++r) {
      const Frame& fr = all[std::size_t(slots[std::size_t(r)])];
      CVec3 zeta = fr.zeta();
      Cplx mom = src_->eval(fr, xi, with_xi(AmplitudeTag::ExpMinus, xi),
                            with_xi(AmplitudeTag::OmegaLin, xi), 2);
      Cplx slope = (g_contracted(xi + eps_ * fr.omega, zeta) -
                    g_contracted(xi - eps_ * fr.omega, zeta)) /
                   (2.0 * eps_);
      Z(r, 0) = dot(zeta, basis.mu[0]);
      Z(r, 1) = dot(zeta, basis.mu[1]);
      rhs(r) = Cplx(0.0, 1.0) * slope - mom;
    }
    Eigen::Vector2cd sol = Z.colPivHouseholderQr().solve(rhs);
    CVec3 w = plane_vector(basis, sol(0), sol(1));
    wsols_.emplace(std::move(key), w);
    return w;
  }

 private:
  const MomentSource* src_;
  double eps_;
  std::map<std::string, PlaneTensor> gfits_;
  std::map<std::string, CVec3> wsols_;
};

// Transverse vector data at every lattice point, from the linear-amplitude
// quadratic rows of the table plus auxiliary derivative evaluations.
inline LatticeMap<CVec3> wsol_stage(const MomentTable& table, const std::vector<Index3>& ball,
                                    AuxEval& aux) {
  LatticeMap<CVec3> out;
  for (const Index3& k : ball) {
    Vec3 xi = table.xi_of(k);
    std::vector<Frame> frames = frames_for_xi(xi);
    XiBasis basis = basis_for_xi(xi);
    std::vector<Cplx> mom = frame_values(table, k, AmplitudeTag::ExpMinus, AmplitudeTag::OmegaLin, 2);
    Eigen::MatrixXcd Z(4, 2);
    Eigen::VectorXcd rhs(4);
    for (int r = 0; r < 4; ++r) {
      const Frame& fr = frames[std::size_t(r)];
      CVec3 zeta = fr.zeta();
      Cplx slope = (aux.g_contracted(xi + aux.eps() * fr.omega, zeta) -
                    aux.g_contracted(xi - aux.eps() * fr.omega, zeta)) /
                   (2.0 * aux.eps());
      Z(r, 0) = dot(zeta, basis.mu[0]);
      Z(r, 1) = dot(zeta, basis.mu[1]);
      rhs(r) = Cplx(0.0, 1.0) * slope - mom[std::size_t(r)];
    }
    Eigen::Vector2cd sol = Z.colPivHouseholderQr().solve(rhs);
    out[k] = plane_vector(basis, sol(0), sol(1));
  }
  return out;
}

// Scalar potential of the gradient part.  The shifted contraction expands as
//   zeta^T F(xi + t w) zeta = g(t) - t^2 lam(.)/|.|^2 - t^2 p(.) + i t W(.).zeta
// with g the trace-free contraction, so the quadratic-amplitude row (minus
// the second xi-derivative of the contracted transform) peels to
//   2 p(xi) = row + g''(0) - 2 lam(xi)/|xi|^2 + 2 i d/dt[W.zeta](0).
// A missing isotropic lookup leaves the lam/|xi|^2 term in place.
inline LatticeMap<Cplx> potential_stage(const MomentTable& table, const std::vector<Index3>& ball,
                                        AuxEval& aux,
                                        const std::function<Cplx(const Index3&)>& isotropic_lookup) {
  LatticeMap<Cplx> out;
  for (const Index3& k : ball) {
    Vec3 xi = table.xi_of(k);
    std::vector<Frame> frames = frames_for_xi(xi);
    std::vector<Cplx> mom = frame_values(table, k, AmplitudeTag::ExpMinus, AmplitudeTag::OmegaQuad, 2);
    Cplx lam = isotropic_lookup ? isotropic_lookup(k) : Cplx{};
    double e = aux.eps();
    Cplx acc{};
    for (int r = 0; r < 4; ++r) {
      const Frame& fr = frames[std::size_t(r)];
      CVec3 zeta = fr.zeta();
      Vec3 xp = xi + e * fr.omega;
      Vec3 xm = xi - e * fr.omega;
      Cplx second = (aux.g_contracted(xp, zeta) - 2.0 * aux.g_contracted(xi, zeta) +
                     aux.g_contracted(xm, zeta)) /
                    (e * e);
      Cplx wslope = (cdot(aux.wsol_at(xp), zeta) - cdot(aux.wsol_at(xm), zeta)) / (2.0 * e);
      acc += 0.5 * (mom[std::size_t(r)] + second - 2.0 * lam / dot(xi, xi) +
                    2.0 * Cplx(0.0, 1.0) * wslope);
    }
    out[k] = acc / 4.0;
  }
  return out;
}

inline ScalarField inverse_of(const Grid& g, const LatticeMap<Cplx>& hat);

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient (potential) part
// ---------------------------------------------------------------------------

struct PotentialPart {
  detail::LatticeMap<Cplx> p_hat;      // scalar potential transform
  detail::LatticeMap<CVec3> wsol_hat;  // transverse vector data, zero for a pure gradient
  VectorField V_rec;                   // gradient of the inverse transform of p_hat
  double transverse_residual = 0.0;    // rms transverse data over the tensor scale: the curl check
};

// Splits the non-solenoidal tensor part into a scalar potential and a
// transverse vector remainder using the linear and quadratic polynomial
// amplitude weights.  The quadratic weight is admissible only above operator
// order two; tables without it are rejected.  Derivatives of the tensor data
// are taken through small-step auxiliary moments, not lattice stencils: the
// lattice step is too coarse for the curl check.  When the in-plane
// isotropic stage has already run, pass its values to remove the lam/|xi|^2
// term; plants with no in-plane isotropic content do not need it.
inline PotentialPart recover_potential_part(
    const MomentTable& table, const MomentSource& src,
    const std::function<Cplx(const Index3&)>& isotropic_lookup = nullptr) {
  bool has_quad = false;
  for (const auto& [key, val] : table.entries)
    if (key.kv == AmplitudeTag::OmegaQuad && key.order == 2) {
      has_quad = true;
      break;
    }
  if (!has_quad)
    throw UnsupportedOrderError(
        "potential split: table lacks the quadratic amplitude weight, operator order must exceed 2");

  std::vector<Index3> ball = detail::lattice_ball(table.grid, table.k_max);
  detail::AuxEval aux(src, src.mode == MomentMode::dn ? kAuxStepDn : kAuxStepOracle);
  double tensor_scale = 1e-300;
  for (const Index3& k : ball) {
    Vec3 xi = table.xi_of(k);
    PlaneTensor pt = solve_plane_tensor(
        frames_for_xi(xi), detail::frame_values(table, k, AmplitudeTag::ExpMinus, AmplitudeTag::One, 2),
        xi);
    aux.seed_plane(xi, pt);
    tensor_scale = std::max(tensor_scale, pt.scale);
  }

  PotentialPart out;
  out.wsol_hat = detail::wsol_stage(table, ball, aux);
  out.p_hat = detail::potential_stage(table, ball, aux, isotropic_lookup);

  double wsq = 0.0;
  for (const auto& [k, w] : out.wsol_hat)
    for (const Cplx& c : w) wsq += std::norm(c);
  out.transverse_residual =
      std::sqrt(wsq / double(std::max<std::size_t>(1, out.wsol_hat.size()))) / tensor_scale;

  out.V_rec = gradient(detail::inverse_of(table.grid, out.p_hat));
  return out;
}

// ---------------------------------------------------------------------------
// Vector stage
// ---------------------------------------------------------------------------

using AHatLookup = std::function<Eigen::Matrix3cd(const Index3&)>;
using BHatLookup = std::function<CVec3(const Index3&)>;

struct VectorSlice {
  CVec3 b_hat{Cplx{}, Cplx{}, Cplx{}};
  Cplx p_tilde_hat{};  // scalar potential of the gradient component
  double fit_residual = 0.0;
};

namespace detail {

// Transverse fit of the vector transform at one lattice point from the
// constant-amplitude linear rows.  The tensor contribution is subtracted
// through the lookup, and the third column absorbs every frame-independent
// additive: zero for quadrature tables, the constant-row tail for boundary
// tables.  Absorbing rather than subtracting that tail is what keeps the
// later scalar peel from feeding back into the vector estimate.  In dn mode
// the quadratic-row tail -(i/h) zeta^T A-hat zeta varies across frames and
// is removed through the same lookup when requested; for an isotropic
// operator the true quadratic row vanishes identically and the correction
// must stay off, because the fitted tensor slice is then itself pure tail.
inline std::pair<CVec3, double> bperp_fit(const MomentTable& table, const Index3& k,
                                          const AHatLookup& a_hat, bool i2_correction) {
  Vec3 xi = table.xi_of(k);
  std::vector<Frame> frames = frames_for_xi(xi);
  std::vector<Cplx> vals = frame_values(table, k, AmplitudeTag::ExpMinus, AmplitudeTag::One, 1);
  XiBasis basis = basis_for_xi(xi);
  Eigen::Matrix3cd A = a_hat ? a_hat(k) : Eigen::Matrix3cd::Zero();
  Eigen::MatrixXcd Z(4, 3);
  Eigen::VectorXcd rhs(4);
  for (int r = 0; r < 4; ++r) {
    CVec3 zeta = frames[std::size_t(r)].zeta();
    Cplx xaz{}, zaz{};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        xaz += xi[std::size_t(a)] * A(a, b) * zeta[std::size_t(b)];
        zaz += zeta[std::size_t(a)] * A(a, b) * zeta[std::size_t(b)];
      }
    Cplx v = vals[std::size_t(r)] + 2.0 * xaz;
    if (i2_correction && table.h > 0.0) v += Cplx(0.0, 1.0 / table.h) * zaz;
    Z(r, 0) = dot(zeta, basis.mu[0]);
    Z(r, 1) = dot(zeta, basis.mu[1]);
    Z(r, 2) = Cplx(1.0);
    rhs(r) = v;
  }
  Eigen::Vector3cd sol = Z.colPivHouseholderQr().solve(rhs);
  return {plane_vector(basis, sol(0), sol(1)), (Z * sol - rhs).norm()};
}

}  // namespace detail

// Recovers the vector transform at one frequency.  Transverse components
// come from the constant-amplitude linear rows after tensor subtraction.
// The gradient component is exposed by the linear polynomial amplitude:
// that row equals i (omega.grad_xi)(transverse fit . zeta) minus the
// potential transform, because the gradient part contributes exactly minus
// its potential through omega.zeta = 1.  Here the derivative is taken by
// axis stencils over neighbouring transverse fits; the pipeline uses
// small-step auxiliary fits instead.
inline VectorSlice recover_vector_fourier(const Vec3& xi, const MomentTable& table,
                                          const AHatLookup& a_hat) {
  Index3 k = table.index_of(xi);
  const bool i2corr = table.mode == MomentMode::dn;
  auto [bperp, resid] = detail::bperp_fit(table, k, a_hat, i2corr);
  VectorSlice out;
  out.b_hat = bperp;
  out.fit_residual = resid;

  detail::LatticeMap<CVec3> bsol;
  bsol[k] = bperp;
  for (int d = 0; d < 3; ++d)
    for (int off = -2; off <= 2; ++off) {
      if (off == 0) continue;
      Index3 kk = k;
      kk[std::size_t(d)] += off;
      if (kk == Index3{0, 0, 0} || bsol.count(kk)) continue;
      if (!table.has(MomentKey{kk, 1, 2, 1, AmplitudeTag::ExpMinus, AmplitudeTag::One, 1})) continue;
      bsol[kk] = detail::bperp_fit(table, kk, a_hat, i2corr).first;
    }

  std::vector<Frame> frames = frames_for_xi(xi);
  std::vector<Cplx> lin = detail::frame_values(table, k, AmplitudeTag::One, AmplitudeTag::ExpPlusOmegaLin, 1);
  double step = kPi / table.grid.half;
  Cplx acc{};
  for (std::size_t r = 0; r < 4; ++r) {
    CVec3 zeta = frames[r].zeta();
    detail::LatticeMap<Cplx> bz;
    for (const auto& [kk, v] : bsol) bz[kk] = detail::cdot(v, zeta);
    acc += Cplx(0.0, 1.0) * detail::lattice_directional_fd(bz, k, frames[r].omega, step) - lin[r];
  }
  out.p_tilde_hat = acc / 4.0;
  for (int d = 0; d < 3; ++d)
    out.b_hat[std::size_t(d)] += Cplx(0.0, 1.0) * xi[std::size_t(d)] * out.p_tilde_hat;
  return out;
}

// ---------------------------------------------------------------------------
// In-plane isotropic stage
// ---------------------------------------------------------------------------

// Recovers the in-plane isotropic multiple of the tensor transform from the
// linear-amplitude first-order rows.  The first-order contribution of the
// vector transform is predicted through the lookup by lattice stencils and
// subtracted; trace-free tensor terms cancel in the four-frame mean, and the
// surviving contraction omega^T A-hat zeta carries the isotropic multiple
// with weight 2/i, hence the i/2 in front.  The pipeline subtracts the
// measured gradient-weight rows instead, which needs no vector input at all.
inline Cplx recover_isotropic(const Vec3& xi, const MomentTable& table, const BHatLookup& b_hat) {
  Index3 k = table.index_of(xi);
  std::vector<Frame> frames = frames_for_xi(xi);
  std::vector<Cplx> vals = detail::frame_values(table, k, AmplitudeTag::OmegaLin, AmplitudeTag::ExpPlus, 1);
  double step = kPi / table.grid.half;

  detail::LatticeMap<CVec3> bmap;
  if (b_hat)
    for (int d = 0; d < 3; ++d)
      for (int off = -2; off <= 2; ++off) {
        Index3 kk = k;
        kk[std::size_t(d)] += off;
        if (kk == Index3{0, 0, 0} || bmap.count(kk)) continue;
        if (off != 0 &&
            !table.has(MomentKey{kk, 1, 2, 1, AmplitudeTag::OmegaLin, AmplitudeTag::ExpPlus, 1}))
          continue;
        bmap[kk] = b_hat(kk);
      }

  Cplx acc{};
  for (std::size_t r = 0; r < 4; ++r) {
    Cplx bterm{};
    if (!bmap.empty()) {
      CVec3 zeta = frames[r].zeta();
      detail::LatticeMap<Cplx> bz;
      for (const auto& [kk, v] : bmap) bz[kk] = detail::cdot(v, zeta);
      bterm = Cplx(0.0, 1.0) * detail::lattice_directional_fd(bz, k, frames[r].omega, step);
    }
    acc += vals[r] - bterm;
  }
  return Cplx(0.0, 0.5) * (acc / 4.0);
}

// ---------------------------------------------------------------------------
// Scalar stage
// ---------------------------------------------------------------------------

namespace detail {

// Constant-row prediction from recovered fields.  For boundary tables the
// stored value is the raw pairing, so the prediction includes the full
// weight expansion -I2/h^2 + I1/(ih) + I0.
inline Cplx scalar_prediction(const CoefficientSet& model, const Frame& fr, const AmplitudeKind& ku,
                              const AmplitudeKind& kv, MomentMode mode, double h) {
  Cplx pred = integrate(moment_integrand(model, fr, ku, kv, 0));
  if (mode == MomentMode::dn && h > 0.0) {
    Cplx i2 = integrate(moment_integrand(model, fr, ku, kv, 2));
    Cplx i1 = integrate(moment_integrand(model, fr, ku, kv, 1));
    pred += -i2 / (h * h) + i1 / Cplx(0.0, h);
  }
  return pred;
}

}  // namespace detail

// Peels the recovered first- and second-order contributions off the
// constant rows and returns the four-frame mean of the remainder.  The
// prediction is integrated against the recovered fields rather than read
// from measured first-order rows: in dn mode the three orders of one kind
// pair are a single pairing, so a measured subtraction would be circular.
inline Cplx recover_scalar_fourier(const Vec3& xi, const MomentTable& table,
                                   const SymTensorField& A_rec, const VectorField& B_rec, int m) {
  Index3 k = table.index_of(xi);
  CoefficientSet model(m, table.grid);
  model.A = A_rec;
  model.B = B_rec;
  std::vector<Frame> frames = frames_for_xi(xi);
  AmplitudeKind ku = detail::with_xi(AmplitudeTag::ExpMinus, xi);
  AmplitudeKind kv = detail::with_xi(AmplitudeTag::One, xi);
  Cplx acc{};
  for (const auto& [p, q, s] : detail::frame_labels()) {
    const Frame& fr = frames[std::size_t(detail::frame_slot(p, q, s))];
    Cplx pred = detail::scalar_prediction(model, fr, ku, kv, table.mode, table.h);
    acc += table.at(MomentKey{k, p, q, s, AmplitudeTag::ExpMinus, AmplitudeTag::One, 0}) - pred;
  }
  return acc / 4.0;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct RecoveredSet {
  SymTensorField A_rec;
  VectorField B_rec;
  ScalarField q_rec;
  std::map<std::string, double> residuals;
  std::vector<std::string> notes;
  double support_fraction = 1.0;
  MomentTable table;
};

struct PipelineInput {
  MomentSource source;
  int m = 2;
  Grid grid{3};
  bool isotropic = false;  // restricts the tensor unknowns to the isotropic multiple

  static PipelineInput oracle(const CoefficientSet& diff) {
    PipelineInput in;
    in.m = diff.m;
    in.grid = diff.grid();
    in.isotropic = diff.m == 2;
    in.source = oracle_source(diff);
    return in;
  }
  static PipelineInput dn(const DnMap& dn_map, const DnMap& dn_ref, const CoefficientSet& truth,
                          double h = kDefaultMomentH) {
    PipelineInput in;
    in.m = truth.m;
    in.grid = truth.grid();
    in.isotropic = truth.m == 2;
    in.source = dn_source(dn_map, dn_ref, truth, h);
    return in;
  }
};

namespace detail {

// Fills the missing zero mode from the support condition: the true field
// vanishes outside the ball, so the exterior mean of the truncated inverse
// transform is the missing constant plus averaged-out ripple.
inline double dc_complete(ScalarField& f, double radius) {
  const Grid& g = f.grid;
  Cplx mean{};
  std::size_t n = 0;
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        Vec3 p = g.point(i, j, k);
        if (dot(p, p) <= radius * radius) continue;
        mean += f.at(i, j, k);
        ++n;
      }
  if (n == 0) return 0.0;
  mean /= double(n);
  for (auto& v : f.values) v -= mean;
  return std::abs(mean);
}

inline ScalarField inverse_of(const Grid& g, const LatticeMap<Cplx>& hat) {
  FrequencyTable t(g);
  for (const auto& [k, v] : hat) t.at(k[0], k[1], k[2]) = v;
  ScalarField f = idft(t);
  dc_complete(f, kSupportRadius);
  return f;
}

inline double ball_mass_fraction(const ScalarField& f, double radius) {
  const Grid& g = f.grid;
  double inside = 0.0, total = 0.0;
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        double m = std::norm(f.at(i, j, k));
        total += m;
        Vec3 p = g.point(i, j, k);
        if (dot(p, p) <= radius * radius) inside += m;
      }
  return total == 0.0 ? 1.0 : inside / total;
}

inline double hermitian_defect(const LatticeMap<Cplx>& hat) {
  double num = 0.0, den = 0.0;
  for (const auto& [k, v] : hat) {
    auto it = hat.find(Index3{-k[0], -k[1], -k[2]});
    if (it == hat.end()) continue;
    num += std::norm(v - std::conj(it->second));
    den += std::norm(v);
  }
  return den == 0.0 ? 0.0 : std::sqrt(num / den);
}

}  // namespace detail

// Full recovery chain.  Assembles the moment table over the dual ball, then
// peels in dependency order: trace-free tensor slice; transverse gradient
// data (order above 2); in-plane isotropic multiple; first-order vector;
// scalar potential of the gradient part; zeroth order.  The isotropic stage
// runs before the vector stage: subtracting the measured gradient-weight
// row from the linear-amplitude row removes the vector contribution, and in
// dn mode also the shared quadratic-row tail, exactly.  Truncated inverse
// transforms fill their zero mode from the support condition.  k_max = 0
// selects the half-Nyquist ball.
inline RecoveredSet run_pipeline(const PipelineInput& in, double k_max = 0.0) {
  const Grid& g = in.grid;
  const int m = in.m;
  if (m == 2 && !in.isotropic)
    throw ConfigError("pipeline: order-2 operators support only isotropic tensors");
  const bool aniso = !in.isotropic;
  const bool dn_mode = in.source.mode == MomentMode::dn;

  RecoveredSet out;
  MomentTable& table = out.table;
  table.grid = g;
  table.k_max = k_max > 0.0 ? k_max : g.half_nyquist();
  table.mode = in.source.mode;
  table.h = in.source.h;

  std::vector<Index3> ball = detail::lattice_ball(g, table.k_max);

  // Moment assembly.  The polynomial-amplitude quadratic rows exist only
  // for operator order above two, and only anisotropic runs consume them.
  struct KindRow {
    AmplitudeTag ku, kv;
    int order;
    bool high;
  };
  const std::vector<KindRow> rows = {
      {AmplitudeTag::ExpMinus, AmplitudeTag::OmegaLin, 2, true},
      {AmplitudeTag::ExpMinus, AmplitudeTag::OmegaQuad, 2, true},
      {AmplitudeTag::ExpMinus, AmplitudeTag::One, 2, false},
      {AmplitudeTag::ExpMinus, AmplitudeTag::One, 1, false},
      {AmplitudeTag::One, AmplitudeTag::ExpPlusOmegaLin, 1, false},
      {AmplitudeTag::OmegaLin, AmplitudeTag::ExpPlus, 1, false},
      {AmplitudeTag::ExpMinus, AmplitudeTag::One, 0, false},
  };
  for (const Index3& k : ball) {
    Vec3 xi = table.xi_of(k);
    std::vector<Frame> frames = frames_for_xi(xi);
    for (const KindRow& row : rows) {
      if (row.high && !(m > 2 && aniso)) continue;
      for (const auto& [p, q, s] : detail::frame_labels()) {
        const Frame& fr = frames[std::size_t(detail::frame_slot(p, q, s))];
        Cplx v =
            in.source.eval(fr, xi, detail::with_xi(row.ku, xi), detail::with_xi(row.kv, xi), row.order);
        table.set(MomentKey{k, p, q, s, row.ku, row.kv, row.order}, v);
      }
    }
  }

  // Tensor stage.
  detail::LatticeMap<PlaneTensor> tfits;
  double tensor_fit = 0.0, tensor_scale = 1e-300;
  for (const Index3& k : ball) {
    Vec3 xi = table.xi_of(k);
    PlaneTensor pt = solve_plane_tensor(
        frames_for_xi(xi), detail::frame_values(table, k, AmplitudeTag::ExpMinus, AmplitudeTag::One, 2),
        xi);
    tfits[k] = pt;
    tensor_fit = std::max(tensor_fit, pt.resid);
    tensor_scale = std::max(tensor_scale, pt.scale);
  }
  out.residuals["tensor_fit"] = tensor_fit;
  out.residuals["tensor_scale"] = tensor_scale;
  if (!dn_mode && tensor_fit > 1e-6 * tensor_scale)
    throw DataInconsistencyError("pipeline: tensor stage frame system inconsistent");

  detail::AuxEval aux(in.source, dn_mode ? kAuxStepDn : kAuxStepOracle);
  for (const auto& [k, pt] : tfits) aux.seed_plane(table.xi_of(k), pt);

  // Transverse gradient data.
  detail::LatticeMap<CVec3> wsol;
  if (m > 2 && aniso) {
    wsol = detail::wsol_stage(table, ball, aux);
    double wsq = 0.0;
    for (const auto& [k, w] : wsol)
      for (const Cplx& c : w) wsq += std::norm(c);
    out.residuals["gradient_transverse"] = std::sqrt(wsq / double(wsol.size())) / tensor_scale;
  }

  // In-plane isotropic multiple.  The first-order linear-amplitude row
  // splits as (vector derivative term) + (2/i) omega^T A-hat zeta, and the
  // vector term equals the gradient-weight row at the same key, so the
  // measured subtraction removes it with no stencil error; in dn mode both
  // rows carry the same quadratic tail, which drops out of the difference
  // as well.  Trace-free terms cancel in the four-frame mean.
  detail::LatticeMap<Cplx> lambda;
  double iso_spread = 0.0;
  for (const Index3& k : ball) {
    std::vector<Cplx> iso = detail::frame_values(table, k, AmplitudeTag::OmegaLin, AmplitudeTag::ExpPlus, 1);
    std::vector<Cplx> lin = detail::frame_values(table, k, AmplitudeTag::One, AmplitudeTag::ExpPlusOmegaLin, 1);
    Cplx acc{};
    for (int r = 0; r < 4; ++r) acc += iso[std::size_t(r)] - lin[std::size_t(r)];
    lambda[k] = Cplx(0.0, 0.5) * (acc / 4.0);
    for (int r = 0; r < 4; ++r)
      iso_spread = std::max(
          iso_spread, std::abs(Cplx(0.0, 0.5) * (iso[std::size_t(r)] - lin[std::size_t(r)]) - lambda[k]));
  }
  out.residuals["isotropic_spread"] = iso_spread;

  // Vector stage.  Transverse part per lattice point; gradient part from
  // small-step derivatives of auxiliary transverse fits, since a lattice
  // stencil is too coarse once multiplied back by xi.
  AHatLookup a_lookup = [&](const Index3& k) {
    Eigen::Matrix3cd A = Eigen::Matrix3cd::Zero();
    if (aniso) A += detail::embed_plane_tensor(tfits[k], table.xi_of(k));
    if (auto it = wsol.find(k); it != wsol.end()) {
      Vec3 xi = table.xi_of(k);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          A(r, c) += Cplx(0.0, 0.5) * (xi[std::size_t(r)] * it->second[std::size_t(c)] +
                                       it->second[std::size_t(r)] * xi[std::size_t(c)]);
    }
    return A;
  };
  const bool i2corr = dn_mode && aniso;

  detail::LatticeMap<CVec3> bsol;
  double vector_fit = 0.0;
  for (const Index3& k : ball) {
    auto [bp, resid] = detail::bperp_fit(table, k, a_lookup, i2corr);
    bsol[k] = bp;
    vector_fit = std::max(vector_fit, resid);
  }
  out.residuals["vector_fit"] = vector_fit;

  detail::LatticeMap<CVec3> bhat;
  detail::LatticeMap<Cplx> ptilde;
  {
    const double e = aux.eps();
    std::map<std::string, CVec3> baux;
    auto bsol_aux = [&](const Vec3& eta) -> CVec3 {
      std::string key = detail::point_key(eta);
      if (auto it = baux.find(key); it != baux.end()) return it->second;
      std::vector<Frame> frames = frames_for_xi(eta);
      XiBasis basis = basis_for_xi(eta);
      Eigen::Matrix3cd Z;
      Eigen::Vector3cd rhs;
      for (int r = 0; r < 3; ++r) {
        const Frame& fr = frames[std::size_t(r)];
        CVec3 zeta = fr.zeta();
        Cplx mom = in.source.eval(fr, eta, detail::with_xi(AmplitudeTag::ExpMinus, eta),
                                  detail::with_xi(AmplitudeTag::One, eta), 1);
        // Off-lattice tensor subtraction: the transverse contraction
        // 2 eta^T A-hat zeta reduces to i |eta|^2 W.zeta, and the trace-free
        // and potential parts of A-hat are annihilated by eta and zeta.
        if (m > 2 && aniso) mom += Cplx(0.0, 1.0) * dot(eta, eta) * detail::cdot(aux.wsol_at(eta), zeta);
        if (i2corr && table.h > 0.0) mom += Cplx(0.0, 1.0 / table.h) * aux.g_contracted(eta, zeta);
        Z(r, 0) = dot(zeta, basis.mu[0]);
        Z(r, 1) = dot(zeta, basis.mu[1]);
        Z(r, 2) = Cplx(1.0);
        rhs(r) = mom;
      }
      Eigen::Vector3cd sol = Z.colPivHouseholderQr().solve(rhs);
      CVec3 v = detail::plane_vector(basis, sol(0), sol(1));
      baux.emplace(std::move(key), v);
      return v;
    };
    for (const Index3& k : ball) {
      Vec3 xi = table.xi_of(k);
      std::vector<Frame> frames = frames_for_xi(xi);
      std::vector<Cplx> lin = detail::frame_values(table, k, AmplitudeTag::One, AmplitudeTag::ExpPlusOmegaLin, 1);
      Cplx acc{};
      for (std::size_t r = 0; r < 4; ++r) {
        const Frame& fr = frames[r];
        CVec3 zeta = fr.zeta();
        Cplx row = lin[r];
        // This row's quadratic tail survives no subtraction here; remove it
        // through measured first derivatives of the tensor data.
        if (i2corr && table.h > 0.0) {
          Cplx gslope = (aux.g_contracted(xi + e * fr.omega, zeta) -
                         aux.g_contracted(xi - e * fr.omega, zeta)) /
                        (2.0 * e);
          Cplx i2_est = Cplx(0.0, 1.0) * gslope - detail::cdot(aux.wsol_at(xi), zeta);
          row += Cplx(0.0, 1.0 / table.h) * i2_est;
        }
        Cplx slope = (detail::cdot(bsol_aux(xi + e * fr.omega), zeta) -
                      detail::cdot(bsol_aux(xi - e * fr.omega), zeta)) /
                     (2.0 * e);
        acc += Cplx(0.0, 1.0) * slope - row;
      }
      ptilde[k] = acc / 4.0;
      CVec3 b = bsol[k];
      for (int d = 0; d < 3; ++d) b[std::size_t(d)] += Cplx(0.0, 1.0) * xi[std::size_t(d)] * ptilde[k];
      bhat[k] = b;
    }
  }

  // Scalar potential of the gradient part; consumes the isotropic values.
  detail::LatticeMap<Cplx> phat;
  if (m > 2 && aniso)
    phat = detail::potential_stage(table, ball, aux, [&](const Index3& k) { return lambda.at(k); });

  // Transform assembly and inversion.
  out.A_rec = SymTensorField(g);
  if (in.isotropic) {
    ScalarField a = detail::inverse_of(g, lambda);
    out.A_rec.entry(0, 0) = a;
    out.A_rec.entry(1, 1) = a;
    out.A_rec.entry(2, 2) = a;
  } else {
    std::array<detail::LatticeMap<Cplx>, 6> ahat;
    for (const Index3& k : ball) {
      Vec3 xi = table.xi_of(k);
      double n2 = dot(xi, xi);
      Eigen::Matrix3cd A = detail::embed_plane_tensor(tfits[k], xi);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
          A(r, c) += lambda[k] * ((r == c ? 1.0 : 0.0) - xi[std::size_t(r)] * xi[std::size_t(c)] / n2);
          if (m > 2) {
            A(r, c) -= xi[std::size_t(r)] * xi[std::size_t(c)] * phat[k];
            A(r, c) += Cplx(0.0, 0.5) * (xi[std::size_t(r)] * wsol[k][std::size_t(c)] +
                                         wsol[k][std::size_t(r)] * xi[std::size_t(c)]);
          }
        }
      int slot = 0;
      for (int r = 0; r < 3; ++r)
        for (int c = r; c < 3; ++c) ahat[std::size_t(slot++)][k] = A(r, c);
    }
    for (int s = 0; s < 6; ++s) out.A_rec.comp[std::size_t(s)] = detail::inverse_of(g, ahat[std::size_t(s)]);
  }
  out.B_rec = VectorField(g);
  for (int d = 0; d < 3; ++d) {
    detail::LatticeMap<Cplx> comp;
    for (const auto& [k, v] : bhat) comp[k] = v[std::size_t(d)];
    out.B_rec.comp[std::size_t(d)] = detail::inverse_of(g, comp);
  }

  // Zeroth order, integrated against the recovered fields.
  detail::LatticeMap<Cplx> qhat;
  {
    CoefficientSet model(m, g);
    model.A = out.A_rec;
    model.B = out.B_rec;
    double spread = 0.0;
    for (const Index3& k : ball) {
      Vec3 xi = table.xi_of(k);
      std::vector<Frame> frames = frames_for_xi(xi);
      AmplitudeKind ku = detail::with_xi(AmplitudeTag::ExpMinus, xi);
      AmplitudeKind kv = detail::with_xi(AmplitudeTag::One, xi);
      std::array<Cplx, 4> est{};
      Cplx acc{};
      for (const auto& [p, q, s] : detail::frame_labels()) {
        int slot = detail::frame_slot(p, q, s);
        Cplx pred = detail::scalar_prediction(model, frames[std::size_t(slot)], ku, kv, table.mode, table.h);
        est[std::size_t(slot)] =
            table.at(MomentKey{k, p, q, s, AmplitudeTag::ExpMinus, AmplitudeTag::One, 0}) - pred;
        acc += est[std::size_t(slot)];
      }
      qhat[k] = acc / 4.0;
      for (const Cplx& v : est) spread = std::max(spread, std::abs(v - qhat[k]));
    }
    out.residuals["scalar_spread"] = spread;
  }
  out.q_rec = detail::inverse_of(g, qhat);

  // Diagnostics.
  out.residuals["hermitian_defect_lambda"] = detail::hermitian_defect(lambda);
  out.residuals["hermitian_defect_q"] = detail::hermitian_defect(qhat);
  double margin = kSupportRadius + 3.0 * g.spacing;
  double frac = detail::ball_mass_fraction(out.q_rec, margin);
  for (int d = 0; d < 3; ++d)
    frac = std::min(frac, detail::ball_mass_fraction(out.B_rec.comp[std::size_t(d)], margin));
  for (const auto& c : out.A_rec.comp) frac = std::min(frac, detail::ball_mass_fraction(c, margin));
  out.support_fraction = frac;

  out.notes.push_back(dn_mode
                          ? "mode: boundary-data moments at h = " + std::to_string(table.h) +
                                "; the dual field is an adjoint solve built from the true "
                                "coefficients (inverse crime), so errors reflect the pairing "
                                "scale, not blind data"
                          : "mode: quadrature moments against the planted difference");
  if (dn_mode && aniso)
    out.notes.push_back(
        "anisotropic boundary mode: quadratic-row tails removed with fitted tensor data, leaving "
        "a bounded cross-pattern floor in the vector and potential stages; only the h limit "
        "removes it");
  out.notes.push_back("stage order: tensor, transverse gradient, isotropic, vector, potential, "
                      "zeroth order");
  return out;
}

}  // namespace polyharm
