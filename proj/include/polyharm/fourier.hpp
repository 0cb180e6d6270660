#pragma once

#include <fftw3.h>

#include <mutex>
#include <random>

#include "polyharm/field.hpp"

namespace polyharm {

// Values of the forward transform F(xi) ~ integral of f(x) e^{-i x.xi} dx on
// the dual grid xi = (pi/half) * k, k in [-modes/2, modes/2)^3.
struct FrequencyTable {
  Grid grid;
  std::vector<Cplx> values;  // shifted index (k - freq_lo), x slowest

  FrequencyTable() = default;
  explicit FrequencyTable(const Grid& g) : grid(g) {
    std::size_t m = std::size_t(g.modes());
    values.assign(m * m * m, Cplx{});
  }

  std::size_t flat(int kx, int ky, int kz) const {
    int m = grid.modes(), lo = grid.freq_lo();
    return (std::size_t(kx - lo) * m + (ky - lo)) * m + (kz - lo);
  }
  Cplx& at(int kx, int ky, int kz) { return values[flat(kx, ky, kz)]; }
  const Cplx& at(int kx, int ky, int kz) const { return values[flat(kx, ky, kz)]; }
  Vec3 xi(int kx, int ky, int kz) const { return {grid.freq(kx), grid.freq(ky), grid.freq(kz)}; }
};

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// 3-D complex FFT of length modes^3, unnormalized, sign = FFTW_FORWARD or
// FFTW_BACKWARD.  Planner access is serialized; execution is not.
inline void fft3(std::vector<Cplx>& data, int m, int sign) {
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_3d(m, m, m, reinterpret_cast<fftw_complex*>(data.data()),
                            reinterpret_cast<fftw_complex*>(data.data()), sign, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
}

}  // namespace detail

// Forward transform with trapezoid weights: the duplicated closed-grid faces
// are folded (averaged) onto one periodic array of length modes per axis, so
// dual-grid exponentials are exactly orthogonal.
inline FrequencyTable dft(const ScalarField& f) {
  const Grid& g = f.grid;
  int m = g.modes();
  std::vector<Cplx> buf(std::size_t(m) * m * m, Cplx{});
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        std::size_t t = (std::size_t(i % m) * m + (j % m)) * m + (k % m);
        buf[t] += trapezoid_weight(g, i, j, k) * f.at(i, j, k);
      }
  detail::fft3(buf, m, FFTW_FORWARD);
  FrequencyTable out(g);
  double cell = g.spacing * g.spacing * g.spacing;
  int lo = g.freq_lo(), hi = g.freq_hi();
  for (int kx = lo; kx < hi; ++kx)
    for (int ky = lo; ky < hi; ++ky)
      for (int kz = lo; kz < hi; ++kz) {
        std::size_t t = (std::size_t((kx + m) % m) * m + (ky + m) % m) * m + (kz + m) % m;
        double sign = ((kx + ky + kz) % 2 == 0) ? 1.0 : -1.0;
        out.at(kx, ky, kz) = cell * sign * buf[t];
      }
  return out;
}

// Inverse transform; the folded face pair is unfolded by periodicity.
inline ScalarField idft(const FrequencyTable& table) {
  const Grid& g = table.grid;
  int m = g.modes();
  std::vector<Cplx> buf(std::size_t(m) * m * m, Cplx{});
  int lo = g.freq_lo(), hi = g.freq_hi();
  for (int kx = lo; kx < hi; ++kx)
    for (int ky = lo; ky < hi; ++ky)
      for (int kz = lo; kz < hi; ++kz) {
        std::size_t t = (std::size_t((kx + m) % m) * m + (ky + m) % m) * m + (kz + m) % m;
        double sign = ((kx + ky + kz) % 2 == 0) ? 1.0 : -1.0;
        buf[t] = sign * table.at(kx, ky, kz);
      }
  detail::fft3(buf, m, FFTW_BACKWARD);
  double box = 2.0 * g.half;
  double scale = 1.0 / (box * box * box);
  ScalarField out(g);
  for (int i = 0; i < g.pts; ++i)
    for (int j = 0; j < g.pts; ++j)
      for (int k = 0; k < g.pts; ++k) {
        std::size_t t = (std::size_t(i % m) * m + (j % m)) * m + (k % m);
        out.at(i, j, k) = scale * buf[t];
      }
  return out;
}

// || <h xi>^s f_hat ||_{L^2}, evaluated spectrally.  Parseval for the folded
// transform makes s = 0 coincide with l2_norm on periodic-compatible fields.
inline double semiclassical_norm(const ScalarField& f, double s, double h) {
  if (!(h > 0.0)) throw ConfigError("semiclassical_norm: h must be positive");
  FrequencyTable tab = dft(f);
  const Grid& g = f.grid;
  double box = 2.0 * g.half;
  int lo = g.freq_lo(), hi = g.freq_hi();
  std::vector<double> terms;
  terms.reserve(tab.values.size());
  for (int kx = lo; kx < hi; ++kx)
    for (int ky = lo; ky < hi; ++ky)
      for (int kz = lo; kz < hi; ++kz) {
        Vec3 xi = tab.xi(kx, ky, kz);
        double mult = std::pow(1.0 + h * h * dot(xi, xi), s);
        terms.push_back(mult * std::norm(tab.at(kx, ky, kz)));
      }
  return std::sqrt(pairwise_sum(terms) / (box * box * box));
}

// Random field synthesized from dual-grid modes with |k|_inf <= kcap: smooth,
// periodic-compatible, deterministic in the seed.
inline ScalarField random_band_limited_field(const Grid& g, std::uint64_t seed, int kcap) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  FrequencyTable tab(g);
  int cap = std::min(kcap, g.freq_hi() - 1);
  for (int kx = -cap; kx <= cap; ++kx)
    for (int ky = -cap; ky <= cap; ++ky)
      for (int kz = -cap; kz <= cap; ++kz) tab.at(kx, ky, kz) = Cplx(unif(rng), unif(rng));
  return idft(tab);
}

}  // namespace polyharm
