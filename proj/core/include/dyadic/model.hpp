// Dyadic shell-model cascade: state representation, right-hand side, norms,
// the fixed point and the deviation variables built around it.
//
// The model evolves shell amplitudes a_0..a_N under
//     da_0/dt = -a_0 a_1 + f_0
//     da_j/dt = lambda^{j-1} a_{j-1}^2 - lambda^j a_j a_{j+1}     (0 < j < N)
// with lambda = 2^g and a single constant force f_0 > 0 on shell 0.
// The unresolved amplitude a_{N+1} is supplied by the closure rule.
#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyadic {

// Treatment of the a_{N+1} term in the last retained shell equation.
//   PureGalerkin:      a_{N+1} = 0; the truncation conserves energy up to forcing.
//   FixedPointClosure: a_{N+1} = lambda^{-1/3} a_N; the equilibrium amplitude
//                      ladder extends through the boundary and the last shell
//                      sheds energy at rate D = lambda^{N-1/3} a_N^3.
enum class Closure { PureGalerkin, FixedPointClosure };

struct InvalidParams : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Maximum truncation size we validate for; beyond this the closure coefficient
// lambda^{N-1/3} exceeds ~2^120 and double-precision step control degrades.
inline constexpr int kMaxShells = 48;

struct ModelParams {
  // lambda is stored through its base-2 exponent so that powers like
  // lambda^{j-1/3} evaluate as exp2(g*(j-1/3)) without drift.
  double g = 2.5;
  double f0 = 1.0;
  int n_shells = 20;  // highest retained index N; states carry N+1 entries
  Closure closure = Closure::FixedPointClosure;

  double lambda() const { return std::exp2(g); }
  double lambda_pow(double x) const { return std::exp2(g * x); }

  // Throws InvalidParams unless lambda > 1, f0 > 0, 1 <= n_shells <= kMaxShells.
  void validate() const;
};

struct ShellState {
  double t = 0.0;
  std::vector<double> a;
};

// Deviation from the normalized-frame fixed point: b_j = a_j/c - lambda^{-j/3},
// where c = frame_scale(params). Always expressed in the normalized frame.
struct Deviation {
  std::vector<double> b;
};

// Diagonalizing combination of the deviation variables:
//   d_0 = lambda^{-1/6} b_0
//   d_j = lambda^{(j-1)/3} (lambda^{1/6} b_j - lambda^{-1/6} b_{j-1})   (j >= 1)
struct DSequence {
  std::vector<double> d;
};

// Dyadic energy spectrum read off a state: E(k_j) = a_j^2 at k_j = 2^j.
struct SpectrumSample {
  std::vector<double> k;
  std::vector<double> E;
};

// Amplitude scale of the self-similar change of variables a -> a/c, t -> c t
// that maps forcing f0 onto the normalized value lambda^{-1/3}:
//   c = sqrt(f0 * lambda^{1/3}).
double frame_scale(const ModelParams& params);

// The equilibrium ladder a_j = c * lambda^{-j/3} (exact zero of the rhs under
// FixedPointClosure, for any truncation size). Returned with t = 0.
ShellState fixed_point(const ModelParams& params);

// Right-hand side of the truncated system. Allocation-free kernel plus a
// convenience wrapper. `a` and `dadt` must both have n_shells+1 entries.
void rhs(const ModelParams& params, std::span<const double> a, std::span<double> dadt);
std::vector<double> rhs(const ShellState& state, const ModelParams& params);

// l2 norm sqrt(sum a_j^2); identical to sobolev_norm(a, 0) bit-for-bit.
double energy_norm(std::span<const double> a);
inline double energy_norm(const ShellState& s) { return energy_norm(std::span<const double>(s.a)); }

// Dyadic Sobolev norm sqrt(sum 2^{2 s j} a_j^2). The weights use base 2
// independent of lambda.
double sobolev_norm(std::span<const double> a, double s);
inline double sobolev_norm(const ShellState& st, double s) {
  return sobolev_norm(std::span<const double>(st.a), s);
}

// Metric generating the componentwise (weak) topology on bounded sets:
//   d(x, y) = sum_j lambda^{-j^2} |x_j - y_j| / (1 + |x_j - y_j|)
// with lambda fixed at 2^{5/2}. Weights below the subnormal range are exact
// zeros, so shells beyond j ~ 20 never contribute. States must match in size.
double weak_distance(const ShellState& x, const ShellState& y);

// Change of variables between amplitudes, deviations and the diagonal form.
// to_deviation rescales general-f0 states into the normalized frame first.
Deviation to_deviation(const ShellState& state, const ModelParams& params);
ShellState from_deviation(const Deviation& dev, const ModelParams& params, double t = 0.0);
DSequence deviation_to_d(const Deviation& dev, const ModelParams& params);
Deviation d_to_deviation(const DSequence& seq, const ModelParams& params);

// Energy flux through shell k: Pi_k = lambda^k a_k^2 a_{k+1}, with the
// closure-defined a_{N+1} at the boundary. Requires 0 <= k <= N.
double energy_flux(const ShellState& state, int k, const ModelParams& params);

// Boundary dissipation rate. FixedPointClosure: D = lambda^{N-1/3} a_N^3;
// PureGalerkin sheds nothing and returns 0.
double dissipation_rate(const ShellState& state, const ModelParams& params);

// (k_j, a_j^2) pairs for all retained shells.
SpectrumSample spectrum(const ShellState& state);

}  // namespace dyadic
