#include "dyadic/model.hpp"

#include <algorithm>
#include <cstdio>

namespace dyadic {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidParams(msg);
}

void check_state_size(const ModelParams& p, size_t n, const char* who) {
  if (n != static_cast<size_t>(p.n_shells) + 1) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s: state has %zu entries, expected n_shells+1 = %d",
                  who, n, p.n_shells + 1);
    throw InvalidParams(buf);
  }
}

}  // namespace

void ModelParams::validate() const {
  require(std::isfinite(g) && g > 0.0, "params.g: lambda = 2^g must exceed 1 (g > 0)");
  require(std::isfinite(f0) && f0 > 0.0, "params.f0: forcing must be positive");
  require(n_shells >= 1, "params.n_shells: need at least shells 0 and 1 (n_shells >= 1)");
  require(n_shells <= kMaxShells, "params.n_shells: exceeds validated range (<= 48)");
}

double frame_scale(const ModelParams& params) {
  return std::sqrt(params.f0 * params.lambda_pow(1.0 / 3.0));
}

ShellState fixed_point(const ModelParams& params) {
  params.validate();
  const double c = frame_scale(params);
  ShellState s;
  s.t = 0.0;
  s.a.resize(params.n_shells + 1);
  for (int j = 0; j <= params.n_shells; ++j) s.a[j] = c * params.lambda_pow(-j / 3.0);
  return s;
}

void rhs(const ModelParams& params, std::span<const double> a, std::span<double> dadt) {
  const int N = params.n_shells;
  check_state_size(params, a.size(), "rhs");
  check_state_size(params, dadt.size(), "rhs");

  dadt[0] = -a[0] * a[1] + params.f0;
  for (int j = 1; j < N; ++j) {
    dadt[j] = params.lambda_pow(j - 1.0) * a[j - 1] * a[j - 1] -
              params.lambda_pow(static_cast<double>(j)) * a[j] * a[j + 1];
  }
  if (N >= 1) {
    const double growth = params.lambda_pow(N - 1.0) * a[N - 1] * a[N - 1];
    if (params.closure == Closure::FixedPointClosure) {
      dadt[N] = growth - params.lambda_pow(N - 1.0 / 3.0) * a[N] * a[N];
    } else {
      dadt[N] = growth;
    }
  }
}

std::vector<double> rhs(const ShellState& state, const ModelParams& params) {
  std::vector<double> out(state.a.size());
  rhs(params, state.a, out);
  return out;
}

double energy_norm(std::span<const double> a) { return sobolev_norm(a, 0.0); }

double sobolev_norm(std::span<const double> a, double s) {
  double total = 0.0;
  for (size_t j = 0; j < a.size(); ++j) {
    const double w = std::exp2(2.0 * s * static_cast<double>(j));
    total += w * a[j] * a[j];
  }
  return std::sqrt(total);
}

double weak_distance(const ShellState& x, const ShellState& y) {
  if (x.a.size() != y.a.size())
    throw InvalidParams("weak_distance: states live on different truncations");
  // Weight exponent is -g j^2 with the metric's fixed g = 5/2. exp2 underflows
  // to an exact zero past the subnormal range; stop summing there.
  constexpr double kMetricG = 2.5;
  double total = 0.0;
  for (size_t j = 0; j < x.a.size(); ++j) {
    const double e = -kMetricG * static_cast<double>(j) * static_cast<double>(j);
    if (e < -1100.0) break;
    const double diff = std::fabs(x.a[j] - y.a[j]);
    total += std::exp2(e) * diff / (1.0 + diff);
  }
  return total;
}

Deviation to_deviation(const ShellState& state, const ModelParams& params) {
  check_state_size(params, state.a.size(), "to_deviation");
  const double c = frame_scale(params);
  Deviation dev;
  dev.b.resize(state.a.size());
  for (size_t j = 0; j < state.a.size(); ++j)
    dev.b[j] = state.a[j] / c - params.lambda_pow(-static_cast<double>(j) / 3.0);
  return dev;
}

ShellState from_deviation(const Deviation& dev, const ModelParams& params, double t) {
  check_state_size(params, dev.b.size(), "from_deviation");
  const double c = frame_scale(params);
  ShellState s;
  s.t = t;
  s.a.resize(dev.b.size());
  for (size_t j = 0; j < dev.b.size(); ++j)
    s.a[j] = c * (dev.b[j] + params.lambda_pow(-static_cast<double>(j) / 3.0));
  return s;
}

DSequence deviation_to_d(const Deviation& dev, const ModelParams& params) {
  check_state_size(params, dev.b.size(), "deviation_to_d");
  DSequence seq;
  seq.d.resize(dev.b.size());
  seq.d[0] = params.lambda_pow(-1.0 / 6.0) * dev.b[0];
  for (size_t j = 1; j < dev.b.size(); ++j) {
    seq.d[j] = params.lambda_pow((static_cast<double>(j) - 1.0) / 3.0) *
               (params.lambda_pow(1.0 / 6.0) * dev.b[j] -
                params.lambda_pow(-1.0 / 6.0) * dev.b[j - 1]);
  }
  return seq;
}

Deviation d_to_deviation(const DSequence& seq, const ModelParams& params) {
  check_state_size(params, seq.d.size(), "d_to_deviation");
  // Inverse via prefix sums: b_j = lambda^{1/6 - j/3} (d_0 + ... + d_j).
  Deviation dev;
  dev.b.resize(seq.d.size());
  double prefix = 0.0;
  for (size_t j = 0; j < seq.d.size(); ++j) {
    prefix += seq.d[j];
    dev.b[j] = params.lambda_pow(1.0 / 6.0 - static_cast<double>(j) / 3.0) * prefix;
  }
  return dev;
}

double energy_flux(const ShellState& state, int k, const ModelParams& params) {
  const int N = params.n_shells;
  check_state_size(params, state.a.size(), "energy_flux");
  if (k < 0 || k > N) throw InvalidParams("energy_flux: shell index out of range");
  double a_next;
  if (k < N) {
    a_next = state.a[k + 1];
  } else if (params.closure == Closure::FixedPointClosure) {
    a_next = params.lambda_pow(-1.0 / 3.0) * state.a[N];
  } else {
    a_next = 0.0;
  }
  return params.lambda_pow(static_cast<double>(k)) * state.a[k] * state.a[k] * a_next;
}

double dissipation_rate(const ShellState& state, const ModelParams& params) {
  check_state_size(params, state.a.size(), "dissipation_rate");
  if (params.closure != Closure::FixedPointClosure) return 0.0;
  const int N = params.n_shells;
  const double aN = state.a[N];
  return params.lambda_pow(N - 1.0 / 3.0) * aN * aN * aN;
}

SpectrumSample spectrum(const ShellState& state) {
  SpectrumSample out;
  out.k.resize(state.a.size());
  out.E.resize(state.a.size());
  for (size_t j = 0; j < state.a.size(); ++j) {
    out.k[j] = std::exp2(static_cast<double>(j));
    out.E[j] = state.a[j] * state.a[j];
  }
  return out;
}

}  // namespace dyadic
