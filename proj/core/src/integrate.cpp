#include "dyadic/integrate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace dyadic {

namespace {

constexpr double kHugeState = 1e100;  // beyond this we report NonFiniteState

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidParams(msg);
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

// Model rhs/Jacobian with the lambda powers precomputed once per run; the hot
// loop must not call exp2 per shell per stage.
struct RhsKernel {
  int N;
  double f0;
  bool fp_closure;
  double closfac;               // lambda^{N-1/3}
  std::vector<double> pre;      // lambda^{j-1}
  std::vector<double> cur;      // lambda^j

  explicit RhsKernel(const ModelParams& p)
      : N(p.n_shells),
        f0(p.f0),
        fp_closure(p.closure == Closure::FixedPointClosure),
        closfac(p.lambda_pow(p.n_shells - 1.0 / 3.0)),
        pre(p.n_shells + 1),
        cur(p.n_shells + 1) {
    for (int j = 0; j <= N; ++j) {
      pre[j] = p.lambda_pow(j - 1.0);
      cur[j] = p.lambda_pow(static_cast<double>(j));
    }
  }

  void eval(const double* a, double* da) const {
    da[0] = -a[0] * a[1] + f0;
    for (int j = 1; j < N; ++j)
      da[j] = pre[j] * a[j - 1] * a[j - 1] - cur[j] * a[j] * a[j + 1];
    const double growth = pre[N] * a[N - 1] * a[N - 1];
    da[N] = fp_closure ? growth - closfac * a[N] * a[N] : growth;
  }

  // Tridiagonal Jacobian at `a`: sub/diag/sup of d(rhs_j)/d(a_{j-1,j,j+1}).
  void jacobian(const double* a, double* sub, double* diag, double* sup) const {
    diag[0] = -a[1];
    sup[0] = -a[0];
    for (int j = 1; j < N; ++j) {
      sub[j] = 2.0 * pre[j] * a[j - 1];
      diag[j] = -cur[j] * a[j + 1];
      sup[j] = -cur[j] * a[j];
    }
    sub[N] = 2.0 * pre[N] * a[N - 1];
    diag[N] = fp_closure ? -2.0 * closfac * a[N] : 0.0;
  }
};

// max_j |e_j| / (atol + rtol*max(|y_j|,|z_j|)); NaN propagates (caller treats
// non-finite as a failed attempt).
double scaled_error_norm(std::span<const double> e, std::span<const double> y,
                         std::span<const double> z, const StepControl& c) {
  double m = 0.0;
  for (size_t j = 0; j < e.size(); ++j) {
    const double scale = c.atol + c.rtol * std::max(std::fabs(y[j]), std::fabs(z[j]));
    const double q = std::fabs(e[j]) / scale;
    if (!(q <= m)) m = q;  // picks up NaN as well as larger values
  }
  return m;
}

// Cubic Hermite interpolation on [t0, t0+h] from endpoint values/derivatives.
void hermite_eval(double t0, std::span<const double> y0, std::span<const double> f0,
                  double h, std::span<const double> y1, std::span<const double> f1,
                  double t, std::span<double> out) {
  const double th = (t - t0) / h;
  const double th2 = th * th, th3 = th2 * th;
  const double h00 = 2 * th3 - 3 * th2 + 1;
  const double h10 = th3 - 2 * th2 + th;
  const double h01 = -2 * th3 + 3 * th2;
  const double h11 = th3 - th2;
  for (size_t j = 0; j < out.size(); ++j)
    out[j] = h00 * y0[j] + h10 * h * f0[j] + h01 * y1[j] + h11 * h * f1[j];
}

enum class AttemptStatus { Ok, ErrorTestFailed, PositivityFailed, SolverFailed, NonFinite };

struct AttemptResult {
  AttemptStatus status = AttemptStatus::Ok;
  double err_norm = 0.0;
};

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4), FSAL. Classic coefficients.
// ---------------------------------------------------------------------------
struct Dopri54 {
  static constexpr int order_exponent = 5;  // controller uses err^(-1/5)

  const RhsKernel& rhs;
  const StepControl& control;
  StepStats& stats;
  int n;
  std::vector<double> k2, k3, k4, k5, k6, ytmp, err;

  Dopri54(const RhsKernel& r, const StepControl& c, StepStats& s)
      : rhs(r), control(c), stats(s), n(r.N + 1),
        k2(n), k3(n), k4(n), k5(n), k6(n), ytmp(n), err(n) {}

  // y,f on entry; on Ok fills y_new,f_new (f_new = rhs at y_new, FSAL-ready).
  AttemptResult attempt(const std::vector<double>& y, const std::vector<double>& f,
                        double dt, std::vector<double>& y_new, std::vector<double>& f_new) {
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                            a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                            e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

    for (int j = 0; j < n; ++j) ytmp[j] = y[j] + dt * a21 * f[j];
    rhs.eval(ytmp.data(), k2.data());
    for (int j = 0; j < n; ++j) ytmp[j] = y[j] + dt * (a31 * f[j] + a32 * k2[j]);
    rhs.eval(ytmp.data(), k3.data());
    for (int j = 0; j < n; ++j) ytmp[j] = y[j] + dt * (a41 * f[j] + a42 * k2[j] + a43 * k3[j]);
    rhs.eval(ytmp.data(), k4.data());
    for (int j = 0; j < n; ++j)
      ytmp[j] = y[j] + dt * (a51 * f[j] + a52 * k2[j] + a53 * k3[j] + a54 * k4[j]);
    rhs.eval(ytmp.data(), k5.data());
    for (int j = 0; j < n; ++j)
      ytmp[j] = y[j] + dt * (a61 * f[j] + a62 * k2[j] + a63 * k3[j] + a64 * k4[j] + a65 * k5[j]);
    rhs.eval(ytmp.data(), k6.data());
    for (int j = 0; j < n; ++j)
      y_new[j] = y[j] + dt * (b1 * f[j] + b3 * k3[j] + b4 * k4[j] + b5 * k5[j] + b6 * k6[j]);
    rhs.eval(y_new.data(), f_new.data());  // 7th stage, reused as next step's f
    stats.rhs_evals += 6;

    if (!all_finite(y_new) || !all_finite(f_new)) return {AttemptStatus::NonFinite, 0.0};

    for (int j = 0; j < n; ++j)
      err[j] = dt * (e1 * f[j] + e3 * k3[j] + e4 * k4[j] + e5 * k5[j] + e6 * k6[j] + e7 * f_new[j]);
    const double err_norm = scaled_error_norm(err, y, y_new, control);
    if (!std::isfinite(err_norm)) return {AttemptStatus::NonFinite, 0.0};
    if (err_norm > 1.0) return {AttemptStatus::ErrorTestFailed, err_norm};

    if (enforce_positivity(y_new, control) == StepDecision::Reject)
      return {AttemptStatus::PositivityFailed, err_norm};
    // A clamp may have nudged y_new; refresh the FSAL derivative off the state
    // we actually keep. Cheap and keeps dense output consistent.
    rhs.eval(y_new.data(), f_new.data());
    stats.rhs_evals += 1;
    return {AttemptStatus::Ok, err_norm};
  }
};

// ---------------------------------------------------------------------------
// TR-BDF2 as a stiffly accurate DIRK with gamma = 2 - sqrt(2):
//   stages c = [0, gamma, 1], A = [[0,0,0],[d,d,0],[w,w,d]],
//   d = 1 - sqrt(2)/2, w = sqrt(2)/4, b = last row (L-stable).
// Embedded 3rd-order weights bh solve the quadrature conditions; the defect
// (b - bh) gives the error estimate, filtered through (I - d*dt*J)^{-1}.
// Simplified Newton, one Jacobian per attempt, tridiagonal Thomas solves.
// ---------------------------------------------------------------------------
struct TrBdf2 {
  static constexpr int order_exponent = 3;  // estimate is O(dt^3)

  const RhsKernel& rhs;
  const StepControl& control;
  StepStats& stats;
  int n;
  double dcoef, wcoef, gamma, bh1, bh2, bh3;
  std::vector<double> sub, diag, sup;      // Jacobian bands
  std::vector<double> wsub, wdiag, wsup;   // factored W = I - d*dt*J
  std::vector<double> cp, tmp;             // Thomas workspace
  std::vector<double> f2, f3, stage, resid, delta, rrhs;

  TrBdf2(const RhsKernel& r, const StepControl& c, StepStats& s)
      : rhs(r), control(c), stats(s), n(r.N + 1) {
    const double s2 = std::sqrt(2.0);
    gamma = 2.0 - s2;
    dcoef = 1.0 - s2 / 2.0;
    wcoef = s2 / 4.0;
    bh2 = (3.0 * s2 + 4.0) / 12.0;
    bh3 = 0.5 - (s2 + 1.0) / 6.0;
    bh1 = 1.0 - bh2 - bh3;
    for (auto* v : {&sub, &diag, &sup, &wsub, &wdiag, &wsup, &cp, &tmp, &f2, &f3,
                    &stage, &resid, &delta, &rrhs})
      v->resize(n);
  }

  // Factor W = I - d*dt*J. Returns false on a (numerically) singular pivot.
  bool factor(double dt) {
    const double c = dcoef * dt;
    for (int j = 0; j < n; ++j) {
      wdiag[j] = 1.0 - c * diag[j];
      wsub[j] = j > 0 ? -c * sub[j] : 0.0;
      wsup[j] = j < n - 1 ? -c * sup[j] : 0.0;
    }
    double piv = wdiag[0];
    if (std::fabs(piv) < 1e-300 || !std::isfinite(piv)) return false;
    cp[0] = wsup[0] / piv;
    tmp[0] = piv;
    for (int j = 1; j < n; ++j) {
      piv = wdiag[j] - wsub[j] * cp[j - 1];
      if (std::fabs(piv) < 1e-300 || !std::isfinite(piv)) return false;
      cp[j] = j < n - 1 ? wsup[j] / piv : 0.0;
      tmp[j] = piv;
    }
    return true;
  }

  void solve(std::span<double> x) const {  // in place, using the factorization
    x[0] = x[0] / tmp[0];
    for (int j = 1; j < n; ++j) x[j] = (x[j] - wsub[j] * x[j - 1]) / tmp[j];
    for (int j = n - 2; j >= 0; --j) x[j] -= cp[j] * x[j + 1];
  }

  // Solve Y - d*dt*f(Y) = r by simplified Newton from predictor `Y`.
  // On success leaves the stage in `Y` and its derivative in `fY`.
  bool newton(double dt, const std::vector<double>& yref, std::vector<double>& Y,
              std::vector<double>& fY, const std::vector<double>& r) {
    double prev_norm = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 10; ++it) {
      rhs.eval(Y.data(), fY.data());
      stats.rhs_evals += 1;
      stats.newton_iters += 1;
      for (int j = 0; j < n; ++j) resid[j] = r[j] + dcoef * dt * fY[j] - Y[j];
      if (!all_finite(resid)) return false;
      solve(resid);
      double norm = 0.0;
      for (int j = 0; j < n; ++j) {
        Y[j] += resid[j];
        const double scale =
            control.atol + control.rtol * std::max(std::fabs(yref[j]), std::fabs(Y[j]));
        norm = std::max(norm, std::fabs(resid[j]) / scale);
      }
      if (!std::isfinite(norm)) return false;
      if (norm <= 0.02) {
        rhs.eval(Y.data(), fY.data());
        stats.rhs_evals += 1;
        return true;
      }
      if (it >= 1 && norm > 2.0 * prev_norm) return false;  // diverging
      prev_norm = norm;
    }
    return false;
  }

  AttemptResult attempt(const std::vector<double>& y, const std::vector<double>& f,
                        double dt, std::vector<double>& y_new, std::vector<double>& f_new) {
    rhs.jacobian(y.data(), sub.data(), diag.data(), sup.data());
    stats.jacobian_evals += 1;
    if (!factor(dt)) return {AttemptStatus::SolverFailed, 0.0};

    // Trapezoidal stage to t + gamma*dt.
    for (int j = 0; j < n; ++j) {
      rrhs[j] = y[j] + dcoef * dt * f[j];
      stage[j] = y[j] + gamma * dt * f[j];  // explicit predictor
    }
    if (!newton(dt, y, stage, f2, rrhs)) return {AttemptStatus::SolverFailed, 0.0};

    // BDF2 stage to t + dt; predictor extrapolates through the first stage.
    for (int j = 0; j < n; ++j) {
      rrhs[j] = y[j] + dt * wcoef * (f[j] + f2[j]);
      y_new[j] = y[j] + (stage[j] - y[j]) / gamma;
    }
    if (!newton(dt, y, y_new, f_new, rrhs)) return {AttemptStatus::SolverFailed, 0.0};

    if (!all_finite(y_new)) return {AttemptStatus::NonFinite, 0.0};

    for (int j = 0; j < n; ++j)
      resid[j] = dt * ((wcoef - bh1) * f[j] + (wcoef - bh2) * f2[j] + (dcoef - bh3) * f_new[j]);
    solve(resid);  // stiff filter on the defect
    const double err_norm = scaled_error_norm(resid, y, y_new, control);
    if (!std::isfinite(err_norm)) return {AttemptStatus::NonFinite, 0.0};
    if (err_norm > 1.0) return {AttemptStatus::ErrorTestFailed, err_norm};

    if (enforce_positivity(y_new, control) == StepDecision::Reject)
      return {AttemptStatus::PositivityFailed, err_norm};
    rhs.eval(y_new.data(), f_new.data());
    stats.rhs_evals += 1;
    return {AttemptStatus::Ok, err_norm};
  }
};

double accept_factor(double err_norm, int order_exponent, double safety) {
  if (err_norm <= 0.0) return 5.0;
  const double f = safety * std::pow(err_norm, -1.0 / order_exponent);
  return std::clamp(f, 0.2, 5.0);
}

double reject_factor(double err_norm, int order_exponent, double safety) {
  const double f = safety * std::pow(err_norm, -1.0 / order_exponent);
  return std::clamp(f, 0.1, 0.5);
}

struct LoopCallbacks {
  // called after each accepted step with the segment endpoints
  virtual void on_accept(double t0, const std::vector<double>& y0, const std::vector<double>& f0,
                         double t1, const std::vector<double>& y1,
                         const std::vector<double>& f1) = 0;
  virtual ~LoopCallbacks() = default;
};

// Shared adaptive loop. `y`/`f` hold the initial state/derivative on entry and
// the final ones on exit. Throws the spec'd integration errors.
template <class Stepper>
void drive(Stepper& st, const RhsKernel& kernel, const StepControl& control, StepStats& stats,
           double t0, double t_end, std::vector<double>& y, std::vector<double>& f,
           LoopCallbacks& cb) {
  const int n = kernel.N + 1;
  std::vector<double> y_new(n), f_new(n);

  double dt;
  const double span = t_end - t0;
  if (control.dt_init > 0.0) {
    dt = control.dt_init;
  } else {
    dt = 0.01 * (1.0 + inf_norm(y)) / (1.0 + inf_norm(f));
  }
  dt = std::clamp(dt, control.dt_min, std::min(control.dt_max, span > 0.0 ? span : control.dt_max));

  double t = t0;
  bool last_failure_nonfinite = false;
  while (t < t_end) {
    if (stats.accepted + stats.rejected >= control.max_steps)
      throw MaxStepsExceeded("integrate: exceeded max_steps = " + std::to_string(control.max_steps), t);

    bool landing = false;
    if (dt >= t_end - t) {
      dt = t_end - t;
      landing = true;
    }

    const AttemptResult res = st.attempt(y, f, dt, y_new, f_new);
    if (res.status == AttemptStatus::Ok) {
      const double t_new = landing ? t_end : t + dt;
      stats.accepted += 1;
      stats.dt_smallest = std::min(stats.dt_smallest, dt);
      stats.dt_largest = std::max(stats.dt_largest, dt);
      cb.on_accept(t, y, f, t_new, y_new, f_new);
      t = t_new;
      y.swap(y_new);
      f.swap(f_new);
      dt = std::clamp(dt * accept_factor(res.err_norm, Stepper::order_exponent, control.safety),
                      control.dt_min, control.dt_max);
      last_failure_nonfinite = false;
      continue;
    }

    // Rejected attempt.
    stats.rejected += 1;
    if (res.status == AttemptStatus::NonFinite || res.status == AttemptStatus::SolverFailed) {
      if (inf_norm(y) > kHugeState)
        throw NonFiniteState("integrate: state magnitude beyond representable range", t);
      last_failure_nonfinite = (res.status == AttemptStatus::NonFinite);
      dt *= 0.25;
    } else if (res.status == AttemptStatus::PositivityFailed) {
      dt *= 0.5;
    } else {
      dt *= reject_factor(res.err_norm, Stepper::order_exponent, control.safety);
    }
    const double floor = std::max(control.dt_min, 4.0 * std::numeric_limits<double>::epsilon() *
                                                      std::max(std::fabs(t), 1.0));
    if (dt < floor) {
      if (last_failure_nonfinite)
        throw NonFiniteState("integrate: derivative overflow persists at the minimum step size", t);
      throw StepSizeUnderflow("integrate: step size underflow at t = " + std::to_string(t), t);
    }
  }
}

void validate_initial(const ShellState& initial, const ModelParams& params) {
  require(initial.a.size() == static_cast<size_t>(params.n_shells) + 1,
          "integrate: initial state size does not match n_shells+1");
  for (size_t j = 0; j < initial.a.size(); ++j) {
    if (!std::isfinite(initial.a[j]))
      throw InvalidParams("integrate: initial state has non-finite entry at shell " +
                          std::to_string(j));
    if (initial.a[j] < 0.0)
      throw InvalidParams("integrate: initial state negative at shell " + std::to_string(j) +
                          " (positivity holds only for nonnegative data)");
  }
}

double functional_value(const EventSpec& spec, std::span<const double> a) {
  switch (spec.functional) {
    case EventSpec::Functional::SobolevNorm: return sobolev_norm(a, spec.s);
    case EventSpec::Functional::ShellValue: return a[spec.shell];
    case EventSpec::Functional::EnergyNorm: return energy_norm(a);
  }
  return 0.0;
}

bool beyond(const EventSpec& spec, double v) {
  return spec.direction == EventSpec::Direction::Upward ? v >= spec.threshold
                                                        : v <= spec.threshold;
}

}  // namespace

void StepControl::validate() const {
  require(std::isfinite(rtol) && rtol > 0.0, "control.rtol: must be > 0");
  require(std::isfinite(atol) && atol > 0.0, "control.atol: must be > 0");
  require(std::isfinite(dt_min) && dt_min > 0.0, "control.dt_min: must be > 0");
  require(std::isfinite(dt_max) && dt_max >= dt_min, "control.dt_max: need dt_min <= dt_max");
  require(dt_init >= 0.0, "control.dt_init: must be >= 0 (0 selects automatically)");
  require(safety > 0.0 && safety < 1.0, "control.safety: must lie in (0,1)");
  require(max_steps >= 1, "control.max_steps: must be >= 1");
}

Method resolve_method(const StepControl& control, const ModelParams& params) {
  if (control.method != Method::Auto) return control.method;
  return params.n_shells >= 10 ? Method::TrBdf2 : Method::Dopri54;
}

StepDecision enforce_positivity(std::span<double> candidate, const StepControl& control) {
  for (double& x : candidate) {
    if (x < 0.0) {
      if (x < -control.atol) return StepDecision::Reject;
      x = 0.0;
    }
  }
  return StepDecision::Accept;
}

namespace {

struct SamplingCallbacks final : LoopCallbacks {
  Trajectory& traj;
  const RhsKernel& kernel;
  std::span<const double> sample_times;
  size_t next = 0;
  std::vector<double> buf;

  SamplingCallbacks(Trajectory& tr, const RhsKernel& k, std::span<const double> ts)
      : traj(tr), kernel(k), sample_times(ts), buf(k.N + 1) {}

  void emit(double ts, std::span<const double> a) {
    traj.times.push_back(ts);
    traj.states.insert(traj.states.end(), a.begin(), a.end());
    double e2 = 0.0;
    for (double x : a) e2 += x * x;
    traj.energy_sq.push_back(e2);
    traj.force_dot.push_back(kernel.f0 * a[0]);
    const double aN = a[kernel.N];
    traj.dissipation.push_back(kernel.fp_closure ? kernel.closfac * aN * aN * aN : 0.0);
  }

  void on_accept(double t0, const std::vector<double>& y0, const std::vector<double>& f0,
                 double t1, const std::vector<double>& y1, const std::vector<double>& f1) override {
    while (next < sample_times.size() && sample_times[next] <= t1) {
      const double ts = sample_times[next];
      if (ts == t1) {
        emit(ts, y1);
      } else {
        hermite_eval(t0, y0, f0, t1 - t0, y1, f1, ts, buf);
        for (double& x : buf)
          if (x < 0.0) x = 0.0;  // interpolation may undershoot an exact zero
        emit(ts, buf);
      }
      ++next;
    }
  }
};

}  // namespace

Trajectory integrate(const ShellState& initial, const ModelParams& params,
                     const StepControl& control, double t_end,
                     std::span<const double> sample_times) {
  params.validate();
  control.validate();
  validate_initial(initial, params);
  require(t_end >= initial.t, "integrate: t_end must be >= initial.t");
  for (size_t i = 0; i < sample_times.size(); ++i) {
    require(i == 0 || sample_times[i] >= sample_times[i - 1],
            "integrate: sample_times must be ascending");
    require(sample_times[i] >= initial.t && sample_times[i] <= t_end,
            "integrate: sample_times must lie within [initial.t, t_end]");
  }

  Trajectory traj;
  traj.params = params;
  traj.control = control;
  const int n = params.n_shells + 1;
  traj.times.reserve(sample_times.size());
  traj.states.reserve(sample_times.size() * n);

  const RhsKernel kernel(params);
  SamplingCallbacks cb(traj, kernel, sample_times);

  std::vector<double> y = initial.a;
  std::vector<double> f(n);
  kernel.eval(y.data(), f.data());
  traj.stats.rhs_evals += 1;

  // Samples at the start time are the initial state verbatim.
  while (cb.next < sample_times.size() && sample_times[cb.next] <= initial.t) {
    cb.emit(sample_times[cb.next], y);
    ++cb.next;
  }

  if (t_end > initial.t) {
    if (resolve_method(control, params) == Method::TrBdf2) {
      TrBdf2 st(kernel, control, traj.stats);
      drive(st, kernel, control, traj.stats, initial.t, t_end, y, f, cb);
    } else {
      Dopri54 st(kernel, control, traj.stats);
      drive(st, kernel, control, traj.stats, initial.t, t_end, y, f, cb);
    }
  }
  return traj;
}

Trajectory integrate(const ShellState& initial, const ModelParams& params,
                     const StepControl& control, double t_end, int n_samples) {
  require(n_samples >= 2, "integrate: need at least 2 samples");
  std::vector<double> ts(n_samples);
  for (int i = 0; i < n_samples; ++i)
    ts[i] = initial.t + (t_end - initial.t) * i / (n_samples - 1);
  ts.back() = t_end;
  return integrate(initial, params, control, t_end, ts);
}

StepResult step(const ShellState& state, const ModelParams& params, const StepControl& control,
                double dt_try) {
  params.validate();
  control.validate();
  require(state.a.size() == static_cast<size_t>(params.n_shells) + 1,
          "step: state size does not match n_shells+1");
  require(all_finite(state.a), "step: state must be finite");
  require(std::isfinite(dt_try) && dt_try > 0.0, "step: dt_try must be > 0");

  const RhsKernel kernel(params);
  StepStats stats;
  const int n = params.n_shells + 1;
  std::vector<double> y = state.a, f(n), y_new(n), f_new(n);
  kernel.eval(y.data(), f.data());

  double dt = std::clamp(dt_try, control.dt_min, control.dt_max);
  const auto run_attempts = [&](auto& st) -> StepResult {
    bool nonfinite = false;
    for (;;) {
      const AttemptResult res = st.attempt(y, f, dt, y_new, f_new);
      if (res.status == AttemptStatus::Ok) {
        const double fac =
            accept_factor(res.err_norm, std::remove_reference_t<decltype(st)>::order_exponent,
                          control.safety);
        return StepResult{ShellState{state.t + dt, y_new}, dt,
                          std::clamp(dt * fac, control.dt_min, control.dt_max), res.err_norm};
      }
      if (res.status == AttemptStatus::NonFinite || res.status == AttemptStatus::SolverFailed) {
        if (inf_norm(y) > kHugeState)
          throw NonFiniteState("step: state magnitude beyond representable range", state.t);
        nonfinite = (res.status == AttemptStatus::NonFinite);
        dt *= 0.25;
      } else if (res.status == AttemptStatus::PositivityFailed) {
        dt *= 0.5;
      } else {
        dt *= reject_factor(res.err_norm, std::remove_reference_t<decltype(st)>::order_exponent,
                            control.safety);
      }
      const double floor = std::max(control.dt_min, 4.0 * std::numeric_limits<double>::epsilon() *
                                                        std::max(std::fabs(state.t), 1.0));
      if (dt < floor) {
        if (nonfinite)
          throw NonFiniteState("step: derivative overflow persists at the minimum step size",
                               state.t);
        throw StepSizeUnderflow("step: step size underflow", state.t);
      }
    }
  };

  if (resolve_method(control, params) == Method::TrBdf2) {
    TrBdf2 st(kernel, control, stats);
    return run_attempts(st);
  }
  Dopri54 st(kernel, control, stats);
  return run_attempts(st);
}

std::optional<EventHit> detect_event(const Trajectory& traj, const EventSpec& spec) {
  if (traj.size() == 0) return std::nullopt;
  require(std::isfinite(spec.s), "detect_event: Sobolev order must be finite");
  if (spec.functional == EventSpec::Functional::ShellValue)
    require(spec.shell >= 0 && spec.shell < traj.width(), "detect_event: shell index out of range");

  const double v0 = functional_value(spec, traj.state(0));
  if (beyond(spec, v0)) return EventHit{traj.times[0], traj.state_at(0)};

  const RhsKernel kernel(traj.params);
  const int n = traj.width();
  std::vector<double> f0(n), f1(n), mid(n);
  double prev = v0;
  for (size_t i = 1; i < traj.size(); ++i) {
    const double v = functional_value(spec, traj.state(i));
    if (!beyond(spec, v)) {
      prev = v;
      continue;
    }
    (void)prev;
    // Crossed inside (t_{i-1}, t_i]: bisect on the Hermite interpolant.
    const auto ya = traj.state(i - 1);
    const auto yb = traj.state(i);
    kernel.eval(ya.data(), f0.data());
    kernel.eval(yb.data(), f1.data());
    double lo = traj.times[i - 1], hi = traj.times[i];
    const double t0 = lo, h = hi - lo;
    const double time_tol = traj.control.rtol * std::max(1.0, std::fabs(hi));
    while (hi - lo > time_tol && h > 0.0) {
      const double tm = 0.5 * (lo + hi);
      hermite_eval(t0, ya, f0, h, yb, f1, tm, mid);
      if (beyond(spec, functional_value(spec, mid)))
        hi = tm;
      else
        lo = tm;
    }
    EventHit hit;
    hit.t = hi;
    hit.state.t = hi;
    hit.state.a.resize(n);
    if (h > 0.0) {
      hermite_eval(t0, ya, f0, h, yb, f1, hi, hit.state.a);
      for (double& x : hit.state.a)
        if (x < 0.0) x = 0.0;
    } else {
      hit.state.a.assign(yb.begin(), yb.end());
    }
    return hit;
  }
  return std::nullopt;
}

}  // namespace dyadic
