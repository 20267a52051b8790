// Adaptive time integration for the truncated shell model.
//
// Two steppers share one controller, positivity contract and dense output:
//   * Dopri54 — explicit embedded Dormand-Prince 5(4), the default for small
//     truncations. Its stability interval caps dt at ~3.3/lambda^{(2N-1)/3}
//     near the equilibrium ladder, which is prohibitive for large N.
//   * TrBdf2  — L-stable one-step DIRK (trapezoidal + BDF2 stages, embedded
//     3rd-order error estimate, simplified Newton on the analytic tridiagonal
//     Jacobian). Cost per step is O(N); stiffness does not limit dt.
// Auto picks TrBdf2 once n_shells >= 10.
#pragma once

#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dyadic/model.hpp"

namespace dyadic {

struct IntegrationError : std::runtime_error {
  double t;
  IntegrationError(const std::string& msg, double t_) : std::runtime_error(msg), t(t_) {}
};
// dt collapsed below the resolvable floor while the error test kept failing.
struct StepSizeUnderflow : IntegrationError { using IntegrationError::IntegrationError; };
// accepted+rejected attempts exceeded control.max_steps.
struct MaxStepsExceeded : IntegrationError { using IntegrationError::IntegrationError; };
// state or derivative left the finite double range (parameters too extreme).
struct NonFiniteState : IntegrationError { using IntegrationError::IntegrationError; };

enum class Method { Auto, Dopri54, TrBdf2 };

struct StepControl {
  double rtol = 1e-8;
  double atol = 1e-12;
  double dt_init = 0.0;  // 0 => derive from the initial derivative scale
  double dt_min = 1e-14;
  double dt_max = 0.1;
  double safety = 0.9;
  long long max_steps = 200'000'000;
  Method method = Method::Auto;

  void validate() const;  // throws InvalidParams
};

Method resolve_method(const StepControl& control, const ModelParams& params);

struct StepStats {
  long long accepted = 0;
  long long rejected = 0;
  long long rhs_evals = 0;
  long long jacobian_evals = 0;
  long long newton_iters = 0;
  double dt_smallest = std::numeric_limits<double>::infinity();
  double dt_largest = 0.0;
};

// Sampled solution on the requested output grid. States are stored flat,
// sample i occupying entries [i*(N+1), (i+1)*(N+1)). Each sample caches the
// scalars every downstream consumer needs: |a|^2, (f,a) = f0*a_0, and the
// closure dissipation D.
struct Trajectory {
  ModelParams params;
  StepControl control;
  std::vector<double> times;
  std::vector<double> states;  // times.size() * (n_shells+1)
  std::vector<double> energy_sq;
  std::vector<double> force_dot;
  std::vector<double> dissipation;
  StepStats stats;

  size_t size() const { return times.size(); }
  int width() const { return params.n_shells + 1; }
  std::span<const double> state(size_t i) const {
    return {states.data() + i * width(), static_cast<size_t>(width())};
  }
  ShellState state_at(size_t i) const {
    auto s = state(i);
    return ShellState{times[i], {s.begin(), s.end()}};
  }
};

// Integrate from `initial` to t_end, emitting states at exactly the requested
// sample times (cubic Hermite interpolation between accepted steps; times that
// land on step endpoints are copied verbatim). sample_times must be ascending
// and contained in [initial.t, t_end]. Deterministic: identical inputs produce
// bit-identical trajectories.
Trajectory integrate(const ShellState& initial, const ModelParams& params,
                     const StepControl& control, double t_end,
                     std::span<const double> sample_times);

// Convenience: n_samples uniformly spaced times spanning [initial.t, t_end].
Trajectory integrate(const ShellState& initial, const ModelParams& params,
                     const StepControl& control, double t_end, int n_samples);

// One accepted adaptive step (retries internally on error-test failure).
struct StepResult {
  ShellState state;
  double dt_used = 0.0;
  double dt_next = 0.0;
  double error_estimate = 0.0;  // scaled; <= 1 on the accepted attempt
};
StepResult step(const ShellState& state, const ModelParams& params,
                const StepControl& control, double dt_try);

// Positivity contract: clamps components in [-atol, 0) to exact zero in place;
// any component below -atol rejects the candidate (caller reduces dt).
enum class StepDecision { Accept, Reject };
StepDecision enforce_positivity(std::span<double> candidate, const StepControl& control);

// Threshold crossing of a scalar functional along a trajectory.
struct EventSpec {
  enum class Functional { SobolevNorm, ShellValue, EnergyNorm };
  enum class Direction { Upward, Downward };
  Functional functional = Functional::SobolevNorm;
  double s = 5.0 / 6.0;  // Sobolev order, used by SobolevNorm
  int shell = 0;         // shell index, used by ShellValue
  double threshold = 0.0;
  Direction direction = Direction::Upward;
};

struct EventHit {
  double t = 0.0;
  ShellState state;
};

// Scan the sampled trajectory for the first crossing in the requested
// direction; refine within the bracketing interval by bisection on the cubic
// Hermite interpolant (derivatives recomputed from the model rhs) until the
// bracket shrinks below rtol*max(1,|t|). A first sample already across the
// threshold reports the event at that sample. Returns nullopt if no crossing.
std::optional<EventHit> detect_event(const Trajectory& traj, const EventSpec& spec);

}  // namespace dyadic
