#pragma once

#include <functional>
#include <string>
#include <vector>

#include "awmlab/array.hpp"
#include "awmlab/tape.hpp"

namespace awmlab {

/// One control problem with tape-expressible dynamics, so the true simulator
/// can sit inside a differentiated rollout exactly like a learned model.
///
/// Episode layout: H = horizon states s_1..s_H and H-1 actions a_1..a_{H-1};
/// step_tape maps (s_t, a_t, t) to s_{t+1} for t = 1..H-1. The return is
///   J = sum_{t=1..H-1} step_reward(s_t, a_t, t) + final_reward(s_H).
/// States are [1, state_dim] rows, actions [1, action_dim] rows, rewards
/// scalars. Steps may branch on forward values (contact events); each branch
/// taken is recorded as a smooth piece, so gradients are one-sided at kinks.
struct EnvProblem {
  std::string name;
  int state_dim = 0;
  int action_dim = 0;
  Array action_lo;  // [action_dim]
  Array action_hi;  // [action_dim]
  int horizon = 0;
  Array s1;  // [1, state_dim]
  bool terminal_only = false;

  std::function<Value(Tape&, const Value& s, const Value& a, int t)> step_tape;
  std::function<Value(Tape&, const Value& s, const Value& a, int t)> step_reward;
  std::function<Value(Tape&, const Value& s)> final_reward;

  Array midpoint_action() const;
  Array random_action(RngStream& rng) const;
};

/// Scalar-state control problem integrated with explicit Euler:
///   x_{t+1} = x_t + dt * phi(x_t, u_t),  dt = duration / (horizon - 1),
/// running reward dt * rho(x_t, u_t) per step plus an optional terminal
/// summand. Exposed so tests can instantiate synthetic dynamics.
struct OdeSpec {
  std::string name;
  double duration = 1.0;
  double lo = 0.0;  // scalar action bounds
  double hi = 1.0;
  double x1 = 0.0;
  std::function<Value(Tape&, const Value& x, const Value& u)> phi;
  std::function<Value(Tape&, const Value& x, const Value& u)> rho;      // may be null
  std::function<Value(Tape&, const Value& x)> final_r;                  // may be null
};

EnvProblem make_ode_env(const OdeSpec& spec, int horizon);

/// Registry of the built-in problems. Names: one_bounce, double_pendulum,
/// cancer, mould, bacteria, harvest. Throws on an unknown name or horizon < 2.
EnvProblem make_env(const std::string& name, int horizon);
std::vector<std::string> env_names();
/// Default horizon used when a config does not pin one.
int default_horizon(const std::string& name);

/// Rollout through the true dynamics on an existing tape. states[0] is s1 as a
/// constant; actions.size() must be horizon - 1. Gradients flow through both
/// the dynamics and the rewards.
struct TapeRollout {
  std::vector<Value> states;  // s_1..s_H
  Value total;                // scalar return
};
TapeRollout rollout_on_tape(Tape& t, const EnvProblem& env,
                            const std::vector<Value>& actions);

/// Plain simulation with concrete actions; tape used internally and dropped.
struct SimResult {
  std::vector<Array> states;   // H rows
  std::vector<double> rewards; // H entries, reward credited at each state index
  double total = 0.0;
};
SimResult simulate(const EnvProblem& env, const std::vector<Array>& actions);

/// A completed episode: H states, H-1 actions, rewards credited per state
/// index (running reward at the state it was earned from, terminal reward on
/// the last state).
struct Trajectory {
  std::vector<Array> states;
  std::vector<Array> actions;
  std::vector<double> rewards;
  double total = 0.0;
};
Trajectory record_episode(const EnvProblem& env,
                          const std::vector<Array>& actions);

/// Mean return of episodes with i.i.d. uniform actions inside the bounds.
double random_baseline(const EnvProblem& env, int episodes, uint64_t seed);

/// Best return found by multi-start gradient ascent on the raw action sequence
/// through the true dynamics (Adam on a flat [H-1, m] block, coordinates
/// clamped into the bounds after every step). Starts that produce a non-finite
/// return are abandoned and counted.
struct OracleResult {
  std::vector<Array> actions;  // H-1 rows of the best start
  double best_return = 0.0;
  int starts_failed = 0;
  bool ok = false;  // at least one start finished with a finite return
};
OracleResult trajopt_oracle(const EnvProblem& env, int iters, double lr,
                            uint64_t seed, int starts = 8);

/// (j - j_rand) / (j_oracle - j_rand). Throws when the denominator is not a
/// positive gap, which would make the scale meaningless.
double normalized_return(double j, double j_oracle, double j_rand);

/// Total mechanical energy of a double-pendulum state row (theta1, theta2,
/// omega1, omega2); conserved by the continuous dynamics, so integrator drift
/// is measurable against it.
double dp_energy(const Array& s);

}  // namespace awmlab
