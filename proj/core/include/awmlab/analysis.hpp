#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "awmlab/envs.hpp"
#include "awmlab/params.hpp"
#include "awmlab/policy.hpp"
#include "awmlab/worldmodels.hpp"

namespace awmlab {

/// One measured-versus-bound comparison for a policy gradient. Constants a
/// given check does not use stay NaN; NaN serializes to null in json().
struct BoundReport {
  double measured = std::numeric_limits<double>::quiet_NaN();
  double bound = std::numeric_limits<double>::quiet_NaN();
  double l_r = std::numeric_limits<double>::quiet_NaN();    // reward slope bound
  double l_pi = std::numeric_limits<double>::quiet_NaN();   // policy Jacobian bound
  double l_a = std::numeric_limits<double>::quiet_NaN();    // per-action step slope
  double l_s = std::numeric_limits<double>::quiet_NaN();    // state-to-state slope
  double eta = std::numeric_limits<double>::quiet_NaN();    // recurrent growth rate
  double alpha = std::numeric_limits<double>::quiet_NaN();  // action norm cap
  double beta = std::numeric_limits<double>::quiet_NaN();   // 1 / max activation slope
  double w_v = std::numeric_limits<double>::quiet_NaN();    // value map norm
  double w_o = std::numeric_limits<double>::quiet_NaN();    // readout norm
  double w_a = std::numeric_limits<double>::quiet_NaN();    // action map norm
  double w_x = std::numeric_limits<double>::quiet_NaN();    // recurrent map norm
  int horizon = 0;
  bool satisfied = false;  // measured <= bound * (1 + 1e-9), NaN fails
  std::string note;
  std::string json() const;
};

/// One scalar per grid point. grid is strictly increasing; values keep
/// non-finite entries so blown-up points stay visible.
struct SweepResult {
  std::string input_name;  // "horizon" or "action"
  std::string value_name;  // "mean_grad_norm" or "return"
  std::string target;      // which dynamics produced the values
  std::vector<double> grid;
  std::vector<double> values;
  std::string csv() const;  // header "input_name,value_name", one row per point
};

/// Gradient norms over a horizon grid plus the fitted log growth rate. The
/// fit runs over the largest suffix of the grid whose norms are finite and
/// positive; slope is NaN when fewer than two points qualify.
struct GrowthFit {
  std::vector<int> horizons;
  std::vector<double> norms;          // ||dJ/dtheta|| per horizon
  std::vector<double> longest_chain;  // |d s_H / d a_1| per horizon
  double slope = std::numeric_limits<double>::quiet_NaN();
  bool loglog = false;  // true when slope is per log horizon, not per step
  int last_finite_h = 0;
  // Closed form versus reverse mode, max relative gap over finite points;
  // NaN when the construction has no closed form.
  double max_rel_gap = std::numeric_limits<double>::quiet_NaN();
  BoundReport at_last;  // bound comparison at one representative horizon
};

/// State-only reward used by the bound checks. Default: sum of tanh(s).
using StateReward = std::function<Value(Tape&, const Value& s)>;

/// Rolls the model out under the mean policy with stopped policy inputs,
/// then compares the measured policy-gradient norm of J = sum_t r(s_t)
/// against  l_r * l_pi * sum_t sum_{k<t} ||d s_t / d a_k||  with every
/// per-action Jacobian norm taken spectrally from repeated backward passes.
/// l_r and l_pi are the max per-step operator norms observed along this
/// rollout, standing in for global slope constants; the report's note
/// records that weakening. Model parameters are held frozen.
BoundReport action_jacobian_bound(const WorldModel& model, const ParamStore& model_ps,
                                  const Policy& pi, const ParamStore& pi_ps,
                                  const EnvProblem& env, int horizon,
                                  const StateReward& reward = {});

/// Scalar history-model construction with constant partials: each predicted
/// step multiplies the previous state by l_s and the action by l_a, every
/// action is the same scalar parameter, and the reward reads the state
/// directly. Gradients follow the closed recursion exactly, so the fit
/// doubles as a closed-form cross-check. l_s > 1 makes the slope approach
/// log(l_s). Requires l_a > 0 and l_s >= 0.
GrowthFit history_model_growth(double l_s, double l_a, const std::vector<int>& h_grid);

/// Scalar linear recurrent chain x_{t+1} = w_x x_t + w_a a_t with readout
/// w_o, built on the real recurrent cell with identity activation. Positive
/// weights required; the fitted slope approaches log(w_x) when w_x > 1 and
/// the closed form is exact.
GrowthFit rnn_model_growth(double w_x, double w_a, double w_o, const std::vector<int>& h_grid);

struct AttentionGrowthSpec {
  int state_dim = 3;
  int action_dim = 2;
  int d_z = 4;
  std::vector<int> h_grid = {8, 16, 32, 64, 128, 256};
  uint64_t seed = 0;
  int bound_horizon = 32;  // where at_last is evaluated
};

/// Softmax-attention chain read directly off the action sequence, driven by
/// a random tanh policy with stopped inputs. Norms are fitted on log-log
/// axes; the growth must stay polynomial (slope well below the exponential
/// constructions above). Weights and policy are drawn from spec.seed.
GrowthFit attention_model_growth(const AttentionGrowthSpec& spec);

struct GradNormSweepSpec {
  std::vector<int> horizons = {5, 10, 20, 50, 100};
  int samples = 50;
  uint64_t seed = 0;
};

/// Mean over random action sequences, uniform within the action bounds, of
/// the Frobenius norm of d s_H / d a_1 through the model's predicted chain.
/// Non-finite norms stay in the mean rather than being dropped.
SweepResult grad_norm_sweep(const WorldModel& model, const ParamStore& model_ps,
                            const EnvProblem& env, const GradNormSweepSpec& spec);

/// Return of the predicted rollout as a function of the first action, over a
/// uniform grid of `points` values between the action bounds; later steps
/// hold the midpoint action. The env must have a single action dimension.
/// With a wrapped-dynamics model this reproduces the simulator's returns.
SweepResult landscape_sweep(const WorldModel& model, const ParamStore& model_ps,
                            const EnvProblem& env, int points = 201);

struct OfflineFitSpec {
  int64_t transitions = 100000;  // uniform-random transitions to collect
  int steps = 1000;
  int batch = 64;  // episodes per step
  double lr = 0.001;
  uint64_t seed = 0;
};

struct OfflineFitResult {
  WorldModel model;
  std::vector<double> losses;  // pre-update mean per-transition loss per step
  int64_t transitions = 0;
};

/// Collects uniform-random episodes until the transition budget is met, then
/// trains a fresh model of the given shape on sampled batches. Parameters
/// land in `ps`; seeded runs are reproducible.
OfflineFitResult offline_fit(ParamStore& ps, const WorldModelSpec& model_spec,
                             const EnvProblem& env, const OfflineFitSpec& fit);

/// Builds the policy gradient twice, once through the wrapped-dynamics model
/// rollout and once through a direct simulator loop, and returns the max
/// elementwise relative difference. Both paths stop gradients into the
/// policy inputs. Zero when the horizon admits no actions.
double frnn_gradient_gap(const EnvProblem& env, const Policy& pi,
                         const ParamStore& pi_ps, int horizon);

/// Sum of |values[i+1] - values[i]|.
double total_variation(const std::vector<double>& values);

/// Ordinary least-squares slope of ys against xs. Needs at least two points
/// and non-constant xs; NaN otherwise.
double least_squares_slope(const std::vector<double>& xs, const std::vector<double>& ys);

struct CheckItem {
  std::string name;
  bool passed = false;
  double value = std::numeric_limits<double>::quiet_NaN();
  double threshold = std::numeric_limits<double>::quiet_NaN();
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckItem> items;
  bool all_passed() const;
  std::string json() const;
};

/// Scales for run_verification. Defaults are the full battery; tests shrink
/// them to keep unit runs fast.
struct VerifySpec {
  uint64_t seed = 0;
  int corpus_instances = 100;   // derivative spot checks across all op kinds
  int frnn_seeds = 20;          // policy draws per env and horizon
  int bound_configs = 50;       // random rollout-bound configurations
  int attention_seeds = 20;     // attention growth repetitions
};

/// Runs the whole numerical battery: the derivative corpus, wrapped-dynamics
/// gradient equality, rollout bound checks with a tight scalar case, the
/// recurrent and history growth rates, attention growth, and teacher-forced
/// loss gradient equality. Deterministic for a fixed spec.
VerifyReport run_verification(const VerifySpec& spec = {});

}  // namespace awmlab
