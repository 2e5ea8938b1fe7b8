#include "awmlab/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "awmlab/bpo.hpp"
#include "awmlab/grad_check.hpp"
#include "awmlab/nets.hpp"
#include "json.hpp"

namespace awmlab {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string fmt12(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void check_h_grid(const std::vector<int>& grid, const char* where) {
  if (grid.empty()) throw std::invalid_argument(std::string(where) + ": empty horizon grid");
  for (size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] < 2)
      throw std::invalid_argument(std::string(where) + ": horizons must be >= 2");
    if (i > 0 && grid[i] <= grid[i - 1])
      throw std::invalid_argument(std::string(where) + ": grid must be strictly increasing");
  }
}

/// Longest run of finite, positive norms ending at the last such point.
/// Returns [first, last] indices, or {-1, -1} when no point qualifies.
std::pair<int, int> finite_run(const std::vector<double>& norms) {
  int last = -1;
  for (int i = static_cast<int>(norms.size()) - 1; i >= 0; --i) {
    if (std::isfinite(norms[static_cast<size_t>(i)]) && norms[static_cast<size_t>(i)] > 0.0) {
      last = i;
      break;
    }
  }
  if (last < 0) return {-1, -1};
  int first = last;
  while (first > 0 && std::isfinite(norms[static_cast<size_t>(first - 1)]) &&
         norms[static_cast<size_t>(first - 1)] > 0.0) {
    --first;
  }
  return {first, last};
}

/// Fits log(norm) against xs over the finite run and stamps last_finite_h.
void fit_slope(GrowthFit& fit, const std::vector<double>& xs) {
  const auto run = finite_run(fit.norms);
  if (run.first < 0) return;
  fit.last_finite_h = fit.horizons[static_cast<size_t>(run.second)];
  std::vector<double> fx, fy;
  for (int i = run.first; i <= run.second; ++i) {
    fx.push_back(xs[static_cast<size_t>(i)]);
    fy.push_back(std::log(fit.norms[static_cast<size_t>(i)]));
  }
  fit.slope = least_squares_slope(fx, fy);
}

void finish(BoundReport& r) {
  // NaN on either side compares false and correctly fails the check.
  r.satisfied = r.measured <= r.bound * (1.0 + 1e-9);
}

Eigen::MatrixXd to_eigen(const Array& a) {
  const int rows = a.rank() == 2 ? static_cast<int>(a.rows()) : 1;
  const int cols = a.rank() == 2 ? static_cast<int>(a.cols()) : static_cast<int>(a.numel());
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>(a.data.data(), rows, cols);
}

double spectral_norm(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

Array basis_row(int n, int i) {
  Array e({1, n});
  e.data[static_cast<size_t>(i)] = 1.0;
  return e;
}

std::vector<double> flatten(const std::vector<Array>& arrays) {
  std::vector<double> out;
  for (const Array& a : arrays) out.insert(out.end(), a.data.begin(), a.data.end());
  return out;
}

Value default_state_reward(Tape& t, const Value& s) { return t.sum(t.tanh(s)); }

std::string model_label(const WorldModel& model) {
  if (model.spec().family == Family::f_rnn) return "true_dynamics";
  return std::string(family_name(model.spec().family)) + "_" +
         backbone_name(model.spec().backbone);
}

/// Measured-versus-bound comparison over an already built rollout whose
/// states and actions live on `t`. states[0] may be constant; every entry of
/// `actions` must be a tape value for the per-action Jacobians to exist.
BoundReport bound_on_tape(Tape& t, const std::vector<Value>& states,
                          const std::vector<Value>& actions, const ParamStore& pi_ps,
                          const std::vector<Value>& pi_bound, const StateReward& reward) {
  const StateReward r = reward ? reward : default_state_reward;
  const int horizon = static_cast<int>(states.size());
  const int n = static_cast<int>(states.front().a().cols());
  const int m = actions.empty() ? 0 : static_cast<int>(actions.front().a().cols());

  BoundReport rep;
  rep.horizon = horizon;
  rep.note = "slope constants are the max per-step operator norms measured "
             "along this rollout";

  Value total = r(t, states.front());
  for (size_t i = 1; i < states.size(); ++i) total = t.add(total, r(t, states[i]));
  rep.measured = total.on_tape()
                     ? global_norm(pi_ps.grads_of(t.backward(total), pi_bound))
                     : 0.0;

  // Reward rows come from scratch single-step tapes so the constant first
  // state is covered too.
  rep.l_r = 0.0;
  for (const Value& s : states) {
    Tape rt;
    const Value sv = rt.leaf(s.a());
    const Value rv = r(rt, sv);
    if (!rv.on_tape()) continue;
    rep.l_r = std::max(rep.l_r, rt.backward(rv).wrt(sv).l2());
  }

  // Policy Jacobian rows: one backward pass per action coordinate.
  rep.l_pi = 0.0;
  for (const Value& a : actions) {
    if (!a.on_tape()) continue;
    Eigen::MatrixXd rows(m, 0);
    for (int j = 0; j < m; ++j) {
      const std::vector<double> row =
          flatten(pi_ps.grads_of(t.vjp(a, basis_row(m, j)), pi_bound));
      if (rows.cols() == 0) rows.resize(m, static_cast<Eigen::Index>(row.size()));
      for (size_t c = 0; c < row.size(); ++c)
        rows(j, static_cast<Eigen::Index>(c)) = row[c];
    }
    rep.l_pi = std::max(rep.l_pi, spectral_norm(rows));
  }

  // Per-action state Jacobians: n passes per state give the rows for every
  // earlier action at once.
  double jac_sum = 0.0;
  for (int ti = 1; ti < horizon; ++ti) {
    const Value& s = states[static_cast<size_t>(ti)];
    std::vector<Eigen::MatrixXd> mats(static_cast<size_t>(ti),
                                      Eigen::MatrixXd::Zero(n, m));
    if (s.on_tape()) {
      for (int i = 0; i < n; ++i) {
        const Gradients g = t.vjp(s, basis_row(n, i));
        for (int k = 0; k < ti; ++k) {
          if (!actions[static_cast<size_t>(k)].on_tape()) continue;
          const Array row = g.wrt(actions[static_cast<size_t>(k)]);
          for (int c = 0; c < m; ++c)
            mats[static_cast<size_t>(k)](i, c) = row.data[static_cast<size_t>(c)];
        }
      }
    }
    for (const Eigen::MatrixXd& mk : mats) jac_sum += spectral_norm(mk);
  }

  rep.bound = rep.l_r * rep.l_pi * jac_sum;
  finish(rep);
  return rep;
}

}  // namespace

std::string BoundReport::json() const {
  nlohmann::ordered_json j;
  j["measured"] = measured;
  j["bound"] = bound;
  j["l_r"] = l_r;
  j["l_pi"] = l_pi;
  j["l_a"] = l_a;
  j["l_s"] = l_s;
  j["eta"] = eta;
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["w_v"] = w_v;
  j["w_o"] = w_o;
  j["w_a"] = w_a;
  j["w_x"] = w_x;
  j["horizon"] = horizon;
  j["satisfied"] = satisfied;
  j["note"] = note;
  return j.dump(2);
}

std::string SweepResult::csv() const {
  std::string out = input_name + "," + value_name + "\n";
  for (size_t i = 0; i < grid.size(); ++i)
    out += fmt12(grid[i]) + "," + fmt12(values[i]) + "\n";
  return out;
}

double total_variation(const std::vector<double>& values) {
  double tv = 0.0;
  for (size_t i = 1; i < values.size(); ++i) tv += std::fabs(values[i] - values[i - 1]);
  return tv;
}

double least_squares_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) return kNan;
  const double count = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= count;
  my /= count;
  double sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0.0) return kNan;
  return sxy / sxx;
}

BoundReport action_jacobian_bound(const WorldModel& model, const ParamStore& model_ps,
                                  const Policy& pi, const ParamStore& pi_ps,
                                  const EnvProblem& env, int horizon,
                                  const StateReward& reward) {
  if (horizon < 1)
    throw std::invalid_argument("action_jacobian_bound: horizon must be >= 1");
  Tape t;
  const std::vector<Value> mb = model_ps.bind_frozen();
  const std::vector<Value> pb = pi_ps.bind(t);
  const Rollout ro =
      unroll(t, model, mb, pi, pb, env, horizon, /*stop_grad=*/true, nullptr);
  return bound_on_tape(t, ro.states, ro.actions, pi_ps, pb, reward);
}

GrowthFit history_model_growth(double l_s, double l_a, const std::vector<int>& h_grid) {
  if (!(l_a > 0.0) || !(l_s >= 0.0))
    throw std::invalid_argument("history_model_growth: needs l_a > 0 and l_s >= 0");
  check_h_grid(h_grid, "history_model_growth");

  GrowthFit fit;
  fit.horizons = h_grid;
  fit.max_rel_gap = 0.0;
  std::vector<double> xs;
  for (int h : h_grid) {
    // closed = l_a * sum_{t=2..h} sum_{d=0..t-2} l_s^d, via the running
    // geometric partial inner_{t} = 1 + l_s * inner_{t-1}.
    double closed = 0.0, inner = 0.0;
    for (int t = 2; t <= h; ++t) {
      inner = 1.0 + l_s * inner;
      closed += inner;
    }
    closed *= l_a;

    Tape t;
    std::vector<Value> acts;
    for (int k = 1; k < h; ++k) acts.push_back(t.leaf(Array::scalar(0.37)));
    std::vector<Value> states{Tape::constant_scalar(0.1)};
    Value j = states.back();
    for (int k = 1; k < h; ++k) {
      states.push_back(t.add(t.scale(states.back(), l_s),
                             t.scale(acts[static_cast<size_t>(k - 1)], l_a)));
      j = t.add(j, states.back());
    }
    const Gradients g = t.backward(j);
    double grad = 0.0;
    for (const Value& a : acts) grad += g.wrt(a).data[0];
    const double norm = std::fabs(grad);
    fit.norms.push_back(norm);
    fit.longest_chain.push_back(
        std::fabs(t.vjp(states.back(), Array::scalar(1.0)).wrt(acts.front()).data[0]));
    xs.push_back(static_cast<double>(h));
    if (std::isfinite(closed) && std::isfinite(norm))
      fit.max_rel_gap =
          std::max(fit.max_rel_gap, std::fabs(norm - closed) / std::max(1.0, closed));

    if (std::isfinite(norm) && norm > 0.0) {
      BoundReport& rep = fit.at_last;
      rep.measured = norm;
      rep.bound = closed;
      rep.l_r = 1.0;
      rep.l_pi = 1.0;
      rep.l_a = l_a;
      rep.l_s = l_s;
      rep.eta = l_s;
      rep.horizon = h;
      finish(rep);
    }
  }
  fit_slope(fit, xs);
  return fit;
}

GrowthFit rnn_model_growth(double w_x, double w_a, double w_o,
                           const std::vector<int>& h_grid) {
  if (!(w_x > 0.0) || !(w_a > 0.0) || !(w_o > 0.0))
    throw std::invalid_argument("rnn_model_growth: weights must be positive");
  check_h_grid(h_grid, "rnn_model_growth");

  ParamStore ps;
  RngStream rng(0);
  const RnnCell cell(ps, "cell", 1, 1, 1, Act::identity, rng);
  ps.value(cell.wx) = Array::full({1, 1}, w_x);
  ps.value(cell.wa) = Array::full({1, 1}, w_a);
  ps.value(cell.wo) = Array::full({1, 1}, w_o);

  GrowthFit fit;
  fit.horizons = h_grid;
  fit.max_rel_gap = 0.0;
  std::vector<double> xs;
  for (int h : h_grid) {
    double closed = 0.0, inner = 0.0;
    for (int t = 2; t <= h; ++t) {
      inner = 1.0 + w_x * inner;
      closed += inner;
    }
    closed *= w_a * w_o;

    Tape t;
    const std::vector<Value> bound = ps.bind_frozen();
    std::vector<Value> acts;
    for (int k = 1; k < h; ++k) acts.push_back(t.leaf(Array::full({1, 1}, 0.4)));
    Value x = cell.initial_hidden(1);
    std::vector<Value> states;
    Value j = Tape::constant_scalar(0.1);  // untracked first state's reward
    for (int k = 1; k < h; ++k) {
      const auto step = cell.step(t, bound, x, acts[static_cast<size_t>(k - 1)]);
      x = step.first;
      states.push_back(step.second);
      j = t.add(j, t.sum(states.back()));
    }
    const Gradients g = t.backward(j);
    double grad = 0.0;
    for (const Value& a : acts) grad += g.wrt(a).data[0];
    const double norm = std::fabs(grad);
    fit.norms.push_back(norm);
    fit.longest_chain.push_back(std::fabs(
        t.vjp(states.back(), Array::full({1, 1}, 1.0)).wrt(acts.front()).data[0]));
    xs.push_back(static_cast<double>(h));
    if (std::isfinite(closed) && std::isfinite(norm))
      fit.max_rel_gap =
          std::max(fit.max_rel_gap, std::fabs(norm - closed) / std::max(1.0, closed));

    if (std::isfinite(norm) && norm > 0.0) {
      BoundReport& rep = fit.at_last;
      rep.measured = norm;
      rep.bound = closed;
      rep.l_r = 1.0;
      rep.l_pi = 1.0;
      rep.eta = w_x;  // activation slope is exactly 1
      rep.beta = act_beta(Act::identity);
      rep.w_x = w_x;
      rep.w_a = w_a;
      rep.w_o = w_o;
      rep.horizon = h;
      finish(rep);
    }
  }
  fit_slope(fit, xs);
  return fit;
}

namespace {

struct AttChain {
  std::vector<Value> states;   // states[0] constant
  std::vector<Value> actions;  // policy outputs, one per step
};

AttChain attention_rollout(Tape& t, const RawAttention& att,
                           const std::vector<Value>& ab, const Policy& pi,
                           const std::vector<Value>& pb, int horizon) {
  AttChain chain;
  chain.states.push_back(Tape::constant(Array({1, att.state_dim})));
  for (int step = 1; step < horizon; ++step) {
    const Value a =
        pi.act(t, pb, chain.states.back(), step, nullptr, /*stop_grad_state=*/true)
            .action;
    chain.actions.push_back(a);
    const Value all = chain.actions.size() == 1 ? chain.actions.front()
                                                : t.concat(chain.actions, 0);
    chain.states.push_back(att.forward(t, ab, all));
  }
  return chain;
}

}  // namespace

GrowthFit attention_model_growth(const AttentionGrowthSpec& spec) {
  if (spec.state_dim < 1 || spec.action_dim < 1 || spec.d_z < 1)
    throw std::invalid_argument("attention_model_growth: dimensions must be positive");
  check_h_grid(spec.h_grid, "attention_model_growth");

  RngStream rng(spec.seed);
  ParamStore att_ps;
  const RawAttention att(att_ps, "att", spec.action_dim, spec.d_z, spec.state_dim, rng);

  PolicySpec pspec;
  pspec.state_dim = spec.state_dim;
  pspec.action_dim = spec.action_dim;
  pspec.action_lo = Array::full({spec.action_dim}, -1.0);
  pspec.action_hi = Array::full({spec.action_dim}, 1.0);
  pspec.horizon = spec.h_grid.back();
  pspec.hidden = {8, 8};
  ParamStore pi_ps;
  const Policy pi(pi_ps, "pi", pspec, rng);

  GrowthFit fit;
  fit.loglog = true;
  fit.horizons = spec.h_grid;
  std::vector<double> xs;
  for (int h : spec.h_grid) {
    Tape t;
    const std::vector<Value> ab = att_ps.bind_frozen();
    const std::vector<Value> pb = pi_ps.bind(t);
    const AttChain chain = attention_rollout(t, att, ab, pi, pb, h);
    Value j = t.sum(chain.states.front());
    for (size_t i = 1; i < chain.states.size(); ++i)
      j = t.add(j, t.sum(chain.states[i]));
    fit.norms.push_back(global_norm(pi_ps.grads_of(t.backward(j), pb)));
    double chain_sq = 0.0;
    for (int i = 0; i < spec.state_dim; ++i) {
      const double row = t.vjp(chain.states.back(), basis_row(spec.state_dim, i))
                             .wrt(chain.actions.front())
                             .l2();
      chain_sq += row * row;
    }
    fit.longest_chain.push_back(std::sqrt(chain_sq));
    xs.push_back(std::log(static_cast<double>(h)));
  }
  fit_slope(fit, xs);

  const int hb = std::max(2, spec.bound_horizon);
  Tape t;
  const std::vector<Value> ab = att_ps.bind_frozen();
  const std::vector<Value> pb = pi_ps.bind(t);
  const AttChain chain = attention_rollout(t, att, ab, pi, pb, hb);
  fit.at_last = bound_on_tape(t, chain.states, chain.actions, pi_ps, pb,
                              [](Tape& tt, const Value& s) { return tt.sum(s); });
  double alpha_sq = 0.0;
  for (int j = 0; j < spec.action_dim; ++j)
    alpha_sq += std::max(pspec.action_lo.data[static_cast<size_t>(j)] *
                             pspec.action_lo.data[static_cast<size_t>(j)],
                         pspec.action_hi.data[static_cast<size_t>(j)] *
                             pspec.action_hi.data[static_cast<size_t>(j)]);
  fit.at_last.alpha = std::sqrt(alpha_sq);
  fit.at_last.w_v = spectral_norm(to_eigen(att_ps.value(att.wv)));
  return fit;
}

SweepResult grad_norm_sweep(const WorldModel& model, const ParamStore& model_ps,
                            const EnvProblem& env, const GradNormSweepSpec& spec) {
  check_h_grid(spec.horizons, "grad_norm_sweep");
  if (spec.samples < 1) throw std::invalid_argument("grad_norm_sweep: samples must be >= 1");
  if (spec.horizons.back() > model.spec().horizon)
    throw std::invalid_argument("grad_norm_sweep: grid runs past the model horizon");
  if (env.state_dim != model.spec().state_dim ||
      env.action_dim != model.spec().action_dim)
    throw std::invalid_argument("grad_norm_sweep: env and model dimensions disagree");

  const int n = env.state_dim;
  RngStream rng(spec.seed);
  SweepResult out;
  out.input_name = "horizon";
  out.value_name = "mean_grad_norm";
  out.target = model_label(model);
  for (int h : spec.horizons) {
    double acc = 0.0;
    for (int s = 0; s < spec.samples; ++s) {
      Tape t;
      const std::vector<Value> mb = model_ps.bind_frozen();
      std::vector<Value> acts;
      acts.push_back(t.leaf(env.random_action(rng)));
      for (int k = 2; k < h; ++k)
        acts.push_back(Tape::constant(env.random_action(rng)));
      const std::vector<Value> states =
          model.predict_sequence(t, mb, Tape::constant(env.s1), acts);
      const Value& last = states.back();
      double sq = 0.0;
      if (last.on_tape()) {
        for (int i = 0; i < n; ++i) {
          const double row_norm = t.vjp(last, basis_row(n, i)).wrt(acts.front()).l2();
          sq += row_norm * row_norm;
        }
      }
      acc += std::sqrt(sq);
    }
    out.grid.push_back(static_cast<double>(h));
    out.values.push_back(acc / spec.samples);
  }
  return out;
}

SweepResult landscape_sweep(const WorldModel& model, const ParamStore& model_ps,
                            const EnvProblem& env, int points) {
  if (env.action_dim != 1)
    throw std::invalid_argument("landscape_sweep: needs a single action dimension");
  if (points < 2) throw std::invalid_argument("landscape_sweep: needs at least 2 points");
  if (env.state_dim != model.spec().state_dim ||
      env.action_dim != model.spec().action_dim)
    throw std::invalid_argument("landscape_sweep: env and model dimensions disagree");
  if (env.horizon > model.spec().horizon)
    throw std::invalid_argument("landscape_sweep: env horizon runs past the model's");
  const double lo = env.action_lo.data[0], hi = env.action_hi.data[0];
  if (!(hi > lo))
    throw std::invalid_argument("landscape_sweep: degenerate action bounds");

  SweepResult out;
  out.input_name = "action";
  out.value_name = "return";
  out.target = model_label(model);
  for (int p = 0; p < points; ++p) {
    const double a1 = lo + (hi - lo) * p / (points - 1);
    Tape t;
    const std::vector<Value> mb = model_ps.bind_frozen();
    std::vector<Value> acts{Tape::constant(Array::full({1, 1}, a1))};
    for (int k = 2; k < env.horizon; ++k)
      acts.push_back(Tape::constant(env.midpoint_action()));
    const std::vector<Value> states =
        model.predict_sequence(t, mb, Tape::constant(env.s1), acts);
    Value total = Tape::constant_scalar(0.0);
    for (int step = 1; step < env.horizon; ++step) {
      if (env.step_reward)
        total = t.add(total, env.step_reward(t, states[static_cast<size_t>(step - 1)],
                                             acts[static_cast<size_t>(step - 1)], step));
    }
    if (env.final_reward) total = t.add(total, env.final_reward(t, states.back()));
    out.grid.push_back(a1);
    out.values.push_back(total.item());
  }
  return out;
}

OfflineFitResult offline_fit(ParamStore& ps, const WorldModelSpec& model_spec,
                             const EnvProblem& env, const OfflineFitSpec& fit) {
  if (model_spec.state_dim != env.state_dim || model_spec.action_dim != env.action_dim)
    throw std::invalid_argument("offline_fit: env and model dimensions disagree");
  if (fit.transitions < 1 || fit.steps < 0 || fit.batch < 1 || !(fit.lr > 0.0))
    throw std::invalid_argument("offline_fit: bad protocol constants");

  RngStream rng(fit.seed);
  ReplayBuffer buffer(fit.transitions + env.horizon);
  while (buffer.transitions() < fit.transitions) {
    std::vector<Array> acts;
    for (int step = 1; step < env.horizon; ++step)
      acts.push_back(env.random_action(rng));
    buffer.add(record_episode(env, acts));
  }

  OfflineFitResult out{WorldModel(ps, model_spec, rng), {}, buffer.transitions()};
  Adam opt(fit.lr);
  BpoConfig cfg;
  cfg.dynamics_batch = fit.batch;
  RngStream sample_rng(fit.seed + 1);
  out.losses.reserve(static_cast<size_t>(fit.steps));
  for (int s = 0; s < fit.steps; ++s)
    out.losses.push_back(train_model_step(out.model, ps, opt, buffer, cfg, sample_rng));
  return out;
}

namespace {

std::vector<Array> policy_grads_or_zero(Tape& t, const Value& total,
                                        const ParamStore& pi_ps,
                                        const std::vector<Value>& bound) {
  if (total.on_tape()) return pi_ps.grads_of(t.backward(total), bound);
  std::vector<Array> zeros;
  for (int i = 0; i < pi_ps.count(); ++i)
    zeros.push_back(Array(pi_ps.value(i).shape));
  return zeros;
}

}  // namespace

double frnn_gradient_gap(const EnvProblem& env, const Policy& pi,
                         const ParamStore& pi_ps, int horizon) {
  if (horizon < 1) throw std::invalid_argument("frnn_gradient_gap: horizon must be >= 1");

  Tape ta;
  const std::vector<Value> pba = pi_ps.bind(ta);
  const WorldModel wrapped = WorldModel::wrap_env(env);
  const Rollout ro =
      unroll(ta, wrapped, {}, pi, pba, env, horizon, /*stop_grad=*/true, nullptr);
  const std::vector<Array> ga = policy_grads_or_zero(ta, ro.total, pi_ps, pba);

  Tape tb;
  const std::vector<Value> pbb = pi_ps.bind(tb);
  Value s = Tape::constant(env.s1);
  Value total = Tape::constant_scalar(0.0);
  for (int step = 1; step < horizon; ++step) {
    const Policy::Act act = pi.act(tb, pbb, s, step, nullptr, /*stop_grad_state=*/true);
    if (env.step_reward) total = tb.add(total, env.step_reward(tb, s, act.action, step));
    s = env.step_tape(tb, s, act.action, step);
  }
  if (env.final_reward) total = tb.add(total, env.final_reward(tb, s));
  const std::vector<Array> gb = policy_grads_or_zero(tb, total, pi_ps, pbb);

  double gap = 0.0;
  for (size_t p = 0; p < ga.size(); ++p) {
    for (size_t c = 0; c < ga[p].data.size(); ++c) {
      const double x = ga[p].data[c], y = gb[p].data[c];
      const double diff = std::fabs(x - y);
      if (diff == 0.0) continue;
      gap = std::max(gap, diff / std::max(std::fabs(x), std::fabs(y)));
    }
  }
  return gap;
}

// --- verification battery ---------------------------------------------------

namespace {

/// Magnitudes uniform in [lo, hi] with random signs: keeps kinked ops
/// (relu, clamp) away from their corners under finite-difference steps.
Array signed_away(RngStream& rng, Shape shape, double lo, double hi) {
  Array a = rng.uniform_array(std::move(shape), lo, hi);
  for (double& v : a.data)
    if (rng.index(2) == 0) v = -v;
  return a;
}

/// Finite-difference check of a net built in `ps` whose scalar output also
/// depends on extra leaf inputs. The flat vector packs parameters first, in
/// store order, then the extras.
double net_fd(const ParamStore& ps, const std::vector<Array>& extras,
              const std::function<Value(Tape&, const std::vector<Value>&,
                                        const std::vector<Value>&)>& build,
              RngStream& rng) {
  std::vector<Array> parts;
  std::vector<Shape> shapes;
  for (int i = 0; i < ps.count(); ++i) {
    parts.push_back(ps.value(i));
    shapes.push_back(ps.value(i).shape);
  }
  for (const Array& a : extras) {
    parts.push_back(a);
    shapes.push_back(a.shape);
  }
  const Array x0 = pack_flat(parts);
  const int params = ps.count();
  const ScalarFn f = [&](Tape& t, const Value& flat) {
    const std::vector<Value> vals = split_flat(t, flat, shapes);
    const std::vector<Value> bound(vals.begin(), vals.begin() + params);
    const std::vector<Value> extra(vals.begin() + params, vals.end());
    return build(t, bound, extra);
  };
  return grad_check_sampled(f, x0, 60, rng);
}

/// One randomized derivative spot check; `which` cycles through a fixed list
/// that reaches every op kind and every backbone.
double corpus_instance(int which, RngStream& rng) {
  switch (which % 16) {
    case 0: {  // matmul, row-broadcast add, tanh, sum
      const Array a = rng.uniform_array({3, 2}, -1, 1), b = rng.uniform_array({2, 4}, -1, 1),
                  c = rng.uniform_array({4}, -1, 1);
      const std::vector<Shape> shapes{{3, 2}, {2, 4}, {4}};
      const ScalarFn f = [&](Tape& t, const Value& x) {
        const auto v = split_flat(t, x, shapes);
        return t.sum(t.tanh(t.add(t.matmul(v[0], v[1]), v[2])));
      };
      return grad_check(f, pack_flat({a, b, c}));
    }
    case 1: {  // row-broadcast sub, mul, mean
      const Array a = rng.uniform_array({3, 3}, -1, 1), b = rng.uniform_array({3, 3}, -1, 1),
                  c = rng.uniform_array({3}, -1, 1);
      const std::vector<Shape> shapes{{3, 3}, {3, 3}, {3}};
      const ScalarFn f = [&](Tape& t, const Value& x) {
        const auto v = split_flat(t, x, shapes);
        return t.mean(t.mul(t.sub(v[0], v[2]), v[1]));
      };
      return grad_check(f, pack_flat({a, b, c}));
    }
    case 2: {  // divide (denominator bounded away from zero), exp, square
      const ScalarFn f = [](Tape& t, const Value& x) {
        const Value denom = t.add(t.square(x), Tape::constant(Array::full({2, 3}, 2.0)));
        return t.sum(t.add(t.divide(x, denom), t.exp(t.scale(x, 0.3))));
      };
      return grad_check(f, rng.uniform_array({2, 3}, -1, 1));
    }
    case 3: {  // scale, neg, sin, cos
      const ScalarFn f = [](Tape& t, const Value& x) {
        return t.sum(t.add(t.sin(t.scale(x, 1.3)), t.cos(t.neg(x))));
      };
      return grad_check(f, rng.uniform_array({2, 4}, -2, 2));
    }
    case 4: {  // relu and clamp with data held away from the corners
      const ScalarFn f = [](Tape& t, const Value& x) {
        return t.sum(t.add(t.relu(x), t.clamp(x, -0.85, 0.85)));
      };
      return grad_check(f, signed_away(rng, {3, 3}, 0.1, 0.8));
    }
    case 5: {  // log and softplus on positive data
      const ScalarFn f = [](Tape& t, const Value& x) {
        return t.sum(t.add(t.log(x), t.softplus(x)));
      };
      return grad_check(f, rng.uniform_array({2, 3}, 0.2, 2.0));
    }
    case 6: {  // sigmoid and gelu
      const ScalarFn f = [](Tape& t, const Value& x) {
        return t.mean(t.add(t.sigmoid(x), t.gelu(x)));
      };
      return grad_check(f, rng.uniform_array({3, 2}, -2, 2));
    }
    case 7: {  // softmax rows recombined with the input
      const ScalarFn f = [](Tape& t, const Value& x) {
        return t.sum(t.mul(t.softmax_last(x), x));
      };
      return grad_check(f, rng.uniform_array({2, 4}, -1.5, 1.5));
    }
    case 8: {  // layer_norm with its scale and shift as inputs
      const Array x = rng.uniform_array({2, 4}, -1, 1), g = rng.uniform_array({4}, 0.5, 1.5),
                  b = rng.uniform_array({4}, -0.5, 0.5);
      const std::vector<Shape> shapes{{2, 4}, {4}, {4}};
      const ScalarFn f = [&](Tape& t, const Value& v) {
        const auto parts = split_flat(t, v, shapes);
        return t.sum(t.square(t.layer_norm(parts[0], parts[1], parts[2])));
      };
      return grad_check(f, pack_flat({x, g, b}));
    }
    case 9: {  // concat, slice, transpose, reshape chained through matmul
      const Array a = rng.uniform_array({2, 3}, -1, 1), b = rng.uniform_array({2, 3}, -1, 1);
      const std::vector<Shape> shapes{{2, 3}, {2, 3}};
      const ScalarFn f = [&](Tape& t, const Value& v) {
        const auto parts = split_flat(t, v, shapes);
        const Value cat = t.concat({parts[0], parts[1]}, 0);      // [4,3]
        const Value win = t.slice(cat, 0, 1, 2);                  // [2,3]
        const Value r = t.reshape(t.transpose(win), Shape{2, 3});  // [2,3]
        return t.sum(t.matmul(r, t.transpose(parts[0])));
      };
      return grad_check(f, pack_flat({a, b}));
    }
    case 10: {  // rank-1 concat and slice
      const Array a = rng.uniform_array({3}, -1, 1), b = rng.uniform_array({2}, -1, 1);
      const std::vector<Shape> shapes{{3}, {2}};
      const ScalarFn f = [&](Tape& t, const Value& v) {
        const auto parts = split_flat(t, v, shapes);
        return t.sum(t.square(t.slice(t.concat({parts[0], parts[1]}, 0), 0, 1, 3)));
      };
      return grad_check(f, pack_flat({a, b}));
    }
    case 11: {  // mlp backbone
      ParamStore ps;
      const Mlp mlp(ps, "mlp", {3, 5, 2}, Act::gelu_act, rng);
      const Array x = rng.uniform_array({2, 3}, -1, 1);
      return net_fd(
          ps, {x},
          [&](Tape& t, const std::vector<Value>& bound, const std::vector<Value>& extra) {
            return t.mean(mlp.forward(t, bound, extra[0]));
          },
          rng);
    }
    case 12: {  // recurrent cell backbone, three steps
      ParamStore ps;
      const RnnCell cell(ps, "cell", 3, 2, 2, Act::tanh_act, rng);
      const std::vector<Array> acts{rng.uniform_array({1, 2}, -1, 1),
                                    rng.uniform_array({1, 2}, -1, 1),
                                    rng.uniform_array({1, 2}, -1, 1)};
      return net_fd(
          ps, acts,
          [&](Tape& t, const std::vector<Value>& bound, const std::vector<Value>& extra) {
            Value x = cell.initial_hidden(1);
            Value acc = Tape::constant_scalar(0.0);
            for (const Value& a : extra) {
              const auto step = cell.step(t, bound, x, a);
              x = step.first;
              acc = t.add(acc, t.sum(step.second));
            }
            return acc;
          },
          rng);
    }
    case 13: {  // gated recurrent cell backbone, three steps
      ParamStore ps;
      const LstmCell cell(ps, "cell", 3, 2, 2, rng);
      const std::vector<Array> acts{rng.uniform_array({1, 2}, -1, 1),
                                    rng.uniform_array({1, 2}, -1, 1),
                                    rng.uniform_array({1, 2}, -1, 1)};
      return net_fd(
          ps, acts,
          [&](Tape& t, const std::vector<Value>& bound, const std::vector<Value>& extra) {
            LstmCell::Carry carry = cell.initial_carry(1);
            Value acc = Tape::constant_scalar(0.0);
            for (const Value& a : extra) {
              const auto step = cell.step(t, bound, carry, a);
              carry = step.first;
              acc = t.add(acc, t.sum(step.second));
            }
            return acc;
          },
          rng);
    }
    case 14: {  // transformer backbone
      ParamStore ps;
      TransformerSpec ts;
      ts.in_dim = 3;
      ts.max_len = 4;
      ts.d_model = 8;
      ts.heads = 2;
      ts.layers = 1;
      ts.d_ff = 16;
      const Transformer tf(ps, "tf", ts, rng);
      const Array raw = rng.uniform_array({3, 3}, -1, 1);
      return net_fd(
          ps, {raw},
          [&](Tape& t, const std::vector<Value>& bound, const std::vector<Value>& extra) {
            return t.mean(tf.forward(t, bound, tf.embed_tokens(t, bound, extra[0], 0)));
          },
          rng);
    }
    default: {  // raw attention map
      ParamStore ps;
      const RawAttention att(ps, "att", 2, 3, 2, rng);
      const Array acts = rng.uniform_array({3, 2}, -1, 1);
      return net_fd(
          ps, {acts},
          [&](Tape& t, const std::vector<Value>& bound, const std::vector<Value>& extra) {
            return t.mean(att.forward(t, bound, extra[0]));
          },
          rng);
    }
  }
}

PolicySpec env_policy_spec(const EnvProblem& env, int horizon, std::vector<int> hidden) {
  PolicySpec ps;
  ps.state_dim = env.state_dim;
  ps.action_dim = env.action_dim;
  ps.action_lo = env.action_lo;
  ps.action_hi = env.action_hi;
  ps.horizon = horizon;
  ps.hidden = std::move(hidden);
  return ps;
}

BoundReport random_bound_config(uint64_t seed, int idx) {
  static const char* kEnvs[] = {"harvest", "bacteria", "one_bounce", "double_pendulum"};
  static const Backbone kBackbones[] = {Backbone::rnn, Backbone::lstm,
                                        Backbone::attention};
  RngStream rng(seed * 2654435761ULL + 97 + static_cast<uint64_t>(idx));
  const EnvProblem env = make_env(kEnvs[idx % 4], 40);
  const int horizon = 2 + static_cast<int>(rng.index(31));  // 2..32

  WorldModelSpec ws;
  ws.family = Family::actions;
  ws.backbone = kBackbones[idx % 3];
  ws.state_dim = env.state_dim;
  ws.action_dim = env.action_dim;
  ws.horizon = horizon;
  ws.rnn_hidden = 8;
  ws.d_model = 12;
  ws.heads = 3;
  ws.layers = 1;
  ws.d_ff = 24;
  ParamStore mps;
  const WorldModel wm(mps, ws, rng);

  ParamStore pps;
  const Policy pi(pps, "pi", env_policy_spec(env, horizon, {8, 8}), rng);
  return action_jacobian_bound(wm, mps, pi, pps, env, horizon);
}

/// All-positive scalar chain where every inequality in the rollout bound is
/// tight: the policy has only its final mean bias active, the reward is the
/// raw state, and every partial along the chain is positive.
BoundReport tight_bound_case() {
  const EnvProblem env = make_env("bacteria", 10);
  WorldModelSpec ws;
  ws.family = Family::actions;
  ws.backbone = Backbone::rnn;
  ws.state_dim = env.state_dim;
  ws.action_dim = env.action_dim;
  ws.horizon = 10;
  ws.rnn_hidden = 1;
  RngStream rng(11);
  ParamStore mps;
  const WorldModel wm(mps, ws, rng);
  for (int i = 0; i < mps.count(); ++i)
    for (double& v : mps.value(i).data) v = 0.7;

  ParamStore pps;
  const Policy pi(pps, "pi", env_policy_spec(env, 10, {6}), rng);
  for (int i = 0; i < pps.count(); ++i)
    for (double& v : pps.value(i).data) v = 0.0;

  return action_jacobian_bound(wm, mps, pi, pps, env, 10,
                               [](Tape& t, const Value& s) { return t.sum(s); });
}

/// Attention model with every parameter zeroed: predictions never move, so
/// both the measured gradient and the bound collapse to exactly zero.
BoundReport zero_model_case() {
  const EnvProblem env = make_env("one_bounce", 20);
  WorldModelSpec ws;
  ws.family = Family::actions;
  ws.backbone = Backbone::attention;
  ws.state_dim = env.state_dim;
  ws.action_dim = env.action_dim;
  ws.horizon = 12;
  ws.d_model = 12;
  ws.heads = 3;
  ws.layers = 1;
  ws.d_ff = 24;
  RngStream rng(5);
  ParamStore mps;
  const WorldModel wm(mps, ws, rng);
  for (int i = 0; i < mps.count(); ++i)
    for (double& v : mps.value(i).data) v = 0.0;

  ParamStore pps;
  const Policy pi(pps, "pi", env_policy_spec(env, 12, {8}), rng);
  return action_jacobian_bound(wm, mps, pi, pps, env, 10);
}

/// Gradient of the teacher-forced sequence loss against a hand-built
/// per-step loss on a parallel cell with identical draws.
double teacher_forcing_gap(uint64_t seed) {
  const EnvProblem env = make_env("harvest", 8);
  const int n = env.state_dim, m = env.action_dim, horizon = env.horizon;

  WorldModelSpec ws;
  ws.family = Family::actions;
  ws.backbone = Backbone::rnn;
  ws.state_dim = n;
  ws.action_dim = m;
  ws.horizon = horizon;
  ws.rnn_hidden = n;
  ws.identity_readout = true;
  RngStream r1(seed), r2(seed), ar(seed + 40);
  ParamStore psa;
  const WorldModel wm(psa, ws, r1);
  ParamStore psb;
  const RnnCell cell(psb, "cell", n, m + 1, n, Act::tanh_act, r2);
  if (psa.count() != psb.count())
    throw std::logic_error("teacher_forcing_gap: parallel stores diverged");

  std::vector<Array> acts;
  for (int step = 1; step < horizon; ++step) acts.push_back(env.random_action(ar));
  const Trajectory traj = record_episode(env, acts);

  Tape ta;
  const std::vector<Value> ba = psa.bind(ta);
  const Gradients ga =
      ta.backward(wm.teacher_forced_loss(ta, ba, traj.states, traj.actions));
  const std::vector<Array> grads_a = psa.grads_of(ga, ba);

  Tape tb;
  const std::vector<Value> bb = psb.bind(tb);
  Value loss = Tape::constant_scalar(0.0);
  for (int k = 1; k < horizon; ++k) {
    const Value token = tb.concat(
        {Tape::constant(traj.actions[static_cast<size_t>(k - 1)]),
         Tape::constant(Array::full({1, 1}, static_cast<double>(k) / horizon))},
        1);
    const Value pred =
        cell.step(tb, bb, Tape::constant(traj.states[static_cast<size_t>(k - 1)]), token)
            .first;
    loss = tb.add(
        loss, tb.sum(tb.square(
                  tb.sub(pred, Tape::constant(traj.states[static_cast<size_t>(k)])))));
  }
  const std::vector<Array> grads_b = psb.grads_of(tb.backward(loss), bb);

  double gap = 0.0;
  for (size_t p = 0; p < grads_a.size(); ++p) {
    for (size_t c = 0; c < grads_a[p].data.size(); ++c) {
      const double x = grads_a[p].data[c], y = grads_b[p].data[c];
      const double diff = std::fabs(x - y);
      if (diff == 0.0) continue;
      gap = std::max(gap, diff / std::max(std::fabs(x), std::fabs(y)));
    }
  }
  return gap;
}

template <typename Fn>
void add_item(VerifyReport& report, const std::string& name, Fn&& body) {
  CheckItem item;
  item.name = name;
  try {
    body(item);
  } catch (const std::exception& e) {
    item.passed = false;
    item.detail = std::string("threw: ") + e.what();
  }
  report.items.push_back(std::move(item));
}

}  // namespace

bool VerifyReport::all_passed() const {
  for (const CheckItem& item : items)
    if (!item.passed) return false;
  return !items.empty();
}

std::string VerifyReport::json() const {
  nlohmann::ordered_json j;
  j["all_passed"] = all_passed();
  j["items"] = nlohmann::ordered_json::array();
  for (const CheckItem& item : items) {
    nlohmann::ordered_json ji;
    ji["name"] = item.name;
    ji["passed"] = item.passed;
    ji["value"] = item.value;
    ji["threshold"] = item.threshold;
    ji["detail"] = item.detail;
    j["items"].push_back(std::move(ji));
  }
  return j.dump(2);
}

VerifyReport run_verification(const VerifySpec& spec) {
  VerifyReport report;

  add_item(report, "derivative_corpus", [&](CheckItem& item) {
    item.threshold = 1e-5;
    double worst = 0.0;
    for (int i = 0; i < spec.corpus_instances; ++i) {
      RngStream rng(spec.seed * 1315423911ULL + static_cast<uint64_t>(i));
      worst = std::max(worst, corpus_instance(i, rng));
    }
    item.value = worst;
    item.passed = worst <= item.threshold;
    item.detail = std::to_string(spec.corpus_instances) +
                  " randomized spot checks across every op kind and backbone";
  });

  add_item(report, "wrapped_dynamics_equality", [&](CheckItem& item) {
    item.threshold = 1e-10;
    double worst = 0.0;
    for (const char* name : {"harvest", "one_bounce"}) {
      const EnvProblem env = make_env(name, 50);
      for (int i = 0; i < spec.frnn_seeds; ++i) {
        RngStream rng(spec.seed + 7919 * static_cast<uint64_t>(i) + 13);
        ParamStore pps;
        const Policy pi(pps, "pi", env_policy_spec(env, 50, {8, 8}), rng);
        for (int h : {1, 10, 50})
          worst = std::max(worst, frnn_gradient_gap(env, pi, pps, h));
      }
    }
    item.value = worst;
    item.passed = worst <= item.threshold;
    item.detail = "two envs, horizons {1,10,50}, " + std::to_string(spec.frnn_seeds) +
                  " policy draws each";
  });

  add_item(report, "rollout_bound_batch", [&](CheckItem& item) {
    item.threshold = 1.0 + 1e-9;
    bool all_ok = true;
    double worst_ratio = 0.0;
    for (int i = 0; i < spec.bound_configs; ++i) {
      const BoundReport rep = random_bound_config(spec.seed, i);
      all_ok = all_ok && rep.satisfied;
      if (rep.bound > 0.0)
        worst_ratio = std::max(worst_ratio, rep.measured / rep.bound);
      else if (rep.measured > 0.0)
        worst_ratio = std::numeric_limits<double>::infinity();
    }
    item.value = worst_ratio;
    item.passed = all_ok && worst_ratio <= item.threshold;
    item.detail = std::to_string(spec.bound_configs) +
                  " random backbone/weights/horizon rollouts, all bounds hold";
  });

  add_item(report, "rollout_bound_tight", [&](CheckItem& item) {
    item.threshold = 1e-9;
    const BoundReport rep = tight_bound_case();
    item.value = std::fabs(rep.measured - rep.bound) / std::max(1.0, rep.bound);
    item.passed = rep.satisfied && item.value <= item.threshold;
    item.detail = "all-positive scalar chain: measured equals the bound";
  });

  add_item(report, "rollout_bound_zero", [&](CheckItem& item) {
    item.threshold = 0.0;
    const BoundReport rep = zero_model_case();
    item.value = std::max(std::fabs(rep.measured), std::fabs(rep.bound));
    item.passed = rep.satisfied && item.value == 0.0;
    item.detail = "zeroed attention model: measured and bound both vanish";
  });

  add_item(report, "recurrent_growth", [&](CheckItem& item) {
    std::vector<int> grid;
    for (int h = 20; h <= 80; h += 5) grid.push_back(h);
    const GrowthFit fit = rnn_model_growth(1.1, 0.8, 1.3, grid);
    item.value = fit.slope;
    item.threshold = std::log(1.1);
    item.passed = std::fabs(fit.slope - item.threshold) <= 0.02 * item.threshold &&
                  fit.max_rel_gap <= 1e-10 && fit.at_last.satisfied;
    item.detail = "closed-form gap " + fmt12(fit.max_rel_gap) + ", fitted over H in [" +
                  std::to_string(grid.front()) + "," + std::to_string(fit.last_finite_h) +
                  "]";
  });

  add_item(report, "history_growth", [&](CheckItem& item) {
    std::vector<int> grid;
    for (int h = 20; h <= 60; h += 4) grid.push_back(h);
    const GrowthFit fit = history_model_growth(1.2, 1.0, grid);
    item.value = fit.slope;
    item.threshold = std::log(1.2);
    bool lower_ok = true;
    for (size_t i = 0; i < grid.size(); ++i) {
      const double floor =
          std::max(1.0, std::pow(1.2, grid[i] - 2));  // direct term and longest chain
      lower_ok = lower_ok && fit.norms[i] >= floor * (1.0 - 1e-9);
    }
    item.passed = std::fabs(fit.slope - item.threshold) <= 0.05 * item.threshold &&
                  fit.max_rel_gap <= 1e-10 && lower_ok && fit.at_last.satisfied;
    item.detail = "closed-form gap " + fmt12(fit.max_rel_gap) +
                  (lower_ok ? ", lower growth floor holds" : ", lower growth floor FAILS");
  });

  add_item(report, "history_growth_degenerate", [&](CheckItem& item) {
    const std::vector<int> grid{10, 20, 30, 40};
    const GrowthFit fit = history_model_growth(0.0, 1.0, grid);
    item.threshold = 1e-12;
    double worst = 0.0;
    bool quadratic = true;
    for (size_t i = 0; i < grid.size(); ++i) {
      const double expect = grid[i] - 1.0;  // only direct action paths remain
      worst = std::max(worst, std::fabs(fit.norms[i] - expect) / expect);
      quadratic = quadratic && fit.norms[i] <= static_cast<double>(grid[i]) * grid[i];
    }
    item.value = worst;
    item.passed = worst <= item.threshold && quadratic;
    item.detail = "no state-to-state paths: gradient is the action count";
  });

  add_item(report, "attention_growth", [&](CheckItem& item) {
    item.threshold = 3.2;
    double worst = 0.0, best = std::numeric_limits<double>::infinity();
    bool bounds_ok = true;
    for (int i = 0; i < spec.attention_seeds; ++i) {
      AttentionGrowthSpec gs;
      gs.seed = spec.seed * 31 + static_cast<uint64_t>(i);
      const GrowthFit fit = attention_model_growth(gs);
      worst = std::max(worst, fit.slope);
      best = std::min(best, fit.slope);
      bounds_ok = bounds_ok && fit.at_last.satisfied;
    }
    item.value = worst;
    item.passed = std::isfinite(worst) && worst <= item.threshold && bounds_ok;
    item.detail = std::to_string(spec.attention_seeds) +
                  " random draws, log-log slopes in [" + fmt12(best) + "," + fmt12(worst) +
                  "]";
  });

  add_item(report, "teacher_forced_equality", [&](CheckItem& item) {
    item.threshold = 1e-10;
    item.value = teacher_forcing_gap(spec.seed + 211);
    item.passed = item.value <= item.threshold;
    item.detail = "sequence loss against per-step loss on a parallel cell";
  });

  return report;
}

}  // namespace awmlab
