#include "awmlab/envs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "awmlab/params.hpp"

namespace awmlab {
namespace {

constexpr double kGravity = 9.81;
constexpr double kPendulumDt = 0.04;

Value rk4_step(Tape& t, const Value& s, double dt,
               const std::function<Value(Tape&, const Value&)>& deriv) {
  const Value k1 = deriv(t, s);
  const Value k2 = deriv(t, t.add(s, t.scale(k1, dt / 2.0)));
  const Value k3 = deriv(t, t.add(s, t.scale(k2, dt / 2.0)));
  const Value k4 = deriv(t, t.add(s, t.scale(k3, dt)));
  Value acc = t.add(k1, t.scale(k2, 2.0));
  acc = t.add(acc, t.scale(k3, 2.0));
  acc = t.add(acc, k4);
  return t.add(s, t.scale(acc, dt / 6.0));
}

/// Two unit-mass, unit-length links, angles measured from the downward
/// vertical, state row (theta1, theta2, omega1, omega2). Denominator
/// 2 - cos^2(theta2 - theta1) >= 1, so the vector field is smooth everywhere.
Value pendulum_deriv(Tape& t, const Value& s) {
  const Value th1 = t.slice(s, 1, 0, 1);
  const Value th2 = t.slice(s, 1, 1, 1);
  const Value w1 = t.slice(s, 1, 2, 1);
  const Value w2 = t.slice(s, 1, 3, 1);
  const Value delta = t.sub(th2, th1);
  const Value sd = t.sin(delta);
  const Value cd = t.cos(delta);
  const Value sin1 = t.sin(th1);
  const Value sin2 = t.sin(th2);
  const Value w1sq = t.square(w1);
  const Value w2sq = t.square(w2);
  const Value den =
      t.sub(Tape::constant(Array::full({1, 1}, 2.0)), t.square(cd));

  Value num1 = t.mul(t.mul(w1sq, sd), cd);
  num1 = t.add(num1, t.scale(t.mul(sin2, cd), kGravity));
  num1 = t.add(num1, t.mul(w2sq, sd));
  num1 = t.sub(num1, t.scale(sin1, 2.0 * kGravity));
  const Value a1 = t.divide(num1, den);

  Value inner = t.scale(t.mul(sin1, cd), kGravity);
  inner = t.sub(inner, t.mul(w1sq, sd));
  inner = t.sub(inner, t.scale(sin2, kGravity));
  const Value num2 = t.sub(t.scale(inner, 2.0), t.mul(t.mul(w2sq, sd), cd));
  const Value a2 = t.divide(num2, den);

  return t.concat({w1, w2, a1, a2}, 1);
}

Value scalar_of(Tape& t, const Value& one_by_one) { return t.sum(one_by_one); }

EnvProblem make_one_bounce(int horizon) {
  EnvProblem env;
  env.name = "one_bounce";
  env.state_dim = 2;  // position, velocity
  env.action_dim = 1;
  env.action_lo = Array::row({-3.0});
  env.action_hi = Array::row({0.0});
  env.horizon = horizon;
  env.s1 = Array({1, 2});
  env.s1.at2(0, 0) = 1.0;
  env.terminal_only = true;
  const double dt = 1.0 / (horizon - 1);

  // The first action sets the velocity; later actions are ignored. A step that
  // would cross the wall at x = 0 reflects both position and velocity, which
  // is exact for constant within-step velocity.
  env.step_tape = [dt](Tape& t, const Value& s, const Value& a, int step) {
    const Value x = t.slice(s, 1, 0, 1);
    const Value v = step == 1 ? a : t.slice(s, 1, 1, 1);
    const Value x_raw = t.add(x, t.scale(v, dt));
    if (x_raw.a().item() < 0.0) {
      return t.concat({t.neg(x_raw), t.neg(v)}, 1);
    }
    return t.concat({x_raw, v}, 1);
  };
  env.step_reward = nullptr;
  env.final_reward = [](Tape& t, const Value& s) {
    const Value x = t.slice(s, 1, 0, 1);
    const Value off = t.sub(x, Tape::constant(Array::full({1, 1}, 0.5)));
    return t.neg(scalar_of(t, t.square(off)));
  };
  return env;
}

/// Runs the pendulum recursion with a fixed scalar first action on a scratch
/// tape; used to place the goal state on the reachable set.
Array pendulum_terminal(double a1, int horizon) {
  Tape t;
  Array a({1, 1});
  a.at(0) = a1;
  Value s = t.concat({t.scale(Tape::constant(a), std::numbers::pi),
                      Tape::constant(Array({1, 3}))},
                     1);
  s = rk4_step(t, s, kPendulumDt, pendulum_deriv);
  for (int step = 2; step < horizon; ++step) {
    s = rk4_step(t, s, kPendulumDt, pendulum_deriv);
  }
  return s.a();
}

EnvProblem make_double_pendulum(int horizon) {
  EnvProblem env;
  env.name = "double_pendulum";
  env.state_dim = 4;
  env.action_dim = 1;
  env.action_lo = Array::row({-1.0});
  env.action_hi = Array::row({1.0});
  env.horizon = horizon;
  env.s1 = Array({1, 4});
  env.terminal_only = true;

  // The first action places the initial angle theta1 = a * pi (theta2 and both
  // velocities zero) and the step integrates from there; later actions are
  // ignored. The fixed step keeps per-step integration error flat while the
  // physical duration grows with the horizon.
  env.step_tape = [](Tape& t, const Value& s, const Value& a, int step) {
    Value state = s;
    if (step == 1) {
      state = t.concat(
          {t.scale(a, std::numbers::pi), Tape::constant(Array({1, 3}))}, 1);
    }
    if (!state.a().all_finite()) {
      throw std::runtime_error("double_pendulum: non-finite state entering step " +
                               std::to_string(step));
    }
    return rk4_step(t, state, kPendulumDt, pendulum_deriv);
  };
  env.step_reward = nullptr;

  const Array goal = pendulum_terminal(-0.4, horizon);
  env.final_reward = [goal](Tape& t, const Value& s) {
    const Value off = t.sub(s, Tape::constant(goal));
    return t.neg(t.sum(t.square(off)));
  };
  return env;
}

}  // namespace

Array EnvProblem::midpoint_action() const {
  Array a({1, action_dim});
  for (int i = 0; i < action_dim; ++i) {
    a.at(i) = 0.5 * (action_lo.at(i) + action_hi.at(i));
  }
  return a;
}

Array EnvProblem::random_action(RngStream& rng) const {
  Array a({1, action_dim});
  for (int i = 0; i < action_dim; ++i) {
    a.at(i) = rng.uniform(action_lo.at(i), action_hi.at(i));
  }
  return a;
}

EnvProblem make_ode_env(const OdeSpec& spec, int horizon) {
  if (horizon < 2) {
    throw std::invalid_argument("make_ode_env: horizon must be >= 2");
  }
  EnvProblem env;
  env.name = spec.name;
  env.state_dim = 1;
  env.action_dim = 1;
  env.action_lo = Array::row({spec.lo});
  env.action_hi = Array::row({spec.hi});
  env.horizon = horizon;
  env.s1 = Array::full({1, 1}, spec.x1);
  env.terminal_only = spec.rho == nullptr && spec.final_r != nullptr;
  const double dt = spec.duration / (horizon - 1);

  const auto phi = spec.phi;
  env.step_tape = [phi, dt](Tape& t, const Value& s, const Value& a, int) {
    return t.add(s, t.scale(phi(t, s, a), dt));
  };
  if (spec.rho) {
    const auto rho = spec.rho;
    env.step_reward = [rho, dt](Tape& t, const Value& s, const Value& a, int) {
      return t.scale(scalar_of(t, rho(t, s, a)), dt);
    };
  }
  if (spec.final_r) {
    const auto fin = spec.final_r;
    env.final_reward = [fin](Tape& t, const Value& s) {
      return scalar_of(t, fin(t, s));
    };
  }
  return env;
}

EnvProblem make_env(const std::string& name, int horizon) {
  if (horizon < 2) {
    throw std::invalid_argument("make_env: horizon must be >= 2");
  }
  if (name == "one_bounce") return make_one_bounce(horizon);
  if (name == "double_pendulum") return make_double_pendulum(horizon);

  OdeSpec spec;
  spec.name = name;
  if (name == "cancer") {
    spec.duration = 20.0;
    spec.lo = 0.0;
    spec.hi = 2.0;
    spec.x1 = 0.975;
    spec.phi = [](Tape& t, const Value& x, const Value& u) {
      // 0.3 x ln(1/x) - 0.45 u x, with ln(1/x) = -ln x
      return t.sub(t.scale(t.mul(x, t.log(x)), -0.3),
                   t.scale(t.mul(u, x), 0.45));
    };
    spec.rho = [](Tape& t, const Value& x, const Value& u) {
      return t.neg(t.add(x, t.square(u)));
    };
  } else if (name == "mould") {
    spec.duration = 5.0;
    spec.lo = 0.0;
    spec.hi = 5.0;
    spec.x1 = 1.0;
    spec.phi = [](Tape& t, const Value& x, const Value& u) {
      const Value cap = Tape::constant(Array::full({1, 1}, 10.0));
      return t.sub(t.scale(t.sub(cap, x), 0.3), t.mul(u, x));
    };
    spec.rho = [](Tape& t, const Value& x, const Value& u) {
      return t.neg(t.add(x, t.square(u)));
    };
  } else if (name == "bacteria") {
    spec.duration = 1.0;
    spec.lo = 0.0;
    spec.hi = 2.0;
    spec.x1 = 1.0;
    spec.phi = [](Tape& t, const Value& x, const Value& u) {
      return t.add(x, t.mul(u, x));
    };
    spec.rho = [](Tape& t, const Value&, const Value& u) {
      return t.neg(t.square(u));
    };
    spec.final_r = [](Tape&, const Value& x) { return x; };
  } else if (name == "harvest") {
    spec.duration = 10.0;
    spec.lo = 0.0;
    spec.hi = 1.0;
    spec.x1 = 0.5;
    spec.phi = [](Tape& t, const Value& x, const Value& u) {
      const Value one = Tape::constant(Array::full({1, 1}, 1.0));
      return t.sub(t.mul(x, t.sub(one, x)), t.mul(u, x));
    };
    spec.rho = [](Tape& t, const Value& x, const Value& u) {
      return t.mul(u, x);
    };
  } else {
    throw std::invalid_argument("make_env: unknown environment '" + name + "'");
  }
  return make_ode_env(spec, horizon);
}

std::vector<std::string> env_names() {
  return {"one_bounce", "double_pendulum", "cancer", "mould", "bacteria",
          "harvest"};
}

int default_horizon(const std::string& name) {
  make_env(name, 2);  // validates the name
  return 100;
}

TapeRollout rollout_on_tape(Tape& t, const EnvProblem& env,
                            const std::vector<Value>& actions) {
  if (static_cast<int>(actions.size()) != env.horizon - 1) {
    throw std::invalid_argument(
        env.name + ": rollout needs " + std::to_string(env.horizon - 1) +
        " actions, got " + std::to_string(actions.size()));
  }
  TapeRollout out;
  out.states.reserve(static_cast<size_t>(env.horizon));
  out.states.push_back(Tape::constant(env.s1));
  Value total = Tape::constant_scalar(0.0);
  for (int step = 1; step < env.horizon; ++step) {
    const Value& s = out.states.back();
    const Value& a = actions[static_cast<size_t>(step - 1)];
    if (env.step_reward) {
      total = t.add(total, env.step_reward(t, s, a, step));
    }
    out.states.push_back(env.step_tape(t, s, a, step));
  }
  if (env.final_reward) {
    total = t.add(total, env.final_reward(t, out.states.back()));
  }
  out.total = total;
  return out;
}

SimResult simulate(const EnvProblem& env, const std::vector<Array>& actions) {
  Tape t;
  std::vector<Value> bound;
  bound.reserve(actions.size());
  for (const Array& a : actions) bound.push_back(Tape::constant(a));

  SimResult out;
  out.rewards.assign(static_cast<size_t>(env.horizon), 0.0);
  Value s = Tape::constant(env.s1);
  out.states.push_back(s.a());
  double total = 0.0;
  for (int step = 1; step < env.horizon; ++step) {
    const Value& a = bound[static_cast<size_t>(step - 1)];
    if (env.step_reward) {
      const double r = env.step_reward(t, s, a, step).item();
      out.rewards[static_cast<size_t>(step - 1)] = r;
      total += r;
    }
    s = env.step_tape(t, s, a, step);
    out.states.push_back(s.a());
  }
  if (env.final_reward) {
    const double r = env.final_reward(t, s).item();
    out.rewards.back() += r;
    total += r;
  }
  out.total = total;
  return out;
}

Trajectory record_episode(const EnvProblem& env,
                          const std::vector<Array>& actions) {
  SimResult sim = simulate(env, actions);
  Trajectory out;
  out.states = std::move(sim.states);
  out.actions = actions;
  out.rewards = std::move(sim.rewards);
  out.total = sim.total;
  return out;
}

double random_baseline(const EnvProblem& env, int episodes, uint64_t seed) {
  RngStream rng(seed);
  double acc = 0.0;
  for (int e = 0; e < episodes; ++e) {
    std::vector<Array> actions;
    actions.reserve(static_cast<size_t>(env.horizon - 1));
    for (int i = 0; i + 1 < env.horizon; ++i) {
      actions.push_back(env.random_action(rng));
    }
    acc += simulate(env, actions).total;
  }
  return acc / episodes;
}

OracleResult trajopt_oracle(const EnvProblem& env, int iters, double lr,
                            uint64_t seed, int starts) {
  RngStream rng(seed);
  OracleResult best;
  best.best_return = -std::numeric_limits<double>::infinity();

  const int rows = env.horizon - 1;
  for (int start = 0; start < starts; ++start) {
    ParamStore store;
    Array init({rows, env.action_dim});
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < env.action_dim; ++c) {
        init.at2(r, c) = rng.uniform(env.action_lo.at(c), env.action_hi.at(c));
      }
    }
    const int idx = store.add("actions", std::move(init));
    Adam opt(lr);
    bool failed = false;

    for (int iter = 0; iter < iters; ++iter) {
      Tape t;
      const std::vector<Value> bound = store.bind(t);
      std::vector<Value> acts;
      acts.reserve(static_cast<size_t>(rows));
      for (int r = 0; r < rows; ++r) acts.push_back(t.slice(bound[0], 0, r, 1));
      const TapeRollout ro = rollout_on_tape(t, env, acts);
      if (!std::isfinite(ro.total.item())) {
        failed = true;
        break;
      }
      const Gradients g = t.backward(ro.total);
      std::vector<Array> grads = store.grads_of(g, bound);
      if (!g.all_finite()) {
        failed = true;
        break;
      }
      for (Array& gr : grads) gr *= -1.0;  // ascent
      opt.step(store, std::move(grads));
      Array& av = store.value(idx);
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < env.action_dim; ++c) {
          av.at2(r, c) = std::clamp(av.at2(r, c), env.action_lo.at(c),
                                    env.action_hi.at(c));
        }
      }
    }
    if (failed) {
      ++best.starts_failed;
      continue;
    }

    std::vector<Array> final_actions;
    final_actions.reserve(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
      Array a({1, env.action_dim});
      for (int c = 0; c < env.action_dim; ++c) {
        a.at2(0, c) = store.value(idx).at2(r, c);
      }
      final_actions.push_back(std::move(a));
    }
    const double j = simulate(env, final_actions).total;
    if (!std::isfinite(j)) {
      ++best.starts_failed;
      continue;
    }
    if (j > best.best_return) {
      best.best_return = j;
      best.actions = final_actions;
    }
    best.ok = true;
  }
  return best;
}

double normalized_return(double j, double j_oracle, double j_rand) {
  const double den = j_oracle - j_rand;
  if (!std::isfinite(den) || den <= 0.0) {
    throw std::invalid_argument(
        "normalized_return: oracle return must exceed the random baseline");
  }
  return (j - j_rand) / den;
}

double dp_energy(const Array& s) {
  const double th1 = s.at(0), th2 = s.at(1), w1 = s.at(2), w2 = s.at(3);
  const double kinetic =
      w1 * w1 + 0.5 * w2 * w2 + w1 * w2 * std::cos(th1 - th2);
  const double potential =
      -kGravity * (2.0 * std::cos(th1) + std::cos(th2));
  return kinetic + potential;
}

}  // namespace awmlab
