#include "awmlab/worldmodels.hpp"

#include <cmath>
#include <stdexcept>

namespace awmlab {

const char* family_name(Family f) {
  switch (f) {
    case Family::markovian: return "markovian";
    case Family::history: return "history";
    case Family::actions: return "actions";
    case Family::f_rnn: return "f_rnn";
  }
  return "?";
}

const char* backbone_name(Backbone b) {
  switch (b) {
    case Backbone::mlp: return "mlp";
    case Backbone::rnn: return "rnn";
    case Backbone::lstm: return "lstm";
    case Backbone::attention: return "attention";
  }
  return "?";
}

Family family_from(const std::string& s) {
  for (Family f : {Family::markovian, Family::history, Family::actions,
                   Family::f_rnn}) {
    if (s == family_name(f)) return f;
  }
  throw std::invalid_argument("unknown world-model family '" + s + "'");
}

Backbone backbone_from(const std::string& s) {
  for (Backbone b :
       {Backbone::mlp, Backbone::rnn, Backbone::lstm, Backbone::attention}) {
    if (s == backbone_name(b)) return b;
  }
  throw std::invalid_argument("unknown backbone '" + s + "'");
}

WorldModel::WorldModel(ParamStore& ps, const WorldModelSpec& spec, RngStream& rng)
    : spec_(spec) {
  if (spec.state_dim < 1 || spec.action_dim < 1 || spec.horizon < 2) {
    throw std::invalid_argument(
        "WorldModel: dimensions must be positive and horizon >= 2");
  }
  const int n = spec.state_dim, m = spec.action_dim;
  switch (spec.family) {
    case Family::markovian: {
      if (spec.backbone != Backbone::mlp) {
        throw std::invalid_argument(
            "WorldModel: the markovian family pairs only with the mlp backbone");
      }
      std::vector<int> widths;
      widths.push_back(n + m + 1);  // state, action, t/H
      for (int w : spec.mlp_hidden) widths.push_back(w);
      widths.push_back(n);
      mlp_ = Mlp(ps, "wm.f", std::move(widths), Act::relu_act, rng);
      return;
    }
    case Family::f_rnn:
      throw std::invalid_argument(
          "WorldModel: f_rnn models wrap an environment; use wrap_env");
    case Family::history:
    case Family::actions:
      break;
  }

  const bool is_actions = spec.family == Family::actions;
  if (spec_.identity_readout &&
      !(is_actions && spec.backbone == Backbone::rnn && spec.rnn_hidden == n)) {
    throw std::invalid_argument(
        "WorldModel: identity readout needs an actions-family rnn with hidden "
        "width equal to the state dimension");
  }
  // Recurrent step input: actions (plus t/H), and for the history family the
  // current state as well.
  const int step_in = (is_actions ? m : n + m) + 1;
  switch (spec.backbone) {
    case Backbone::mlp:
      throw std::invalid_argument(
          std::string("WorldModel: the ") + family_name(spec.family) +
          " family needs a sequence backbone (rnn, lstm, or attention)");
    case Backbone::rnn:
      rnn_ = RnnCell(ps, "wm.cell", spec.rnn_hidden, step_in, n, Act::tanh_act,
                     rng);
      if (is_actions && !spec_.identity_readout) {
        init_map = ps.add("wm.init", init_weight(rng, n, spec.rnn_hidden));
      }
      return;
    case Backbone::lstm:
      lstm_ = LstmCell(ps, "wm.cell", spec.rnn_hidden, step_in, n, rng);
      if (is_actions) {
        init_map = ps.add("wm.init", init_weight(rng, n, spec.rnn_hidden));
      }
      return;
    case Backbone::attention: {
      TransformerSpec ts;
      ts.in_dim = n + m;
      ts.max_len = is_actions ? spec.horizon : 2 * (spec.horizon - 1);
      ts.d_model = spec.d_model;
      ts.heads = spec.heads;
      ts.layers = spec.layers;
      ts.d_ff = spec.d_ff;
      tf_ = Transformer(ps, "wm.tf", ts, rng);
      out_w = ps.add("wm.out.w", init_weight(rng, spec.d_model, n));
      out_b = ps.add("wm.out.b", Array({n}));
      return;
    }
  }
}

WorldModel WorldModel::wrap_env(const EnvProblem& env) {
  WorldModel wm;
  wm.spec_.family = Family::f_rnn;
  wm.spec_.backbone = Backbone::rnn;
  wm.spec_.state_dim = env.state_dim;
  wm.spec_.action_dim = env.action_dim;
  wm.spec_.horizon = env.horizon;
  wm.spec_.rnn_hidden = env.state_dim;
  wm.spec_.identity_readout = true;
  wm.env_ = env;
  return wm;
}

CheckpointHeader WorldModel::header() const {
  CheckpointHeader h;
  h.family = family_name(spec_.family);
  h.backbone = backbone_name(spec_.backbone);
  h.state_dim = spec_.state_dim;
  h.action_dim = spec_.action_dim;
  h.horizon = spec_.horizon;
  return h;
}

Value WorldModel::time_feature(int step) const {
  return Tape::constant(Array::full(
      {1, 1}, static_cast<double>(step) / spec_.horizon));
}

Value WorldModel::state_token(Tape& t, const Value& s) const {
  return t.concat({s, Tape::constant(Array({1, spec_.action_dim}))}, 1);
}

Value WorldModel::action_token(Tape& t, const Value& a) const {
  return t.concat({Tape::constant(Array({1, spec_.state_dim})), a}, 1);
}

Value WorldModel::readout(Tape& t, const std::vector<Value>& bound,
                          const Value& rows) const {
  return t.add(t.matmul(rows, bound[static_cast<size_t>(out_w)]),
               bound[static_cast<size_t>(out_b)]);
}

namespace {

void check_context(const WorldModelSpec& spec, size_t n_states,
                   size_t n_actions) {
  if (n_actions < 1) {
    throw std::invalid_argument("predict_next: needs at least one action");
  }
  if (static_cast<int>(n_actions) > spec.horizon - 1) {
    throw std::invalid_argument(
        "predict_next: context of " + std::to_string(n_actions) +
        " steps runs past horizon " + std::to_string(spec.horizon));
  }
  const bool wants_prefix_only =
      spec.family == Family::actions || spec.family == Family::f_rnn;
  if (wants_prefix_only ? n_states != 1 : n_states != n_actions) {
    throw std::invalid_argument(
        std::string("predict_next: the ") + family_name(spec.family) +
        " family takes " + (wants_prefix_only ? "only the initial state" : "one state per action"));
  }
}

}  // namespace

Value WorldModel::predict_next(Tape& t, const std::vector<Value>& bound,
                               const std::vector<Value>& states,
                               const std::vector<Value>& actions) const {
  check_context(spec_, states.size(), actions.size());
  const int steps = static_cast<int>(actions.size());
  switch (spec_.family) {
    case Family::markovian:
      return t.add(states.back(),
                   mlp_.forward(t, bound,
                                t.concat({states.back(), actions.back(),
                                          time_feature(steps)},
                                         1)));
    case Family::f_rnn: {
      Value x = states[0];
      for (int k = 1; k <= steps; ++k) {
        x = env_.step_tape(t, x, actions[static_cast<size_t>(k - 1)], k);
      }
      return x;
    }
    case Family::actions:
    case Family::history:
      break;
  }

  const bool is_actions = spec_.family == Family::actions;
  switch (spec_.backbone) {
    case Backbone::rnn: {
      Value hidden = is_actions
                         ? (spec_.identity_readout
                                ? states[0]
                                : t.matmul(states[0],
                                           bound[static_cast<size_t>(init_map)]))
                         : rnn_.initial_hidden(1);
      Value pred;
      for (int k = 1; k <= steps; ++k) {
        const Value& a = actions[static_cast<size_t>(k - 1)];
        const Value in =
            is_actions
                ? t.concat({a, time_feature(k)}, 1)
                : t.concat({states[static_cast<size_t>(k - 1)], a,
                            time_feature(k)},
                           1);
        const auto [next_hidden, read] = rnn_.step(t, bound, hidden, in);
        hidden = next_hidden;
        pred = spec_.identity_readout ? next_hidden : read;
      }
      return pred;
    }
    case Backbone::lstm: {
      LstmCell::Carry carry = lstm_.initial_carry(1);
      if (is_actions) {
        carry.h = t.matmul(states[0], bound[static_cast<size_t>(init_map)]);
      }
      Value pred;
      for (int k = 1; k <= steps; ++k) {
        const Value& a = actions[static_cast<size_t>(k - 1)];
        const Value in =
            is_actions
                ? t.concat({a, time_feature(k)}, 1)
                : t.concat({states[static_cast<size_t>(k - 1)], a,
                            time_feature(k)},
                           1);
        const auto [next_carry, read] = lstm_.step(t, bound, carry, in);
        carry = next_carry;
        pred = read;
      }
      return pred;
    }
    case Backbone::attention: {
      std::vector<Value> raw;
      if (is_actions) {
        raw.push_back(state_token(t, states[0]));
        for (const Value& a : actions) raw.push_back(action_token(t, a));
      } else {
        for (int k = 0; k < steps; ++k) {
          raw.push_back(state_token(t, states[static_cast<size_t>(k)]));
          raw.push_back(action_token(t, actions[static_cast<size_t>(k)]));
        }
      }
      const Value tokens =
          tf_.embed_tokens(t, bound, t.concat(raw, 0), 0);
      const Value out = tf_.forward(t, bound, tokens);
      const Value last = t.slice(out, 0, out.a().rows() - 1, 1);
      return readout(t, bound, last);
    }
    case Backbone::mlp:
      break;
  }
  throw std::logic_error("predict_next: unreachable backbone");
}

namespace {

void check_trajectory(const WorldModelSpec& spec,
                      const std::vector<Array>& states,
                      const std::vector<Array>& actions) {
  if (states.size() < 2 || actions.size() + 1 != states.size()) {
    throw std::invalid_argument(
        "model loss: need H >= 2 states and H-1 actions, got " +
        std::to_string(states.size()) + " and " + std::to_string(actions.size()));
  }
  if (static_cast<int>(states.size()) > spec.horizon) {
    throw std::invalid_argument("model loss: trajectory of " +
                                std::to_string(states.size()) +
                                " states runs past horizon " +
                                std::to_string(spec.horizon));
  }
  for (const Array& s : states) {
    if (s.numel() != spec.state_dim) {
      throw std::invalid_argument("model loss: state width " +
                                  std::to_string(s.numel()) +
                                  " does not match the model's " +
                                  std::to_string(spec.state_dim));
    }
  }
  for (const Array& a : actions) {
    if (a.numel() != spec.action_dim) {
      throw std::invalid_argument("model loss: action width " +
                                  std::to_string(a.numel()) +
                                  " does not match the model's " +
                                  std::to_string(spec.action_dim));
    }
  }
}

/// Rows t = 1..H-1 of (s_{t+1} - s_t) for the difference-form target.
Array markovian_target(const std::vector<Array>& states, int n) {
  const int rows = static_cast<int>(states.size()) - 1;
  Array target({rows, n});
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < n; ++c) {
      target.at2(r, c) = states[static_cast<size_t>(r + 1)].at(c) -
                         states[static_cast<size_t>(r)].at(c);
    }
  }
  return target;
}

Array next_state_rows(const std::vector<Array>& states, int n) {
  const int rows = static_cast<int>(states.size()) - 1;
  Array target({rows, n});
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < n; ++c) {
      target.at2(r, c) = states[static_cast<size_t>(r + 1)].at(c);
    }
  }
  return target;
}

}  // namespace

Value WorldModel::loss_on(Tape& t, const std::vector<Value>& bound,
                          const std::vector<Array>& states,
                          const std::vector<Array>& actions) const {
  check_trajectory(spec_, states, actions);
  const int n = spec_.state_dim, m = spec_.action_dim;
  const int steps = static_cast<int>(actions.size());

  if (spec_.family == Family::markovian) {
    Array x({steps, n + m + 1});
    for (int r = 0; r < steps; ++r) {
      for (int c = 0; c < n; ++c) x.at2(r, c) = states[static_cast<size_t>(r)].at(c);
      for (int c = 0; c < m; ++c) {
        x.at2(r, n + c) = actions[static_cast<size_t>(r)].at(c);
      }
      x.at2(r, n + m) = static_cast<double>(r + 1) / spec_.horizon;
    }
    const Value pred = mlp_.forward(t, bound, Tape::constant(x));
    return t.sum(
        t.square(t.sub(pred, Tape::constant(markovian_target(states, n)))));
  }

  if (spec_.family == Family::f_rnn) {
    Value x = Tape::constant(states[0]);
    std::vector<Value> preds;
    for (int k = 1; k <= steps; ++k) {
      x = env_.step_tape(t, x, Tape::constant(actions[static_cast<size_t>(k - 1)]),
                         k);
      preds.push_back(x);
    }
    const Value stacked = steps == 1 ? preds[0] : t.concat(preds, 0);
    return t.sum(
        t.square(t.sub(stacked, Tape::constant(next_state_rows(states, n)))));
  }

  const bool is_actions = spec_.family == Family::actions;
  std::vector<Value> preds;
  preds.reserve(static_cast<size_t>(steps));
  switch (spec_.backbone) {
    case Backbone::rnn: {
      Value hidden =
          is_actions
              ? (spec_.identity_readout
                     ? Tape::constant(states[0])
                     : t.matmul(Tape::constant(states[0]),
                                bound[static_cast<size_t>(init_map)]))
              : rnn_.initial_hidden(1);
      for (int k = 1; k <= steps; ++k) {
        const Value a = Tape::constant(actions[static_cast<size_t>(k - 1)]);
        const Value in =
            is_actions ? t.concat({a, time_feature(k)}, 1)
                       : t.concat({Tape::constant(states[static_cast<size_t>(k - 1)]),
                                   a, time_feature(k)},
                                  1);
        const auto [next_hidden, read] = rnn_.step(t, bound, hidden, in);
        hidden = next_hidden;
        preds.push_back(spec_.identity_readout ? next_hidden : read);
      }
      break;
    }
    case Backbone::lstm: {
      LstmCell::Carry carry = lstm_.initial_carry(1);
      if (is_actions) {
        carry.h = t.matmul(Tape::constant(states[0]),
                           bound[static_cast<size_t>(init_map)]);
      }
      for (int k = 1; k <= steps; ++k) {
        const Value a = Tape::constant(actions[static_cast<size_t>(k - 1)]);
        const Value in =
            is_actions ? t.concat({a, time_feature(k)}, 1)
                       : t.concat({Tape::constant(states[static_cast<size_t>(k - 1)]),
                                   a, time_feature(k)},
                                  1);
        const auto [next_carry, read] = lstm_.step(t, bound, carry, in);
        carry = next_carry;
        preds.push_back(read);
      }
      break;
    }
    case Backbone::attention: {
      // All prefixes share one causal forward pass over the ground-truth
      // token stream; the prediction for s_{t+1} sits at the a_t token.
      Array raw;
      std::vector<int> read_rows;
      if (is_actions) {
        raw = Array({steps + 1, n + m});
        for (int c = 0; c < n; ++c) raw.at2(0, c) = states[0].at(c);
        for (int r = 0; r < steps; ++r) {
          for (int c = 0; c < m; ++c) {
            raw.at2(r + 1, n + c) = actions[static_cast<size_t>(r)].at(c);
          }
          read_rows.push_back(r + 1);
        }
      } else {
        raw = Array({2 * steps, n + m});
        for (int r = 0; r < steps; ++r) {
          for (int c = 0; c < n; ++c) {
            raw.at2(2 * r, c) = states[static_cast<size_t>(r)].at(c);
          }
          for (int c = 0; c < m; ++c) {
            raw.at2(2 * r + 1, n + c) = actions[static_cast<size_t>(r)].at(c);
          }
          read_rows.push_back(2 * r + 1);
        }
      }
      const Value out = tf_.forward(
          t, bound, tf_.embed_tokens(t, bound, Tape::constant(raw), 0));
      Value rows;
      if (is_actions) {
        rows = t.slice(out, 0, 1, steps);  // contiguous action-token rows
      } else {
        std::vector<Value> picked;
        for (int r : read_rows) picked.push_back(t.slice(out, 0, r, 1));
        rows = picked.size() == 1 ? picked[0] : t.concat(picked, 0);
      }
      const Value pred = readout(t, bound, rows);
      return t.sum(
          t.square(t.sub(pred, Tape::constant(next_state_rows(states, n)))));
    }
    case Backbone::mlp:
      throw std::logic_error("model loss: unreachable backbone");
  }

  const Value stacked = preds.size() == 1 ? preds[0] : t.concat(preds, 0);
  return t.sum(
      t.square(t.sub(stacked, Tape::constant(next_state_rows(states, n)))));
}

Value WorldModel::loss_on_batch(Tape& t, const std::vector<Value>& bound,
                                const std::vector<const Trajectory*>& batch) const {
  if (batch.empty()) {
    throw std::invalid_argument("loss_on_batch: empty batch");
  }
  if (spec_.family == Family::markovian) {
    // Transitions from every trajectory fuse into one forward pass.
    const int n = spec_.state_dim, m = spec_.action_dim;
    int rows = 0;
    for (const Trajectory* tr : batch) {
      check_trajectory(spec_, tr->states, tr->actions);
      rows += static_cast<int>(tr->actions.size());
    }
    Array x({rows, n + m + 1});
    Array target({rows, n});
    int r = 0;
    for (const Trajectory* tr : batch) {
      for (size_t k = 0; k < tr->actions.size(); ++k) {
        for (int c = 0; c < n; ++c) {
          x.at2(r, c) = tr->states[k].at(c);
          target.at2(r, c) = tr->states[k + 1].at(c) - tr->states[k].at(c);
        }
        for (int c = 0; c < m; ++c) x.at2(r, n + c) = tr->actions[k].at(c);
        x.at2(r, n + m) = static_cast<double>(k + 1) / spec_.horizon;
        ++r;
      }
    }
    const Value pred = mlp_.forward(t, bound, Tape::constant(x));
    return t.sum(t.square(t.sub(pred, Tape::constant(target))));
  }
  Value total;
  for (const Trajectory* tr : batch) {
    const Value one = loss_on(t, bound, tr->states, tr->actions);
    total = total.arr ? t.add(total, one) : one;
  }
  return total;
}

Value WorldModel::teacher_forced_loss(Tape& t, const std::vector<Value>& bound,
                                      const std::vector<Array>& states,
                                      const std::vector<Array>& actions) const {
  if (!spec_.identity_readout || spec_.family != Family::actions ||
      spec_.backbone != Backbone::rnn) {
    throw std::invalid_argument(
        "teacher_forced_loss: needs the identity-readout rnn actions model");
  }
  check_trajectory(spec_, states, actions);
  const int steps = static_cast<int>(actions.size());
  std::vector<Value> preds;
  for (int k = 1; k <= steps; ++k) {
    // Ground-truth state in the recurrent slot instead of the previous output.
    const Value in = t.concat(
        {Tape::constant(actions[static_cast<size_t>(k - 1)]), time_feature(k)}, 1);
    preds.push_back(
        rnn_.step(t, bound, Tape::constant(states[static_cast<size_t>(k - 1)]), in)
            .first);
  }
  const Value stacked = preds.size() == 1 ? preds[0] : t.concat(preds, 0);
  return t.sum(t.square(
      t.sub(stacked, Tape::constant(next_state_rows(states, spec_.state_dim)))));
}

/// Carries the per-backbone incremental state of one imagined rollout, so a
/// length-H unroll costs one extend per new token instead of a prefix rebuild.
struct UnrollDriver {
  const WorldModel& wm;
  Tape& t;
  const std::vector<Value>& bound;
  Value hidden;
  LstmCell::Carry carry;
  Transformer::Cache cache;
  bool primed = false;

  Value push_token(const Value& raw) {
    const Value emb = wm.tf_.embed_tokens(t, bound, raw, cache.len);
    return wm.tf_.extend(t, bound, cache, emb);
  }

  Value next_state(const Value& s_cur, const Value& a, int step) {
    const WorldModelSpec& ms = wm.spec_;
    switch (ms.family) {
      case Family::f_rnn:
        return wm.env_.step_tape(t, s_cur, a, step);
      case Family::markovian:
        return t.add(
            s_cur, wm.mlp_.forward(
                       t, bound,
                       t.concat({s_cur, a, wm.time_feature(step)}, 1)));
      case Family::actions:
      case Family::history:
        break;
    }
    const bool is_actions = ms.family == Family::actions;
    switch (ms.backbone) {
      case Backbone::rnn: {
        if (step == 1) {
          hidden = is_actions
                       ? (ms.identity_readout
                              ? s_cur
                              : t.matmul(s_cur,
                                         bound[static_cast<size_t>(wm.init_map)]))
                       : wm.rnn_.initial_hidden(1);
        }
        const Value in = is_actions
                             ? t.concat({a, wm.time_feature(step)}, 1)
                             : t.concat({s_cur, a, wm.time_feature(step)}, 1);
        const auto [next_hidden, read] = wm.rnn_.step(t, bound, hidden, in);
        hidden = next_hidden;
        return ms.identity_readout ? next_hidden : read;
      }
      case Backbone::lstm: {
        if (step == 1) {
          carry = wm.lstm_.initial_carry(1);
          if (is_actions) {
            carry.h = t.matmul(s_cur, bound[static_cast<size_t>(wm.init_map)]);
          }
        }
        const Value in = is_actions
                             ? t.concat({a, wm.time_feature(step)}, 1)
                             : t.concat({s_cur, a, wm.time_feature(step)}, 1);
        const auto [next_carry, read] = wm.lstm_.step(t, bound, carry, in);
        carry = next_carry;
        return read;
      }
      case Backbone::attention: {
        if (!primed) {
          cache = wm.tf_.make_cache();
          primed = true;
          if (is_actions) push_token(wm.state_token(t, s_cur));
        }
        if (!is_actions) push_token(wm.state_token(t, s_cur));
        return wm.readout(t, bound, push_token(wm.action_token(t, a)));
      }
      case Backbone::mlp:
        break;
    }
    throw std::logic_error("unroll: unreachable backbone");
  }
};

std::vector<Value> WorldModel::predict_sequence(
    Tape& t, const std::vector<Value>& bound, const Value& s1,
    const std::vector<Value>& actions) const {
  if (static_cast<int>(actions.size()) > spec_.horizon - 1) {
    throw std::invalid_argument(
        "predict_sequence: " + std::to_string(actions.size()) +
        " actions run past the model horizon " +
        std::to_string(spec_.horizon));
  }
  if (s1.a().rows() != 1 || s1.a().cols() != spec_.state_dim) {
    throw std::invalid_argument(
        "predict_sequence: start state must be [1, state_dim]");
  }
  for (const Value& a : actions) {
    if (a.a().rows() != 1 || a.a().cols() != spec_.action_dim) {
      throw std::invalid_argument(
          "predict_sequence: actions must be [1, action_dim] rows");
    }
  }
  std::vector<Value> states;
  states.reserve(actions.size() + 1);
  states.push_back(s1);
  UnrollDriver driver{*this, t, bound};
  for (size_t i = 0; i < actions.size(); ++i) {
    states.push_back(
        driver.next_state(states.back(), actions[i], static_cast<int>(i) + 1));
  }
  return states;
}

Rollout unroll(Tape& t, const WorldModel& model,
               const std::vector<Value>& model_bound, const Policy& policy,
               const std::vector<Value>& policy_bound, const EnvProblem& env,
               int horizon, bool stop_grad, RngStream* noise_rng) {
  if (horizon < 1) {
    throw std::invalid_argument("unroll: horizon must be >= 1");
  }
  const WorldModelSpec& ms = model.spec();
  if (horizon > ms.horizon) {
    throw std::invalid_argument("unroll: horizon " + std::to_string(horizon) +
                                " runs past the model's " +
                                std::to_string(ms.horizon));
  }
  if (env.state_dim != ms.state_dim || env.action_dim != ms.action_dim) {
    throw std::invalid_argument(
        "unroll: environment and model dimensions disagree");
  }

  Rollout out;
  out.states.reserve(static_cast<size_t>(horizon));
  out.states.push_back(Tape::constant(env.s1));
  Value total = Tape::constant_scalar(0.0);
  UnrollDriver driver{model, t, model_bound};

  for (int step = 1; step < horizon; ++step) {
    const Value s = out.states.back();
    Array noise;
    const Array* noise_ptr = nullptr;
    if (noise_rng != nullptr) {
      noise = noise_rng->normal_array({1, ms.action_dim});
      noise_ptr = &noise;
    }
    const Policy::Act act =
        policy.act(t, policy_bound, s, step, noise_ptr, stop_grad);
    out.actions.push_back(act.action);
    out.log_probs.push_back(act.log_prob);
    if (env.step_reward) {
      total = t.add(total, env.step_reward(t, s, act.action, step));
    }
    out.states.push_back(driver.next_state(s, act.action, step));
  }
  if (env.final_reward) {
    total = t.add(total, env.final_reward(t, out.states.back()));
  }
  out.total = total;
  return out;
}

}  // namespace awmlab
