#pragma once

#include <string>
#include <vector>

#include "awmlab/array.hpp"
#include "awmlab/envs.hpp"
#include "awmlab/nets.hpp"
#include "awmlab/params.hpp"
#include "awmlab/policy.hpp"
#include "awmlab/tape.hpp"

namespace awmlab {

/// What the model conditions on to predict the next state:
///   markovian  s_{t+1} = s_t + f(s_t, a_t)            (difference form)
///   history    s_{t+1} = h(s_{1:t}, a_{1:t})
///   actions    s_{t+1} = g(s_1, a_{1:t})
///   f_rnn      the true environment step as a parameterless actions model
enum class Family { markovian, history, actions, f_rnn };

enum class Backbone { mlp, rnn, lstm, attention };

const char* family_name(Family f);
const char* backbone_name(Backbone b);
Family family_from(const std::string& s);
Backbone backbone_from(const std::string& s);

struct WorldModelSpec {
  Family family = Family::markovian;
  Backbone backbone = Backbone::mlp;
  int state_dim = 0;
  int action_dim = 0;
  int horizon = 0;
  std::vector<int> mlp_hidden = {64, 64};
  int rnn_hidden = 64;
  int d_model = 72;
  int heads = 3;
  int layers = 2;
  int d_ff = 256;
  /// Actions-family rnn with hidden width = state_dim whose hidden state IS
  /// the predicted state: the cell becomes a one-step state model and the
  /// initial hidden state is s_1 itself.
  bool identity_readout = false;
};

/// One trainable world model. Parameters live in the owning ParamStore;
/// forward passes read them from the bound vector (bind() for training,
/// bind_frozen() when the model sits inside a policy objective). Recurrent
/// and MLP backbones take a normalized t/H feature appended to their step
/// inputs; the transformer carries time through its positional rows. The
/// transformer consumes state and action tokens as zero-padded blocks of a
/// shared (state_dim + action_dim)-wide input, so each modality owns a block
/// of embedding rows, with the initial state as a prefix token.
class WorldModel {
 public:
  WorldModel() = default;
  /// Registers parameters. Throws on an unsupported family/backbone pairing
  /// (markovian pairs only with mlp; history and actions need a sequence
  /// backbone; f_rnn models come from wrap_env).
  WorldModel(ParamStore& ps, const WorldModelSpec& spec, RngStream& rng);

  /// The Proposition-1 construction: an actions-family model whose recurrent
  /// cell is the environment's own dynamics with identity readout. Holds no
  /// parameters; use an empty bound vector.
  static WorldModel wrap_env(const EnvProblem& env);

  const WorldModelSpec& spec() const { return spec_; }

  /// One predicted next state from an explicit context, rebuilt from scratch:
  /// markovian and history read states s_{1:t} with actions a_{1:t}; the
  /// actions family reads states = {s_1} and actions a_{1:t}. Throws if the
  /// context runs past the model horizon.
  Value predict_next(Tape& t, const std::vector<Value>& bound,
                     const std::vector<Value>& states,
                     const std::vector<Value>& actions) const;

  /// Autoregressive predicted chain from explicit tape actions: returns
  /// {s_1, predictions for steps 2..T+1} with T = actions.size(). Gradients
  /// flow into the given actions, so sweeps can differentiate a late state
  /// with respect to an early action. Throws when T runs past the model
  /// horizon or a row has the wrong width.
  std::vector<Value> predict_sequence(Tape& t,
                                      const std::vector<Value>& bound,
                                      const Value& s1,
                                      const std::vector<Value>& actions) const;

  /// Sum over t of |s_{t+1} - prediction_t|^2 with ground-truth inputs
  /// everywhere (states teacher-forced for the history family).
  Value loss_on(Tape& t, const std::vector<Value>& bound,
                const std::vector<Array>& states,
                const std::vector<Array>& actions) const;

  /// Summed loss_on over a batch; the markovian path fuses the batch into one
  /// forward pass.
  Value loss_on_batch(Tape& t, const std::vector<Value>& bound,
                      const std::vector<const Trajectory*>& batch) const;

  /// Per-step loss of the identity-readout rnn cell fed ground-truth states
  /// instead of its own outputs; its parameter gradient equals that of the
  /// summed one-step loss.
  Value teacher_forced_loss(Tape& t, const std::vector<Value>& bound,
                            const std::vector<Array>& states,
                            const std::vector<Array>& actions) const;

  CheckpointHeader header() const;

 private:
  friend struct UnrollDriver;
  WorldModelSpec spec_;
  Mlp mlp_;
  RnnCell rnn_;
  LstmCell lstm_;
  Transformer tf_;
  int init_map = -1;           // s_1 -> initial hidden, rnn/lstm actions family
  int out_w = -1, out_b = -1;  // transformer readout
  EnvProblem env_;             // f_rnn only

  Value time_feature(int step) const;
  Value state_token(Tape& t, const Value& s) const;
  Value action_token(Tape& t, const Value& a) const;
  Value readout(Tape& t, const std::vector<Value>& bound, const Value& rows) const;
};

/// One imagined episode on the tape.
struct Rollout {
  std::vector<Value> states;     // s_1..s_H, states[0] constant
  std::vector<Value> actions;    // a_1..a_{H-1}
  std::vector<Value> log_probs;  // one scalar per action
  Value total;                   // J = sum of step rewards plus terminal
};

/// Autoregressive rollout: a_t from the policy at the model's own predicted
/// state (input stop-gradded iff stop_grad), next state from the model,
/// rewards from the environment's known reward functions. noise_rng draws one
/// standard-normal sample per step; nullptr takes mean actions. horizon >= 1;
/// horizon = 1 yields just the terminal reward of s_1 and a parameter-free
/// objective.
Rollout unroll(Tape& t, const WorldModel& model,
               const std::vector<Value>& model_bound, const Policy& policy,
               const std::vector<Value>& policy_bound, const EnvProblem& env,
               int horizon, bool stop_grad, RngStream* noise_rng);

}  // namespace awmlab
