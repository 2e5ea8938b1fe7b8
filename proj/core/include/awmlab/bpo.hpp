#pragma once
// Training loop: alternate between fitting a learned dynamics model on a
// replay buffer of real episodes and ascending the policy on returns imagined
// under that model. The gradient flows through the model's unrolled
// transitions, optionally with the state input to the policy detached.
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "awmlab/envs.hpp"
#include "awmlab/params.hpp"
#include "awmlab/policy.hpp"
#include "awmlab/worldmodels.hpp"

namespace awmlab {

// Ring buffer of whole episodes with a capacity counted in transitions.
// When full, whole episodes are evicted oldest-first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int64_t transition_capacity = 1000000);

  void add(Trajectory tr);
  int64_t transitions() const { return transitions_; }
  int64_t episodes() const { return static_cast<int64_t>(eps_.size()); }
  const Trajectory& episode(int64_t i) const;

  // Uniform over stored episodes, with replacement.
  std::vector<const Trajectory*> sample(int batch, RngStream& rng) const;

 private:
  std::deque<Trajectory> eps_;
  int64_t capacity_ = 0;
  int64_t transitions_ = 0;
};

struct BpoConfig {
  std::string env = "harvest";
  int horizon = 0;  // 0 = resolve to 100 at run start

  // Budget and cadence. total_env_steps == 0 resolves to 200000 (100000 for
  // double_pendulum). The replay ratios are per collected episode:
  // round(dynamics_replay_ratio * (horizon - 1)) model updates and
  // round(policy_replay_ratio) policy updates.
  int64_t total_env_steps = 0;
  double dynamics_replay_ratio = 2.0;
  double policy_replay_ratio = 16.0;
  int dynamics_batch = 64;
  int policy_batch = 16;
  double dynamics_lr = 0.001;
  double policy_lr = 0.0001;
  double entropy_coeff = 0.001;
  bool stop_grad = true;
  double clip_norm = 100.0;  // policy gradients only; 0 disables

  std::string family = "actions";
  std::string backbone = "attention";
  uint64_t seed = 0;

  int64_t replay_capacity = 1000000;
  int64_t warmup_steps = 1500;  // uniform-random transitions before training
  int checkpoint_every = 10;    // episodes; 0 disables checkpoints
  int workers = 1;              // threads for the policy rollout batch

  // Architecture overrides, passed through to the model and policy specs.
  std::vector<int> mlp_hidden = {64, 64};
  int rnn_hidden = 64;
  int d_model = 72;
  int heads = 3;
  int layers = 2;
  int d_ff = 256;
  std::vector<int> policy_hidden = {64, 64};

  // Trajectory-optimization reference used to normalize evaluation returns.
  int oracle_iters = 400;
  double oracle_lr = 0.05;
  int oracle_starts = 8;

  void validate() const;
  // Copy with horizon and total_env_steps made concrete.
  BpoConfig resolved() const;
  WorldModelSpec model_spec(const EnvProblem& problem) const;
  PolicySpec policy_spec(const EnvProblem& problem) const;
};

// Strict JSON codec: unknown keys are rejected, all keys optional.
BpoConfig config_from_json(const std::string& text);
std::string config_to_json(const BpoConfig& cfg);

struct TrainRow {
  int64_t env_steps = 0;
  int64_t episode = 0;
  double model_loss = 0.0;  // mean squared error per transition, pre-update
  double eval_return = 0.0;
  double normalized_return = 0.0;
  double grad_norm = 0.0;  // post-clip norm of the last policy update
  double wall_ms = 0.0;
};

struct TrainResult {
  std::vector<TrainRow> rows;
  double j_oracle = 0.0;
  double j_rand = 0.0;
  int64_t env_steps = 0;
  int64_t skipped_model_steps = 0;   // non-finite loss or gradient
  int64_t skipped_policy_steps = 0;  // non-finite objective or gradient

  std::string csv() const;
};

// Plays one episode in the real environment. noise_rng == nullptr means the
// deterministic mean action at every step.
Trajectory collect_episode(const EnvProblem& problem, const Policy& pi,
                           const ParamStore& pi_ps, RngStream* noise_rng);

// One model update on a sampled batch of episodes. Returns the pre-update
// mean squared error per transition, or NaN if the step was skipped because
// the loss or gradient was not finite.
double train_model_step(const WorldModel& wm, ParamStore& model_ps, Adam& opt,
                        const ReplayBuffer& buffer, const BpoConfig& cfg,
                        RngStream& rng, GradNorms* norms = nullptr);

// One ascent step on the mean imagined objective
//   J_model(pi) + entropy_coeff * sum_t -log pi(a_t | s_t)
// over policy_batch rollouts with exploration noise. Rollout k draws its
// noise from a stream seeded with noise_seed + k, so results do not depend
// on cfg.workers. Returns the pre-update mean objective, or NaN if skipped.
double train_policy_step(const WorldModel& wm, const ParamStore& model_ps,
                         const Policy& pi, ParamStore& pi_ps, Adam& opt,
                         const EnvProblem& problem, const BpoConfig& cfg,
                         uint64_t noise_seed, GradNorms* norms = nullptr);

// Called after each evaluated episode; return true to stop training early.
using EpisodeHook = std::function<bool(const TrainRow&)>;

// Full training run. With a non-empty out_dir, writes train_log.csv and
// config.json there and checkpoints model/policy every checkpoint_every
// episodes. The directory is created if needed; existing files are
// overwritten.
TrainResult run_bpo(const BpoConfig& cfg, const std::string& out_dir = "",
                    const EpisodeHook& hook = {});

}  // namespace awmlab
