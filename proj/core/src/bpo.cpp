#include "awmlab/bpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>
#include <unordered_set>

#include "json.hpp"

namespace awmlab {
namespace {

const char* kCsvHeader =
    "env_steps,episode,model_loss,eval_return,normalized_return,grad_norm,"
    "wall_ms";

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string row_to_csv(const TrainRow& r) {
  return std::to_string(r.env_steps) + "," + std::to_string(r.episode) + "," +
         fmt_double(r.model_loss) + "," + fmt_double(r.eval_return) + "," +
         fmt_double(r.normalized_return) + "," + fmt_double(r.grad_norm) +
         "," + fmt_double(r.wall_ms);
}

int64_t batch_transitions(const std::vector<const Trajectory*>& batch) {
  int64_t n = 0;
  for (const Trajectory* tr : batch)
    n += static_cast<int64_t>(tr->states.size()) - 1;
  return n;
}

bool grads_finite(const std::vector<Array>& grads) {
  for (const Array& g : grads)
    if (!g.all_finite()) return false;
  return true;
}

}  // namespace

ReplayBuffer::ReplayBuffer(int64_t transition_capacity)
    : capacity_(transition_capacity) {
  if (transition_capacity < 1)
    throw std::invalid_argument("replay buffer: capacity must be positive");
}

void ReplayBuffer::add(Trajectory tr) {
  if (tr.states.size() < 2 || tr.actions.size() + 1 != tr.states.size())
    throw std::invalid_argument("replay buffer: malformed episode");
  transitions_ += static_cast<int64_t>(tr.actions.size());
  eps_.push_back(std::move(tr));
  // Evicting down to at most the capacity keeps at least the newest episode
  // even when a single episode exceeds the capacity.
  while (transitions_ > capacity_ && eps_.size() > 1) {
    transitions_ -= static_cast<int64_t>(eps_.front().actions.size());
    eps_.pop_front();
  }
}

const Trajectory& ReplayBuffer::episode(int64_t i) const {
  if (i < 0 || i >= episodes())
    throw std::out_of_range("replay buffer: episode index");
  return eps_[static_cast<size_t>(i)];
}

std::vector<const Trajectory*> ReplayBuffer::sample(int batch,
                                                    RngStream& rng) const {
  if (batch < 1) throw std::invalid_argument("replay buffer: batch size");
  if (eps_.empty())
    throw std::invalid_argument("replay buffer: sample from empty buffer");
  std::vector<const Trajectory*> out;
  out.reserve(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i)
    out.push_back(&eps_[static_cast<size_t>(
        rng.index(static_cast<int64_t>(eps_.size())))]);
  return out;
}

void BpoConfig::validate() const {
  if (horizon < 0 || horizon == 1)
    throw std::invalid_argument("config: horizon must be 0 (default) or >= 2");
  if (total_env_steps < 0)
    throw std::invalid_argument("config: total_env_steps must be >= 0");
  if (dynamics_replay_ratio < 0 || policy_replay_ratio < 0)
    throw std::invalid_argument("config: replay ratios must be >= 0");
  if (dynamics_batch < 1 || policy_batch < 1)
    throw std::invalid_argument("config: batch sizes must be >= 1");
  if (dynamics_lr < 0 || policy_lr < 0)
    throw std::invalid_argument("config: learning rates must be >= 0");
  if (entropy_coeff < 0)
    throw std::invalid_argument("config: entropy_coeff must be >= 0");
  if (clip_norm < 0)
    throw std::invalid_argument("config: clip_norm must be >= 0");
  if (replay_capacity < 1)
    throw std::invalid_argument("config: replay_capacity must be >= 1");
  if (warmup_steps < 0)
    throw std::invalid_argument("config: warmup_steps must be >= 0");
  if (checkpoint_every < 0)
    throw std::invalid_argument("config: checkpoint_every must be >= 0");
  if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
  if (rnn_hidden < 1 || d_model < 1 || heads < 1 || layers < 1 || d_ff < 1)
    throw std::invalid_argument("config: architecture sizes must be >= 1");
  for (int w : mlp_hidden)
    if (w < 1) throw std::invalid_argument("config: mlp_hidden entries >= 1");
  for (int w : policy_hidden)
    if (w < 1)
      throw std::invalid_argument("config: policy_hidden entries >= 1");
  if (oracle_iters < 1 || oracle_starts < 1 || oracle_lr <= 0)
    throw std::invalid_argument("config: oracle settings must be positive");
  family_from(family);
  backbone_from(backbone);
}

BpoConfig BpoConfig::resolved() const {
  BpoConfig r = *this;
  if (r.horizon == 0) r.horizon = default_horizon(r.env);
  if (r.total_env_steps == 0)
    r.total_env_steps = (r.env == "double_pendulum") ? 100000 : 200000;
  return r;
}

WorldModelSpec BpoConfig::model_spec(const EnvProblem& problem) const {
  WorldModelSpec s;
  s.family = family_from(family);
  s.backbone = backbone_from(backbone);
  s.state_dim = problem.state_dim;
  s.action_dim = problem.action_dim;
  s.horizon = problem.horizon;
  s.mlp_hidden = mlp_hidden;
  s.rnn_hidden = rnn_hidden;
  s.d_model = d_model;
  s.heads = heads;
  s.layers = layers;
  s.d_ff = d_ff;
  return s;
}

PolicySpec BpoConfig::policy_spec(const EnvProblem& problem) const {
  PolicySpec s;
  s.state_dim = problem.state_dim;
  s.action_dim = problem.action_dim;
  s.action_lo = problem.action_lo;
  s.action_hi = problem.action_hi;
  s.horizon = problem.horizon;
  s.hidden = policy_hidden;
  s.entropy_coeff = entropy_coeff;
  return s;
}

namespace {

// One place that names every accepted config key; the reader rejects
// anything outside this list so typos fail loudly instead of silently
// training with a default.
const std::unordered_set<std::string>& config_keys() {
  static const std::unordered_set<std::string> keys = {
      "env",           "horizon",
      "total_env_steps", "dynamics_replay_ratio",
      "policy_replay_ratio", "dynamics_batch",
      "policy_batch",  "dynamics_lr",
      "policy_lr",     "entropy_coeff",
      "stop_grad",     "clip_norm",
      "family",        "backbone",
      "seed",          "replay_capacity",
      "warmup_steps",  "checkpoint_every",
      "workers",       "mlp_hidden",
      "rnn_hidden",    "d_model",
      "heads",         "layers",
      "d_ff",          "policy_hidden",
      "oracle_iters",  "oracle_lr",
      "oracle_starts"};
  return keys;
}

}  // namespace

BpoConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  if (!j.is_object())
    throw std::invalid_argument("config: top level must be a JSON object");
  for (const auto& item : j.items())
    if (config_keys().count(item.key()) == 0)
      throw std::invalid_argument("config: unknown key '" + item.key() + "'");

  BpoConfig cfg;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) {
      try {
        j.at(key).get_to(field);
      } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config: bad value for '") +
                                    key + "': " + e.what());
      }
    }
  };
  get("env", cfg.env);
  get("horizon", cfg.horizon);
  get("total_env_steps", cfg.total_env_steps);
  get("dynamics_replay_ratio", cfg.dynamics_replay_ratio);
  get("policy_replay_ratio", cfg.policy_replay_ratio);
  get("dynamics_batch", cfg.dynamics_batch);
  get("policy_batch", cfg.policy_batch);
  get("dynamics_lr", cfg.dynamics_lr);
  get("policy_lr", cfg.policy_lr);
  get("entropy_coeff", cfg.entropy_coeff);
  get("stop_grad", cfg.stop_grad);
  get("clip_norm", cfg.clip_norm);
  get("family", cfg.family);
  get("backbone", cfg.backbone);
  get("seed", cfg.seed);
  get("replay_capacity", cfg.replay_capacity);
  get("warmup_steps", cfg.warmup_steps);
  get("checkpoint_every", cfg.checkpoint_every);
  get("workers", cfg.workers);
  get("mlp_hidden", cfg.mlp_hidden);
  get("rnn_hidden", cfg.rnn_hidden);
  get("d_model", cfg.d_model);
  get("heads", cfg.heads);
  get("layers", cfg.layers);
  get("d_ff", cfg.d_ff);
  get("policy_hidden", cfg.policy_hidden);
  get("oracle_iters", cfg.oracle_iters);
  get("oracle_lr", cfg.oracle_lr);
  get("oracle_starts", cfg.oracle_starts);
  cfg.validate();
  return cfg;
}

std::string config_to_json(const BpoConfig& cfg) {
  nlohmann::json j;
  j["env"] = cfg.env;
  j["horizon"] = cfg.horizon;
  j["total_env_steps"] = cfg.total_env_steps;
  j["dynamics_replay_ratio"] = cfg.dynamics_replay_ratio;
  j["policy_replay_ratio"] = cfg.policy_replay_ratio;
  j["dynamics_batch"] = cfg.dynamics_batch;
  j["policy_batch"] = cfg.policy_batch;
  j["dynamics_lr"] = cfg.dynamics_lr;
  j["policy_lr"] = cfg.policy_lr;
  j["entropy_coeff"] = cfg.entropy_coeff;
  j["stop_grad"] = cfg.stop_grad;
  j["clip_norm"] = cfg.clip_norm;
  j["family"] = cfg.family;
  j["backbone"] = cfg.backbone;
  j["seed"] = cfg.seed;
  j["replay_capacity"] = cfg.replay_capacity;
  j["warmup_steps"] = cfg.warmup_steps;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["workers"] = cfg.workers;
  j["mlp_hidden"] = cfg.mlp_hidden;
  j["rnn_hidden"] = cfg.rnn_hidden;
  j["d_model"] = cfg.d_model;
  j["heads"] = cfg.heads;
  j["layers"] = cfg.layers;
  j["d_ff"] = cfg.d_ff;
  j["policy_hidden"] = cfg.policy_hidden;
  j["oracle_iters"] = cfg.oracle_iters;
  j["oracle_lr"] = cfg.oracle_lr;
  j["oracle_starts"] = cfg.oracle_starts;
  return j.dump(2) + "\n";
}

std::string TrainResult::csv() const {
  std::string out = kCsvHeader;
  out += '\n';
  for (const TrainRow& r : rows) {
    out += row_to_csv(r);
    out += '\n';
  }
  return out;
}

Trajectory collect_episode(const EnvProblem& problem, const Policy& pi,
                           const ParamStore& pi_ps, RngStream* noise_rng) {
  Tape t;
  const std::vector<Value> bound = pi_ps.bind_frozen();
  Value s = Tape::constant(problem.s1);
  std::vector<Array> actions;
  actions.reserve(static_cast<size_t>(problem.horizon - 1));
  for (int step = 1; step <= problem.horizon - 1; ++step) {
    Array noise;
    const Array* noise_ptr = nullptr;
    if (noise_rng) {
      noise = noise_rng->normal_array({1, problem.action_dim});
      noise_ptr = &noise;
    }
    Policy::Act a = pi.act(t, bound, s, step, noise_ptr, false);
    actions.push_back(a.action.a());
    s = problem.step_tape(t, s, a.action, step);
  }
  // record_episode replays the same actions through the same dynamics, so the
  // returned states match the ones the policy saw bit for bit.
  return record_episode(problem, actions);
}

double train_model_step(const WorldModel& wm, ParamStore& model_ps, Adam& opt,
                        const ReplayBuffer& buffer, const BpoConfig& cfg,
                        RngStream& rng, GradNorms* norms) {
  if (model_ps.count() == 0)
    throw std::invalid_argument("train_model_step: model has no parameters");
  std::vector<const Trajectory*> batch = buffer.sample(cfg.dynamics_batch, rng);
  const int64_t ntrans = batch_transitions(batch);

  Tape t;
  std::vector<Value> bound = model_ps.bind(t);
  Value total = wm.loss_on_batch(t, bound, batch);
  // Mean squared error per transition, so the learning rate does not change
  // meaning with the batch size or the horizon.
  Value loss = t.scale(total, 1.0 / static_cast<double>(ntrans));
  const double loss_val = loss.item();
  if (!std::isfinite(loss_val)) return std::nan("");

  std::vector<Array> grads = model_ps.grads_of(t.backward(loss), bound);
  if (!grads_finite(grads)) return std::nan("");
  GradNorms gn = opt.step(model_ps, std::move(grads), 0.0);
  if (norms) *norms = gn;
  return loss_val;
}

double train_policy_step(const WorldModel& wm, const ParamStore& model_ps,
                         const Policy& pi, ParamStore& pi_ps, Adam& opt,
                         const EnvProblem& problem, const BpoConfig& cfg,
                         uint64_t noise_seed, GradNorms* norms) {
  const int batch = cfg.policy_batch;
  const auto params = static_cast<size_t>(pi_ps.count());
  std::vector<std::vector<Array>> grads(static_cast<size_t>(batch));
  std::vector<double> objectives(static_cast<size_t>(batch), 0.0);

  auto run_one = [&](int k) {
    Tape t;
    const std::vector<Value> model_bound = model_ps.bind_frozen();
    const std::vector<Value> pi_bound = pi_ps.bind(t);
    RngStream noise(noise_seed + static_cast<uint64_t>(k));
    Rollout ro = unroll(t, wm, model_bound, pi, pi_bound, problem,
                        problem.horizon, cfg.stop_grad, &noise);
    Value entropy = Tape::constant_scalar(0.0);
    for (const Value& lp : ro.log_probs) entropy = t.add(entropy, lp);
    Value objective = t.add(ro.total, t.scale(entropy, -cfg.entropy_coeff));
    objectives[static_cast<size_t>(k)] = objective.item();
    grads[static_cast<size_t>(k)] =
        pi_ps.grads_of(t.backward(objective), pi_bound);
  };

  const int workers = std::min(cfg.workers, batch);
  if (workers <= 1) {
    for (int k = 0; k < batch; ++k) run_one(k);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&run_one, w, batch, workers] {
        for (int k = w; k < batch; k += workers) run_one(k);
      });
    for (std::thread& th : pool) th.join();
  }

  // Reduce in rollout order so the result is identical for any worker count.
  double mean_objective = 0.0;
  std::vector<Array> ascent(params);
  for (size_t p = 0; p < params; ++p)
    ascent[p] = Array(grads[0][p].shape);
  for (int k = 0; k < batch; ++k) {
    mean_objective += objectives[static_cast<size_t>(k)];
    for (size_t p = 0; p < params; ++p) ascent[p] += grads[static_cast<size_t>(k)][p];
  }
  mean_objective /= batch;
  // Adam descends, the objective is maximized: feed the negated mean.
  const double scale = -1.0 / static_cast<double>(batch);
  for (Array& g : ascent) g *= scale;

  if (!std::isfinite(mean_objective) || !grads_finite(ascent))
    return std::nan("");
  GradNorms gn = opt.step(pi_ps, std::move(ascent), cfg.clip_norm);
  if (norms) *norms = gn;
  return mean_objective;
}

TrainResult run_bpo(const BpoConfig& raw_cfg, const std::string& out_dir,
                    const EpisodeHook& hook) {
  const BpoConfig cfg = raw_cfg.resolved();
  cfg.validate();
  const EnvProblem problem = make_env(cfg.env, cfg.horizon);
  TrainResult result;

  OracleResult oracle = trajopt_oracle(problem, cfg.oracle_iters,
                                       cfg.oracle_lr, cfg.seed + 101,
                                       cfg.oracle_starts);
  result.j_oracle = oracle.ok ? oracle.best_return : std::nan("");
  result.j_rand = random_baseline(problem, 64, cfg.seed + 202);
  const bool can_normalize = oracle.ok && std::isfinite(result.j_rand) &&
                             oracle.best_return > result.j_rand;

  ParamStore model_ps;
  ParamStore pi_ps;
  RngStream init_rng(cfg.seed);
  WorldModel wm;
  if (cfg.family == "f_rnn")
    wm = WorldModel::wrap_env(problem);
  else
    wm = WorldModel(model_ps, cfg.model_spec(problem), init_rng);
  Policy pi(pi_ps, "pi", cfg.policy_spec(problem), init_rng);
  Adam model_opt(cfg.dynamics_lr);
  Adam pi_opt(cfg.policy_lr);
  ReplayBuffer buffer(cfg.replay_capacity);

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir + "/config.json") << config_to_json(cfg);
    nlohmann::json manifest;
    manifest["replay_ratio_interpretation"] =
        "dynamics: round(dynamics_replay_ratio * (horizon - 1)) model updates "
        "per collected episode; policy: round(policy_replay_ratio) policy "
        "updates per collected episode";
    manifest["j_oracle"] = result.j_oracle;
    manifest["j_rand"] = result.j_rand;
    manifest["normalization_enabled"] = can_normalize;
    manifest["oracle_starts_failed"] = oracle.starts_failed;
    std::ofstream(out_dir + "/run_manifest.json") << manifest.dump(2) << "\n";
    log.open(out_dir + "/train_log.csv", std::ios::trunc);
    log << kCsvHeader << "\n" << std::flush;
  }

  const auto save_checkpoints = [&] {
    if (out_dir.empty()) return;
    CheckpointHeader mh{cfg.family, cfg.backbone, problem.state_dim,
                        problem.action_dim, cfg.horizon};
    if (model_ps.count() > 0) model_ps.save(out_dir + "/model", mh);
    CheckpointHeader ph{"policy", "mlp", problem.state_dim,
                        problem.action_dim, cfg.horizon};
    pi_ps.save(out_dir + "/policy", ph);
  };

  // Seed the buffer with uniform-random behavior before any update.
  RngStream warm_rng(cfg.seed + 303);
  while (buffer.transitions() < cfg.warmup_steps &&
         result.env_steps < cfg.total_env_steps) {
    std::vector<Array> actions;
    actions.reserve(static_cast<size_t>(cfg.horizon - 1));
    for (int i = 0; i < cfg.horizon - 1; ++i)
      actions.push_back(problem.random_action(warm_rng));
    buffer.add(record_episode(problem, actions));
    result.env_steps += cfg.horizon - 1;
  }

  RngStream act_rng(cfg.seed + 404);
  RngStream sample_rng(cfg.seed + 505);
  const auto model_steps_per_ep = static_cast<int64_t>(
      std::llround(cfg.dynamics_replay_ratio * (cfg.horizon - 1)));
  const auto policy_steps_per_ep =
      static_cast<int64_t>(std::llround(cfg.policy_replay_ratio));
  const uint64_t noise_base = cfg.seed ^ 0x9e3779b97f4a7c15ULL;

  int64_t episode = 0;
  double last_policy_norm = 0.0;
  bool stop = false;
  while (!stop && result.env_steps < cfg.total_env_steps) {
    const auto t0 = std::chrono::steady_clock::now();
    ++episode;
    buffer.add(collect_episode(problem, pi, pi_ps, &act_rng));
    result.env_steps += cfg.horizon - 1;

    double loss_sum = 0.0;
    int64_t loss_count = 0;
    if (model_ps.count() > 0) {
      for (int64_t i = 0; i < model_steps_per_ep; ++i) {
        const double loss =
            train_model_step(wm, model_ps, model_opt, buffer, cfg, sample_rng);
        if (std::isnan(loss)) {
          ++result.skipped_model_steps;
        } else {
          loss_sum += loss;
          ++loss_count;
        }
      }
    }

    for (int64_t i = 0; i < policy_steps_per_ep; ++i) {
      GradNorms gn;
      const double objective = train_policy_step(
          wm, model_ps, pi, pi_ps, pi_opt, problem, cfg,
          noise_base + 1000003ULL * static_cast<uint64_t>(episode) +
              131ULL * static_cast<uint64_t>(i),
          &gn);
      if (std::isnan(objective))
        ++result.skipped_policy_steps;
      else
        last_policy_norm = gn.post_clip;
    }

    const Trajectory eval = collect_episode(problem, pi, pi_ps, nullptr);
    TrainRow row;
    row.env_steps = result.env_steps;
    row.episode = episode;
    row.model_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count)
                                    : std::nan("");
    row.eval_return = eval.total;
    row.normalized_return =
        can_normalize
            ? normalized_return(eval.total, result.j_oracle, result.j_rand)
            : std::nan("");
    row.grad_norm = last_policy_norm;
    row.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    result.rows.push_back(row);
    if (log.is_open()) log << row_to_csv(row) << "\n" << std::flush;
    if (cfg.checkpoint_every > 0 && episode % cfg.checkpoint_every == 0)
      save_checkpoints();
    if (hook && hook(row)) stop = true;
  }

  save_checkpoints();
  return result;
}

}  // namespace awmlab
