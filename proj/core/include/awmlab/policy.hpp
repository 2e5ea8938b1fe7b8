#pragma once

#include <string>
#include <vector>

#include "awmlab/array.hpp"
#include "awmlab/nets.hpp"
#include "awmlab/params.hpp"
#include "awmlab/tape.hpp"

namespace awmlab {

struct PolicySpec {
  int state_dim = 0;
  int action_dim = 0;
  Array action_lo;  // [action_dim]
  Array action_hi;  // [action_dim]
  int horizon = 0;  // normalizes the timestep feature
  std::vector<int> hidden = {64, 64};
  double log_std_lo = -5.0;
  double log_std_hi = 2.0;
  double entropy_coeff = 0.0;
};

/// Tanh-squashed Gaussian policy. One MLP maps (state, t/H) to per-dimension
/// (mean, log-std); actions are mean + std * noise squashed through tanh and
/// rescaled into the bounds, so every emitted action lies inside them. The
/// log-prob carries the analytic tanh change-of-variables correction in its
/// softplus form, which stays finite even when tanh saturates.
class Policy {
 public:
  Policy() = default;
  Policy(ParamStore& ps, const std::string& prefix, const PolicySpec& spec,
         RngStream& rng);

  const PolicySpec& spec() const { return spec_; }

  struct Act {
    Value action;    // [1, action_dim]
    Value log_prob;  // scalar
  };

  /// noise: standard-normal [1, action_dim] draw; nullptr takes the mean
  /// action. stop_grad_state cuts the gradient path through s, leaving only
  /// the parameter path (the sg[s_k] of the rollout objectives).
  Act act(Tape& t, const std::vector<Value>& bound, const Value& s, int step,
          const Array* noise, bool stop_grad_state) const;

 private:
  PolicySpec spec_;
  Mlp net_;
  Array mid_, half_span_;  // bound-scaling constants, [1, action_dim]
  double log_half_span_sum_ = 0.0;
};

}  // namespace awmlab
