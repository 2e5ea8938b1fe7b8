#include "awmlab/policy.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace awmlab {

Policy::Policy(ParamStore& ps, const std::string& prefix, const PolicySpec& spec,
               RngStream& rng)
    : spec_(spec) {
  if (spec.state_dim < 1 || spec.action_dim < 1 || spec.horizon < 1) {
    throw std::invalid_argument("Policy: dimensions and horizon must be positive");
  }
  std::vector<int> widths;
  widths.push_back(spec.state_dim + 1);  // state plus t/H
  for (int w : spec.hidden) widths.push_back(w);
  widths.push_back(2 * spec.action_dim);  // mean then log-std
  net_ = Mlp(ps, prefix, std::move(widths), awmlab::Act::tanh_act, rng);

  mid_ = Array({1, spec.action_dim});
  half_span_ = Array({1, spec.action_dim});
  for (int i = 0; i < spec.action_dim; ++i) {
    const double lo = spec.action_lo.at(i), hi = spec.action_hi.at(i);
    if (!(hi > lo)) {
      throw std::invalid_argument("Policy: action bounds must satisfy lo < hi");
    }
    mid_.at(i) = 0.5 * (lo + hi);
    half_span_.at(i) = 0.5 * (hi - lo);
    log_half_span_sum_ += std::log(half_span_.at(i));
  }
}

Policy::Act Policy::act(Tape& t, const std::vector<Value>& bound, const Value& s,
                        int step, const Array* noise, bool stop_grad_state) const {
  const int m = spec_.action_dim;
  const Value state_in = stop_grad_state ? Tape::stop_grad(s) : s;
  const Value time_in = Tape::constant(
      Array::full({1, 1}, static_cast<double>(step) / spec_.horizon));
  const Value out = net_.forward(t, bound, t.concat({state_in, time_in}, 1));

  const Value mean = t.slice(out, 1, 0, m);
  const Value log_std =
      t.clamp(t.slice(out, 1, m, m), spec_.log_std_lo, spec_.log_std_hi);
  if (!mean.a().all_finite() || !log_std.a().all_finite()) {
    throw std::runtime_error("Policy: non-finite network output at step " +
                             std::to_string(step));
  }

  Value pre = mean;
  double noise_sq = 0.0;
  if (noise != nullptr) {
    pre = t.add(mean, t.mul(t.exp(log_std), Tape::constant(*noise)));
    noise_sq = noise->l2() * noise->l2();
  }
  const Value squashed = t.tanh(pre);
  const Value action =
      t.add(Tape::constant(mid_), t.mul(squashed, Tape::constant(half_span_)));

  // log N(pre; mean, std) = sum(-log_std) - |noise|^2/2 - (m/2) log(2 pi);
  // the squash correction log(1 - tanh(pre)^2) = 2(log 2 - pre - softplus(-2 pre))
  // and the bound rescale log(half_span) are subtracted per dimension.
  const double gauss_const =
      -0.5 * noise_sq - 0.5 * m * std::log(2.0 * std::numbers::pi);
  const Value correction =
      t.scale(t.sum(t.add(pre, t.softplus(t.scale(pre, -2.0)))), 2.0);
  Value log_prob = t.add(t.neg(t.sum(log_std)), correction);
  log_prob = t.add(log_prob,
                   Tape::constant_scalar(gauss_const - 2.0 * m * std::log(2.0) -
                                         log_half_span_sum_));
  return {action, log_prob};
}

}  // namespace awmlab
