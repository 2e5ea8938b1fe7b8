#include "awmlab/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace awmlab {

const char* act_name(Act act) {
  switch (act) {
    case Act::identity: return "identity";
    case Act::tanh_act: return "tanh";
    case Act::sigmoid_act: return "sigmoid";
    case Act::relu_act: return "relu";
    case Act::gelu_act: return "gelu";
  }
  return "?";
}

Value apply_act(Tape& t, Act act, const Value& v) {
  switch (act) {
    case Act::identity: return v;
    case Act::tanh_act: return t.tanh(v);
    case Act::sigmoid_act: return t.sigmoid(v);
    case Act::relu_act: return t.relu(v);
    case Act::gelu_act: return t.gelu(v);
  }
  throw std::logic_error("apply_act: unhandled activation");
}

double act_beta(Act act) {
  switch (act) {
    case Act::identity: return 1.0;
    case Act::tanh_act: return 1.0;
    case Act::sigmoid_act: return 4.0;
    default:
      throw std::invalid_argument(std::string("act_beta: no pinned gradient bound for ") +
                                  act_name(act));
  }
}

Array init_weight(RngStream& rng, int fan_in, int fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_array({fan_in, fan_out}, -bound, bound);
}

Mlp::Mlp(ParamStore& ps, const std::string& prefix, std::vector<int> widths_in, Act hidden_act,
         RngStream& rng)
    : widths(std::move(widths_in)), hidden(hidden_act) {
  if (widths.size() < 2)
    throw std::invalid_argument("Mlp: need at least an input and an output width");
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    const int in = widths[l], out = widths[l + 1];
    w.push_back(ps.add(prefix + ".w" + std::to_string(l), init_weight(rng, in, out)));
    b.push_back(ps.add(prefix + ".b" + std::to_string(l), Array(Shape{out})));
  }
}

Value Mlp::forward(Tape& t, const std::vector<Value>& bound, const Value& x) const {
  if (x.a().rank() != 2 || x.a().cols() != widths.front())
    throw std::invalid_argument("Mlp: expected input [batch, " +
                                std::to_string(widths.front()) + "], got " +
                                shape_str(x.shape()));
  Value h = x;
  for (size_t l = 0; l < w.size(); ++l) {
    h = t.add(t.matmul(h, bound[static_cast<size_t>(w[l])]), bound[static_cast<size_t>(b[l])]);
    if (l + 1 < w.size()) h = apply_act(t, hidden, h);
  }
  return h;
}

RnnCell::RnnCell(ParamStore& ps, const std::string& prefix, int hidden_dim_, int action_dim_,
                 int state_dim_, Act act_, RngStream& rng)
    : hidden_dim(hidden_dim_), action_dim(action_dim_), state_dim(state_dim_), act(act_) {
  wx = ps.add(prefix + ".wx", init_weight(rng, hidden_dim, hidden_dim));
  wa = ps.add(prefix + ".wa", init_weight(rng, action_dim, hidden_dim));
  b = ps.add(prefix + ".b", Array(Shape{hidden_dim}));
  wo = ps.add(prefix + ".wo", init_weight(rng, hidden_dim, state_dim));
}

Value RnnCell::initial_hidden(int batch) const {
  return Tape::constant(Array(Shape{batch, hidden_dim}));
}

std::pair<Value, Value> RnnCell::step(Tape& t, const std::vector<Value>& bound, const Value& x,
                                      const Value& a) const {
  const auto& bv = bound;
  Value x_next = t.add(t.add(apply_act(t, act, t.matmul(x, bv[static_cast<size_t>(wx)])),
                             t.matmul(a, bv[static_cast<size_t>(wa)])),
                       bv[static_cast<size_t>(b)]);
  Value s_next = t.matmul(x_next, bv[static_cast<size_t>(wo)]);
  return {x_next, s_next};
}

LstmCell::LstmCell(ParamStore& ps, const std::string& prefix, int hidden_dim_, int action_dim_,
                   int state_dim_, RngStream& rng)
    : hidden_dim(hidden_dim_), action_dim(action_dim_), state_dim(state_dim_) {
  const int zin = action_dim + hidden_dim;
  wi = ps.add(prefix + ".wi", init_weight(rng, zin, hidden_dim));
  wf = ps.add(prefix + ".wf", init_weight(rng, zin, hidden_dim));
  wg = ps.add(prefix + ".wg", init_weight(rng, zin, hidden_dim));
  wo = ps.add(prefix + ".wo", init_weight(rng, zin, hidden_dim));
  bi = ps.add(prefix + ".bi", Array(Shape{hidden_dim}));
  bf = ps.add(prefix + ".bf", Array(Shape{hidden_dim}));
  bg = ps.add(prefix + ".bg", Array(Shape{hidden_dim}));
  bo = ps.add(prefix + ".bo", Array(Shape{hidden_dim}));
  wout = ps.add(prefix + ".wout", init_weight(rng, hidden_dim, state_dim));
}

LstmCell::Carry LstmCell::initial_carry(int batch) const {
  return {Tape::constant(Array(Shape{batch, hidden_dim})),
          Tape::constant(Array(Shape{batch, hidden_dim}))};
}

std::pair<LstmCell::Carry, Value> LstmCell::step(Tape& t, const std::vector<Value>& bound,
                                                 const Carry& carry, const Value& a) const {
  const auto& bv = bound;
  auto gate = [&](int wg_idx, int bg_idx) {
    return t.add(t.matmul(t.concat({a, carry.h}, 1), bv[static_cast<size_t>(wg_idx)]),
                 bv[static_cast<size_t>(bg_idx)]);
  };
  Value i = t.sigmoid(gate(wi, bi));
  Value f = t.sigmoid(gate(wf, bf));
  Value g = t.tanh(gate(wg, bg));
  Value o = t.sigmoid(gate(wo, bo));
  Value c_next = t.add(t.mul(f, carry.c), t.mul(i, g));
  Value h_next = t.mul(o, t.tanh(c_next));
  Value s_next = t.matmul(h_next, bv[static_cast<size_t>(wout)]);
  return {Carry{h_next, c_next}, s_next};
}

Transformer::Transformer(ParamStore& ps, const std::string& prefix, TransformerSpec spec_,
                         RngStream& rng)
    : spec(spec_) {
  if (spec.in_dim <= 0 || spec.max_len <= 0)
    throw std::invalid_argument("Transformer: in_dim and max_len must be positive");
  if (spec.heads <= 0 || spec.d_model % spec.heads != 0)
    throw std::invalid_argument("Transformer: heads must divide d_model, got " +
                                std::to_string(spec.heads) + " into " +
                                std::to_string(spec.d_model));
  d_head = spec.d_model / spec.heads;

  embed = ps.add(prefix + ".embed", init_weight(rng, spec.in_dim, spec.d_model));
  const double pb = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
  pos = ps.add(prefix + ".pos", rng.uniform_array({spec.max_len, spec.d_model}, -pb, pb));

  for (int l = 0; l < spec.layers; ++l) {
    Layer lay;
    const std::string lp = prefix + ".l" + std::to_string(l);
    for (int h = 0; h < spec.heads; ++h) {
      const std::string hp = lp + ".h" + std::to_string(h);
      lay.wq.push_back(ps.add(hp + ".wq", init_weight(rng, spec.d_model, d_head)));
      lay.wk.push_back(ps.add(hp + ".wk", init_weight(rng, spec.d_model, d_head)));
      lay.wv.push_back(ps.add(hp + ".wv", init_weight(rng, spec.d_model, d_head)));
    }
    lay.ln1_g = ps.add(lp + ".ln1.g", Array::full({spec.d_model}, 1.0));
    lay.ln1_b = ps.add(lp + ".ln1.b", Array(Shape{spec.d_model}));
    lay.ln2_g = ps.add(lp + ".ln2.g", Array::full({spec.d_model}, 1.0));
    lay.ln2_b = ps.add(lp + ".ln2.b", Array(Shape{spec.d_model}));
    lay.ff1_w = ps.add(lp + ".ff1.w", init_weight(rng, spec.d_model, spec.d_ff));
    lay.ff1_b = ps.add(lp + ".ff1.b", Array(Shape{spec.d_ff}));
    lay.ff2_w = ps.add(lp + ".ff2.w", init_weight(rng, spec.d_ff, spec.d_model));
    lay.ff2_b = ps.add(lp + ".ff2.b", Array(Shape{spec.d_model}));
    layer_params.push_back(lay);
  }
  lnf_g = ps.add(prefix + ".lnf.g", Array::full({spec.d_model}, 1.0));
  lnf_b = ps.add(prefix + ".lnf.b", Array(Shape{spec.d_model}));
}

Value Transformer::embed_tokens(Tape& t, const std::vector<Value>& bound, const Value& raw,
                                int start) const {
  if (raw.a().rank() != 2 || raw.a().cols() != spec.in_dim)
    throw std::invalid_argument("embed_tokens: expected [T, " + std::to_string(spec.in_dim) +
                                "], got " + shape_str(raw.shape()));
  const int len = raw.a().rows();
  if (start < 0 || start + len > spec.max_len)
    throw std::invalid_argument("embed_tokens: positions " + std::to_string(start) + ".." +
                                std::to_string(start + len - 1) + " exceed context " +
                                std::to_string(spec.max_len));
  return t.add(t.matmul(raw, bound[static_cast<size_t>(embed)]),
               t.slice(bound[static_cast<size_t>(pos)], 0, start, len));
}

namespace {
// Additive causal mask: 0 on and below the diagonal, -1e30 above. Visible
// scores absorb the zero; masked scores become exactly -1e30, whose softmax
// weight underflows to exact zero.
Array causal_mask(int len) {
  Array mask({len, len});
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) mask.at2(i, j) = -1e30;
  return mask;
}
}  // namespace

Value Transformer::forward(Tape& t, const std::vector<Value>& bound, const Value& tokens) const {
  if (tokens.a().rank() != 2 || tokens.a().cols() != spec.d_model)
    throw std::invalid_argument("Transformer: expected tokens [T, " +
                                std::to_string(spec.d_model) + "], got " +
                                shape_str(tokens.shape()));
  const int len = tokens.a().rows();
  if (len > spec.max_len)
    throw std::invalid_argument("Transformer: sequence length " + std::to_string(len) +
                                " exceeds context " + std::to_string(spec.max_len));
  const Value maskv = Tape::constant(causal_mask(len));
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(d_head));

  Value x = tokens;
  for (const Layer& lay : layer_params) {
    Value u = t.layer_norm(x, bound[static_cast<size_t>(lay.ln1_g)],
                           bound[static_cast<size_t>(lay.ln1_b)]);
    std::vector<Value> heads;
    for (int h = 0; h < spec.heads; ++h) {
      Value q = t.matmul(u, bound[static_cast<size_t>(lay.wq[h])]);
      Value k = t.matmul(u, bound[static_cast<size_t>(lay.wk[h])]);
      Value v = t.matmul(u, bound[static_cast<size_t>(lay.wv[h])]);
      Value att = t.softmax_last(
          t.add(t.scale(t.matmul(q, t.transpose(k)), score_scale), maskv));
      heads.push_back(t.matmul(att, v));
    }
    x = t.add(x, t.concat(heads, 1));
    Value w = t.layer_norm(x, bound[static_cast<size_t>(lay.ln2_g)],
                           bound[static_cast<size_t>(lay.ln2_b)]);
    Value ff = t.add(
        t.matmul(t.gelu(t.add(t.matmul(w, bound[static_cast<size_t>(lay.ff1_w)]),
                              bound[static_cast<size_t>(lay.ff1_b)])),
                 bound[static_cast<size_t>(lay.ff2_w)]),
        bound[static_cast<size_t>(lay.ff2_b)]);
    x = t.add(x, ff);
  }
  return t.layer_norm(x, bound[static_cast<size_t>(lnf_g)], bound[static_cast<size_t>(lnf_b)]);
}

Transformer::Cache Transformer::make_cache() const {
  Cache c;
  c.k.assign(layer_params.size(), std::vector<Value>(static_cast<size_t>(spec.heads)));
  c.v.assign(layer_params.size(), std::vector<Value>(static_cast<size_t>(spec.heads)));
  return c;
}

Value Transformer::extend(Tape& t, const std::vector<Value>& bound, Cache& cache,
                          const Value& token) const {
  if (token.a().rank() != 2 || token.a().rows() != 1 || token.a().cols() != spec.d_model)
    throw std::invalid_argument("Transformer: extend expects one token [1, " +
                                std::to_string(spec.d_model) + "], got " +
                                shape_str(token.shape()));
  if (cache.len >= spec.max_len)
    throw std::invalid_argument("Transformer: sequence length " +
                                std::to_string(cache.len + 1) + " exceeds context " +
                                std::to_string(spec.max_len));
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(d_head));

  Value x = token;
  for (size_t l = 0; l < layer_params.size(); ++l) {
    const Layer& lay = layer_params[l];
    Value u = t.layer_norm(x, bound[static_cast<size_t>(lay.ln1_g)],
                           bound[static_cast<size_t>(lay.ln1_b)]);
    std::vector<Value> heads;
    for (int h = 0; h < spec.heads; ++h) {
      Value q = t.matmul(u, bound[static_cast<size_t>(lay.wq[h])]);
      Value k = t.matmul(u, bound[static_cast<size_t>(lay.wk[h])]);
      Value v = t.matmul(u, bound[static_cast<size_t>(lay.wv[h])]);
      Value& kc = cache.k[l][static_cast<size_t>(h)];
      Value& vc = cache.v[l][static_cast<size_t>(h)];
      kc = cache.len == 0 ? k : t.concat({kc, k}, 0);
      vc = cache.len == 0 ? v : t.concat({vc, v}, 0);
      Value att = t.softmax_last(t.scale(t.matmul(q, t.transpose(kc)), score_scale));
      heads.push_back(t.matmul(att, vc));
    }
    x = t.add(x, t.concat(heads, 1));
    Value w = t.layer_norm(x, bound[static_cast<size_t>(lay.ln2_g)],
                           bound[static_cast<size_t>(lay.ln2_b)]);
    Value ff = t.add(
        t.matmul(t.gelu(t.add(t.matmul(w, bound[static_cast<size_t>(lay.ff1_w)]),
                              bound[static_cast<size_t>(lay.ff1_b)])),
                 bound[static_cast<size_t>(lay.ff2_w)]),
        bound[static_cast<size_t>(lay.ff2_b)]);
    x = t.add(x, ff);
  }
  ++cache.len;
  return t.layer_norm(x, bound[static_cast<size_t>(lnf_g)], bound[static_cast<size_t>(lnf_b)]);
}

RawAttention::RawAttention(ParamStore& ps, const std::string& prefix, int action_dim_, int d_z_,
                           int state_dim_, RngStream& rng)
    : action_dim(action_dim_), d_z(d_z_), state_dim(state_dim_) {
  wq = ps.add(prefix + ".wq", init_weight(rng, action_dim, d_z));
  wk = ps.add(prefix + ".wk", init_weight(rng, action_dim, d_z));
  wv = ps.add(prefix + ".wv", init_weight(rng, action_dim, state_dim));
}

Value RawAttention::forward(Tape& t, const std::vector<Value>& bound,
                            const Value& actions) const {
  if (actions.a().rank() != 2 || actions.a().cols() != action_dim)
    throw std::invalid_argument("RawAttention: expected actions [T, " +
                                std::to_string(action_dim) + "], got " +
                                shape_str(actions.shape()));
  const int len = actions.a().rows();
  Value q = t.matmul(t.slice(actions, 0, len - 1, 1), bound[static_cast<size_t>(wq)]);
  Value scores = t.matmul(q, t.transpose(t.matmul(actions, bound[static_cast<size_t>(wk)])));
  Value weights = t.softmax_last(scores);
  return t.matmul(weights, t.matmul(actions, bound[static_cast<size_t>(wv)]));
}

}  // namespace awmlab
