#pragma once

#include <string>
#include <utility>
#include <vector>

#include "awmlab/params.hpp"
#include "awmlab/tape.hpp"

namespace awmlab {

/// Pointwise activation kinds shared by the backbones.
enum class Act { identity, tanh_act, sigmoid_act, relu_act, gelu_act };

const char* act_name(Act act);
Value apply_act(Tape& t, Act act, const Value& v);

/// Constant beta with max |activation'| = 1/beta: 1 for identity and tanh,
/// 4 for sigmoid. Throws for activations without a pinned constant.
double act_beta(Act act);

/// Weight initialization used by every backbone: entries uniform in
/// (-1/sqrt(fan_in), +1/sqrt(fan_in)). Biases start at zero.
Array init_weight(RngStream& rng, int fan_in, int fan_out);

/// Dense multi-layer perceptron. Hidden activation on every layer but the
/// last; the final layer is linear. Parameters live in a ParamStore and
/// forward passes read them from the bound value vector.
struct Mlp {
  std::vector<int> widths;  // input width, hidden widths..., output width
  Act hidden = Act::relu_act;
  std::vector<int> w, b;  // per-layer indices into the owning ParamStore

  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& prefix, std::vector<int> widths, Act hidden,
      RngStream& rng);

  /// x: [batch, widths.front()] -> [batch, widths.back()].
  Value forward(Tape& t, const std::vector<Value>& bound, const Value& x) const;
};

/// Vanilla recurrent cell with a linear state readout:
///   x_{t+1} = act(x_t W_x) + a_t W_a + b,   s_{t+1} = x_{t+1} W_o.
/// The activation wraps only the hidden-to-hidden term.
struct RnnCell {
  int hidden_dim = 0, action_dim = 0, state_dim = 0;
  Act act = Act::tanh_act;
  int wx = -1, wa = -1, b = -1, wo = -1;

  RnnCell() = default;
  RnnCell(ParamStore& ps, const std::string& prefix, int hidden_dim, int action_dim,
          int state_dim, Act act, RngStream& rng);

  /// Zero hidden state [batch, hidden_dim], not tracked by the tape.
  Value initial_hidden(int batch) const;

  /// (x_t [batch, hidden], a_t [batch, action]) -> (x_{t+1}, s_{t+1}).
  std::pair<Value, Value> step(Tape& t, const std::vector<Value>& bound, const Value& x,
                               const Value& a) const;
};

/// Standard four-gate LSTM over concat(a_t, h_t), with a linear state readout
/// of the new hidden state.
struct LstmCell {
  int hidden_dim = 0, action_dim = 0, state_dim = 0;
  int wi = -1, wf = -1, wg = -1, wo = -1;  // gate weights [action+hidden, hidden]
  int bi = -1, bf = -1, bg = -1, bo = -1;
  int wout = -1;  // readout [hidden, state]

  struct Carry {
    Value h, c;
  };

  LstmCell() = default;
  LstmCell(ParamStore& ps, const std::string& prefix, int hidden_dim, int action_dim,
           int state_dim, RngStream& rng);

  Carry initial_carry(int batch) const;

  std::pair<Carry, Value> step(Tape& t, const std::vector<Value>& bound, const Carry& carry,
                               const Value& a) const;
};

/// Configuration of the causal transformer stack. in_dim is the raw token
/// feature width before embedding; max_len bounds the sequence length and
/// sizes the positional table.
struct TransformerSpec {
  int in_dim = 0;
  int max_len = 0;
  int d_model = 72;
  int heads = 3;
  int layers = 2;
  int d_ff = 256;
};

/// Decoder-only transformer: per-layer pre-normalized causal multi-head
/// attention and GELU feed-forward, both residual, then a final
/// normalization. Heads project with per-head W_q/W_k/W_v of width
/// d_model/heads and their concatenation returns to d_model, so there is no
/// separate output projection. Scores are scaled by 1/sqrt(d_model/heads).
struct Transformer {
  TransformerSpec spec;
  int d_head = 0;
  int embed = -1;  // [in_dim, d_model]
  int pos = -1;    // [max_len, d_model]; row p is added to the token at position p

  struct Layer {
    std::vector<int> wq, wk, wv;  // one [d_model, d_head] matrix per head
    int ln1_g = -1, ln1_b = -1;   // before attention
    int ln2_g = -1, ln2_b = -1;   // before feed-forward
    int ff1_w = -1, ff1_b = -1, ff2_w = -1, ff2_b = -1;
  };
  std::vector<Layer> layer_params;
  int lnf_g = -1, lnf_b = -1;

  Transformer() = default;
  Transformer(ParamStore& ps, const std::string& prefix, TransformerSpec spec, RngStream& rng);

  /// raw [T, in_dim] -> [T, d_model]: input embedding plus positional rows
  /// start .. start+T-1.
  Value embed_tokens(Tape& t, const std::vector<Value>& bound, const Value& raw,
                     int start) const;

  /// Embedded tokens [T, d_model] -> outputs [T, d_model]. Position p attends
  /// to positions 0..p; perturbing a later token leaves earlier outputs
  /// bit-identical.
  Value forward(Tape& t, const std::vector<Value>& bound, const Value& tokens) const;

  /// Grown per-layer key/value state for incremental decoding. extend()
  /// appends one embedded token and returns its output row; the row equals
  /// the corresponding row of forward() over the tokens seen so far.
  struct Cache {
    std::vector<std::vector<Value>> k, v;  // [layer][head], each [len, d_head]
    int len = 0;
  };
  Cache make_cache() const;
  Value extend(Tape& t, const std::vector<Value>& bound, Cache& cache,
               const Value& token) const;
};

/// Unscaled single-head attention read directly off an action sequence:
///   s = softmax((a_T W_q)(A W_k)ᵀ)(A W_v),  A = [T, action_dim].
/// The last row is the query and attends over the whole sequence. No mask,
/// no scaling, no embedding: the attention map itself, kept separate from
/// the full stack for the growth analyses.
struct RawAttention {
  int action_dim = 0, d_z = 0, state_dim = 0;
  int wq = -1, wk = -1, wv = -1;

  RawAttention() = default;
  RawAttention(ParamStore& ps, const std::string& prefix, int action_dim, int d_z,
               int state_dim, RngStream& rng);

  /// actions [T, action_dim] -> prediction [1, state_dim].
  Value forward(Tape& t, const std::vector<Value>& bound, const Value& actions) const;
};

}  // namespace awmlab
