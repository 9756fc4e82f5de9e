#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flowcast/cnn.hpp"  // xavier_uniform
#include "flowcast/error.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

// Gate and candidate weights each map the concatenation [h, x] to the
// hidden width.
struct GruParams {
  Tensor w_update, w_reset, w_cand;  // [hidden x (hidden + input)]
  Tensor b_update, b_reset, b_cand;  // [hidden]

  std::size_t hidden() const { return w_update.dim(0); }
  std::size_t input() const { return w_update.dim(1) - w_update.dim(0); }
};

inline GruParams make_gru_params(std::size_t input, std::size_t hidden,
                                 Rng& rng) {
  if (input == 0 || hidden == 0) {
    throw ConfigError("gru: input and hidden widths must be positive");
  }
  GruParams p;
  const std::size_t cat = hidden + input;
  p.w_update = xavier_uniform(rng, {hidden, cat}, cat, hidden);
  p.w_reset = xavier_uniform(rng, {hidden, cat}, cat, hidden);
  p.w_cand = xavier_uniform(rng, {hidden, cat}, cat, hidden);
  p.b_update = Tensor::zeros({hidden}, true);
  p.b_reset = Tensor::zeros({hidden}, true);
  p.b_cand = Tensor::zeros({hidden}, true);
  return p;
}

// Ring buffer of the last j hidden states, zero-seeded so the skipped
// state reads as zero until the sequence is at least j steps old.
class GruState {
 public:
  static GruState init(std::size_t hidden, std::size_t skip) {
    if (skip < 1) throw ConfigError("gru skip step must be >= 1");
    GruState s;
    s.buf_.assign(skip, Tensor::zeros({hidden}));
    return s;
  }

  std::size_t skip() const { return buf_.size(); }
  const Tensor& newest() const { return buf_[head_]; }        // h_{t-1}
  const Tensor& oldest() const {                              // h_{t-j}
    return buf_[(head_ + 1) % buf_.size()];
  }

  void push(Tensor h) {
    head_ = (head_ + 1) % buf_.size();
    buf_[head_] = std::move(h);
  }

  // The dropped-out state replaces h_t for all later steps.
  void overwrite_newest(Tensor h) { buf_[head_] = std::move(h); }

  GruState clone() const {
    GruState s;
    s.head_ = head_;
    for (const Tensor& t : buf_) s.buf_.push_back(t.clone());
    return s;
  }

 private:
  std::vector<Tensor> buf_;
  std::size_t head_ = 0;
};

namespace detail {

inline Tensor gru_gates_and_mix(Tape* tape, const Tensor& x,
                                const Tensor& h_prev, const Tensor& h_mix,
                                const GruParams& p) {
  Tensor hx = concat_rows(tape, {h_prev, x});
  Tensor z = sigmoid(tape, add(tape, matvec(tape, p.w_update, hx), p.b_update));
  Tensor r = sigmoid(tape, add(tape, matvec(tape, p.w_reset, hx), p.b_reset));
  Tensor rhx = concat_rows(tape, {mul(tape, r, h_prev), x});
  Tensor cand =
      flowcast::tanh(tape, add(tape, matvec(tape, p.w_cand, rhx), p.b_cand));
  Tensor keep = sub(tape, Tensor::full({z.size()}, 1.0), z);
  return add(tape, mul(tape, keep, h_mix), mul(tape, z, cand));
}

}  // namespace detail

// Plain cell: h_t = (1 - z) * h_{t-1} + z * h~.
inline Tensor gru_cell_step(Tape* tape, const Tensor& x, const Tensor& h_prev,
                            const GruParams& p) {
  return detail::gru_gates_and_mix(tape, x, h_prev, h_prev, p);
}

// Skip cell: the gates and candidate still read h_{t-1}; only the final
// interpolation swaps in h_{t-j}. Rotates the ring buffer.
inline Tensor gruskip_cell_step(Tape* tape, const Tensor& x, GruState& state,
                                const GruParams& p) {
  Tensor h =
      detail::gru_gates_and_mix(tape, x, state.newest(), state.oldest(), p);
  state.push(h);
  return h;
}

// Sequential scan emitting every h_t. Inverted dropout is applied to h_t in
// train mode and the dropped state feeds the recurrence.
inline Tensor gruskip_layer_forward(Tape* tape, const Tensor& seq,
                                    const GruParams& p, std::size_t skip,
                                    double dropout, Mode mode,
                                    Rng* rng = nullptr) {
  if (seq.rank() != 2) {
    throw ShapeError("gru layer: expected [T x input], got " +
                     shape_str(seq.shape()));
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw ConfigError("gru layer: dropout rate " + std::to_string(dropout) +
                      " outside [0, 1)");
  }
  const bool use_dropout = mode == Mode::train && dropout > 0.0;
  if (use_dropout && rng == nullptr) {
    throw ConfigError("gru layer: train-mode dropout needs an rng");
  }
  const std::size_t steps = seq.dim(0);
  GruState state = GruState::init(p.hidden(), skip);
  std::vector<Tensor> outputs;
  outputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor x = flatten(tape, slice_rows(tape, seq, t, 1));
    Tensor h = gruskip_cell_step(tape, x, state, p);
    if (use_dropout) {
      h = mul(tape, h, dropout_mask(*rng, h.shape(), dropout));
      state.overwrite_newest(h);
    }
    outputs.push_back(reshape(tape, h, {1, p.hidden()}));
  }
  return concat_rows(tape, outputs);
}

// Linear read-out of the final hidden state (the periodic characteristic).
struct SkipOutputParams {
  Tensor weight;  // [output x hidden]
  Tensor bias;    // [output]
};

inline SkipOutputParams make_skip_output_params(std::size_t hidden,
                                                std::size_t output, Rng& rng) {
  SkipOutputParams p;
  p.weight = xavier_uniform(rng, {output, hidden}, hidden, output);
  p.bias = Tensor::zeros({output}, true);
  return p;
}

inline Tensor periodic_output(Tape* tape, const Tensor& h,
                              const SkipOutputParams& p) {
  return add(tape, matvec(tape, p.weight, h), p.bias);
}

// The two stacked skip-GRU layers applied to a skip sequence p (one scalar
// per period); returns the final hidden state of the second layer.
struct GruStack {
  GruParams layer1;  // width 128 by default
  GruParams layer2;  // width 64 by default
};

inline Tensor skip_context_encode(Tape* tape, const Tensor& p,
                                  const GruStack& stack, std::size_t skip,
                                  double dropout, Mode mode,
                                  Rng* rng = nullptr) {
  if (p.size() == 0) {
    throw ShapeError("skip_context_encode: empty skip sequence");
  }
  Tensor seq = reshape(tape, p, {p.size(), 1});
  Tensor h1 = gruskip_layer_forward(tape, seq, stack.layer1, skip, dropout,
                                    mode, rng);
  Tensor h2 = gruskip_layer_forward(tape, h1, stack.layer2, skip, dropout,
                                    mode, rng);
  return flatten(tape, slice_rows(tape, h2, h2.dim(0) - 1, 1));
}

}  // namespace flowcast
