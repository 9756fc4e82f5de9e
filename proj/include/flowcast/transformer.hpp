#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "flowcast/cnn.hpp"  // xavier_uniform
#include "flowcast/error.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

inline constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Layer normalization (per-row, biased variance)
// ---------------------------------------------------------------------------

inline Tensor layernorm(Tape* tape, Tensor x, Tensor gain, Tensor bias,
                        double eps = kLayerNormEps) {
  if (x.rank() != 2) {
    throw ShapeError("layernorm: expected [rows x d], got " +
                     shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (d < 2) {
    throw ShapeError("layernorm: needs d >= 2, got " + shape_str(x.shape()));
  }
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layernorm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match " +
                     shape_str(x.shape()));
  }
  Tensor out =
      Tensor::zeros({m, d}, detail::track(tape, {&x, &gain, &bias}));
  auto xhat = std::make_shared<std::vector<double>>(m * d);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = x(i, j) - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (x(i, j) - mean) * is;
      (*xhat)[i * d + j] = xh;
      out(i, j) = gain(j) * xh + bias(j);
    }
  }
  if (tape && out.requires_grad()) {
    tape->record({x, gain, bias}, out,
                 [x, gain, bias, out, xhat, inv_std, m, d]() mutable {
                   auto og = out.grad();
                   for (std::size_t i = 0; i < m; ++i) {
                     double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       const double dy = og[i * d + j];
                       const double xh = (*xhat)[i * d + j];
                       if (gain.requires_grad()) gain.grad()[j] += dy * xh;
                       if (bias.requires_grad()) bias.grad()[j] += dy;
                       const double dxh = dy * gain(j);
                       sum_dxh += dxh;
                       sum_dxh_xh += dxh * xh;
                     }
                     if (x.requires_grad()) {
                       for (std::size_t j = 0; j < d; ++j) {
                         const double dxh = og[i * d + j] * gain(j);
                         x.grad()[i * d + j] +=
                             (*inv_std)[i] *
                             (dxh - sum_dxh / static_cast<double>(d) -
                              (*xhat)[i * d + j] * sum_dxh_xh /
                                  static_cast<double>(d));
                       }
                     }
                   }
                 });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sinusoidal positional codes
// ---------------------------------------------------------------------------

struct PositionalEncoding {
  Tensor table;  // [max_len x d_model], constant

  static PositionalEncoding make(std::size_t max_len, std::size_t d_model) {
    PositionalEncoding pe;
    pe.table = Tensor::zeros({max_len, d_model});
    for (std::size_t pos = 0; pos < max_len; ++pos) {
      for (std::size_t i = 0; i < d_model; i += 2) {
        const double angle =
            static_cast<double>(pos) /
            std::pow(10000.0, static_cast<double>(i) /
                                  static_cast<double>(d_model));
        pe.table(pos, i) = std::sin(angle);
        if (i + 1 < d_model) pe.table(pos, i + 1) = std::cos(angle);
      }
    }
    return pe;
  }

  std::size_t max_len() const { return table.dim(0); }
};

inline Tensor positional_encode(Tape* tape, const Tensor& x,
                                const PositionalEncoding& pe) {
  if (x.rank() != 2 || x.dim(1) != pe.table.dim(1)) {
    throw ShapeError("positional_encode: " + shape_str(x.shape()) +
                     " does not match code table " +
                     shape_str(pe.table.shape()));
  }
  if (x.dim(0) > pe.max_len()) {
    throw ShapeError("positional_encode: sequence of " +
                     std::to_string(x.dim(0)) + " exceeds max length " +
                     std::to_string(pe.max_len()));
  }
  return add(tape, x, slice_rows(tape, pe.table, 0, x.dim(0)));
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// softmax(Q K^T / sqrt(d_k)) V. `weights_out`, when given, receives the
// row-stochastic attention matrix.
inline Tensor scaled_dot_attention(Tape* tape, const Tensor& q,
                                   const Tensor& k, const Tensor& v,
                                   Tensor* weights_out = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 ||
      q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention: incompatible Q " + shape_str(q.shape()) +
                     ", K " + shape_str(k.shape()) + ", V " +
                     shape_str(v.shape()));
  }
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor scores =
      scale(tape, matmul(tape, q, transpose(tape, k)), inv_sqrt_dk);
  Tensor weights = softmax(tape, scores);
  if (weights_out) *weights_out = weights;
  return matmul(tape, weights, v);
}

// Per-head projections plus the output projection W_o. d_k = d_v =
// d_model / heads, and the division must be exact.
struct AttentionParams {
  std::vector<Tensor> w_q, w_k, w_v;  // each [d_model x d_k]
  Tensor w_o;                         // [heads*d_v x d_model]

  std::size_t heads() const { return w_q.size(); }
  std::size_t d_model() const { return w_o.dim(1); }
};

inline std::size_t head_dim(std::size_t d_model, std::size_t heads) {
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d_model) +
                      " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  return d_model / heads;
}

inline AttentionParams make_attention_params(std::size_t d_model,
                                             std::size_t heads, Rng& rng) {
  const std::size_t dk = head_dim(d_model, heads);
  AttentionParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.w_q.push_back(xavier_uniform(rng, {d_model, dk}, d_model, dk));
    p.w_k.push_back(xavier_uniform(rng, {d_model, dk}, d_model, dk));
    p.w_v.push_back(xavier_uniform(rng, {d_model, dk}, d_model, dk));
  }
  p.w_o = xavier_uniform(rng, {heads * dk, d_model}, heads * dk, d_model);
  return p;
}

inline Tensor multi_head_attention(Tape* tape, const Tensor& q_in,
                                   const Tensor& k_in, const Tensor& v_in,
                                   const AttentionParams& p,
                                   std::vector<Tensor>* weights_out = nullptr) {
  std::vector<Tensor> heads;
  heads.reserve(p.heads());
  for (std::size_t h = 0; h < p.heads(); ++h) {
    Tensor q = matmul(tape, q_in, p.w_q[h]);
    Tensor k = matmul(tape, k_in, p.w_k[h]);
    Tensor v = matmul(tape, v_in, p.w_v[h]);
    Tensor w;
    heads.push_back(scaled_dot_attention(tape, q, k, v, &w));
    if (weights_out) weights_out->push_back(w);
  }
  return matmul(tape, concat_cols(tape, heads), p.w_o);
}

// ---------------------------------------------------------------------------
// Encoder / decoder layers
// ---------------------------------------------------------------------------

struct FeedForwardParams {
  Tensor w1, b1;  // [d_model x ff], [ff]
  Tensor w2, b2;  // [ff x d_model], [d_model]
};

inline FeedForwardParams make_ff_params(std::size_t d_model, std::size_t ff,
                                        Rng& rng) {
  FeedForwardParams p;
  p.w1 = xavier_uniform(rng, {d_model, ff}, d_model, ff);
  p.b1 = Tensor::zeros({ff}, true);
  p.w2 = xavier_uniform(rng, {ff, d_model}, ff, d_model);
  p.b2 = Tensor::zeros({d_model}, true);
  return p;
}

inline Tensor feed_forward(Tape* tape, const Tensor& x,
                           const FeedForwardParams& p) {
  Tensor hidden = relu(tape, add_rowvec(tape, matmul(tape, x, p.w1), p.b1));
  return add_rowvec(tape, matmul(tape, hidden, p.w2), p.b2);
}

struct LayerNormParams {
  Tensor gain, bias;  // [d_model]
};

inline LayerNormParams make_layernorm_params(std::size_t d_model, Rng&) {
  return {Tensor::full({d_model}, 1.0, true), Tensor::zeros({d_model}, true)};
}

struct EncoderLayerParams {
  AttentionParams self_attn;
  FeedForwardParams ff;
  LayerNormParams ln1, ln2;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  AttentionParams cross_attn;
  FeedForwardParams ff;
  LayerNormParams ln1, ln2, ln3;
};

inline EncoderLayerParams make_encoder_layer_params(std::size_t d_model,
                                                    std::size_t heads,
                                                    std::size_t ff, Rng& rng) {
  return {make_attention_params(d_model, heads, rng),
          make_ff_params(d_model, ff, rng), make_layernorm_params(d_model, rng),
          make_layernorm_params(d_model, rng)};
}

inline DecoderLayerParams make_decoder_layer_params(std::size_t d_model,
                                                    std::size_t heads,
                                                    std::size_t ff, Rng& rng) {
  return {make_attention_params(d_model, heads, rng),
          make_attention_params(d_model, heads, rng),
          make_ff_params(d_model, ff, rng), make_layernorm_params(d_model, rng),
          make_layernorm_params(d_model, rng),
          make_layernorm_params(d_model, rng)};
}

// Both sublayers are wrapped as LayerNorm(x + Sublayer(x)).
inline Tensor encoder_layer(Tape* tape, const Tensor& x,
                            const EncoderLayerParams& p, Mode mode) {
  (void)mode;
  Tensor attended = multi_head_attention(tape, x, x, x, p.self_attn);
  Tensor x1 = layernorm(tape, add(tape, x, attended), p.ln1.gain, p.ln1.bias);
  Tensor ffed = feed_forward(tape, x1, p.ff);
  return layernorm(tape, add(tape, x1, ffed), p.ln2.gain, p.ln2.bias);
}

// Self-attention, cross-attention against the encoder output, then the
// feed-forward; three residual-wrapped norms. No causal mask: the model
// emits a fixed-horizon forecast, not an autoregressive stream.
inline Tensor decoder_layer(Tape* tape, const Tensor& d, const Tensor& enc_out,
                            const DecoderLayerParams& p, Mode mode) {
  (void)mode;
  Tensor self = multi_head_attention(tape, d, d, d, p.self_attn);
  Tensor d1 = layernorm(tape, add(tape, d, self), p.ln1.gain, p.ln1.bias);
  Tensor cross = multi_head_attention(tape, d1, enc_out, enc_out, p.cross_attn);
  Tensor d2 = layernorm(tape, add(tape, d1, cross), p.ln2.gain, p.ln2.bias);
  Tensor ffed = feed_forward(tape, d2, p.ff);
  return layernorm(tape, add(tape, d2, ffed), p.ln3.gain, p.ln3.bias);
}

struct TransformerParams {
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor start_token;  // [1 x d_model]
};

inline TransformerParams make_transformer_params(std::size_t d_model,
                                                 std::size_t heads,
                                                 std::size_t ff,
                                                 std::size_t n_enc,
                                                 std::size_t n_dec, Rng& rng) {
  TransformerParams p;
  for (std::size_t i = 0; i < n_enc; ++i) {
    p.encoder.push_back(make_encoder_layer_params(d_model, heads, ff, rng));
  }
  for (std::size_t i = 0; i < n_dec; ++i) {
    p.decoder.push_back(make_decoder_layer_params(d_model, heads, ff, rng));
  }
  p.start_token = xavier_uniform(rng, {1, d_model}, d_model, d_model);
  return p;
}

// Encoder stack over the (already projected and positionally encoded)
// features; the decoder runs on a learned start token followed by the
// input sequence shifted right. With no decoder layers the encoder output
// is returned directly, so an empty config is the identity.
inline Tensor transformer_forward(Tape* tape, const Tensor& features,
                                  const TransformerParams& p, Mode mode) {
  if (features.rank() != 2) {
    throw ShapeError("transformer: expected [L x d_model], got " +
                     shape_str(features.shape()));
  }
  Tensor enc = features;
  for (const EncoderLayerParams& layer : p.encoder) {
    enc = encoder_layer(tape, enc, layer, mode);
  }
  if (p.decoder.empty()) return enc;

  const std::size_t len = features.dim(0);
  Tensor dec = len > 1
                   ? concat_rows(tape, {p.start_token,
                                        slice_rows(tape, features, 0, len - 1)})
                   : p.start_token;
  for (const DecoderLayerParams& layer : p.decoder) {
    dec = decoder_layer(tape, dec, enc, layer, mode);
  }
  return dec;
}

}  // namespace flowcast
