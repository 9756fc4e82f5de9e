#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowcast/cnn.hpp"
#include "flowcast/config.hpp"
#include "flowcast/data.hpp"
#include "flowcast/gru.hpp"
#include "flowcast/transformer.hpp"

namespace flowcast {

// Ordered, named registry over the model's tensors. Trainable entries feed
// the optimizer; buffers (batch-norm running stats) are serialized but not
// stepped. Registration order is deterministic, so checkpoints and
// optimizer state can be keyed by name.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> trainable;
  std::vector<std::pair<std::string, Tensor>> buffers;

  void add_param(const std::string& name, const Tensor& t) {
    trainable.emplace_back(name, t);
  }
  void add_buffer(const std::string& name, const Tensor& t) {
    buffers.emplace_back(name, t);
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : trainable) {
      if (n == name) return &t;
    }
    for (const auto& [n, t] : buffers) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  std::size_t param_count(const std::string& prefix = "") const {
    std::size_t total = 0;
    for (const auto& [n, t] : trainable) {
      if (n.rfind(prefix, 0) == 0) total += t.size();
    }
    return total;
  }

  void zero_grad() {
    for (auto& [n, t] : trainable) t.zero_grad();
  }

  bool all_finite() const {
    for (const auto& [n, t] : trainable) {
      if (!t.all_finite()) return false;
    }
    return true;
  }
};

struct HeadParams {
  Tensor fc1_w, fc1_b;  // [hidden x d_model], [hidden]
  Tensor fc2_w, fc2_b;  // [out x hidden], [out]
};

// FC1 with ReLU, then the output layer. Classification applies softmax;
// regression emits the raw affine output.
inline Tensor predict_head(Tape* tape, const Tensor& h, const HeadParams& p,
                           OutputMode mode) {
  Tensor hidden = relu(tape, add(tape, matvec(tape, p.fc1_w, h), p.fc1_b));
  Tensor out = add(tape, matvec(tape, p.fc2_w, hidden), p.fc2_b);
  return mode == OutputMode::classification ? softmax(tape, out) : out;
}

// The assembled network for one variant. The /F variant drops the conv
// blocks and feeds the raw window through the shared token projection;
// /T drops the periodic branch; /P replaces the two-layer head with a
// single affine read-out of the pooled transformer output.
struct Model {
  ModelConfig config;
  Variant variant = Variant::full;

  std::optional<ExtractorParams> extractor;
  Tensor input_proj_w;  // [token_width x d_model]
  Tensor input_proj_b;  // [d_model]
  std::optional<GruStack> gru;
  std::optional<SkipOutputParams> skip_out;  // gru2 hidden -> d_model token
  TransformerParams transformer;
  PositionalEncoding pos;
  std::optional<HeadParams> head;
  Tensor direct_w, direct_b;  // /P read-out

  ParamStore store;

  std::size_t token_width() const { return config.extractor.back().out_channels; }

  std::size_t feature_len() const {
    if (variant == Variant::no_feature) {
      return config.input_channels() * config.window_len;
    }
    return feature_shape(config.input_channels(), config.window_len,
                         config.extractor)
        .flat();
  }

  std::size_t token_count() const {
    const std::size_t tw = token_width();
    return (feature_len() + tw - 1) / tw;
  }

  std::size_t sequence_len() const {
    return token_count() + (variant == Variant::no_temporal ? 0 : 1);
  }
};

inline Model build_model(const ModelConfig& config, Variant variant,
                         std::uint64_t seed) {
  config.validate();
  if (variant != Variant::no_feature &&
      config.window_len < min_extractor_input_len(config.extractor)) {
    throw ConfigError(
        "window_len " + std::to_string(config.window_len) +
        " is below the extractor minimum " +
        std::to_string(min_extractor_input_len(config.extractor)));
  }

  Model m;
  m.config = config;
  m.variant = variant;
  Rng rng(seed);

  if (variant != Variant::no_feature) {
    m.extractor = make_extractor_params(config.input_channels(),
                                        config.extractor, rng);
    for (std::size_t i = 0; i < m.extractor->blocks.size(); ++i) {
      auto& b = m.extractor->blocks[i];
      const std::string p = "extractor.block" + std::to_string(i) + ".";
      m.store.add_param(p + "kernels", b.kernels);
      m.store.add_param(p + "bias", b.bias);
      m.store.add_param(p + "gamma", b.gamma);
      m.store.add_param(p + "beta", b.beta);
      m.store.add_buffer(p + "running_mean", b.bn.running_mean);
      m.store.add_buffer(p + "running_var", b.bn.running_var);
    }
  }

  const std::size_t tw = m.token_width();
  m.input_proj_w = xavier_uniform(rng, {tw, config.d_model}, tw, config.d_model);
  m.input_proj_b = Tensor::zeros({config.d_model}, true);
  m.store.add_param("input_proj.weight", m.input_proj_w);
  m.store.add_param("input_proj.bias", m.input_proj_b);

  if (variant != Variant::no_temporal) {
    m.gru = GruStack{make_gru_params(1, config.gru1_width, rng),
                     make_gru_params(config.gru1_width, config.gru2_width, rng)};
    auto reg_gru = [&](const std::string& p, GruParams& g) {
      m.store.add_param(p + "w_update", g.w_update);
      m.store.add_param(p + "w_reset", g.w_reset);
      m.store.add_param(p + "w_cand", g.w_cand);
      m.store.add_param(p + "b_update", g.b_update);
      m.store.add_param(p + "b_reset", g.b_reset);
      m.store.add_param(p + "b_cand", g.b_cand);
    };
    reg_gru("gru.l1.", m.gru->layer1);
    reg_gru("gru.l2.", m.gru->layer2);
    m.skip_out = make_skip_output_params(config.gru2_width, config.d_model, rng);
    m.store.add_param("skip_out.weight", m.skip_out->weight);
    m.store.add_param("skip_out.bias", m.skip_out->bias);
  }

  m.transformer = make_transformer_params(config.d_model, config.heads,
                                          config.ff_width,
                                          config.encoder_layers,
                                          config.decoder_layers, rng);
  auto reg_attn = [&](const std::string& p, AttentionParams& a) {
    for (std::size_t h = 0; h < a.heads(); ++h) {
      const std::string hp = p + "h" + std::to_string(h) + ".";
      m.store.add_param(hp + "wq", a.w_q[h]);
      m.store.add_param(hp + "wk", a.w_k[h]);
      m.store.add_param(hp + "wv", a.w_v[h]);
    }
    m.store.add_param(p + "wo", a.w_o);
  };
  auto reg_ff = [&](const std::string& p, FeedForwardParams& f) {
    m.store.add_param(p + "w1", f.w1);
    m.store.add_param(p + "b1", f.b1);
    m.store.add_param(p + "w2", f.w2);
    m.store.add_param(p + "b2", f.b2);
  };
  auto reg_ln = [&](const std::string& p, LayerNormParams& l) {
    m.store.add_param(p + "gain", l.gain);
    m.store.add_param(p + "bias", l.bias);
  };
  for (std::size_t i = 0; i < m.transformer.encoder.size(); ++i) {
    auto& layer = m.transformer.encoder[i];
    const std::string p = "transformer.enc" + std::to_string(i) + ".";
    reg_attn(p + "self.", layer.self_attn);
    reg_ff(p + "ff.", layer.ff);
    reg_ln(p + "ln1.", layer.ln1);
    reg_ln(p + "ln2.", layer.ln2);
  }
  for (std::size_t i = 0; i < m.transformer.decoder.size(); ++i) {
    auto& layer = m.transformer.decoder[i];
    const std::string p = "transformer.dec" + std::to_string(i) + ".";
    reg_attn(p + "self.", layer.self_attn);
    reg_attn(p + "cross.", layer.cross_attn);
    reg_ff(p + "ff.", layer.ff);
    reg_ln(p + "ln1.", layer.ln1);
    reg_ln(p + "ln2.", layer.ln2);
    reg_ln(p + "ln3.", layer.ln3);
  }
  m.store.add_param("transformer.start_token", m.transformer.start_token);

  const std::size_t out = config.output_width();
  if (variant != Variant::no_prediction) {
    HeadParams head;
    head.fc1_w = xavier_uniform(rng, {config.head_hidden, config.d_model},
                                config.d_model, config.head_hidden);
    head.fc1_b = Tensor::zeros({config.head_hidden}, true);
    head.fc2_w = xavier_uniform(rng, {out, config.head_hidden},
                                config.head_hidden, out);
    head.fc2_b = Tensor::zeros({out}, true);
    m.head = head;
    m.store.add_param("head.fc1.weight", head.fc1_w);
    m.store.add_param("head.fc1.bias", head.fc1_b);
    m.store.add_param("head.fc2.weight", head.fc2_w);
    m.store.add_param("head.fc2.bias", head.fc2_b);
  } else {
    m.direct_w = xavier_uniform(rng, {out, config.d_model}, config.d_model, out);
    m.direct_b = Tensor::zeros({out}, true);
    m.store.add_param("direct.weight", m.direct_w);
    m.store.add_param("direct.bias", m.direct_b);
  }

  m.pos = PositionalEncoding::make(m.sequence_len(), config.d_model);
  return m;
}

namespace detail {

// Flat features -> [token_count x token_width] rows, zero-padding the tail
// chunk. The projection weight shape is independent of the variant, so an
// ablated extractor changes the parameter set by exactly its own tensors.
inline Tensor chunk_into_tokens(Tape* tape, const Tensor& flat,
                                std::size_t token_width) {
  const std::size_t n_tok = (flat.size() + token_width - 1) / token_width;
  Tensor out = flat;
  const std::size_t pad = n_tok * token_width - flat.size();
  if (pad > 0) {
    out = concat_rows(tape, {flat, Tensor::zeros({pad})});
  }
  return reshape(tape, out, {n_tok, token_width});
}

}  // namespace detail

// Forward pass for a whole batch: per sample, feature extraction (or the
// raw window for /F), token projection, the periodic-context token from
// the skip-GRU branch, positional codes, the transformer, mean pooling
// over the output tokens and the prediction read-out.
inline Tensor model_forward(Tape* tape, const WindowBatch& batch, Model& m,
                            Mode mode, Rng* rng = nullptr) {
  const ModelConfig& cfg = m.config;
  if (batch.size() == 0) throw ShapeError("model_forward: empty batch");
  if (batch.channels() != cfg.input_channels() ||
      batch.window_len() != cfg.window_len) {
    throw ShapeError(
        "model_forward: batch inputs " + shape_str(batch.inputs.shape()) +
        " do not match config channels=" +
        std::to_string(cfg.input_channels()) +
        " window_len=" + std::to_string(cfg.window_len));
  }
  if (m.variant != Variant::no_temporal &&
      batch.n_periods() != cfg.n_periods) {
    throw ShapeError("model_forward: batch skip_context " +
                     shape_str(batch.skip_context.shape()) +
                     " does not match config n_periods=" +
                     std::to_string(cfg.n_periods));
  }

  std::vector<Tensor> flats;
  flats.reserve(batch.size());
  {
    std::vector<Tensor> xs;
    xs.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      xs.push_back(reshape(tape, slice_rows(tape, batch.inputs, i, 1),
                           {cfg.input_channels(), cfg.window_len}));
    }
    if (m.variant == Variant::no_feature) {
      for (Tensor& x : xs) flats.push_back(flatten(tape, transpose(tape, x)));
    } else {
      flats = feature_extract_batch(tape, xs, cfg.extractor, *m.extractor,
                                    mode);
    }
  }

  std::vector<Tensor> rows;
  rows.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tensor tokens = add_rowvec(
        tape,
        matmul(tape,
               detail::chunk_into_tokens(tape, flats[i], m.token_width()),
               m.input_proj_w),
        m.input_proj_b);

    Tensor seq = tokens;
    if (m.variant != Variant::no_temporal) {
      Tensor p = flatten(tape, slice_rows(tape, batch.skip_context, i, 1));
      Tensor emb = skip_context_encode(tape, p, *m.gru, cfg.gru_layer_skip,
                                       cfg.dropout, mode, rng);
      Tensor token0 = reshape(tape, periodic_output(tape, emb, *m.skip_out),
                              {1, cfg.d_model});
      seq = concat_rows(tape, {token0, tokens});
    }
    seq = positional_encode(tape, seq, m.pos);

    Tensor enriched = transformer_forward(tape, seq, m.transformer, mode);
    Tensor pooled = mean_rows(tape, enriched);

    Tensor pred;
    if (m.variant == Variant::no_prediction) {
      pred = add(tape, matvec(tape, m.direct_w, pooled), m.direct_b);
      if (cfg.output_mode == OutputMode::classification) {
        pred = softmax(tape, pred);
      }
    } else {
      pred = predict_head(tape, pooled, *m.head, cfg.output_mode);
    }
    rows.push_back(reshape(tape, pred, {1, cfg.output_width()}));
  }
  return concat_rows(tape, rows);
}

inline Model build_variant(const ModelConfig& config, const std::string& name,
                           std::uint64_t seed) {
  return build_model(config, variant_from_string(name), seed);
}

// Closed-form parameter count; must agree with the registry.
inline std::size_t expected_param_count(const ModelConfig& c, Variant v) {
  std::size_t total = 0;
  if (v != Variant::no_feature) {
    std::size_t cin = c.input_channels();
    for (const ConvBlockSpec& b : c.extractor) {
      total += b.out_channels * cin * b.kernel + 3 * b.out_channels;
      cin = b.out_channels;
    }
  }
  const std::size_t tw = c.extractor.back().out_channels;
  total += tw * c.d_model + c.d_model;  // input projection
  if (v != Variant::no_temporal) {
    auto gru_count = [](std::size_t in, std::size_t hidden) {
      return 3 * (hidden * (hidden + in) + hidden);
    };
    total += gru_count(1, c.gru1_width);
    total += gru_count(c.gru1_width, c.gru2_width);
    total += c.d_model * c.gru2_width + c.d_model;  // skip read-out
  }
  const std::size_t dk = c.d_model / c.heads;
  const std::size_t attn = 3 * c.heads * c.d_model * dk +
                           c.heads * dk * c.d_model;
  const std::size_t ff = c.d_model * c.ff_width + c.ff_width +
                         c.ff_width * c.d_model + c.d_model;
  total += c.encoder_layers * (attn + ff + 4 * c.d_model);
  total += c.decoder_layers * (2 * attn + ff + 6 * c.d_model);
  total += c.d_model;  // start token
  const std::size_t out = c.output_width();
  if (v != Variant::no_prediction) {
    total += c.head_hidden * c.d_model + c.head_hidden +
             out * c.head_hidden + out;
  } else {
    total += out * c.d_model + out;
  }
  return total;
}

}  // namespace flowcast
