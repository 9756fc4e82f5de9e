#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flowcast/error.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

inline constexpr double kBatchNormEps = 1e-5;

// One conv block: conv1d (stride 1, same padding) -> batchnorm -> ReLU ->
// maxpool. Kernels must be odd so same-padding stays symmetric.
struct ConvBlockSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t pool_window = 2;
  std::size_t pool_stride = 1;

  void validate() const {
    if (out_channels == 0) throw ConfigError("conv block: out_channels == 0");
    if (kernel % 2 == 0) {
      throw ConfigError("conv block: kernel " + std::to_string(kernel) +
                        " must be odd");
    }
    if (pool_window < 1 || pool_stride < 1) {
      throw ConfigError("conv block: pool window/stride must be >= 1");
    }
  }
};

// Six-block ladder: a wider first kernel, then 3-wide kernels, channel
// progression 16/32/64/128/128/128, each block pooled with window 2.
inline std::vector<ConvBlockSpec> default_extractor_specs() {
  return {
      {16, 5, 2, 1}, {32, 3, 2, 1},  {64, 3, 2, 1},
      {128, 3, 2, 1}, {128, 3, 2, 1}, {128, 3, 2, 1},
  };
}

struct ConvBlockParams {
  Tensor kernels;  // [C_out x C_in x k]
  Tensor bias;     // [C_out]
  Tensor gamma;    // [C_out]
  Tensor beta;     // [C_out]
  BatchNormState bn;
};

struct ExtractorParams {
  std::vector<ConvBlockParams> blocks;
};

inline Tensor xavier_uniform(Rng& rng, Shape shape, std::size_t fan_in,
                             std::size_t fan_out) {
  const double bound =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

inline ExtractorParams make_extractor_params(
    std::size_t in_channels, const std::vector<ConvBlockSpec>& specs,
    Rng& rng) {
  ExtractorParams params;
  std::size_t cin = in_channels;
  for (const ConvBlockSpec& spec : specs) {
    spec.validate();
    ConvBlockParams block;
    block.kernels =
        xavier_uniform(rng, {spec.out_channels, cin, spec.kernel},
                       cin * spec.kernel, spec.out_channels * spec.kernel);
    block.bias = Tensor::zeros({spec.out_channels}, true);
    block.gamma = Tensor::full({spec.out_channels}, 1.0, true);
    block.beta = Tensor::zeros({spec.out_channels}, true);
    block.bn = BatchNormState::init(spec.out_channels);
    params.blocks.push_back(std::move(block));
    cin = spec.out_channels;
  }
  return params;
}

// Shape bookkeeping for the block chain. Conv with same padding preserves
// length; only pooling shrinks it.
struct FeatureShape {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::size_t flat() const { return channels * length; }
};

inline std::size_t min_extractor_input_len(
    const std::vector<ConvBlockSpec>& specs, Mode mode = Mode::train) {
  // Walk backwards from a required output length of 1. Train mode also
  // needs >= 2 positions per block for the batch statistics.
  std::size_t need = 1;
  for (auto it = specs.rbegin(); it != specs.rend(); ++it) {
    need = (need - 1) * it->pool_stride + it->pool_window;
    if (mode == Mode::train) need = std::max<std::size_t>(need, 2);
  }
  return need;
}

inline FeatureShape feature_shape(std::size_t in_channels,
                                  std::size_t in_len,
                                  const std::vector<ConvBlockSpec>& specs) {
  FeatureShape fs{in_channels, in_len};
  for (const ConvBlockSpec& spec : specs) {
    if (fs.length < spec.pool_window) {
      throw ShapeError(
          "feature extractor: input length " + std::to_string(in_len) +
          " is too short for the block chain; minimum is " +
          std::to_string(min_extractor_input_len(specs, Mode::eval)));
    }
    fs.channels = spec.out_channels;
    fs.length = (fs.length - spec.pool_window) / spec.pool_stride + 1;
  }
  return fs;
}

// conv -> batchnorm -> ReLU -> maxpool, exactly in that order, applied to
// a whole minibatch. Normalization statistics are per channel over batch
// and spatial positions together: each [C x L] map is transposed to
// [L x C] and the batch is stacked into [(B*L) x C] rows around the norm.
inline std::vector<Tensor> conv_block_forward_batch(
    Tape* tape, const std::vector<Tensor>& xs, const ConvBlockSpec& spec,
    ConvBlockParams& params, Mode mode) {
  if (xs.empty()) throw ShapeError("conv block: empty batch");
  const std::size_t len = xs[0].dim(1);
  std::vector<Tensor> rows;
  rows.reserve(xs.size());
  for (const Tensor& x : xs) {
    if (x.dim(1) != len) {
      throw ShapeError("conv block: ragged batch lengths");
    }
    rows.push_back(transpose(tape, conv1d(tape, x, params.kernels,
                                          params.bias)));
  }
  Tensor stacked = xs.size() == 1 ? rows[0] : concat_rows(tape, rows);
  Tensor normed = batchnorm(tape, stacked, params.gamma, params.beta,
                            kBatchNormEps, mode, params.bn);
  Tensor activated = relu(tape, normed);
  std::vector<Tensor> out;
  out.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Tensor back = transpose(tape, slice_rows(tape, activated, i * len, len));
    out.push_back(maxpool1d(tape, back, spec.pool_window, spec.pool_stride));
  }
  return out;
}

inline Tensor conv_block_forward(Tape* tape, const Tensor& x,
                                 const ConvBlockSpec& spec,
                                 ConvBlockParams& params, Mode mode) {
  return conv_block_forward_batch(tape, {x}, spec, params, mode)[0];
}

// Chains all blocks over the batch and flattens position-major: each
// output vector is that sample's final [C x L] map read position by
// position, which downstream code can reshape into per-position feature
// rows.
inline std::vector<Tensor> feature_extract_batch(
    Tape* tape, const std::vector<Tensor>& xs,
    const std::vector<ConvBlockSpec>& specs, ExtractorParams& params,
    Mode mode) {
  if (specs.size() != params.blocks.size()) {
    throw ConfigError("feature extractor: " + std::to_string(specs.size()) +
                      " specs vs " + std::to_string(params.blocks.size()) +
                      " parameter blocks");
  }
  for (const Tensor& x : xs) {
    feature_shape(x.dim(0), x.dim(1), specs);  // validates length up front
  }
  std::vector<Tensor> h = xs;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    h = conv_block_forward_batch(tape, h, specs[i], params.blocks[i], mode);
  }
  std::vector<Tensor> out;
  out.reserve(h.size());
  for (Tensor& map : h) out.push_back(flatten(tape, transpose(tape, map)));
  return out;
}

inline Tensor feature_extract(Tape* tape, const Tensor& x,
                              const std::vector<ConvBlockSpec>& specs,
                              ExtractorParams& params, Mode mode) {
  return feature_extract_batch(tape, {x}, specs, params, mode)[0];
}

}  // namespace flowcast
