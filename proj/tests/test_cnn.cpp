#include <catch2/catch_amalgamated.hpp>

#include "flowcast/cnn.hpp"
#include "oracles.hpp"

using namespace flowcast;

namespace {

std::vector<ConvBlockSpec> tiny_specs(std::size_t blocks = 6,
                                      std::size_t channels = 2) {
  std::vector<ConvBlockSpec> specs;
  for (std::size_t i = 0; i < blocks; ++i) {
    specs.push_back({channels, i == 0 ? std::size_t{5} : std::size_t{3}, 2, 1});
  }
  return specs;
}

}  // namespace

TEST_CASE("default ladder matches the published channel progression",
          "[cnn]") {
  auto specs = default_extractor_specs();
  REQUIRE(specs.size() == 6);
  const std::vector<std::size_t> channels{16, 32, 64, 128, 128, 128};
  const std::vector<std::size_t> kernels{5, 3, 3, 3, 3, 3};
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(specs[i].out_channels == channels[i]);
    CHECK(specs[i].kernel == kernels[i]);
    CHECK(specs[i].pool_window == 2);
    CHECK(specs[i].pool_stride == 1);
  }
}

TEST_CASE("zero input with zero bias and beta stays zero", "[cnn]") {
  Rng rng(1);
  auto specs = tiny_specs(2);
  auto params = make_extractor_params(1, specs, rng);
  for (auto& b : params.blocks) {
    for (double& v : b.bias.values()) v = 0.0;
    for (double& v : b.beta.values()) v = 0.0;
  }
  Tensor x = Tensor::zeros({1, 10});
  Tensor out = feature_extract(nullptr, x, specs, params, Mode::train);
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("block output length follows the pooling arithmetic", "[cnn]") {
  Rng rng(2);
  ConvBlockSpec spec{3, 3, 4, 2};
  auto params = make_extractor_params(2, {spec}, rng);
  Tensor x = oracle::random_tensor(rng, {2, 13});
  Tensor y = conv_block_forward(nullptr, x, spec, params.blocks[0], Mode::train);
  CHECK(y.shape() == Shape{3, (13 - 4) / 2 + 1});
}

TEST_CASE("single block matches a per-op hand trace", "[cnn]") {
  // 1 channel, kernel [1, 0, -1], bias 0.5, gamma 1.3, beta -0.2.
  ConvBlockSpec spec{1, 3, 2, 1};
  ConvBlockParams block;
  block.kernels = Tensor::from({1, 1, 3}, {1, 0, -1});
  block.bias = Tensor::from({1}, {0.5});
  block.gamma = Tensor::from({1}, {1.3});
  block.beta = Tensor::from({1}, {-0.2});
  block.bn = BatchNormState::init(1);
  Tensor x = Tensor::from({1, 4}, {1, 2, 3, 4});

  Tensor got = conv_block_forward(nullptr, x, spec, block, Mode::train);

  std::vector<double> conv = oracle::conv1d_naive({1, 2, 3, 4}, {1, 0, -1}, 0.5);
  double mean = 0;
  for (double v : conv) mean += v;
  mean /= static_cast<double>(conv.size());
  double var = 0;
  for (double v : conv) var += (v - mean) * (v - mean);
  var /= static_cast<double>(conv.size());
  std::vector<double> normed;
  for (double v : conv) {
    const double xh = (v - mean) / std::sqrt(var + kBatchNormEps);
    normed.push_back(std::max(0.0, 1.3 * xh - 0.2));
  }
  std::vector<double> pooled = oracle::maxpool_naive(normed, 2, 1);

  REQUIRE(got.size() == pooled.size());
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    CHECK(got.values()[i] == Catch::Approx(pooled[i]).epsilon(1e-12));
  }
}

TEST_CASE("feature_extract walks the full channel ladder", "[cnn]") {
  Rng rng(3);
  auto specs = default_extractor_specs();
  auto params = make_extractor_params(1, specs, rng);
  Tensor x = oracle::random_tensor(rng, {1, 12});

  Tensor h = x;
  const std::vector<std::size_t> channels{16, 32, 64, 128, 128, 128};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    h = conv_block_forward(nullptr, h, specs[i], params.blocks[i], Mode::train);
    CHECK(h.dim(0) == channels[i]);
    CHECK(h.dim(1) == 12 - (i + 1));
  }

  FeatureShape fs = feature_shape(1, 12, specs);
  CHECK(fs.channels == 128);
  CHECK(fs.length == 6);
  CHECK(fs.flat() == 128 * 6);
}

TEST_CASE("too-short inputs are rejected with the minimum", "[cnn]") {
  Rng rng(4);
  auto specs = default_extractor_specs();
  auto params = make_extractor_params(1, specs, rng);
  Tensor x = Tensor::zeros({1, 4});
  CHECK_THROWS_MATCHES(
      feature_extract(nullptr, x, specs, params, Mode::eval), ShapeError,
      Catch::Matchers::MessageMatches(
          Catch::Matchers::ContainsSubstring("minimum")));
  CHECK(min_extractor_input_len(specs, Mode::eval) == 7);
  CHECK(min_extractor_input_len(specs, Mode::train) == 7);
}

TEST_CASE("shape query equals produced shape over random sizes", "[cnn]") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t blocks = 1 + rng.below(4);
    std::vector<ConvBlockSpec> specs;
    for (std::size_t b = 0; b < blocks; ++b) {
      specs.push_back({1 + rng.below(4), 2 * rng.below(3) + 1,
                       1 + rng.below(3), 1 + rng.below(2)});
    }
    const std::size_t cin = 1 + rng.below(3);
    const std::size_t len =
        min_extractor_input_len(specs, Mode::eval) + rng.below(10);
    auto params = make_extractor_params(cin, specs, rng);
    Tensor x = oracle::random_tensor(rng, {cin, len});
    Tensor out = feature_extract(nullptr, x, specs, params, Mode::eval);
    CHECK(out.shape() == Shape{feature_shape(cin, len, specs).flat()});
  }
}

TEST_CASE("eval passes over frozen stats are bit-identical", "[cnn]") {
  Rng rng(6);
  auto specs = tiny_specs(3);
  auto params = make_extractor_params(2, specs, rng);
  Tensor warm = oracle::random_tensor(rng, {2, 16});
  feature_extract(nullptr, warm, specs, params, Mode::train);

  Tensor x = oracle::random_tensor(rng, {2, 16});
  Tensor a = feature_extract(nullptr, x, specs, params, Mode::eval);
  Tensor b = feature_extract(nullptr, x, specs, params, Mode::eval);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.values()[i] == b.values()[i]);
  }
}

TEST_CASE("gradients flow through all six blocks", "[cnn]") {
  Rng rng(7);
  auto specs = tiny_specs(6, 2);
  auto params = make_extractor_params(1, specs, rng);
  Tensor x = oracle::random_tensor(rng, {1, 32});
  Tensor weights = oracle::random_tensor(rng, {feature_shape(1, 32, specs).flat()});

  std::vector<Tensor> leaves{x};
  for (auto& b : params.blocks) {
    leaves.push_back(b.kernels);
    leaves.push_back(b.bias);
    leaves.push_back(b.gamma);
    leaves.push_back(b.beta);
  }
  const double err = oracle::max_grad_rel_error(leaves, [&](Tape* t) {
    // fresh running stats per evaluation; they are not on the grad path
    auto p = params;
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
      p.blocks[i].bn = BatchNormState::init(specs[i].out_channels);
    }
    return sum(t, mul(t, feature_extract(t, x, specs, p, Mode::train), weights));
  });
  CHECK(err < 1e-4);
}
