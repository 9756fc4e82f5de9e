#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flowcast/gru.hpp"
#include "oracles.hpp"

using namespace flowcast;

namespace {

GruParams zero_params(std::size_t input, std::size_t hidden) {
  Rng rng(0);
  GruParams p = make_gru_params(input, hidden, rng);
  for (Tensor* t : {&p.w_update, &p.w_reset, &p.w_cand, &p.b_update,
                    &p.b_reset, &p.b_cand}) {
    for (double& v : t->values()) v = 0.0;
  }
  return p;
}

oracle::GruScalarParams to_scalar(const GruParams& p) {
  oracle::GruScalarParams s;
  s.hidden = p.hidden();
  s.input = p.input();
  s.wz.assign(p.w_update.values().begin(), p.w_update.values().end());
  s.wr.assign(p.w_reset.values().begin(), p.w_reset.values().end());
  s.w.assign(p.w_cand.values().begin(), p.w_cand.values().end());
  s.bz.assign(p.b_update.values().begin(), p.b_update.values().end());
  s.br.assign(p.b_reset.values().begin(), p.b_reset.values().end());
  s.b.assign(p.b_cand.values().begin(), p.b_cand.values().end());
  return s;
}

}  // namespace

TEST_CASE("zero parameters halve the previous state", "[gru]") {
  GruParams p = zero_params(2, 3);
  Tensor x = Tensor::from({2}, {0.7, -0.3});
  Tensor h_prev = Tensor::from({3}, {0.4, -0.8, 0.2});
  Tensor h = gru_cell_step(nullptr, x, h_prev, p);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(h(i) == Catch::Approx(0.5 * h_prev(i)).epsilon(1e-15));
  }
}

TEST_CASE("saturated update gate hands over to the candidate", "[gru]") {
  Rng rng(1);
  GruParams p = make_gru_params(2, 3, rng);
  for (double& v : p.b_update.values()) v = 50.0;  // z ~= 1
  Tensor x = oracle::random_tensor(rng, {2});
  Tensor h_prev = oracle::random_tensor(rng, {3});
  Tensor h = gru_cell_step(nullptr, x, h_prev, p);

  auto s = to_scalar(p);
  std::vector<double> hp(h_prev.values().begin(), h_prev.values().end());
  auto ref = oracle::gru_step_naive(s, {x(0), x(1)}, hp, hp);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(h(i) == Catch::Approx(ref[i]).margin(1e-12));
  }
  // and the reference itself is ~= tanh(candidate pre-activation)
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::abs(h(i)) <= 1.0);
  }
}

TEST_CASE("cell step matches the scalar-loop evaluation", "[gru]") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t input = 1 + rng.below(4);
    const std::size_t hidden = 1 + rng.below(5);
    GruParams p = make_gru_params(input, hidden, rng);
    Tensor x = oracle::random_tensor(rng, {input});
    Tensor h_prev = oracle::random_tensor(rng, {hidden});
    Tensor h = gru_cell_step(nullptr, x, h_prev, p);
    auto ref = oracle::gru_step_naive(
        to_scalar(p), {x.values().begin(), x.values().end()},
        {h_prev.values().begin(), h_prev.values().end()},
        {h_prev.values().begin(), h_prev.values().end()});
    for (std::size_t i = 0; i < hidden; ++i) {
      CHECK(h(i) == Catch::Approx(ref[i]).margin(1e-12));
    }
  }
}

TEST_CASE("skip step of one is bit-identical to the vanilla cell", "[gru]") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t input = 1 + rng.below(3);
    const std::size_t hidden = 1 + rng.below(4);
    const std::size_t steps = 1 + rng.below(20);
    GruParams p = make_gru_params(input, hidden, rng);

    GruState state = GruState::init(hidden, 1);
    Tensor h_vanilla = Tensor::zeros({hidden});
    for (std::size_t t = 0; t < steps; ++t) {
      Tensor x = oracle::random_tensor(rng, {input});
      Tensor h_skip = gruskip_cell_step(nullptr, x, state, p);
      h_vanilla = gru_cell_step(nullptr, x, h_vanilla, p);
      for (std::size_t i = 0; i < hidden; ++i) {
        CHECK(h_skip(i) == h_vanilla(i));  // exact equality required
      }
    }
  }
}

TEST_CASE("zero-seeded buffer makes early steps pure candidate", "[gru]") {
  Rng rng(4);
  const std::size_t hidden = 3;
  GruParams p = make_gru_params(2, hidden, rng);
  GruState state = GruState::init(hidden, 5);
  Tensor x = oracle::random_tensor(rng, {2});

  // t = 1: h_prev = 0 and h_{t-j} = 0, so h = z * cand with gates from zero
  Tensor h1 = gruskip_cell_step(nullptr, x, state, p);
  Tensor zeros = Tensor::zeros({hidden});
  Tensor hx = concat_rows(nullptr, {zeros, x});
  Tensor z = sigmoid(nullptr, add(nullptr, matvec(nullptr, p.w_update, hx),
                                  p.b_update));
  Tensor cand = flowcast::tanh(
      nullptr, add(nullptr, matvec(nullptr, p.w_cand, hx), p.b_cand));
  for (std::size_t i = 0; i < hidden; ++i) {
    CHECK(h1(i) == Catch::Approx(z(i) * cand(i)).margin(1e-15));
  }
}

TEST_CASE("skip cell matches a two-buffer scalar oracle", "[gru]") {
  Rng rng(5);
  const std::size_t input = 1, hidden = 2, j = 2;
  GruParams p = make_gru_params(input, hidden, rng);
  auto s = to_scalar(p);

  GruState state = GruState::init(hidden, j);
  std::vector<std::vector<double>> history{{0, 0}, {0, 0}};  // h_0, h_{-1}
  for (int t = 0; t < 4; ++t) {
    Tensor x = oracle::random_tensor(rng, {1});
    Tensor h = gruskip_cell_step(nullptr, x, state, p);

    const auto& h_prev = history[history.size() - 1];
    const auto& h_skip = history[history.size() - 2];
    auto ref = oracle::gru_step_naive(s, {x(0)}, h_prev, h_skip);
    for (std::size_t i = 0; i < hidden; ++i) {
      CHECK(h(i) == Catch::Approx(ref[i]).margin(1e-12));
    }
    history.push_back(ref);
  }
}

TEST_CASE("layer forward: dropout edge cases and eval equivalence", "[gru]") {
  Rng rng(6);
  GruParams p = make_gru_params(2, 3, rng);
  Tensor seq = oracle::random_tensor(rng, {6, 2});

  Rng drop_rng(7);
  Tensor train_out = gruskip_layer_forward(nullptr, seq, p, 2, 0.0,
                                           Mode::train, &drop_rng);
  Tensor eval_out = gruskip_layer_forward(nullptr, seq, p, 2, 0.0, Mode::eval);
  for (std::size_t i = 0; i < train_out.size(); ++i) {
    CHECK(train_out.values()[i] == eval_out.values()[i]);
  }

  CHECK_THROWS_AS(
      gruskip_layer_forward(nullptr, seq, p, 2, 1.0, Mode::train, &drop_rng),
      ConfigError);

  // eval output equals manual cell iteration
  GruState state = GruState::init(3, 2);
  for (std::size_t t = 0; t < 6; ++t) {
    Tensor x = flatten(nullptr, slice_rows(nullptr, seq, t, 1));
    Tensor h = gruskip_cell_step(nullptr, x, state, p);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(eval_out(t, i) == h(i));
    }
  }
}

TEST_CASE("gates stay strictly inside (0,1); states stay in [-1,1]", "[gru]") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    GruParams p = make_gru_params(1, 4, rng);
    // exaggerate weights to push toward saturation
    for (double& v : p.w_update.values()) v *= 20.0;
    Tensor seq = oracle::random_tensor(rng, {12, 1}, -3.0, 3.0);
    Tensor out = gruskip_layer_forward(nullptr, seq, p, 3, 0.0, Mode::eval);
    for (double v : out.values()) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    Tensor hx = concat_rows(nullptr, {Tensor::zeros({4}),
                                      oracle::random_tensor(rng, {1})});
    Tensor z = sigmoid(
        nullptr, add(nullptr, matvec(nullptr, p.w_update, hx), p.b_update));
    for (double v : z.values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("periodic output is the affine read-out", "[gru]") {
  Rng rng(9);
  SkipOutputParams p;
  p.weight = Tensor::from({2, 2}, {1, 0, 0, 1});
  p.bias = Tensor::zeros({2});
  Tensor h = Tensor::from({2}, {0.3, -0.7});
  Tensor y = periodic_output(nullptr, h, p);
  CHECK(y(0) == 0.3);
  CHECK(y(1) == -0.7);

  p.bias = Tensor::from({2}, {1.5, -2.5});
  Tensor y0 = periodic_output(nullptr, Tensor::zeros({2}), p);
  CHECK(y0(0) == 1.5);
  CHECK(y0(1) == -2.5);

  SkipOutputParams pr = make_skip_output_params(3, 2, rng);
  Tensor hr = oracle::random_tensor(rng, {3});
  Tensor yr = periodic_output(nullptr, hr, pr);
  for (std::size_t i = 0; i < 2; ++i) {
    double acc = pr.bias(i);
    for (std::size_t k = 0; k < 3; ++k) acc += pr.weight(i, k) * hr(k);
    CHECK(yr(i) == Catch::Approx(acc).margin(1e-15));
  }
}

TEST_CASE("skip context encoding runs the two-layer stack", "[gru]") {
  Rng rng(10);
  GruStack stack{make_gru_params(1, 4, rng), make_gru_params(4, 3, rng)};

  CHECK_THROWS_AS(skip_context_encode(nullptr, Tensor::zeros({0}), stack, 2,
                                      0.0, Mode::eval),
                  ShapeError);

  // constant sequence with all-zero parameters stays at the zero fixed point
  GruStack zeros{zero_params(1, 4), zero_params(4, 3)};
  Tensor flat = Tensor::full({5}, 3.3);
  Tensor emb0 = skip_context_encode(nullptr, flat, zeros, 2, 0.0, Mode::eval);
  for (double v : emb0.values()) CHECK(v == 0.0);

  // matches running the layers by hand
  Tensor p = oracle::random_tensor(rng, {6});
  Tensor emb = skip_context_encode(nullptr, p, stack, 2, 0.0, Mode::eval);
  Tensor h1 = gruskip_layer_forward(nullptr, reshape(nullptr, p, {6, 1}),
                                    stack.layer1, 2, 0.0, Mode::eval);
  Tensor h2 =
      gruskip_layer_forward(nullptr, h1, stack.layer2, 2, 0.0, Mode::eval);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(emb(i) == h2(5, i));
  }

  // single-period sequence is one cell step from the zero state
  Tensor one = oracle::random_tensor(rng, {1});
  Tensor e1 = skip_context_encode(nullptr, one, stack, 2, 0.0, Mode::eval);
  Tensor s1 = gru_cell_step(nullptr, one, Tensor::zeros({4}), stack.layer1);
  // j=2 with a zero buffer: mix target is zero, so h = z * cand; replicate
  // via the skip cell
  GruState st1 = GruState::init(4, 2);
  Tensor s1s = gruskip_cell_step(nullptr, one, st1, stack.layer1);
  GruState st2 = GruState::init(3, 2);
  Tensor s2 = gruskip_cell_step(nullptr, s1s, st2, stack.layer2);
  for (std::size_t i = 0; i < 3; ++i) CHECK(e1(i) == s2(i));
  (void)s1;
}

TEST_CASE("gradients reach the first input through a deep skip scan",
          "[gru]") {
  Rng rng(11);
  GruParams p = make_gru_params(1, 3, rng);
  Tensor seq = oracle::random_tensor(rng, {15, 1});
  seq.set_requires_grad(true);

  Tape tape;
  Tensor out = gruskip_layer_forward(&tape, seq, p, 5, 0.0, Mode::eval);
  Tensor loss = sum(&tape, mul(&tape, out, out));
  tape.backward(loss);
  double grad_x1 = std::abs(seq.grad()[0]);
  CHECK(grad_x1 > 0.0);
  CHECK(std::isfinite(grad_x1));

  seq.zero_grad();
  const double err = oracle::max_grad_rel_error({seq}, [&](Tape* t) {
    Tensor o = gruskip_layer_forward(t, seq, p, 5, 0.0, Mode::eval);
    return sum(t, mul(t, o, o));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("layer gradient passes finite differences on parameters", "[gru]") {
  Rng rng(12);
  GruParams p = make_gru_params(2, 3, rng);
  Tensor seq = oracle::random_tensor(rng, {5, 2});
  std::vector<Tensor> leaves{p.w_update, p.w_reset, p.w_cand,
                             p.b_update, p.b_reset, p.b_cand};
  const double err = oracle::max_grad_rel_error(leaves, [&](Tape* t) {
    Tensor o = gruskip_layer_forward(t, seq, p, 2, 0.0, Mode::eval);
    return sum(t, mul(t, o, o));
  });
  CHECK(err < 1e-4);
}
