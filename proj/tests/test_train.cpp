#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "flowcast/metrics.hpp"
#include "flowcast/train.hpp"
#include "oracles.hpp"

using namespace flowcast;
namespace fs = std::filesystem;

namespace {

ModelConfig trainer_config() {
  ModelConfig c;
  c.window_len = 12;
  c.horizon_steps = 2;
  c.skip_step = 2;
  c.n_periods = 3;
  c.extractor = {{2, 3, 2, 1}, {2, 3, 2, 1}};
  c.gru1_width = 5;
  c.gru2_width = 4;
  c.gru_layer_skip = 2;
  c.d_model = 6;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.ff_width = 8;
  c.head_hidden = 6;
  c.dropout = 0.1;
  return c;
}

TrainConfig fast_schedule(std::size_t epochs) {
  TrainConfig t;
  t.batch_size = 16;
  t.epochs = epochs;
  t.patience = 0;
  t.seed = 7;
  return t;
}

PreparedData make_data(const ModelConfig& c, std::uint64_t seed = 3) {
  auto raw = synth_generate(1, 1, seed);
  return prepare_data(raw, c);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("mse loss values and gradient", "[train]") {
  Tensor a = Tensor::from({2}, {1, 3});
  CHECK(mse_loss(nullptr, a, a).value() == 0.0);
  Tensor zero = Tensor::from({2}, {0, 0});
  Tensor t = Tensor::from({2}, {1, 3});
  CHECK(mse_loss(nullptr, zero, t).value() == 5.0);
  CHECK_THROWS_AS(mse_loss(nullptr, zero, Tensor::zeros({3})), ShapeError);

  Rng rng(1);
  Tensor pred = oracle::random_tensor(rng, {3, 2});
  Tensor target = oracle::random_tensor(rng, {3, 2});
  pred.set_requires_grad(true);
  Tape tape;
  Tensor loss = mse_loss(&tape, pred, target);
  tape.backward(loss);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double expect =
        2.0 * (pred.values()[i] - target.values()[i]) / 6.0;
    CHECK(pred.grad()[i] == Catch::Approx(expect).epsilon(1e-12));
  }
  pred.zero_grad();
  const double err = oracle::max_grad_rel_error({pred}, [&](Tape* tp) {
    return mse_loss(tp, pred, target);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("optimizers leave parameters alone at zero gradient", "[train]") {
  for (const char* kind : {"sgd", "momentum", "adam"}) {
    ParamStore store;
    Tensor p = Tensor::from({2}, {1.5, -2.5}, true);
    store.add_param("p", p);
    Optimizer opt(kind, 0.1);
    opt.step(store);
    opt.step(store);
    CHECK(p(0) == 1.5);
    CHECK(p(1) == -2.5);
  }
}

TEST_CASE("sgd step arithmetic", "[train]") {
  ParamStore store;
  Tensor p = Tensor::from({1}, {1.0}, true);
  store.add_param("p", p);
  p.grad()[0] = 2.0;
  Optimizer opt("sgd", 0.1);
  opt.step(store);
  CHECK(p(0) == Catch::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("adam matches the scalar reference and its first-step scale",
          "[train]") {
  for (double gscale : {1e-3, 1.0, 1e4}) {
    ParamStore store;
    Tensor p = Tensor::from({1}, {0.7}, true);
    store.add_param("p", p);
    Optimizer opt("adam", 0.01);
    oracle::AdamScalar ref;
    double ref_p = 0.7;
    for (int step = 0; step < 5; ++step) {
      p.grad()[0] = gscale;
      ref_p = ref.step(ref_p, gscale, 0.01);
      opt.step(store);
      p.zero_grad();
      CHECK(p(0) == Catch::Approx(ref_p).margin(1e-12));
      if (step == 0) {
        // bias-corrected first step is ~lr regardless of gradient scale
        CHECK(std::abs(0.7 - p(0)) ==
              Catch::Approx(0.01).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("momentum accumulates velocity", "[train]") {
  ParamStore store;
  Tensor p = Tensor::from({1}, {0.0}, true);
  store.add_param("p", p);
  Optimizer opt("momentum", 0.1);
  p.grad()[0] = 1.0;
  opt.step(store);
  CHECK(p(0) == Catch::Approx(-0.1).epsilon(1e-12));
  p.grad()[0] = 1.0;
  opt.step(store);  // velocity = 0.9 + 1 = 1.9
  CHECK(p(0) == Catch::Approx(-0.1 - 0.19).epsilon(1e-12));
}

TEST_CASE("gradient clipping rescales to the requested norm", "[train]") {
  ParamStore store;
  Tensor p = Tensor::from({2}, {0, 0}, true);
  store.add_param("p", p);
  p.grad()[0] = 3.0;
  p.grad()[1] = 4.0;
  const double norm = clip_grad_norm(store, 2.5);
  CHECK(norm == Catch::Approx(5.0));
  CHECK(std::sqrt(p.grad()[0] * p.grad()[0] + p.grad()[1] * p.grad()[1]) ==
        Catch::Approx(2.5).epsilon(1e-12));
  p.grad()[0] = 0.3;
  p.grad()[1] = 0.4;
  clip_grad_norm(store, 2.5);  // below the limit: untouched
  CHECK(p.grad()[0] == 0.3);
}

TEST_CASE("dropout mask is inverted and unbiased", "[train]") {
  Rng rng(11);
  double total = 0.0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    Tensor mask = dropout_mask(rng, {8}, 0.3);
    for (double v : mask.values()) total += v;
  }
  const double mean = total / (8.0 * trials);
  CHECK(std::abs(mean - 1.0) < 0.02);
  CHECK_THROWS_AS(dropout_mask(rng, {4}, 1.0), ConfigError);
}

TEST_CASE("zero learning rate leaves parameters bit-identical", "[train]") {
  ModelConfig c = trainer_config();
  PreparedData data = make_data(c);
  Model m = build_model(c, Variant::full, 5);
  std::vector<std::vector<double>> before;
  for (auto& [n, t] : m.store.trainable) {
    before.emplace_back(t.values().begin(), t.values().end());
  }
  TrainConfig tc = fast_schedule(2);
  tc.learning_rate = 1e-300;  // effectively zero while passing validation
  tc.optimizer = "sgd";
  train(m, data.train, data.val, tc, data.stats);
  for (std::size_t i = 0; i < m.store.trainable.size(); ++i) {
    auto& t = m.store.trainable[i].second;
    for (std::size_t k = 0; k < t.size(); ++k) {
      CHECK(t.values()[k] == Catch::Approx(before[i][k]).margin(1e-290));
    }
  }
}

TEST_CASE("fixed seed reproduces the loss history bit for bit", "[train]") {
  ModelConfig c = trainer_config();
  PreparedData data = make_data(c);
  TrainConfig tc = fast_schedule(3);

  Model m1 = build_model(c, Variant::full, tc.seed);
  Checkpoint c1 = train(m1, data.train, data.val, tc, data.stats);
  Model m2 = build_model(c, Variant::full, tc.seed);
  Checkpoint c2 = train(m2, data.train, data.val, tc, data.stats);

  REQUIRE(c1.train_history.size() == c2.train_history.size());
  for (std::size_t i = 0; i < c1.train_history.size(); ++i) {
    CHECK(c1.train_history[i] == c2.train_history[i]);
    CHECK(c1.val_history[i] == c2.val_history[i]);
  }
}

TEST_CASE("validation evaluation mutates nothing", "[train]") {
  ModelConfig c = trainer_config();
  PreparedData data = make_data(c);
  Model m = build_model(c, Variant::full, 5);
  TrainConfig tc = fast_schedule(1);
  train(m, data.train, data.val, tc, data.stats);

  const std::uint64_t before = state_hash(m);
  eval_mse(m, data.val, 16);
  eval_mse(m, data.test, 16);
  CHECK(state_hash(m) == before);
}

TEST_CASE("best validation loss is non-increasing over epochs", "[train]") {
  ModelConfig c = trainer_config();
  PreparedData data = make_data(c);
  Model m = build_model(c, Variant::full, 9);
  TrainConfig tc = fast_schedule(5);
  Checkpoint ckpt = train(m, data.train, data.val, tc, data.stats);
  double best = std::numeric_limits<double>::infinity();
  for (double v : ckpt.val_history) {
    best = std::min(best, v);
  }
  CHECK(ckpt.best_val_loss == best);
  CHECK(ckpt.best_epoch >= 1);
  CHECK(ckpt.best_epoch <= ckpt.val_history.size());
  // the stored best parameters evaluate to the recorded best loss
  Model best_model = model_from_checkpoint(ckpt, true);
  CHECK(eval_mse(best_model, data.val, tc.batch_size) ==
        Catch::Approx(ckpt.best_val_loss).epsilon(1e-12));
}

TEST_CASE("divergence aborts with the epoch and batch recorded", "[train]") {
  ModelConfig c = trainer_config();
  PreparedData data = make_data(c);
  Model m = build_model(c, Variant::full, 5);
  WindowBatch poisoned = data.train;
  poisoned.targets.values()[3] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc = fast_schedule(1);
  CHECK_THROWS_MATCHES(train(m, poisoned, data.val, tc, data.stats),
                       DivergenceError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("epoch 1")));
}

TEST_CASE("a short training run fits a small sample set", "[train]") {
  ModelConfig c = trainer_config();
  c.dropout = 0.0;
  PreparedData data = make_data(c);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < 16; ++i) idx.push_back(i * 3);
  WindowBatch toy = data.train.gather(idx);

  Model m = build_model(c, Variant::full, 5);
  TrainConfig tc = fast_schedule(60);
  tc.batch_size = 8;
  tc.max_steps = 120;
  const double initial = eval_mse(m, toy, 8);
  Checkpoint ckpt = train(m, toy, toy, tc, data.stats);
  const double final_loss = eval_mse(m, toy, 8);
  CHECK(final_loss < 0.2 * initial);
  CHECK(ckpt.steps_done == 120);
}

TEST_CASE("checkpoint round-trip is byte-identical", "[train]") {
  ModelConfig c = trainer_config();
  PreparedData data = make_data(c);
  Model m = build_model(c, Variant::full, 5);
  TrainConfig tc = fast_schedule(2);
  Checkpoint ckpt = train(m, data.train, data.val, tc, data.stats, "fp123");

  auto p1 = fs::temp_directory_path() / "flowcast_ck1.fckpt";
  auto p2 = fs::temp_directory_path() / "flowcast_ck2.fckpt";
  save_checkpoint(ckpt, p1.string());
  Checkpoint loaded = load_checkpoint(p1.string());
  save_checkpoint(loaded, p2.string());
  CHECK(read_file(p1) == read_file(p2));
  CHECK(loaded.data_fingerprint == "fp123");
  CHECK(loaded.rng_state == ckpt.rng_state);

  // truncation must fail loudly, not crash
  std::string bytes = read_file(p1);
  std::ofstream trunc(p1, std::ios::binary);
  trunc.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  trunc.close();
  CHECK_THROWS_MATCHES(load_checkpoint(p1.string()), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("truncated")));

  // version bump must be rejected explicitly
  bytes[8] = 9;
  std::ofstream bad(p1, std::ios::binary);
  bad.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  bad.close();
  CHECK_THROWS_MATCHES(load_checkpoint(p1.string()), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("version")));
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("resumed training replays the uninterrupted run exactly",
          "[train]") {
  ModelConfig c = trainer_config();
  PreparedData data = make_data(c);

  TrainConfig full_run = fast_schedule(4);
  Model m_full = build_model(c, Variant::full, full_run.seed);
  Checkpoint uninterrupted =
      train(m_full, data.train, data.val, full_run, data.stats);

  TrainConfig half = fast_schedule(2);
  Model m_half = build_model(c, Variant::full, half.seed);
  Checkpoint mid = train(m_half, data.train, data.val, half, data.stats);

  auto mid_path = fs::temp_directory_path() / "flowcast_mid.fckpt";
  save_checkpoint(mid, mid_path.string());
  Checkpoint mid_loaded = load_checkpoint(mid_path.string());
  fs::remove(mid_path);

  Model m_resumed = build_model(c, Variant::full, half.seed);
  Checkpoint resumed = train(m_resumed, data.train, data.val, full_run,
                             data.stats, "", &mid_loaded);

  REQUIRE(resumed.train_history.size() == uninterrupted.train_history.size());
  for (std::size_t i = 0; i < resumed.train_history.size(); ++i) {
    CHECK(resumed.train_history[i] == uninterrupted.train_history[i]);
    CHECK(resumed.val_history[i] == uninterrupted.val_history[i]);
  }
  CHECK(resumed.rng_state == uninterrupted.rng_state);
  REQUIRE(resumed.arrays.size() == uninterrupted.arrays.size());
  for (std::size_t i = 0; i < resumed.arrays.size(); ++i) {
    CHECK(resumed.arrays[i].first == uninterrupted.arrays[i].first);
    CHECK(resumed.arrays[i].second == uninterrupted.arrays[i].second);
  }
}

TEST_CASE("early stopping respects patience", "[train]") {
  ModelConfig c = trainer_config();
  PreparedData data = make_data(c);
  Model m = build_model(c, Variant::full, 5);
  TrainConfig tc = fast_schedule(50);
  tc.patience = 2;
  Checkpoint ckpt = train(m, data.train, data.val, tc, data.stats);
  CHECK(ckpt.epochs_done < 50);
  CHECK(ckpt.epochs_done >= ckpt.best_epoch + 2 - 1);
}

TEST_CASE("history csv has the documented columns", "[train]") {
  Checkpoint ckpt;
  ckpt.train_history = {0.5, 0.25};
  ckpt.val_history = {0.6, 0.3};
  auto p = fs::temp_directory_path() / "flowcast_hist.csv";
  write_history_csv(p.string(), ckpt);
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,val_loss");
  std::getline(in, line);
  CHECK(line.substr(0, 2) == "1,");
  fs::remove(p);
}
