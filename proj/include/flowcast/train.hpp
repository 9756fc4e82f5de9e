#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flowcast/config.hpp"
#include "flowcast/data.hpp"
#include "flowcast/model.hpp"

namespace flowcast {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline Tensor mse_loss(Tape* tape, const Tensor& pred, const Tensor& target) {
  detail::require_same_shape("mse_loss", pred, target);
  Tensor diff = sub(tape, pred, target);
  return scale(tape, sum(tape, mul(tape, diff, diff)),
               1.0 / static_cast<double>(diff.size()));
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

inline double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : store.trainable) {
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [name, t] : store.trainable) {
      for (double& g : t.grad()) g *= f;
    }
  }
  return norm;
}

// SGD, momentum (beta 0.9) and Adam (beta1 0.9, beta2 0.999, eps 1e-8,
// bias-corrected). State tensors are keyed by parameter order, which is
// deterministic, and serialized into checkpoints by name.
class Optimizer {
 public:
  Optimizer(std::string kind, double lr) : kind_(std::move(kind)), lr_(lr) {
    if (kind_ != "sgd" && kind_ != "momentum" && kind_ != "adam") {
      throw ConfigError("unknown optimizer '" + kind_ + "'");
    }
  }

  static Optimizer from_config(const TrainConfig& c) {
    return Optimizer(c.optimizer, c.learning_rate);
  }

  const std::string& kind() const { return kind_; }
  std::uint64_t steps() const { return t_; }

  void step(ParamStore& store) {
    ensure_state(store);
    ++t_;
    for (std::size_t i = 0; i < store.trainable.size(); ++i) {
      auto& [name, p] = store.trainable[i];
      if (p.grad().empty()) {
        throw Error("optimizer: no gradient buffer for parameter '" + name +
                    "'");
      }
      auto pv = p.values();
      auto g = p.grad();
      if (kind_ == "sgd") {
        for (std::size_t k = 0; k < pv.size(); ++k) pv[k] -= lr_ * g[k];
      } else if (kind_ == "momentum") {
        auto vel = vel_[i].values();
        for (std::size_t k = 0; k < pv.size(); ++k) {
          vel[k] = 0.9 * vel[k] + g[k];
          pv[k] -= lr_ * vel[k];
        }
      } else {
        auto m = m_[i].values();
        auto v = v_[i].values();
        const double c1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
        for (std::size_t k = 0; k < pv.size(); ++k) {
          m[k] = 0.9 * m[k] + 0.1 * g[k];
          v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
          const double mh = m[k] / c1;
          const double vh = v[k] / c2;
          pv[k] -= lr_ * mh / (std::sqrt(vh) + 1e-8);
        }
      }
    }
  }

  void export_arrays(
      const ParamStore& store,
      std::vector<std::pair<std::string, std::vector<double>>>& out) const {
    auto dump = [&](const char* tag, const std::vector<Tensor>& state) {
      for (std::size_t i = 0; i < state.size(); ++i) {
        out.emplace_back(std::string("opt.") + tag + "." +
                             store.trainable[i].first,
                         std::vector<double>(state[i].values().begin(),
                                             state[i].values().end()));
      }
    };
    if (kind_ == "momentum") dump("velocity", vel_);
    if (kind_ == "adam") {
      dump("m", m_);
      dump("v", v_);
    }
  }

  void import_arrays(
      const ParamStore& store,
      const std::vector<std::pair<std::string, std::vector<double>>>& arrays,
      std::uint64_t steps) {
    ensure_state(store);
    t_ = steps;
    auto fill = [&](const std::string& tag, std::vector<Tensor>& state) {
      for (std::size_t i = 0; i < state.size(); ++i) {
        const std::string key = "opt." + tag + "." + store.trainable[i].first;
        for (const auto& [name, values] : arrays) {
          if (name == key) {
            if (values.size() != state[i].size()) {
              throw DataError("checkpoint: optimizer array '" + key +
                              "' has wrong length");
            }
            std::copy(values.begin(), values.end(), state[i].values().begin());
          }
        }
      }
    };
    if (kind_ == "momentum") fill("velocity", vel_);
    if (kind_ == "adam") {
      fill("m", m_);
      fill("v", v_);
    }
  }

 private:
  void ensure_state(const ParamStore& store) {
    if (initialized_) return;
    for (const auto& [name, p] : store.trainable) {
      if (kind_ == "momentum") vel_.push_back(Tensor::zeros(p.shape()));
      if (kind_ == "adam") {
        m_.push_back(Tensor::zeros(p.shape()));
        v_.push_back(Tensor::zeros(p.shape()));
      }
    }
    initialized_ = true;
  }

  std::string kind_;
  double lr_;
  std::uint64_t t_ = 0;
  bool initialized_ = false;
  std::vector<Tensor> m_, v_, vel_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'O', 'W',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  Variant variant = Variant::full;
  std::size_t epochs_done = 0;
  std::uint64_t steps_done = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::string rng_state;
  NormStats stats;
  std::string data_fingerprint;
  std::vector<double> train_history, val_history;
  std::vector<std::pair<std::string, std::vector<double>>> arrays;

  const std::vector<double>* array(const std::string& name) const {
    for (const auto& [n, v] : arrays) {
      if (n == name) return &v;
    }
    return nullptr;
  }
};

inline nlohmann::json stats_to_json(const NormStats& s) {
  return {{"channels", s.channels}, {"mean", s.mean}, {"stddev", s.stddev}};
}

inline NormStats stats_from_json(const nlohmann::json& j) {
  NormStats s;
  s.channels = j.at("channels").get<std::vector<std::string>>();
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  return s;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  nlohmann::json j;
  j["model_config"] = to_json(c.model_config);
  j["train_config"] = to_json(c.train_config);
  j["variant"] = variant_name(c.variant);
  j["epochs_done"] = c.epochs_done;
  j["steps_done"] = c.steps_done;
  if (std::isfinite(c.best_val_loss)) {
    j["best_val_loss"] = c.best_val_loss;
  } else {
    j["best_val_loss"] = nullptr;
  }
  j["best_epoch"] = c.best_epoch;
  j["rng_state"] = c.rng_state;
  j["stats"] = stats_to_json(c.stats);
  j["data_fingerprint"] = c.data_fingerprint;
  j["train_history"] = c.train_history;
  j["val_history"] = c.val_history;
  const std::string json_text = j.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  auto put_u32 = [&](std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  auto put_u64 = [&](std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  put_u32(kCheckpointVersion);
  put_u64(json_text.size());
  out.write(json_text.data(), static_cast<std::streamsize>(json_text.size()));
  put_u64(c.arrays.size());
  for (const auto& [name, values] : c.arrays) {
    put_u32(static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(values.size());
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  if (!out) throw DataError("write failed for checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  auto fail = [&](const std::string& why) -> DataError {
    return DataError("checkpoint '" + path + "' is corrupt: " + why);
  };
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw fail("bad magic bytes");
  }
  auto get_u32 = [&]() {
    std::uint32_t v;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) throw fail("truncated");
    return v;
  };
  auto get_u64 = [&]() {
    std::uint64_t v;
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) throw fail("truncated");
    return v;
  };
  const std::uint32_t version = get_u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint '" + path + "' has format version " +
                    std::to_string(version) + "; this build reads version " +
                    std::to_string(kCheckpointVersion));
  }
  const std::uint64_t json_len = get_u64();
  std::string json_text(json_len, '\0');
  if (!in.read(json_text.data(), static_cast<std::streamsize>(json_len))) {
    throw fail("truncated JSON section");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("unparseable JSON: ") + e.what());
  }

  Checkpoint c;
  try {
    c.model_config = model_config_from_json(j.at("model_config"));
    c.train_config = train_config_from_json(j.at("train_config"));
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.epochs_done = j.at("epochs_done").get<std::size_t>();
    c.steps_done = j.at("steps_done").get<std::uint64_t>();
    c.best_val_loss = j.at("best_val_loss").is_null()
                          ? std::numeric_limits<double>::infinity()
                          : j.at("best_val_loss").get<double>();
    c.best_epoch = j.at("best_epoch").get<std::size_t>();
    c.rng_state = j.at("rng_state").get<std::string>();
    c.stats = stats_from_json(j.at("stats"));
    c.data_fingerprint = j.at("data_fingerprint").get<std::string>();
    c.train_history = j.at("train_history").get<std::vector<double>>();
    c.val_history = j.at("val_history").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("missing or mistyped field: ") + e.what());
  }

  const std::uint64_t n_arrays = get_u64();
  for (std::uint64_t i = 0; i < n_arrays; ++i) {
    const std::uint32_t name_len = get_u32();
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw fail("truncated array name");
    const std::uint64_t count = get_u64();
    std::vector<double> values(count);
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(count * sizeof(double)))) {
      throw fail("truncated array '" + name + "'");
    }
    c.arrays.emplace_back(std::move(name), std::move(values));
  }
  return c;
}

// Copies current parameters/buffers into named arrays.
inline void capture_model_arrays(
    const Model& m, const std::string& prefix,
    std::vector<std::pair<std::string, std::vector<double>>>& out) {
  for (const auto& [name, t] : m.store.trainable) {
    out.emplace_back(prefix + "param." + name,
                     std::vector<double>(t.values().begin(), t.values().end()));
  }
  for (const auto& [name, t] : m.store.buffers) {
    out.emplace_back(prefix + "buffer." + name,
                     std::vector<double>(t.values().begin(), t.values().end()));
  }
}

inline void apply_model_arrays(Model& m, const Checkpoint& c,
                               const std::string& prefix) {
  auto restore = [&](const std::string& key, Tensor& t) {
    const std::vector<double>* v = c.array(key);
    if (!v) throw DataError("checkpoint lacks array '" + key + "'");
    if (v->size() != t.size()) {
      throw DataError("checkpoint array '" + key + "' has " +
                      std::to_string(v->size()) + " values, expected " +
                      std::to_string(t.size()));
    }
    std::copy(v->begin(), v->end(), t.values().begin());
  };
  for (auto& [name, t] : m.store.trainable) restore(prefix + "param." + name, t);
  for (auto& [name, t] : m.store.buffers) restore(prefix + "buffer." + name, t);
}

// Rebuilds the model a checkpoint describes. `use_best` restores the
// best-validation parameters when the checkpoint carries them.
inline Model model_from_checkpoint(const Checkpoint& c, bool use_best = true) {
  Model m = build_model(c.model_config, c.variant, c.train_config.seed);
  const bool best = use_best && c.array("best.param.input_proj.weight");
  apply_model_arrays(m, c, best ? "best." : "");
  return m;
}

// FNV over every parameter, buffer and the shapes; detects any state
// mutation.
inline std::uint64_t state_hash(const Model& m) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix_bytes = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  auto mix_tensor = [&](const Tensor& t) {
    mix_bytes(t.values().data(), t.size() * sizeof(double));
  };
  for (const auto& [name, t] : m.store.trainable) {
    mix_bytes(name.data(), name.size());
    mix_tensor(t);
  }
  for (const auto& [name, t] : m.store.buffers) {
    mix_bytes(name.data(), name.size());
    mix_tensor(t);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Mean-squared validation error in eval mode; touches no state.
inline double eval_mse(Model& m, const WindowBatch& set,
                       std::size_t batch_size) {
  if (set.size() == 0) throw DataError("evaluation split is empty");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t at = 0; at < set.size(); at += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = at; i < std::min(set.size(), at + batch_size); ++i) {
      idx.push_back(i);
    }
    WindowBatch b = set.gather(idx);
    Tensor pred = model_forward(nullptr, b, m, Mode::eval);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = pred.values()[i] - b.targets.values()[i];
      total += d * d;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

struct EpochLog {
  std::size_t epoch;
  double train_loss;
  double val_loss;
};

// Seeded shuffle, minibatch steps, per-epoch validation, best-checkpoint
// retention and optional early stopping. The RNG stream (shuffles and
// dropout draws, in order) is serialized so a resumed run replays the
// uninterrupted one exactly.
inline Checkpoint train(Model& model, const WindowBatch& train_set,
                        const WindowBatch& val_set, const TrainConfig& tc,
                        const NormStats& stats,
                        const std::string& data_fingerprint = "",
                        const Checkpoint* resume = nullptr,
                        std::vector<EpochLog>* log = nullptr) {
  tc.validate();
  if (train_set.size() == 0 || val_set.size() == 0) {
    throw DataError("training needs non-empty train and validation splits");
  }

  Optimizer opt = Optimizer::from_config(tc);
  Rng rng(tc.seed ^ 0x74726169ull);
  std::vector<double> train_history, val_history;
  std::vector<std::pair<std::string, std::vector<double>>> best_arrays;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t epoch_start = 0;
  std::uint64_t steps = 0;

  if (resume) {
    apply_model_arrays(model, *resume, "");
    opt.import_arrays(model.store, resume->arrays, resume->steps_done);
    rng.set_state(resume->rng_state);
    train_history = resume->train_history;
    val_history = resume->val_history;
    best_val = resume->best_val_loss;
    best_epoch = resume->best_epoch;
    epoch_start = resume->epochs_done;
    steps = resume->steps_done;
    for (const auto& [name, values] : resume->arrays) {
      if (name.rfind("best.", 0) == 0) best_arrays.emplace_back(name, values);
    }
  }

  std::vector<std::size_t> order(train_set.size());

  bool budget_exhausted = tc.max_steps > 0 && steps >= tc.max_steps;
  std::size_t epoch = epoch_start;
  for (; epoch < tc.epochs && !budget_exhausted; ++epoch) {
    // each epoch's order is a pure function of the rng state, so a resumed
    // run shuffles identically to the uninterrupted one
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_elems = 0;
    for (std::size_t at = 0; at < order.size(); at += tc.batch_size) {
      std::vector<std::size_t> idx(
          order.begin() + static_cast<std::ptrdiff_t>(at),
          order.begin() + static_cast<std::ptrdiff_t>(
                              std::min(order.size(), at + tc.batch_size)));
      WindowBatch batch = train_set.gather(idx);

      model.store.zero_grad();
      Tape tape;
      Tensor pred = model_forward(&tape, batch, model, Mode::train, &rng);
      Tensor loss = mse_loss(&tape, pred, batch.targets);
      const double loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        throw DivergenceError(
            "training diverged: non-finite loss at epoch " +
            std::to_string(epoch + 1) + ", batch starting at sample " +
            std::to_string(at));
      }
      tape.backward(loss);
      clip_grad_norm(model.store, tc.clip_norm);
      opt.step(model.store);
      ++steps;
      epoch_loss += loss_value * static_cast<double>(pred.size());
      epoch_elems += pred.size();
      if (tc.max_steps > 0 && steps >= tc.max_steps) {
        budget_exhausted = true;
        break;
      }
    }

    const double train_loss =
        epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_elems));
    const double val_loss = eval_mse(model, val_set, tc.batch_size);
    train_history.push_back(train_loss);
    val_history.push_back(val_loss);
    if (log) log->push_back({epoch + 1, train_loss, val_loss});

    if (val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch + 1;
      best_arrays.clear();
      capture_model_arrays(model, "best.", best_arrays);
    }
    if (tc.patience > 0 && epoch + 1 >= best_epoch + tc.patience) {
      ++epoch;
      break;
    }
  }

  Checkpoint c;
  c.model_config = model.config;
  c.train_config = tc;
  c.variant = model.variant;
  c.epochs_done = epoch;
  c.steps_done = steps;
  c.best_val_loss = best_val;
  c.best_epoch = best_epoch;
  c.rng_state = rng.state();
  c.stats = stats;
  c.data_fingerprint = data_fingerprint;
  c.train_history = std::move(train_history);
  c.val_history = std::move(val_history);
  capture_model_arrays(model, "", c.arrays);
  opt.export_arrays(model.store, c.arrays);
  for (auto& a : best_arrays) c.arrays.push_back(std::move(a));
  return c;
}

inline void write_history_csv(const std::string& path, const Checkpoint& c) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write loss history '" + path + "'");
  out << "epoch,train_loss,val_loss\n";
  char buf[96];
  for (std::size_t i = 0; i < c.train_history.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", i + 1,
                  c.train_history[i], c.val_history[i]);
    out << buf;
  }
}

}  // namespace flowcast
