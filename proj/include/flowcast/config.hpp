#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcast/cnn.hpp"
#include "flowcast/error.hpp"

namespace flowcast {

inline constexpr const char* kToolVersion = "1.0.0";

enum class OutputMode { regression, classification };

enum class Variant { full, no_feature, no_temporal, no_prediction };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_feature: return "F";
    case Variant::no_temporal: return "T";
    case Variant::no_prediction: return "P";
  }
  return "full";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "F" || s == "f" || s == "no_feature") return Variant::no_feature;
  if (s == "T" || s == "t" || s == "no_temporal") return Variant::no_temporal;
  if (s == "P" || s == "p" || s == "no_prediction") {
    return Variant::no_prediction;
  }
  throw ConfigError("unknown variant '" + s + "' (expected full, F, T or P)");
}

// Architecture hyperparameters. The defaults reproduce the published
// module ledger: conv channels 16/32/64/128/128/128 (first kernel 5, then
// 3) each pooled 2/1, GRU-SKIP widths 128 and 64, d_model 128 with 8
// heads, 6 encoder and 6 decoder layers, prediction head 32 -> 1.
struct ModelConfig {
  // windowing
  std::size_t window_len = 288;  // the present day, in 5-minute slots
  std::size_t horizon_steps = 1;
  std::size_t skip_step = 288;  // j: one day between periodic samples
  std::size_t n_periods = 7;    // n: one week of daily skips
  bool use_occupancy = false;
  bool use_speed = false;
  // feature extraction
  std::vector<ConvBlockSpec> extractor = default_extractor_specs();
  // long-term module
  std::size_t gru1_width = 128;
  std::size_t gru2_width = 64;
  std::size_t gru_layer_skip = 2;  // ring-buffer skip inside the layers
  double dropout = 0.2;
  // transformer
  std::size_t d_model = 128;
  std::size_t heads = 8;
  std::size_t encoder_layers = 6;
  std::size_t decoder_layers = 6;
  std::size_t ff_width = 256;
  // prediction head
  std::size_t head_hidden = 32;
  OutputMode output_mode = OutputMode::regression;
  std::size_t n_classes = 3;

  std::size_t input_channels() const {
    return 1 + (use_occupancy ? 1 : 0) + (use_speed ? 1 : 0);
  }

  std::size_t output_width() const {
    return output_mode == OutputMode::regression ? horizon_steps : n_classes;
  }

  void validate() const {
    std::vector<std::string> errors;
    auto positive = [&](std::size_t v, const char* name) {
      if (v == 0) errors.push_back(std::string(name) + " must be positive");
    };
    positive(window_len, "window_len");
    positive(horizon_steps, "horizon_steps");
    positive(skip_step, "skip_step");
    positive(n_periods, "n_periods");
    positive(gru1_width, "gru1_width");
    positive(gru2_width, "gru2_width");
    positive(gru_layer_skip, "gru_layer_skip");
    positive(d_model, "d_model");
    positive(heads, "heads");
    positive(ff_width, "ff_width");
    positive(head_hidden, "head_hidden");
    if (extractor.empty()) errors.push_back("extractor has no blocks");
    for (std::size_t i = 0; i < extractor.size(); ++i) {
      try {
        extractor[i].validate();
      } catch (const ConfigError& e) {
        errors.push_back("extractor block " + std::to_string(i) + ": " +
                         e.what());
      }
    }
    if (heads != 0 && d_model % heads != 0) {
      errors.push_back("d_model " + std::to_string(d_model) +
                       " not divisible by heads " + std::to_string(heads));
    }
    if (d_model < 2) errors.push_back("d_model must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) {
      errors.push_back("dropout must lie in [0, 1)");
    }
    if (output_mode == OutputMode::classification && n_classes < 2) {
      errors.push_back("classification needs n_classes >= 2");
    }
    if (!errors.empty()) {
      std::string msg = "invalid model config:";
      for (const std::string& e : errors) msg += "\n  - " + e;
      throw ConfigError(msg);
    }
  }
};

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 500;
  double learning_rate = 0.001;
  std::string optimizer = "adam";  // sgd | momentum | adam
  std::size_t patience = 20;       // epochs without val improvement; 0 = off
  double clip_norm = 5.0;          // global-norm gradient clip; 0 = off
  std::size_t max_steps = 0;       // optimizer-step budget; 0 = unlimited
  std::uint64_t seed = 42;

  void validate() const {
    std::vector<std::string> errors;
    if (batch_size < 2) {
      errors.push_back("batch_size must be >= 2 (batch statistics)");
    }
    if (epochs == 0) errors.push_back("epochs must be positive");
    if (!(learning_rate > 0.0)) {
      errors.push_back("learning_rate must be positive");
    }
    if (optimizer != "sgd" && optimizer != "momentum" && optimizer != "adam") {
      errors.push_back("optimizer '" + optimizer +
                       "' not one of sgd, momentum, adam");
    }
    if (clip_norm < 0.0) errors.push_back("clip_norm must be >= 0");
    if (!errors.empty()) {
      std::string msg = "invalid train config:";
      for (const std::string& e : errors) msg += "\n  - " + e;
      throw ConfigError(msg);
    }
  }
};

// ---------------------------------------------------------------------------
// JSON serialization (checkpoints, manifests)
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["window_len"] = c.window_len;
  j["horizon_steps"] = c.horizon_steps;
  j["skip_step"] = c.skip_step;
  j["n_periods"] = c.n_periods;
  j["use_occupancy"] = c.use_occupancy;
  j["use_speed"] = c.use_speed;
  nlohmann::json blocks = nlohmann::json::array();
  for (const ConvBlockSpec& b : c.extractor) {
    blocks.push_back({{"out_channels", b.out_channels},
                      {"kernel", b.kernel},
                      {"pool_window", b.pool_window},
                      {"pool_stride", b.pool_stride}});
  }
  j["extractor"] = blocks;
  j["gru1_width"] = c.gru1_width;
  j["gru2_width"] = c.gru2_width;
  j["gru_layer_skip"] = c.gru_layer_skip;
  j["dropout"] = c.dropout;
  j["d_model"] = c.d_model;
  j["heads"] = c.heads;
  j["encoder_layers"] = c.encoder_layers;
  j["decoder_layers"] = c.decoder_layers;
  j["ff_width"] = c.ff_width;
  j["head_hidden"] = c.head_hidden;
  j["output_mode"] =
      c.output_mode == OutputMode::regression ? "regression" : "classification";
  j["n_classes"] = c.n_classes;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.window_len = j.at("window_len").get<std::size_t>();
  c.horizon_steps = j.at("horizon_steps").get<std::size_t>();
  c.skip_step = j.at("skip_step").get<std::size_t>();
  c.n_periods = j.at("n_periods").get<std::size_t>();
  c.use_occupancy = j.at("use_occupancy").get<bool>();
  c.use_speed = j.at("use_speed").get<bool>();
  c.extractor.clear();
  for (const auto& b : j.at("extractor")) {
    c.extractor.push_back({b.at("out_channels").get<std::size_t>(),
                           b.at("kernel").get<std::size_t>(),
                           b.at("pool_window").get<std::size_t>(),
                           b.at("pool_stride").get<std::size_t>()});
  }
  c.gru1_width = j.at("gru1_width").get<std::size_t>();
  c.gru2_width = j.at("gru2_width").get<std::size_t>();
  c.gru_layer_skip = j.at("gru_layer_skip").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
  c.decoder_layers = j.at("decoder_layers").get<std::size_t>();
  c.ff_width = j.at("ff_width").get<std::size_t>();
  c.head_hidden = j.at("head_hidden").get<std::size_t>();
  c.output_mode = j.at("output_mode").get<std::string>() == "classification"
                      ? OutputMode::classification
                      : OutputMode::regression;
  c.n_classes = j.at("n_classes").get<std::size_t>();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["learning_rate"] = c.learning_rate;
  j["optimizer"] = c.optimizer;
  j["patience"] = c.patience;
  j["clip_norm"] = c.clip_norm;
  j["max_steps"] = c.max_steps;
  j["seed"] = c.seed;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.optimizer = j.at("optimizer").get<std::string>();
  c.patience = j.at("patience").get<std::size_t>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.max_steps = j.at("max_steps").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// ---------------------------------------------------------------------------
// Flat key = value config files
// ---------------------------------------------------------------------------

struct Configs {
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::size_t> parse_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(static_cast<std::size_t>(std::stoull(trim(item))));
  }
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean");
}

}  // namespace detail

// Every key is optional; omitted keys keep the published defaults. Unknown
// keys and unparseable values are all reported together.
inline Configs parse_config_text(std::istream& in,
                                 const std::string& origin = "<config>") {
  Configs cfg;
  std::vector<std::string> errors;
  std::vector<std::size_t> conv_channels, conv_kernels;
  bool have_channels = false, have_kernels = false;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(line_no) +
                       ": expected key = value");
      continue;
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));

    try {
      auto u = [&] { return static_cast<std::size_t>(std::stoull(value)); };
      auto d = [&] { return std::stod(value); };
      ModelConfig& m = cfg.model;
      TrainConfig& t = cfg.train;
      if (key == "window_len") m.window_len = u();
      else if (key == "horizon_steps") m.horizon_steps = u();
      else if (key == "horizon_minutes") {
        const std::size_t mins = u();
        if (mins == 0 || mins % 5 != 0) {
          throw std::invalid_argument("must be a positive multiple of 5");
        }
        m.horizon_steps = mins / 5;
      }
      else if (key == "skip_step") m.skip_step = u();
      else if (key == "n_periods") m.n_periods = u();
      else if (key == "use_occupancy") m.use_occupancy = detail::parse_bool(value);
      else if (key == "use_speed") m.use_speed = detail::parse_bool(value);
      else if (key == "conv_channels") {
        conv_channels = detail::parse_size_list(value);
        have_channels = true;
      }
      else if (key == "conv_kernels") {
        conv_kernels = detail::parse_size_list(value);
        have_kernels = true;
      }
      else if (key == "pool_window") {
        for (auto& b : cfg.model.extractor) b.pool_window = u();
      }
      else if (key == "pool_stride") {
        for (auto& b : cfg.model.extractor) b.pool_stride = u();
      }
      else if (key == "gru1_width") m.gru1_width = u();
      else if (key == "gru2_width") m.gru2_width = u();
      else if (key == "gru_layer_skip") m.gru_layer_skip = u();
      else if (key == "dropout") m.dropout = d();
      else if (key == "d_model") m.d_model = u();
      else if (key == "heads") m.heads = u();
      else if (key == "encoder_layers") m.encoder_layers = u();
      else if (key == "decoder_layers") m.decoder_layers = u();
      else if (key == "ff_width") m.ff_width = u();
      else if (key == "head_hidden") m.head_hidden = u();
      else if (key == "output_mode") {
        if (value == "regression") m.output_mode = OutputMode::regression;
        else if (value == "classification") {
          m.output_mode = OutputMode::classification;
        } else {
          throw std::invalid_argument("expected regression or classification");
        }
      }
      else if (key == "n_classes") m.n_classes = u();
      else if (key == "batch_size") t.batch_size = u();
      else if (key == "epochs") t.epochs = u();
      else if (key == "learning_rate") t.learning_rate = d();
      else if (key == "optimizer") t.optimizer = value;
      else if (key == "patience") t.patience = u();
      else if (key == "clip_norm") t.clip_norm = d();
      else if (key == "max_steps") t.max_steps = u();
      else if (key == "seed") t.seed = std::stoull(value);
      else {
        errors.push_back("line " + std::to_string(line_no) +
                         ": unknown key '" + key + "'");
      }
    } catch (const std::exception& e) {
      errors.push_back("line " + std::to_string(line_no) + ": bad value for '" +
                       key + "': " + e.what());
    }
  }

  if (have_channels || have_kernels) {
    if (!have_channels) {
      conv_channels.assign(conv_kernels.size(), 0);
      for (std::size_t i = 0; i < cfg.model.extractor.size() &&
                              i < conv_channels.size();
           ++i) {
        conv_channels[i] = cfg.model.extractor[i].out_channels;
      }
    }
    if (!have_kernels) {
      conv_kernels.assign(conv_channels.size(), 3);
      if (!conv_kernels.empty()) conv_kernels[0] = 5;
    }
    if (conv_channels.size() != conv_kernels.size()) {
      errors.push_back("conv_channels lists " +
                       std::to_string(conv_channels.size()) +
                       " blocks but conv_kernels lists " +
                       std::to_string(conv_kernels.size()));
    } else {
      const std::size_t pw = cfg.model.extractor.empty()
                                 ? 2
                                 : cfg.model.extractor[0].pool_window;
      const std::size_t ps = cfg.model.extractor.empty()
                                 ? 1
                                 : cfg.model.extractor[0].pool_stride;
      cfg.model.extractor.clear();
      for (std::size_t i = 0; i < conv_channels.size(); ++i) {
        cfg.model.extractor.push_back({conv_channels[i], conv_kernels[i], pw,
                                       ps});
      }
    }
  }

  if (!errors.empty()) {
    std::string msg = origin + ": configuration errors:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

inline Configs parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config_text(in, path);
}

}  // namespace flowcast
