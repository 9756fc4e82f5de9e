#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcast/data.hpp"
#include "flowcast/train.hpp"

namespace flowcast {

// ---------------------------------------------------------------------------
// Point metrics
// ---------------------------------------------------------------------------

inline double rmse(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw ShapeError("rmse: length mismatch " + std::to_string(y.size()) +
                     " vs " + std::to_string(y_hat.size()));
  }
  if (y.empty()) throw DataError("rmse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - y_hat[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(y.size()));
}

inline double mae(std::span<const double> y, std::span<const double> y_hat) {
  if (y.size() != y_hat.size()) {
    throw ShapeError("mae: length mismatch " + std::to_string(y.size()) +
                     " vs " + std::to_string(y_hat.size()));
  }
  if (y.empty()) throw DataError("mae: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

// Root mean of squared absolute errors over a 2-D prediction field; equal
// by construction to the rmse of the flattened field.
inline double mase_like(const Tensor& y, const Tensor& y_hat) {
  if (y.rank() != 2 || y.shape() != y_hat.shape()) {
    throw ShapeError("mase_like: expected matching 2-D fields, got " +
                     shape_str(y.shape()) + " vs " + shape_str(y_hat.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = std::abs(y.values()[i] - y_hat.values()[i]);
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(y.size()));
}

// ---------------------------------------------------------------------------
// Historical-Average baseline
// ---------------------------------------------------------------------------

// Predicts the mean of the same weekly 5-minute slot over the training
// weeks, per sensor. Weekly period = 2016 slots.
struct HaModel {
  std::size_t period = kSlotsPerWeek;
  std::map<int, std::vector<double>> slot_means;  // sensor -> per-slot mean

  double predict(int sensor_id, std::int64_t timestamp) const {
    auto it = slot_means.find(sensor_id);
    if (it == slot_means.end()) {
      throw DataError("historical average: unknown sensor " +
                      std::to_string(sensor_id));
    }
    const std::size_t slot = static_cast<std::size_t>(
        ((timestamp / kStepSeconds) % static_cast<std::int64_t>(period) +
         static_cast<std::int64_t>(period)) %
        static_cast<std::int64_t>(period));
    return it->second[slot];
  }
};

inline HaModel ha_fit(const std::vector<TrafficSeries>& train) {
  HaModel model;
  for (const TrafficSeries& s : train) {
    if (s.size() < kSlotsPerWeek) {
      throw DataError("historical average: sensor " +
                      std::to_string(s.sensor_id) + " has " +
                      std::to_string(s.size()) +
                      " points; a full week (2016) is required");
    }
    std::vector<double> sums(model.period, 0.0);
    std::vector<std::size_t> counts(model.period, 0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::size_t slot = static_cast<std::size_t>(
          (s.timestamps[i] / kStepSeconds) %
          static_cast<std::int64_t>(model.period));
      sums[slot] += s.flow[i];
      ++counts[slot];
    }
    std::vector<double> means(model.period, 0.0);
    for (std::size_t k = 0; k < model.period; ++k) {
      if (counts[k] == 0) {
        throw DataError("historical average: sensor " +
                        std::to_string(s.sensor_id) +
                        " never observes weekly slot " + std::to_string(k));
      }
      means[k] = sums[k] / static_cast<double>(counts[k]);
    }
    model.slot_means[s.sensor_id] = std::move(means);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricRow {
  int horizon_minutes = 0;
  double rmse = 0, mae = 0, mase_like = 0;
  std::size_t n = 0;
};

struct MetricsReport {
  std::string model;    // "full", "F", "T", "P", "ha"
  std::string split;    // "train" | "val" | "test"
  std::vector<MetricRow> rows;
};

struct PredictionRow {
  std::int64_t timestamp = 0;  // time the predicted value refers to
  int sensor_id = 0;
  int horizon_minutes = 0;
  double y_true = 0, y_pred = 0;
};

inline void write_report_csv(const std::string& path,
                             const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report '" + path + "'");
  out << "variant,split,horizon_minutes,rmse,mae,mase_like,n\n";
  char buf[160];
  for (const MetricRow& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.17g,%.17g,%.17g,%zu\n",
                  report.model.c_str(), report.split.c_str(),
                  r.horizon_minutes, r.rmse, r.mae, r.mase_like, r.n);
    out << buf;
  }
}

inline nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const MetricRow& r : report.rows) {
    rows.push_back({{"horizon_minutes", r.horizon_minutes},
                    {"rmse", r.rmse},
                    {"mae", r.mae},
                    {"mase_like", r.mase_like},
                    {"n", r.n}});
  }
  return {{"variant", report.model}, {"split", report.split}, {"rows", rows}};
}

inline void write_report_json(const std::string& path,
                              const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report '" + path + "'");
  out << report_to_json(report).dump(2) << "\n";
}

inline void write_predictions_csv(const std::string& path,
                                  const std::vector<PredictionRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write predictions '" + path + "'");
  out << "timestamp,sensor_id,horizon,y_true,y_pred\n";
  char buf[160];
  for (const PredictionRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.17g,%.17g\n",
                  format_timestamp(r.timestamp).c_str(), r.sensor_id,
                  r.horizon_minutes, r.y_true, r.y_pred);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Dataset preparation shared by train / eval / ablate
// ---------------------------------------------------------------------------

struct PreparedData {
  NormStats stats;
  WindowBatch train, val, test;  // normalized inputs and targets
  WindowBatch test_raw;          // same samples with raw-unit values
  std::vector<TrafficSeries> raw_train;  // for baselines
  std::string fingerprint;
};

inline WindowSpec window_spec_of(const ModelConfig& c) {
  WindowSpec spec;
  spec.window_len = c.window_len;
  spec.horizon_minutes = static_cast<int>(c.horizon_steps) * 5;
  spec.skip_step = c.skip_step;
  spec.n_periods = c.n_periods;
  spec.use_occupancy = c.use_occupancy;
  spec.use_speed = c.use_speed;
  return spec;
}

// Chronological split, train-only normalizer fit (unless a frozen one is
// supplied), windowing of all three splits.
inline PreparedData prepare_data(const std::vector<TrafficSeries>& raw,
                                 const ModelConfig& config,
                                 const std::optional<NormStats>& frozen = {},
                                 const std::string& fingerprint = "") {
  DataSplit split = chronological_split(raw);
  PreparedData out;
  out.stats = frozen ? *frozen
                     : fit_normalizer(split.train, config.use_occupancy,
                                      config.use_speed);
  const WindowSpec spec = window_spec_of(config);
  out.train = make_windows(normalize(split.train, out.stats), spec);
  out.val = make_windows(normalize(split.val, out.stats), spec);
  out.test = make_windows(normalize(split.test, out.stats), spec);
  out.test_raw = make_windows(split.test, spec);
  out.raw_train = split.train;
  out.fingerprint = fingerprint;
  return out;
}

// ---------------------------------------------------------------------------
// Multi-horizon evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline MetricRow metric_row(int horizon, const std::vector<double>& y,
                            const std::vector<double>& y_hat,
                            std::size_t n_sensors) {
  MetricRow row;
  row.horizon_minutes = horizon;
  row.rmse = rmse(y, y_hat);
  row.mae = mae(y, y_hat);
  // the 2-D field: one row per sensor when the samples divide evenly,
  // otherwise a single pooled row
  const std::size_t rows =
      (n_sensors > 0 && y.size() % n_sensors == 0) ? n_sensors : 1;
  Tensor yt = Tensor::from({rows, y.size() / rows},
                           std::vector<double>(y.begin(), y.end()));
  Tensor pt = Tensor::from({rows, y.size() / rows},
                           std::vector<double>(y_hat.begin(), y_hat.end()));
  row.mase_like = mase_like(yt, pt);
  row.n = y.size();
  return row;
}

inline std::size_t count_sensors(const WindowBatch& b) {
  std::vector<int> ids = b.sensor_ids;
  std::sort(ids.begin(), ids.end());
  return static_cast<std::size_t>(
      std::unique(ids.begin(), ids.end()) - ids.begin());
}

}  // namespace detail

inline void check_horizons(const std::vector<int>& horizons,
                           std::size_t horizon_steps) {
  if (horizons.empty()) throw ConfigError("no horizons requested");
  for (int m : horizons) {
    const std::size_t steps = horizon_steps_of(m);
    if (steps > horizon_steps) {
      throw ConfigError(
          "horizon " + std::to_string(m) + " min needs " +
          std::to_string(steps) + " steps but the model predicts " +
          std::to_string(horizon_steps));
    }
  }
}

// Runs the model over the normalized test windows, denormalizes, and
// reports one row per requested horizon. Predictions and truths are
// pooled over sensors.
inline MetricsReport evaluate_model(
    Model& model, const WindowBatch& test_norm, const NormStats& stats,
    std::vector<int> horizons, std::size_t batch_size = 64,
    std::vector<PredictionRow>* dump = nullptr,
    const std::string& split_name = "test") {
  if (test_norm.size() == 0) throw DataError("evaluation split is empty");
  std::sort(horizons.begin(), horizons.end());
  check_horizons(horizons, model.config.horizon_steps);

  const std::size_t n = test_norm.size();
  const std::size_t h_model = model.config.horizon_steps;
  std::vector<double> pred(n * h_model), truth(n * h_model);
  for (std::size_t at = 0; at < n; at += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = at; i < std::min(n, at + batch_size); ++i) {
      idx.push_back(i);
    }
    WindowBatch b = test_norm.gather(idx);
    Tensor out = model_forward(nullptr, b, model, Mode::eval);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t k = 0; k < h_model; ++k) {
        pred[(at + r) * h_model + k] = denormalize_flow(out(r, k), stats);
        truth[(at + r) * h_model + k] =
            denormalize_flow(b.targets(r, k), stats);
      }
    }
  }

  MetricsReport report;
  report.model = variant_name(model.variant);
  report.split = split_name;
  const std::size_t n_sensors = detail::count_sensors(test_norm);
  for (int m : horizons) {
    const std::size_t col = horizon_steps_of(m) - 1;
    std::vector<double> y(n), y_hat(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = truth[i * h_model + col];
      y_hat[i] = pred[i * h_model + col];
      if (dump) {
        dump->push_back({test_norm.target_ts[i] +
                             static_cast<std::int64_t>(col) * kStepSeconds,
                         test_norm.sensor_ids[i], m, y[i], y_hat[i]});
      }
    }
    report.rows.push_back(detail::metric_row(m, y, y_hat, n_sensors));
  }
  return report;
}

// Same samples and horizons but predicted by the weekly-slot mean. Raw
// windows in, raw units out.
inline MetricsReport evaluate_ha(const HaModel& ha,
                                 const WindowBatch& test_raw,
                                 std::vector<int> horizons,
                                 const std::string& split_name = "test") {
  if (test_raw.size() == 0) throw DataError("evaluation split is empty");
  std::sort(horizons.begin(), horizons.end());
  check_horizons(horizons, test_raw.horizon_steps());
  MetricsReport report;
  report.model = "ha";
  report.split = split_name;
  const std::size_t n = test_raw.size();
  const std::size_t n_sensors = detail::count_sensors(test_raw);
  for (int m : horizons) {
    const std::size_t col = horizon_steps_of(m) - 1;
    std::vector<double> y(n), y_hat(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::int64_t ts = test_raw.target_ts[i] +
                              static_cast<std::int64_t>(col) * kStepSeconds;
      y[i] = test_raw.targets(i, col);
      y_hat[i] = ha.predict(test_raw.sensor_ids[i], ts);
    }
    report.rows.push_back(detail::metric_row(m, y, y_hat, n_sensors));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

struct AblationResult {
  std::vector<MetricsReport> reports;           // one per variant
  std::vector<Checkpoint> checkpoints;          // parallel to reports
};

// Trains every requested variant with the identical seed, data and
// schedule, then evaluates each on the test split.
inline AblationResult ablation_run(
    const ModelConfig& config, const TrainConfig& tc, const PreparedData& data,
    const std::vector<std::string>& variants = {"full", "F", "T", "P"},
    const std::vector<int>& horizons = {10},
    std::vector<EpochLog>* log = nullptr) {
  AblationResult result;
  for (const std::string& name : variants) {
    Model model = build_variant(config, name, tc.seed);
    Checkpoint ckpt = train(model, data.train, data.val, tc, data.stats,
                            data.fingerprint, nullptr, log);
    Model best = model_from_checkpoint(ckpt);
    result.reports.push_back(
        evaluate_model(best, data.test, data.stats, horizons, tc.batch_size));
    result.checkpoints.push_back(std::move(ckpt));
  }
  return result;
}

// Per-variant deltas against the first ("full") report, mirroring the
// published component-comparison table layout.
inline void write_ablation_csv(const std::string& path,
                               const AblationResult& result) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write ablation table '" + path + "'");
  out << "variant,horizon_minutes,rmse,mae,delta_rmse_vs_full,"
         "delta_mae_vs_full\n";
  if (result.reports.empty()) return;
  const MetricsReport& full = result.reports.front();
  char buf[200];
  for (const MetricsReport& rep : result.reports) {
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
      const MetricRow& r = rep.rows[i];
      const MetricRow& base = full.rows[i];
      std::snprintf(buf, sizeof(buf), "%s,%d,%.17g,%.17g,%.17g,%.17g\n",
                    rep.model.c_str(), r.horizon_minutes, r.rmse, r.mae,
                    r.rmse - base.rmse, r.mae - base.mae);
      out << buf;
    }
  }
}

}  // namespace flowcast
