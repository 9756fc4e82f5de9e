// flowcast: traffic-flow forecasting pipeline.
//
// Subcommands: synth, train, eval, predict, ablate, inspect. Exit codes:
// 0 success, 1 usage/validation, 2 data error, 3 runtime/divergence.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowcast/config.hpp"
#include "flowcast/data.hpp"
#include "flowcast/metrics.hpp"
#include "flowcast/model.hpp"
#include "flowcast/train.hpp"

namespace fs = std::filesystem;
using namespace flowcast;

namespace {

void ensure_writable(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) {
    throw ConfigError("refusing to overwrite existing '" + p.string() +
                      "' (pass --force to allow)");
  }
}

void ensure_out_dir(const fs::path& dir, bool force,
                    const std::vector<std::string>& names) {
  if (!dir.empty() && !fs::exists(dir)) fs::create_directories(dir);
  for (const std::string& n : names) ensure_writable(dir / n, force);
}

std::vector<int> parse_horizons(const std::string& spec) {
  std::vector<int> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad horizon '" + item + "' in '" + spec + "'");
    }
  }
  if (out.empty()) throw ConfigError("no horizons given");
  for (int m : out) horizon_steps_of(m);  // validates multiples of 5
  return out;
}

nlohmann::json manifest_base(const std::string& command) {
  nlohmann::json j;
  j["tool_version"] = kToolVersion;
  j["command"] = command;
  j["created_at"] = format_timestamp(static_cast<std::int64_t>(
      std::time(nullptr)));  // the only non-reproducible field
  return j;
}

void write_manifest(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

void print_stats_table(const std::vector<ColumnStats>& stats) {
  std::printf("%-12s %10s %12s %12s %10s %10s %10s %10s %10s\n", "column",
              "count", "mean", "std", "min", "25%", "50%", "75%", "max");
  for (const ColumnStats& c : stats) {
    std::printf("%-12s %10zu %12.2f %12.2f %10.2f %10.2f %10.2f %10.2f "
                "%10.2f\n",
                c.name.c_str(), c.count, c.mean, c.stddev, c.min, c.p25, c.p50,
                c.p75, c.max);
  }
}

void print_report(const MetricsReport& rep) {
  std::printf("%-8s %-6s %10s %12s %12s %12s %8s\n", "variant", "split",
              "horizon", "rmse", "mae", "mase_like", "n");
  for (const MetricRow& r : rep.rows) {
    std::printf("%-8s %-6s %7d min %12.4f %12.4f %12.4f %8zu\n",
                rep.model.c_str(), rep.split.c_str(), r.horizon_minutes,
                r.rmse, r.mae, r.mase_like, r.n);
  }
}

struct TrainCli {
  std::string data_path;
  std::string config_path;
  std::string out_dir;
  std::string variant = "full";
  std::string resume_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> max_steps;
  bool force = false;
  bool quiet = false;
};

int cmd_train(const TrainCli& cli) {
  Configs cfg;
  if (!cli.config_path.empty()) cfg = parse_config_file(cli.config_path);
  std::optional<Checkpoint> resume;
  if (!cli.resume_path.empty()) {
    resume = load_checkpoint(cli.resume_path);
    cfg.model = resume->model_config;
    cfg.train = resume->train_config;
  }
  if (cli.seed) cfg.train.seed = *cli.seed;
  if (cli.epochs) cfg.train.epochs = *cli.epochs;
  if (cli.max_steps) cfg.train.max_steps = *cli.max_steps;
  cfg.model.validate();
  cfg.train.validate();

  const fs::path out(cli.out_dir);
  ensure_out_dir(out, cli.force,
                 {"checkpoint.fckpt", "history.csv", "manifest.json"});

  LoadResult loaded = load_csv(cli.data_path);
  const std::string fingerprint = file_fingerprint(cli.data_path);
  std::optional<NormStats> frozen;
  if (resume) {
    if (resume->data_fingerprint != fingerprint) {
      throw DataError("resume checkpoint was trained on data with "
                      "fingerprint " +
                      resume->data_fingerprint + " but '" + cli.data_path +
                      "' has " + fingerprint);
    }
    frozen = resume->stats;
  }
  PreparedData data = prepare_data(loaded.series, cfg.model, frozen,
                                   fingerprint);

  const Variant variant =
      resume ? resume->variant : variant_from_string(cli.variant);
  Model model = build_model(cfg.model, variant, cfg.train.seed);
  if (!cli.quiet) {
    std::printf("training variant %s: %zu parameters, %zu train / %zu val "
                "windows\n",
                variant_name(variant).c_str(), model.store.param_count(),
                data.train.size(), data.val.size());
  }

  std::vector<EpochLog> log;
  Checkpoint ckpt = train(model, data.train, data.val, cfg.train, data.stats,
                          fingerprint, resume ? &*resume : nullptr, &log);
  if (!cli.quiet) {
    for (const EpochLog& e : log) {
      std::printf("epoch %4zu  train %.6f  val %.6f\n", e.epoch, e.train_loss,
                  e.val_loss);
    }
    std::printf("best val %.6f at epoch %zu after %llu steps\n",
                ckpt.best_val_loss, ckpt.best_epoch,
                static_cast<unsigned long long>(ckpt.steps_done));
  }

  save_checkpoint(ckpt, (out / "checkpoint.fckpt").string());
  write_history_csv((out / "history.csv").string(), ckpt);

  nlohmann::json man = manifest_base("train");
  man["seed"] = cfg.train.seed;
  man["variant"] = variant_name(variant);
  man["data"] = cli.data_path;
  man["data_fingerprint"] = fingerprint;
  man["model_config"] = to_json(cfg.model);
  man["train_config"] = to_json(cfg.train);
  man["artifacts"] = {{"checkpoint", (out / "checkpoint.fckpt").string()},
                      {"history", (out / "history.csv").string()}};
  write_manifest(out / "manifest.json", man);
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& horizons_spec, const std::string& out_dir,
             const std::string& split_name, bool force) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const std::vector<int> horizons = parse_horizons(horizons_spec);
  check_horizons(horizons, ckpt.model_config.horizon_steps);

  const fs::path out(out_dir);
  ensure_out_dir(out, force, {"report.csv", "report.json", "predictions.csv",
                              "manifest.json"});

  LoadResult loaded = load_csv(data_path);
  PreparedData data =
      prepare_data(loaded.series, ckpt.model_config, ckpt.stats,
                   file_fingerprint(data_path));
  const WindowBatch& split = split_name == "val"
                                 ? data.val
                                 : (split_name == "train" ? data.train
                                                          : data.test);

  Model model = model_from_checkpoint(ckpt);
  std::vector<PredictionRow> dump;
  MetricsReport rep =
      evaluate_model(model, split, ckpt.stats, horizons,
                     ckpt.train_config.batch_size, &dump, split_name);
  print_report(rep);

  write_report_csv((out / "report.csv").string(), rep);
  write_report_json((out / "report.json").string(), rep);
  write_predictions_csv((out / "predictions.csv").string(), dump);

  nlohmann::json man = manifest_base("eval");
  man["checkpoint"] = ckpt_path;
  man["data"] = data_path;
  man["data_fingerprint"] = data.fingerprint;
  man["split"] = split_name;
  man["horizons"] = horizons;
  man["model_config"] = to_json(ckpt.model_config);
  man["artifacts"] = {{"report_csv", (out / "report.csv").string()},
                      {"report_json", (out / "report.json").string()},
                      {"predictions", (out / "predictions.csv").string()}};
  write_manifest(out / "manifest.json", man);
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& data_path,
                const std::string& at_spec, int horizon,
                std::optional<int> sensor_filter, const std::string& out_path,
                bool force) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelConfig& mc = ckpt.model_config;
  const std::size_t steps = horizon_steps_of(horizon);
  check_horizons({horizon}, mc.horizon_steps);
  const std::int64_t origin = parse_timestamp(at_spec);

  LoadResult loaded = load_csv(data_path);
  Model model = model_from_checkpoint(ckpt);

  const std::size_t history_needed =
      std::max(mc.window_len, mc.skip_step * mc.n_periods);
  std::vector<PredictionRow> rows;
  bool matched_sensor = false;
  for (const TrafficSeries& raw : loaded.series) {
    if (sensor_filter && raw.sensor_id != *sensor_filter) continue;
    matched_sensor = true;
    const auto it = std::find(raw.timestamps.begin(), raw.timestamps.end(),
                              origin);
    if (it == raw.timestamps.end()) {
      throw DataError("sensor " + std::to_string(raw.sensor_id) +
                      ": no observation at " + format_timestamp(origin));
    }
    // T = first forecast step; the window and skip context end at `origin`
    const std::size_t t =
        static_cast<std::size_t>(it - raw.timestamps.begin()) + 1;
    if (t < history_needed + 1) {
      throw DataError(
          "sensor " + std::to_string(raw.sensor_id) + ": forecasting at " +
          format_timestamp(origin) + " needs max(window_len, j*n) = " +
          std::to_string(history_needed) + " past steps, have " +
          std::to_string(t - 1));
    }
    TrafficSeries normed = normalize(raw, ckpt.stats);
    WindowBatch b;
    b.horizon_minutes = horizon;
    b.inputs = Tensor::zeros({1, mc.input_channels(), mc.window_len});
    b.skip_context = Tensor::zeros({1, mc.n_periods});
    b.targets = Tensor::zeros({1, mc.horizon_steps});
    for (std::size_t w = 0; w < mc.window_len; ++w) {
      const std::size_t src = t - mc.window_len + w;
      b.inputs(0, 0, w) = normed.flow[src];
      std::size_t ch = 1;
      if (mc.use_occupancy) b.inputs(0, ch++, w) = normed.occupancy[src];
      if (mc.use_speed) b.inputs(0, ch++, w) = normed.speed[src];
    }
    for (std::size_t k = 0; k < mc.n_periods; ++k) {
      b.skip_context(0, k) = normed.flow[t - mc.skip_step * (mc.n_periods - k)];
    }
    b.sensor_ids.push_back(raw.sensor_id);
    b.target_ts.push_back(origin + kStepSeconds);

    Tensor pred = model_forward(nullptr, b, model, Mode::eval);
    const double value = denormalize_flow(pred(0, steps - 1), ckpt.stats);
    const std::int64_t target_time =
        origin + static_cast<std::int64_t>(steps) * kStepSeconds;
    double truth = std::numeric_limits<double>::quiet_NaN();
    const std::size_t truth_idx = t - 1 + steps;
    if (truth_idx < raw.size()) truth = raw.flow[truth_idx];
    rows.push_back({target_time, raw.sensor_id, horizon, truth, value});
    std::printf("sensor %d  %s +%d min -> %s  forecast %.3f", raw.sensor_id,
                format_timestamp(origin).c_str(), horizon,
                format_timestamp(target_time).c_str(), value);
    if (std::isfinite(truth)) std::printf("  (observed %.3f)", truth);
    std::printf("\n");
  }
  if (!matched_sensor) {
    throw DataError("no sensor matches the requested id");
  }
  if (!out_path.empty()) {
    ensure_writable(out_path, force);
    write_predictions_csv(out_path, rows);
  }
  return 0;
}

int cmd_ablate(const std::string& data_path, const std::string& config_path,
               const std::string& horizons_spec, const std::string& out_dir,
               std::optional<std::uint64_t> seed,
               std::optional<std::size_t> epochs,
               std::optional<std::size_t> max_steps, bool force) {
  Configs cfg;
  if (!config_path.empty()) cfg = parse_config_file(config_path);
  if (seed) cfg.train.seed = *seed;
  if (epochs) cfg.train.epochs = *epochs;
  if (max_steps) cfg.train.max_steps = *max_steps;
  const std::vector<int> horizons = parse_horizons(horizons_spec);
  check_horizons(horizons, cfg.model.horizon_steps);

  const fs::path out(out_dir);
  std::vector<std::string> artifacts{"ablation.csv", "manifest.json"};
  for (const char* v : {"full", "F", "T", "P"}) {
    artifacts.push_back(std::string("report_") + v + ".csv");
  }
  ensure_out_dir(out, force, artifacts);

  LoadResult loaded = load_csv(data_path);
  PreparedData data = prepare_data(loaded.series, cfg.model, {},
                                   file_fingerprint(data_path));

  AblationResult result =
      ablation_run(cfg.model, cfg.train, data, {"full", "F", "T", "P"},
                   horizons);
  for (const MetricsReport& rep : result.reports) {
    print_report(rep);
    write_report_csv((out / ("report_" + rep.model + ".csv")).string(), rep);
  }
  write_ablation_csv((out / "ablation.csv").string(), result);

  nlohmann::json man = manifest_base("ablate");
  man["seed"] = cfg.train.seed;
  man["data"] = data_path;
  man["data_fingerprint"] = data.fingerprint;
  man["horizons"] = horizons;
  man["model_config"] = to_json(cfg.model);
  man["train_config"] = to_json(cfg.train);
  man["artifacts"] = {{"ablation", (out / "ablation.csv").string()}};
  write_manifest(out / "manifest.json", man);
  return 0;
}

int cmd_inspect(const std::string& ckpt_path) {
  Checkpoint c = load_checkpoint(ckpt_path);
  std::size_t params = 0, arrays = 0;
  for (const auto& [name, v] : c.arrays) {
    ++arrays;
    if (name.rfind("param.", 0) == 0) params += v.size();
  }
  std::printf("checkpoint      %s\n", ckpt_path.c_str());
  std::printf("variant         %s\n", variant_name(c.variant).c_str());
  std::printf("epochs done     %zu (best val %.6f at epoch %zu)\n",
              c.epochs_done, c.best_val_loss, c.best_epoch);
  std::printf("optimizer steps %llu\n",
              static_cast<unsigned long long>(c.steps_done));
  std::printf("parameters      %zu (%zu named arrays)\n", params, arrays);
  std::printf("data            fingerprint %s\n", c.data_fingerprint.c_str());
  std::printf("norm channels  ");
  for (std::size_t i = 0; i < c.stats.channels.size(); ++i) {
    std::printf(" %s(mean %.3f, std %.3f)", c.stats.channels[i].c_str(),
                c.stats.mean[i], c.stats.stddev[i]);
  }
  std::printf("\nmodel config    %s\n", to_json(c.model_config).dump().c_str());
  std::printf("train config    %s\n", to_json(c.train_config).dump().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowcast: spatio-temporal traffic flow forecasting"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate synthetic traffic CSV");
  std::size_t days = 7, sensors = 1;
  std::uint64_t synth_seed = 42;
  std::string synth_out;
  bool synth_force = false;
  synth->add_option("--days", days, "days of data (288 rows each)");
  synth->add_option("--sensors", sensors, "number of sensors");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output CSV path")->required();
  synth->add_flag("--force", synth_force, "overwrite existing output");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model");
  TrainCli tc;
  std::uint64_t seed_arg = 0;
  std::size_t epochs_arg = 0, max_steps_arg = 0;
  train_cmd->add_option("--data", tc.data_path, "input CSV")->required();
  train_cmd->add_option("--config", tc.config_path, "key=value config file");
  train_cmd->add_option("--out", tc.out_dir, "output directory")->required();
  train_cmd->add_option("--variant", tc.variant,
                        "model variant: full, F, T or P");
  train_cmd->add_option("--resume", tc.resume_path,
                        "checkpoint to continue from");
  auto* seed_opt = train_cmd->add_option("--seed", seed_arg, "training seed");
  auto* epochs_opt =
      train_cmd->add_option("--epochs", epochs_arg, "epoch limit override");
  auto* steps_opt = train_cmd->add_option("--max-steps", max_steps_arg,
                                          "optimizer step budget override");
  train_cmd->add_flag("--force", tc.force, "overwrite existing outputs");
  train_cmd->add_flag("--quiet", tc.quiet, "suppress progress output");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_horizons = "10,20,30,40,50,60",
                          eval_out, eval_split = "test";
  bool eval_force = false;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")
      ->required();
  eval_cmd->add_option("--data", eval_data, "input CSV")->required();
  eval_cmd->add_option("--horizons", eval_horizons,
                       "comma-separated horizons in minutes");
  eval_cmd->add_option("--split", eval_split, "train, val or test");
  eval_cmd->add_option("--out", eval_out, "output directory")->required();
  eval_cmd->add_flag("--force", eval_force, "overwrite existing outputs");

  // predict
  auto* pred_cmd = app.add_subcommand("predict", "point forecast");
  std::string pred_ckpt, pred_data, pred_at, pred_out;
  int pred_horizon = 10;
  int pred_sensor = -1;
  bool pred_force = false;
  pred_cmd->add_option("--checkpoint", pred_ckpt, "checkpoint file")
      ->required();
  pred_cmd->add_option("--data", pred_data, "input CSV")->required();
  pred_cmd->add_option("--at", pred_at,
                       "forecast origin timestamp (ISO-8601 or epoch)")
      ->required();
  pred_cmd->add_option("--horizon", pred_horizon, "minutes ahead");
  pred_cmd->add_option("--sensor", pred_sensor, "restrict to one sensor id");
  pred_cmd->add_option("--out", pred_out, "optional predictions CSV");
  pred_cmd->add_flag("--force", pred_force, "overwrite existing output");

  // ablate
  auto* abl_cmd = app.add_subcommand("ablate", "train and compare variants");
  std::string abl_data, abl_config, abl_out, abl_horizons = "10";
  std::uint64_t abl_seed_arg = 0;
  std::size_t abl_epochs_arg = 0, abl_steps_arg = 0;
  bool abl_force = false;
  abl_cmd->add_option("--data", abl_data, "input CSV")->required();
  abl_cmd->add_option("--config", abl_config, "key=value config file");
  abl_cmd->add_option("--out", abl_out, "output directory")->required();
  abl_cmd->add_option("--horizons", abl_horizons, "horizons in minutes");
  auto* abl_seed_opt = abl_cmd->add_option("--seed", abl_seed_arg, "seed");
  auto* abl_epochs_opt =
      abl_cmd->add_option("--epochs", abl_epochs_arg, "epoch limit override");
  auto* abl_steps_opt = abl_cmd->add_option("--max-steps", abl_steps_arg,
                                            "step budget override");
  abl_cmd->add_flag("--force", abl_force, "overwrite existing outputs");

  // inspect
  auto* ins_cmd = app.add_subcommand("inspect", "describe a checkpoint");
  std::string ins_ckpt;
  ins_cmd->add_option("--checkpoint", ins_ckpt, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      ensure_writable(synth_out, synth_force);
      auto series = synth_generate(days, sensors, synth_seed);
      write_csv(synth_out, series);
      print_stats_table(summarize(series));
      nlohmann::json man = manifest_base("synth");
      man["seed"] = synth_seed;
      man["days"] = days;
      man["sensors"] = sensors;
      man["data_fingerprint"] = file_fingerprint(synth_out);
      man["artifacts"] = {{"csv", synth_out}};
      write_manifest(synth_out + ".manifest.json", man);
      std::printf("wrote %zu rows to %s\n", sensors * days * kSlotsPerDay,
                  synth_out.c_str());
      return 0;
    }
    if (train_cmd->parsed()) {
      if (seed_opt->count()) tc.seed = seed_arg;
      if (epochs_opt->count()) tc.epochs = epochs_arg;
      if (steps_opt->count()) tc.max_steps = max_steps_arg;
      return cmd_train(tc);
    }
    if (eval_cmd->parsed()) {
      if (eval_split != "train" && eval_split != "val" &&
          eval_split != "test") {
        throw ConfigError("--split must be train, val or test");
      }
      return cmd_eval(eval_ckpt, eval_data, eval_horizons, eval_out,
                      eval_split, eval_force);
    }
    if (pred_cmd->parsed()) {
      std::optional<int> sensor;
      if (pred_sensor >= 0) sensor = pred_sensor;
      return cmd_predict(pred_ckpt, pred_data, pred_at, pred_horizon, sensor,
                         pred_out, pred_force);
    }
    if (abl_cmd->parsed()) {
      std::optional<std::uint64_t> seed;
      std::optional<std::size_t> epochs, max_steps;
      if (abl_seed_opt->count()) seed = abl_seed_arg;
      if (abl_epochs_opt->count()) epochs = abl_epochs_arg;
      if (abl_steps_opt->count()) max_steps = abl_steps_arg;
      return cmd_ablate(abl_data, abl_config, abl_horizons, abl_out, seed,
                        epochs, max_steps, abl_force);
    }
    if (ins_cmd->parsed()) return cmd_inspect(ins_ckpt);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
