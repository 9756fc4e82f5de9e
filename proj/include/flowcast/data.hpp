#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flowcast/error.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

inline constexpr std::int64_t kStepSeconds = 300;  // 5-minute aggregation
inline constexpr std::size_t kSlotsPerDay = 288;
inline constexpr std::size_t kSlotsPerWeek = 7 * kSlotsPerDay;

// ---------------------------------------------------------------------------
// Civil time (UTC, no leap seconds)
// ---------------------------------------------------------------------------

namespace timeutil {

inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy =
      static_cast<unsigned>((153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1);
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return static_cast<std::int64_t>(era) * 146097 +
         static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
  y = static_cast<int>(yy + (m <= 2));
}

// 0 = Monday ... 6 = Sunday.
inline int weekday(std::int64_t epoch_seconds) {
  const std::int64_t days = epoch_seconds / 86400;
  return static_cast<int>(((days % 7) + 7 + 3) % 7);
}

}  // namespace timeutil

// Accepts epoch seconds or ISO-8601 "YYYY-MM-DD[T ]HH:MM[:SS]", UTC.
inline std::int64_t parse_timestamp(const std::string& s) {
  if (s.empty()) throw DataError("empty timestamp");
  const bool digits_only =
      s.find_first_not_of("0123456789") == std::string::npos ||
      (s[0] == '-' &&
       s.find_first_not_of("0123456789", 1) == std::string::npos);
  if (digits_only) {
    try {
      return std::stoll(s);
    } catch (const std::exception&) {
      throw DataError("unparseable timestamp '" + s + "'");
    }
  }
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  const int got = std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d,
                              &sep, &h, &mi, &sec);
  if (got < 6 || (sep != 'T' && sep != ' ')) {
    throw DataError("unparseable timestamp '" + s +
                    "' (want epoch seconds or YYYY-MM-DDTHH:MM:SS)");
  }
  return timeutil::days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 +
         sec;
}

inline std::string format_timestamp(std::int64_t t) {
  std::int64_t days = t / 86400;
  std::int64_t rem = t % 86400;
  if (rem < 0) {
    rem += 86400;
    --days;
  }
  int y, m, d;
  timeutil::civil_from_days(days, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02lld:%02lld:%02lld", y, m,
                d, static_cast<long long>(rem / 3600),
                static_cast<long long>((rem % 3600) / 60),
                static_cast<long long>(rem % 60));
  return buf;
}

// ---------------------------------------------------------------------------
// TrafficSeries
// ---------------------------------------------------------------------------

// One sensor's 5-minute series. occupancy/speed are empty when the source
// had no such column.
struct TrafficSeries {
  int sensor_id = 0;
  std::vector<std::int64_t> timestamps;
  std::vector<double> flow;
  std::vector<double> occupancy;
  std::vector<double> speed;

  std::size_t size() const { return timestamps.size(); }
  bool has_occupancy() const { return !occupancy.empty(); }
  bool has_speed() const { return !speed.empty(); }

  // Raw-data invariants: strict 5-minute grid and physical ranges.
  void validate() const {
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
      if (timestamps[i] - timestamps[i - 1] != kStepSeconds) {
        throw DataError("sensor " + std::to_string(sensor_id) +
                        ": timestamps must advance by exactly 300 s; offending"
                        " index " +
                        std::to_string(i) + " (" +
                        format_timestamp(timestamps[i - 1]) + " -> " +
                        format_timestamp(timestamps[i]) + ")");
      }
    }
    for (std::size_t i = 0; i < flow.size(); ++i) {
      if (!(flow[i] >= 0.0)) {
        throw DataError("sensor " + std::to_string(sensor_id) +
                        ": negative flow at index " + std::to_string(i));
      }
    }
    for (std::size_t i = 0; i < occupancy.size(); ++i) {
      if (!(occupancy[i] >= 0.0 && occupancy[i] <= 1.0)) {
        throw DataError("sensor " + std::to_string(sensor_id) +
                        ": occupancy outside [0,1] at index " +
                        std::to_string(i));
      }
    }
    for (std::size_t i = 0; i < speed.size(); ++i) {
      if (!(speed[i] >= 0.0)) {
        throw DataError("sensor " + std::to_string(sensor_id) +
                        ": negative speed at index " + std::to_string(i));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

// Column-name remapping; occupancy/speed columns are optional in the file.
struct CsvSchema {
  std::string sensor_id = "sensor_id";
  std::string timestamp = "timestamp";
  std::string flow = "flow";
  std::string occupancy = "occupancy";
  std::string speed = "speed";
};

struct LoadResult {
  std::vector<TrafficSeries> series;
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;  // missing flow, or unfillable occ/speed gap
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline bool field_missing(const std::string& f) {
  return f.empty() || f == "NA" || f == "nan" || f == "NaN" || f == "null";
}

}  // namespace detail

inline LoadResult load_csv(const std::string& path,
                           const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = detail::split_csv_line(line);

  auto col_of = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    return std::nullopt;
  };
  const auto c_sensor = col_of(schema.sensor_id);
  const auto c_ts = col_of(schema.timestamp);
  const auto c_flow = col_of(schema.flow);
  std::string missing;
  if (!c_sensor) missing += schema.sensor_id + " ";
  if (!c_ts) missing += schema.timestamp + " ";
  if (!c_flow) missing += schema.flow + " ";
  if (!missing.empty()) {
    throw DataError("'" + path + "': missing required column(s): " + missing);
  }
  const auto c_occ = col_of(schema.occupancy);
  const auto c_speed = col_of(schema.speed);

  struct Builder {
    TrafficSeries s;
    bool last_occ_filled = false;
    bool last_speed_filled = false;
  };
  std::map<int, Builder> sensors;
  LoadResult result;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++result.rows_read;
    const auto fields = detail::split_csv_line(line);
    auto get = [&](std::size_t col) -> std::string {
      return col < fields.size() ? fields[col] : std::string();
    };

    int sensor;
    std::int64_t ts;
    try {
      sensor = std::stoi(get(*c_sensor));
      ts = parse_timestamp(get(*c_ts));
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError("'" + path + "' line " + std::to_string(line_no) +
                      ": unparseable sensor id or timestamp");
    }

    Builder& b = sensors[sensor];
    b.s.sensor_id = sensor;
    if (!b.s.timestamps.empty() && ts <= b.s.timestamps.back()) {
      throw DataError("'" + path + "' line " + std::to_string(line_no) +
                      ": non-monotone timestamp for sensor " +
                      std::to_string(sensor));
    }

    const std::string flow_field = get(*c_flow);
    if (detail::field_missing(flow_field)) {
      ++result.rows_dropped;
      continue;
    }
    double flow;
    try {
      flow = std::stod(flow_field);
    } catch (const std::exception&) {
      throw DataError("'" + path + "' line " + std::to_string(line_no) +
                      ": unparseable flow value '" + flow_field + "'");
    }

    // Optional channels: forward-fill a single-step gap, otherwise drop the
    // row so the 5-minute grid check reports it.
    double occ = 0.0, spd = 0.0;
    bool drop = false;
    if (c_occ) {
      const std::string f = get(*c_occ);
      if (detail::field_missing(f)) {
        if (!b.s.occupancy.empty() && !b.last_occ_filled) {
          occ = b.s.occupancy.back();
          b.last_occ_filled = true;
        } else {
          drop = true;
        }
      } else {
        occ = std::stod(f);
        b.last_occ_filled = false;
      }
    }
    if (c_speed && !drop) {
      const std::string f = get(*c_speed);
      if (detail::field_missing(f)) {
        if (!b.s.speed.empty() && !b.last_speed_filled) {
          spd = b.s.speed.back();
          b.last_speed_filled = true;
        } else {
          drop = true;
        }
      } else {
        spd = std::stod(f);
        b.last_speed_filled = false;
      }
    }
    if (drop) {
      ++result.rows_dropped;
      continue;
    }

    b.s.timestamps.push_back(ts);
    b.s.flow.push_back(flow);
    if (c_occ) b.s.occupancy.push_back(occ);
    if (c_speed) b.s.speed.push_back(spd);
  }

  for (auto& [id, b] : sensors) {
    b.s.validate();
    result.series.push_back(std::move(b.s));
  }
  return result;
}

inline void write_csv(const std::string& path,
                      const std::vector<TrafficSeries>& series) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write data file '" + path + "'");
  out << "sensor_id,timestamp,flow,occupancy,speed\n";
  char buf[160];
  for (const TrafficSeries& s : series) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double occ = s.has_occupancy() ? s.occupancy[i] : 0.0;
      const double spd = s.has_speed() ? s.speed[i] : 0.0;
      std::snprintf(buf, sizeof(buf), "%d,%s,%.6f,%.6f,%.6f\n", s.sensor_id,
                    format_timestamp(s.timestamps[i]).c_str(), s.flow[i], occ,
                    spd);
      out << buf;
    }
  }
}

// ---------------------------------------------------------------------------
// Summary statistics (loader sanity output)
// ---------------------------------------------------------------------------

struct ColumnStats {
  std::string name;
  std::size_t count = 0;
  double mean = 0, stddev = 0, min = 0, p25 = 0, p50 = 0, p75 = 0, max = 0;
};

inline ColumnStats column_stats(const std::string& name,
                                std::vector<double> v) {
  ColumnStats c;
  c.name = name;
  c.count = v.size();
  if (v.empty()) return c;
  double s = 0;
  for (double x : v) s += x;
  c.mean = s / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - c.mean) * (x - c.mean);
  c.stddev = std::sqrt(ss / static_cast<double>(v.size()));
  std::sort(v.begin(), v.end());
  auto pct = [&](double p) {
    const double idx = p * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(idx);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = idx - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
  };
  c.min = v.front();
  c.p25 = pct(0.25);
  c.p50 = pct(0.50);
  c.p75 = pct(0.75);
  c.max = v.back();
  return c;
}

inline std::vector<ColumnStats> summarize(
    const std::vector<TrafficSeries>& series) {
  std::vector<double> sensor, flow, occ, spd;
  for (const TrafficSeries& s : series) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      sensor.push_back(s.sensor_id);
      flow.push_back(s.flow[i]);
      if (s.has_occupancy()) occ.push_back(s.occupancy[i]);
      if (s.has_speed()) spd.push_back(s.speed[i]);
    }
  }
  std::vector<ColumnStats> out;
  out.push_back(column_stats("sensor_id", std::move(sensor)));
  out.push_back(column_stats("flow", std::move(flow)));
  if (!occ.empty()) out.push_back(column_stats("occupancy", std::move(occ)));
  if (!spd.empty()) out.push_back(column_stats("speed", std::move(spd)));
  return out;
}

// ---------------------------------------------------------------------------
// Chronological split
// ---------------------------------------------------------------------------

struct SeriesSplit {
  TrafficSeries train, val, test;
};

// Boundaries by floor(fraction * length); the remainder goes to test.
inline SeriesSplit chronological_split(const TrafficSeries& s,
                                       double f_train = 0.8,
                                       double f_val = 0.1,
                                       double f_test = 0.1) {
  if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  const std::size_t n = s.size();
  const auto n_train = static_cast<std::size_t>(
      std::floor(f_train * static_cast<double>(n)));
  const auto n_val =
      static_cast<std::size_t>(std::floor(f_val * static_cast<double>(n)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    const auto need = static_cast<std::size_t>(
        std::ceil(1.0 / std::min({f_train, f_val, f_test})));
    throw DataError("sensor " + std::to_string(s.sensor_id) + ": series of " +
                    std::to_string(n) +
                    " points too short to split; need at least " +
                    std::to_string(need));
  }
  auto take = [&](std::size_t from, std::size_t count) {
    TrafficSeries part;
    part.sensor_id = s.sensor_id;
    auto cp = [&](const std::vector<double>& src, std::vector<double>& dst) {
      if (!src.empty()) dst.assign(src.begin() + from, src.begin() + from + count);
    };
    part.timestamps.assign(s.timestamps.begin() + from,
                           s.timestamps.begin() + from + count);
    cp(s.flow, part.flow);
    cp(s.occupancy, part.occupancy);
    cp(s.speed, part.speed);
    return part;
  };
  SeriesSplit split;
  split.train = take(0, n_train);
  split.val = take(n_train, n_val);
  split.test = take(n_train + n_val, n - n_train - n_val);
  return split;
}

struct DataSplit {
  std::vector<TrafficSeries> train, val, test;
};

inline DataSplit chronological_split(const std::vector<TrafficSeries>& all,
                                     double f_train = 0.8, double f_val = 0.1,
                                     double f_test = 0.1) {
  DataSplit out;
  for (const TrafficSeries& s : all) {
    SeriesSplit sp = chronological_split(s, f_train, f_val, f_test);
    out.train.push_back(std::move(sp.train));
    out.val.push_back(std::move(sp.val));
    out.test.push_back(std::move(sp.test));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization (statistics from the training split only)
// ---------------------------------------------------------------------------

struct NormStats {
  std::vector<std::string> channels;  // "flow" first, then extras
  std::vector<double> mean;
  std::vector<double> stddev;  // population

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] == name) return i;
    }
    throw ConfigError("no normalization stats for channel '" + name + "'");
  }
};

inline NormStats fit_normalizer(const std::vector<TrafficSeries>& train,
                                bool use_occupancy = false,
                                bool use_speed = false) {
  NormStats stats;
  auto fit_channel = [&](const std::string& name, auto getter) {
    double s = 0;
    std::size_t n = 0;
    for (const TrafficSeries& ts : train) {
      for (std::size_t i = 0; i < ts.size(); ++i) {
        s += getter(ts, i);
        ++n;
      }
    }
    if (n == 0) throw DataError("cannot fit normalizer on empty training data");
    const double mean = s / static_cast<double>(n);
    double ss = 0;
    for (const TrafficSeries& ts : train) {
      for (std::size_t i = 0; i < ts.size(); ++i) {
        const double d = getter(ts, i) - mean;
        ss += d * d;
      }
    }
    const double var = ss / static_cast<double>(n);
    if (var <= 0.0) {
      throw DataError("channel '" + name +
                      "' has zero variance on the training split");
    }
    stats.channels.push_back(name);
    stats.mean.push_back(mean);
    stats.stddev.push_back(std::sqrt(var));
  };

  fit_channel("flow",
              [](const TrafficSeries& t, std::size_t i) { return t.flow[i]; });
  if (use_occupancy) {
    for (const TrafficSeries& t : train) {
      if (!t.has_occupancy()) {
        throw DataError("sensor " + std::to_string(t.sensor_id) +
                        " lacks the occupancy channel");
      }
    }
    fit_channel("occupancy", [](const TrafficSeries& t, std::size_t i) {
      return t.occupancy[i];
    });
  }
  if (use_speed) {
    for (const TrafficSeries& t : train) {
      if (!t.has_speed()) {
        throw DataError("sensor " + std::to_string(t.sensor_id) +
                        " lacks the speed channel");
      }
    }
    fit_channel("speed", [](const TrafficSeries& t, std::size_t i) {
      return t.speed[i];
    });
  }
  return stats;
}

inline TrafficSeries normalize(const TrafficSeries& s, const NormStats& st) {
  TrafficSeries out = s;
  const std::size_t fi = st.index_of("flow");
  for (double& v : out.flow) v = (v - st.mean[fi]) / st.stddev[fi];
  if (std::find(st.channels.begin(), st.channels.end(), "occupancy") !=
      st.channels.end()) {
    const std::size_t oi = st.index_of("occupancy");
    for (double& v : out.occupancy) v = (v - st.mean[oi]) / st.stddev[oi];
  }
  if (std::find(st.channels.begin(), st.channels.end(), "speed") !=
      st.channels.end()) {
    const std::size_t si = st.index_of("speed");
    for (double& v : out.speed) v = (v - st.mean[si]) / st.stddev[si];
  }
  return out;
}

inline std::vector<TrafficSeries> normalize(
    const std::vector<TrafficSeries>& in, const NormStats& st) {
  std::vector<TrafficSeries> out;
  out.reserve(in.size());
  for (const TrafficSeries& s : in) out.push_back(normalize(s, st));
  return out;
}

inline double denormalize_flow(double v, const NormStats& st) {
  const std::size_t fi = st.index_of("flow");
  return v * st.stddev[fi] + st.mean[fi];
}

inline double normalize_flow(double v, const NormStats& st) {
  const std::size_t fi = st.index_of("flow");
  return (v - st.mean[fi]) / st.stddev[fi];
}

inline TrafficSeries denormalize(const TrafficSeries& s, const NormStats& st) {
  TrafficSeries out = s;
  const std::size_t fi = st.index_of("flow");
  for (double& v : out.flow) v = v * st.stddev[fi] + st.mean[fi];
  if (s.has_occupancy() &&
      std::find(st.channels.begin(), st.channels.end(), "occupancy") !=
          st.channels.end()) {
    const std::size_t oi = st.index_of("occupancy");
    for (double& v : out.occupancy) v = v * st.stddev[oi] + st.mean[oi];
  }
  if (s.has_speed() && std::find(st.channels.begin(), st.channels.end(),
                                 "speed") != st.channels.end()) {
    const std::size_t si = st.index_of("speed");
    for (double& v : out.speed) v = v * st.stddev[si] + st.mean[si];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supervised windows
// ---------------------------------------------------------------------------

// A batch (or full set) of supervised samples. For each sample with first
// target index T: inputs cover [T - window_len, T - 1] per channel,
// skip_context holds the subsampled history {y[T - j*n], ..., y[T - j]}
// oldest first, and targets cover [T, T + horizon_steps - 1].
struct WindowBatch {
  Tensor inputs;        // [N x channels x window_len]
  Tensor skip_context;  // [N x n_periods]
  Tensor targets;       // [N x horizon_steps]
  int horizon_minutes = 0;
  std::vector<int> sensor_ids;          // per sample
  std::vector<std::int64_t> target_ts;  // first target timestamp per sample

  std::size_t size() const { return inputs.defined() ? inputs.dim(0) : 0; }
  std::size_t channels() const { return inputs.dim(1); }
  std::size_t window_len() const { return inputs.dim(2); }
  std::size_t n_periods() const { return skip_context.dim(1); }
  std::size_t horizon_steps() const { return targets.dim(1); }

  WindowBatch gather(const std::vector<std::size_t>& idx) const {
    WindowBatch out;
    out.horizon_minutes = horizon_minutes;
    const std::size_t c = channels(), w = window_len(), p = n_periods(),
                      h = horizon_steps();
    out.inputs = Tensor::zeros({idx.size(), c, w});
    out.skip_context = Tensor::zeros({idx.size(), p});
    out.targets = Tensor::zeros({idx.size(), h});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t i = idx[r];
      std::copy_n(inputs.values().begin() + static_cast<std::ptrdiff_t>(i * c * w),
                  c * w,
                  out.inputs.values().begin() +
                      static_cast<std::ptrdiff_t>(r * c * w));
      std::copy_n(
          skip_context.values().begin() + static_cast<std::ptrdiff_t>(i * p), p,
          out.skip_context.values().begin() + static_cast<std::ptrdiff_t>(r * p));
      std::copy_n(targets.values().begin() + static_cast<std::ptrdiff_t>(i * h),
                  h,
                  out.targets.values().begin() +
                      static_cast<std::ptrdiff_t>(r * h));
      out.sensor_ids.push_back(sensor_ids[i]);
      out.target_ts.push_back(target_ts[i]);
    }
    return out;
  }
};

struct WindowSpec {
  std::size_t window_len = 36;
  int horizon_minutes = 5;
  std::size_t skip_step = kSlotsPerDay;  // j
  std::size_t n_periods = 7;             // n
  bool use_occupancy = false;
  bool use_speed = false;
};

inline std::size_t horizon_steps_of(int horizon_minutes) {
  if (horizon_minutes < 5 || horizon_minutes % 5 != 0) {
    throw ConfigError("horizon " + std::to_string(horizon_minutes) +
                      " min must be a positive multiple of 5");
  }
  return static_cast<std::size_t>(horizon_minutes / 5);
}

// Stride-1 sliding windows over every series. Samples whose skip indices
// would underflow the series start are excluded, so the first admissible
// target index is max(window_len, j*n).
inline WindowBatch make_windows(const std::vector<TrafficSeries>& series,
                                const WindowSpec& spec) {
  if (spec.skip_step < 1) throw ConfigError("skip step j must be >= 1");
  if (spec.n_periods < 1) throw ConfigError("n_periods must be >= 1");
  if (spec.window_len < 1) throw ConfigError("window_len must be >= 1");
  const std::size_t h = horizon_steps_of(spec.horizon_minutes);
  const std::size_t depth = spec.skip_step * spec.n_periods;

  struct Sample {
    const TrafficSeries* s;
    std::size_t target;  // T
  };
  std::vector<Sample> samples;
  std::vector<const TrafficSeries*> ordered;
  for (const TrafficSeries& s : series) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(),
            [](const TrafficSeries* a, const TrafficSeries* b) {
              return a->sensor_id < b->sensor_id;
            });

  const std::size_t t_min = std::max(spec.window_len, depth);
  for (const TrafficSeries* s : ordered) {
    // j*n <= T must hold for some target index T <= L - h; a too-shallow
    // series cannot satisfy the skip constraint at all.
    if (depth + h > s->size()) {
      throw DataError(
          "sensor " + std::to_string(s->sensor_id) + ": series of " +
          std::to_string(s->size()) + " points cannot satisfy the skip "
          "constraint j*n <= T: the skip context reaches j*n = " +
          std::to_string(depth) + " steps back, so at least " +
          std::to_string(depth + h) + " points are required");
    }
    for (std::size_t t = t_min; t + h <= s->size(); ++t) {
      samples.push_back({s, t});
    }
  }

  const std::size_t channels =
      1 + (spec.use_occupancy ? 1 : 0) + (spec.use_speed ? 1 : 0);
  WindowBatch out;
  out.horizon_minutes = spec.horizon_minutes;
  out.inputs = Tensor::zeros({samples.size(), channels, spec.window_len});
  out.skip_context = Tensor::zeros({samples.size(), spec.n_periods});
  out.targets = Tensor::zeros({samples.size(), h});

  for (std::size_t r = 0; r < samples.size(); ++r) {
    const TrafficSeries& s = *samples[r].s;
    const std::size_t t = samples[r].target;
    for (std::size_t w = 0; w < spec.window_len; ++w) {
      const std::size_t src = t - spec.window_len + w;
      out.inputs(r, 0, w) = s.flow[src];
      std::size_t ch = 1;
      if (spec.use_occupancy) out.inputs(r, ch++, w) = s.occupancy[src];
      if (spec.use_speed) out.inputs(r, ch++, w) = s.speed[src];
    }
    for (std::size_t k = 0; k < spec.n_periods; ++k) {
      // oldest first: y[T - j*n], ..., y[T - j]
      out.skip_context(r, k) = s.flow[t - spec.skip_step * (spec.n_periods - k)];
    }
    for (std::size_t q = 0; q < h; ++q) out.targets(r, q) = s.flow[t + q];
    out.sensor_ids.push_back(s.sensor_id);
    out.target_ts.push_back(s.timestamps[t]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic traffic
// ---------------------------------------------------------------------------

// Deterministic stand-in for loop-detector data: a daily sinusoid scaled
// by a weekday/weekend factor and a slow amplitude drift, autocorrelated
// noise so that recent history carries information a periodic mean cannot,
// and sparse incident-style surges with a fixed ramp/decay template whose
// tails are predictable from their local onset shape.
inline std::vector<TrafficSeries> synth_generate(std::size_t days,
                                                 std::size_t sensors,
                                                 std::uint64_t seed) {
  if (days < 1) throw ConfigError("synth: days must be >= 1");
  if (sensors < 1) throw ConfigError("synth: sensors must be >= 1");
  const std::int64_t start = 1467331200;  // 2016-07-01T00:00:00Z, a Friday
  // surge template: ramp, hold, decay over 10 slots
  static constexpr double kSurge[10] = {0.3, 0.7, 1.0, 1.0, 0.85,
                                        0.65, 0.45, 0.3, 0.18, 0.08};
  std::vector<TrafficSeries> out;
  for (std::size_t sid = 0; sid < sensors; ++sid) {
    Rng rng(seed * 1000003 + sid);
    TrafficSeries s;
    s.sensor_id = static_cast<int>(sid);
    const double base = 220.0 + rng.uniform(-30.0, 30.0);
    const double amp = 150.0 + rng.uniform(-20.0, 20.0);
    const double phase = rng.uniform(-0.3, 0.3);
    double drift = 0.0;  // slow AR(1) amplitude modulation
    double noise = 0.0;  // fast AR(1) noise
    const std::size_t n = days * kSlotsPerDay;
    std::vector<double> surge(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::int64_t ts = start + static_cast<std::int64_t>(i) * kStepSeconds;
      const double slot = static_cast<double>(i % kSlotsPerDay);
      const int wd = timeutil::weekday(ts);
      const double weekend = (wd >= 5) ? 0.68 : 1.0;
      const double daily =
          std::sin(2.0 * std::numbers::pi * (slot / 288.0) - 2.2 + phase);
      drift = 0.999 * drift + 0.006 * rng.normal();
      noise = 0.85 * noise + 9.0 * rng.normal();
      if (rng.bernoulli(0.025)) {
        const double peak = rng.uniform(90.0, 200.0);
        for (std::size_t k = 0; k < 10 && i + k < n; ++k) {
          surge[i + k] += peak * kSurge[k];
        }
      }
      const double shape = base + amp * daily;
      double flow = shape * weekend * (1.0 + 0.8 * drift) + noise + surge[i];
      flow = std::max(0.0, flow);
      s.timestamps.push_back(ts);
      s.flow.push_back(flow);
      s.occupancy.push_back(std::clamp(flow / 1500.0 + 0.01, 0.0, 1.0));
      s.speed.push_back(std::max(0.0, 68.0 - flow / 28.0));
    }
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

// FNV-1a over the file bytes; used as the data fingerprint in manifests.
inline std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for fingerprinting");
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char hex[20];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace flowcast
