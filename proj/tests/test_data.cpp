#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "flowcast/data.hpp"
#include "oracles.hpp"

using namespace flowcast;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("flowcast_test_" + name);
  return p;
}

TrafficSeries ramp_series(std::size_t n, int sensor = 0) {
  TrafficSeries s;
  s.sensor_id = sensor;
  for (std::size_t i = 0; i < n; ++i) {
    s.timestamps.push_back(1467331200 + static_cast<std::int64_t>(i) * 300);
    s.flow.push_back(static_cast<double>(i));
  }
  return s;
}

}  // namespace

TEST_CASE("timestamp parsing accepts epoch and ISO-8601", "[data]") {
  CHECK(parse_timestamp("1467331200") == 1467331200);
  CHECK(parse_timestamp("2016-07-01T00:00:00") == 1467331200);
  CHECK(parse_timestamp("2016-07-01 00:05:00") == 1467331500);
  CHECK(format_timestamp(1467331500) == "2016-07-01T00:05:00");
  CHECK(parse_timestamp(format_timestamp(1700000000)) == 1700000000);
  CHECK_THROWS_AS(parse_timestamp("yesterday"), DataError);
  // 2016-07-01 was a Friday
  CHECK(timeutil::weekday(1467331200) == 4);
}

TEST_CASE("load_csv reads a toy file", "[data]") {
  auto p = temp_file("toy.csv");
  {
    std::ofstream f(p);
    f << "sensor_id,timestamp,flow\n";
    f << "7,2016-07-01T00:00:00,10\n";
    f << "7,2016-07-01T00:05:00,11\n";
    f << "7,2016-07-01T00:10:00,12\n";
  }
  LoadResult r = load_csv(p.string());
  REQUIRE(r.series.size() == 1);
  CHECK(r.series[0].sensor_id == 7);
  CHECK(r.series[0].size() == 3);
  CHECK(r.series[0].flow[2] == 12.0);
  CHECK_FALSE(r.series[0].has_occupancy());
  fs::remove(p);
}

TEST_CASE("load_csv reports missing columns", "[data]") {
  auto p = temp_file("noflow.csv");
  {
    std::ofstream f(p);
    f << "sensor_id,timestamp,volume\n7,0,1\n";
  }
  CHECK_THROWS_MATCHES(load_csv(p.string()), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("flow")));
  CsvSchema remap;
  remap.flow = "volume";
  LoadResult r = load_csv(p.string(), remap);
  CHECK(r.series[0].flow[0] == 1.0);
  fs::remove(p);
}

TEST_CASE("load_csv rejects non-monotone timestamps with the row", "[data]") {
  auto p = temp_file("mono.csv");
  {
    std::ofstream f(p);
    f << "sensor_id,timestamp,flow\n";
    f << "1,600,1\n1,300,2\n";
  }
  CHECK_THROWS_MATCHES(load_csv(p.string()), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("line 3")));
  fs::remove(p);
}

TEST_CASE("load_csv drops rows with missing flow and counts them", "[data]") {
  auto p = temp_file("gap.csv");
  {
    std::ofstream f(p);
    f << "sensor_id,timestamp,flow\n";
    f << "1,300,1\n1,600,\n1,900,3\n";
  }
  // The dropped middle row breaks the 5-minute grid, which is an error the
  // caller must see rather than silently irregular data.
  CHECK_THROWS_AS(load_csv(p.string()), DataError);

  auto p2 = temp_file("gap_tail.csv");
  {
    std::ofstream f(p2);
    f << "sensor_id,timestamp,flow\n";
    f << "1,300,1\n1,600,2\n1,900,NA\n";
  }
  LoadResult r = load_csv(p2.string());
  CHECK(r.rows_dropped == 1);
  CHECK(r.series[0].size() == 2);
  fs::remove(p);
  fs::remove(p2);
}

TEST_CASE("chronological split uses floor with remainder to test", "[data]") {
  {
    SeriesSplit sp = chronological_split(ramp_series(100));
    CHECK(sp.train.size() == 80);
    CHECK(sp.val.size() == 10);
    CHECK(sp.test.size() == 10);
  }
  {
    SeriesSplit sp = chronological_split(ramp_series(101));
    CHECK(sp.train.size() == 80);
    CHECK(sp.val.size() == 10);
    CHECK(sp.test.size() == 11);
  }
  CHECK_THROWS_AS(chronological_split(ramp_series(5)), DataError);
}

TEST_CASE("split ranges are contiguous, ordered and disjoint", "[data]") {
  SeriesSplit sp = chronological_split(ramp_series(173));
  REQUIRE(sp.train.size() + sp.val.size() + sp.test.size() == 173);
  CHECK(sp.train.timestamps.back() < sp.val.timestamps.front());
  CHECK(sp.val.timestamps.back() < sp.test.timestamps.front());
  CHECK(sp.val.timestamps.front() - sp.train.timestamps.back() == 300);
  CHECK(sp.test.flow.front() == sp.train.size() + sp.val.size());
}

TEST_CASE("normalizer hand case, roundtrip and zero-variance error", "[data]") {
  TrafficSeries s;
  s.sensor_id = 0;
  s.timestamps = {0, 300};
  s.flow = {2, 4};
  NormStats st = fit_normalizer({s});
  CHECK(st.mean[0] == 3.0);
  CHECK(st.stddev[0] == 1.0);
  TrafficSeries n = normalize(s, st);
  CHECK(n.flow[0] == -1.0);
  CHECK(n.flow[1] == 1.0);

  auto synth = synth_generate(2, 1, 9);
  NormStats st2 = fit_normalizer(synth);
  auto normed = normalize(synth, st2);
  auto round = denormalize(normed[0], st2);
  for (std::size_t i = 0; i < synth[0].size(); ++i) {
    CHECK(std::abs(round.flow[i] - synth[0].flow[i]) < 1e-9);
  }

  TrafficSeries flat;
  flat.sensor_id = 1;
  flat.timestamps = {0, 300, 600};
  flat.flow = {5, 5, 5};
  CHECK_THROWS_MATCHES(fit_normalizer({flat}), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("flow")));
}

TEST_CASE("normalizer statistics change when fit leaks eval data", "[data]") {
  auto synth = synth_generate(4, 1, 5);
  DataSplit split = chronological_split(synth);
  NormStats train_only = fit_normalizer(split.train);
  std::vector<TrafficSeries> leaked = split.train;
  leaked.insert(leaked.end(), split.test.begin(), split.test.end());
  NormStats with_test = fit_normalizer(leaked);
  CHECK(train_only.mean[0] != with_test.mean[0]);
}

TEST_CASE("make_windows matches the index-enumeration example", "[data]") {
  TrafficSeries s = ramp_series(10);
  WindowSpec spec;
  spec.window_len = 3;
  spec.horizon_minutes = 5;
  spec.skip_step = 2;
  spec.n_periods = 2;
  WindowBatch wb = make_windows({s}, spec);
  REQUIRE(wb.size() == 6);  // T in {4..9}
  // first sample: T = 4, inputs y1..y3, skip {y0, y2}, target y4
  CHECK(wb.inputs(0, 0, 0) == 1.0);
  CHECK(wb.inputs(0, 0, 2) == 3.0);
  CHECK(wb.skip_context(0, 0) == 0.0);
  CHECK(wb.skip_context(0, 1) == 2.0);
  CHECK(wb.targets(0, 0) == 4.0);
  CHECK(wb.target_ts[0] == s.timestamps[4]);
}

TEST_CASE("make_windows degenerate skip is the immediate predecessor",
          "[data]") {
  TrafficSeries s = ramp_series(8);
  WindowSpec spec;
  spec.window_len = 2;
  spec.horizon_minutes = 5;
  spec.skip_step = 1;
  spec.n_periods = 1;
  WindowBatch wb = make_windows({s}, spec);
  for (std::size_t r = 0; r < wb.size(); ++r) {
    CHECK(wb.skip_context(r, 0) == wb.targets(r, 0) - 1.0);
  }
}

TEST_CASE("make_windows emits zero samples when nothing fits", "[data]") {
  TrafficSeries s = ramp_series(3);
  WindowSpec spec;
  spec.window_len = 3;
  spec.horizon_minutes = 5;
  spec.skip_step = 1;
  spec.n_periods = 1;
  WindowBatch wb = make_windows({s}, spec);
  CHECK(wb.size() == 0);
}

TEST_CASE("make_windows rejects unsatisfiable skip depth", "[data]") {
  TrafficSeries s = ramp_series(10);
  WindowSpec spec;
  spec.window_len = 2;
  spec.horizon_minutes = 5;
  spec.skip_step = 6;
  spec.n_periods = 2;  // j*n = 12 > 10
  CHECK_THROWS_MATCHES(make_windows({s}, spec), DataError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("j*n")));
}

TEST_CASE("skip indices equal brute-force enumeration", "[data]") {
  Rng rng(99);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t len = 20 + rng.below(60);
    const std::size_t w = 1 + rng.below(6);
    const std::size_t j = 1 + rng.below(5);
    const std::size_t n = 1 + rng.below(4);
    const std::size_t h = 1 + rng.below(3);
    if (j * n + h > len) continue;
    TrafficSeries s = ramp_series(len);
    WindowSpec spec;
    spec.window_len = w;
    spec.horizon_minutes = static_cast<int>(h) * 5;
    spec.skip_step = j;
    spec.n_periods = n;
    WindowBatch wb = make_windows({s}, spec);

    // brute force: admissible targets and their skip index sets
    std::vector<std::size_t> targets;
    for (std::size_t t = 0; t + h <= len; ++t) {
      if (t >= w && t >= j * n) targets.push_back(t);
    }
    REQUIRE(wb.size() == targets.size());
    for (std::size_t r = 0; r < targets.size(); ++r) {
      const std::size_t t = targets[r];
      for (std::size_t k = 0; k < n; ++k) {
        CHECK(wb.skip_context(r, k) ==
              static_cast<double>(t - j * (n - k)));
      }
      // leakage: inputs and skip context strictly precede all targets
      CHECK(wb.inputs(r, 0, w - 1) == static_cast<double>(t - 1));
      CHECK(wb.targets(r, 0) == static_cast<double>(t));
    }
  }
}

TEST_CASE("synthetic generator is deterministic and periodic", "[data]") {
  auto a = synth_generate(1, 1, 42);
  auto b = synth_generate(1, 1, 42);
  REQUIRE(a.size() == 1);
  CHECK(a[0].size() == 288);
  REQUIRE(a[0].flow.size() == b[0].flow.size());
  for (std::size_t i = 0; i < a[0].flow.size(); ++i) {
    CHECK(a[0].flow[i] == b[0].flow[i]);
  }

  auto c = synth_generate(1, 1, 43);
  bool differs = false;
  for (std::size_t i = 0; i < c[0].flow.size(); ++i) {
    differs = differs || c[0].flow[i] != a[0].flow[i];
  }
  CHECK(differs);

  // autocorrelation at one day beats half a day
  auto week = synth_generate(10, 1, 7)[0];
  auto autocorr = [&](std::size_t lag) {
    const std::size_t n = week.flow.size();
    double mean = 0;
    for (double v : week.flow) mean += v;
    mean /= static_cast<double>(n);
    double num = 0, den = 0;
    for (std::size_t i = 0; i + lag < n; ++i) {
      num += (week.flow[i] - mean) * (week.flow[i + lag] - mean);
    }
    for (std::size_t i = 0; i < n; ++i) {
      den += (week.flow[i] - mean) * (week.flow[i] - mean);
    }
    return num / den;
  };
  CHECK(autocorr(288) > autocorr(144));
}

TEST_CASE("synthetic CSV roundtrip preserves the series", "[data]") {
  auto series = synth_generate(1, 2, 11);
  auto p = temp_file("synth.csv");
  write_csv(p.string(), series);
  LoadResult r = load_csv(p.string());
  REQUIRE(r.series.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(r.series[i].size() == series[i].size());
    CHECK(r.series[i].sensor_id == series[i].sensor_id);
    for (std::size_t k = 0; k < series[i].size(); ++k) {
      CHECK(r.series[i].timestamps[k] == series[i].timestamps[k]);
      CHECK(std::abs(r.series[i].flow[k] - series[i].flow[k]) < 1e-6);
    }
  }
  CHECK(file_fingerprint(p.string()) == file_fingerprint(p.string()));
  fs::remove(p);
}

TEST_CASE("window counts match enumeration on random lengths", "[data]") {
  Rng rng(123);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t len = 10 + rng.below(40);
    WindowSpec spec;
    spec.window_len = 1 + rng.below(8);
    spec.horizon_minutes = static_cast<int>(1 + rng.below(3)) * 5;
    spec.skip_step = 1 + rng.below(4);
    spec.n_periods = 1 + rng.below(3);
    const std::size_t h = static_cast<std::size_t>(spec.horizon_minutes / 5);
    if (spec.skip_step * spec.n_periods + h > len) continue;
    WindowBatch wb = make_windows({ramp_series(len)}, spec);
    std::size_t count = 0;
    for (std::size_t t = 0; t + h <= len; ++t) {
      if (t >= spec.window_len && t >= spec.skip_step * spec.n_periods) {
        ++count;
      }
    }
    CHECK(wb.size() == count);
  }
}

TEST_CASE("gather slices batches deterministically", "[data]") {
  auto series = synth_generate(8, 2, 3);
  WindowSpec spec;
  spec.window_len = 12;
  spec.horizon_minutes = 10;
  spec.skip_step = 288;
  spec.n_periods = 2;
  WindowBatch all = make_windows(series, spec);
  REQUIRE(all.size() > 4);
  WindowBatch some = all.gather({1, 3});
  CHECK(some.size() == 2);
  CHECK(some.targets(0, 0) == all.targets(1, 0));
  CHECK(some.targets(1, 1) == all.targets(3, 1));
  CHECK(some.sensor_ids[1] == all.sensor_ids[3]);

  // samples ordered by sensor then start index
  for (std::size_t r = 1; r < all.size(); ++r) {
    const bool ordered =
        all.sensor_ids[r - 1] < all.sensor_ids[r] ||
        (all.sensor_ids[r - 1] == all.sensor_ids[r] &&
         all.target_ts[r - 1] < all.target_ts[r]);
    CHECK(ordered);
  }
}
