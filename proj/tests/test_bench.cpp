#include <cmath>
#include <filesystem>
#include <fstream>

#include "agglo/bench.hpp"
#include "agglo/errors.hpp"
#include "doctest.h"

using namespace agglo;

namespace {

std::vector<BenchRecord> synthetic(const std::vector<Index>& lengths, double (*full)(double),
                                   double (*agglo)(double)) {
  std::vector<BenchRecord> out;
  for (Index n : lengths) {
    for (int rep = 0; rep < 2; ++rep) {
      const double x = static_cast<double>(n);
      out.push_back({AttentionKind::Full, true, n, rep, full(x)});
      out.push_back({AttentionKind::Agglomerative, true, n, rep, agglo(x)});
    }
  }
  return out;
}

const std::vector<Index> kLengths{64, 128, 256, 512, 1024, 2048};

}  // namespace

TEST_CASE("log-log fit on synthetic timings") {
  auto recs = synthetic(kLengths, [](double n) { return 1e-9 * n * n; }, [](double n) { return 1e-6 * n; });
  auto fit = fit_scaling(recs);
  CHECK(std::abs(fit[AttentionKind::Full].slope - 2.0) < 1e-6);
  CHECK(std::abs(fit[AttentionKind::Agglomerative].slope - 1.0) < 1e-6);
  CHECK(fit[AttentionKind::Full].stderr_slope < 1e-6);
  CHECK(fit[AttentionKind::Full].lengths == std::vector<Index>{512, 1024, 2048});

  SUBCASE("fixed overhead bends the slope below one") {
    auto bent = synthetic({512, 1024, 2048}, [](double n) { return n * n; }, [](double n) { return n + 64.0; });
    const double s = fit_scaling(bent)[AttentionKind::Agglomerative].slope;
    CHECK(s > 0.8);
    CHECK(s < 1.0);
  }
  SUBCASE("too few lengths") {
    CHECK_THROWS_AS(fit_scaling(synthetic({64, 128}, [](double n) { return n; }, [](double n) { return n; })),
                    ContractError);
  }
}

TEST_CASE("crossover") {
  auto recs = synthetic(kLengths, [](double n) { return n * n / 256.0; }, [](double n) { return n; });
  CHECK(crossover(recs) == Index{256});
  auto never = synthetic(kLengths, [](double n) { return n; }, [](double n) { return 2 * n; });
  CHECK_FALSE(crossover(never).has_value());
  auto means = mean_seconds(recs);
  CHECK(means[AttentionKind::Full][512] == doctest::Approx(1024.0));
}

TEST_CASE("config validation") {
  BenchConfig c;
  CHECK_NOTHROW(c.validate());
  c.seq_lengths = {128, 64};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.replicas = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.d_model = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("small run, CSV round trip") {
  BenchConfig c;
  c.batch = 2;
  c.d_model = 16;
  c.heads_or_classes = 4;
  c.seq_lengths = {8, 16, 32};
  c.replicas = 2;
  c.pin = false;
  c.time_backward = true;
  auto run = run_bench<float>(c);
  CHECK(run.skipped.empty());
  int forward = 0;
  int backward = 0;
  for (const auto& r : run.records) {
    CHECK(r.seconds > 0);
    CHECK(r.masked);
    CHECK(r.iterations >= 1);
    (r.backward ? backward : forward) += 1;
    if (!r.backward && r.kind == AttentionKind::Agglomerative) CHECK(r.peak_elements <= 2 * r.seq_len * 16);
    if (!r.backward && r.kind == AttentionKind::Full) CHECK(r.peak_elements >= 2 * 4 * r.seq_len * r.seq_len);
  }
  CHECK(forward == 3 * 2 * 2);
  CHECK(backward == 3 * 2 * 2);

  const auto dir = std::filesystem::temp_directory_path() / "agglo_test_bench";
  std::filesystem::create_directories(dir);
  const auto csv = (dir / "bench.csv").string();
  write_bench_csv(csv, run.records);
  auto back = read_bench_csv(csv);
  REQUIRE(back.size() == run.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].kind == run.records[i].kind);
    CHECK(back[i].seq_len == run.records[i].seq_len);
    CHECK(back[i].replica == run.records[i].replica);
    CHECK(back[i].backward == run.records[i].backward);
    CHECK(back[i].seconds == doctest::Approx(run.records[i].seconds).epsilon(1e-6));
  }
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == kBenchHeader);

  const auto meta = (dir / "bench_meta.txt").string();
  write_bench_meta(meta, c, run);
  std::ifstream m(meta);
  std::string all((std::istreambuf_iterator<char>(m)), {});
  CHECK(all.find("dtype=float32") != std::string::npos);
  CHECK(all.find("seed=") != std::string::npos);
  CHECK(bench_summary(run.records).find("slope") != std::string::npos);
}
