#include "agglo/bench.hpp"

#include <sched.h>
#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <new>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "agglo/attention.hpp"
#include "agglo/errors.hpp"
#include "agglo/ops.hpp"

namespace agglo {

void BenchConfig::validate() const {
  if (batch <= 0) throw ConfigError("batch", "must be positive");
  if (d_model <= 0) throw ConfigError("d_model", "must be positive");
  if (heads_or_classes <= 0 || d_model % heads_or_classes != 0) {
    throw ConfigError("heads_or_classes", "must be positive and divide d_model");
  }
  if (seq_lengths.empty()) throw ConfigError("seq_lengths", "must not be empty");
  for (std::size_t i = 0; i < seq_lengths.size(); ++i) {
    if (seq_lengths[i] <= 0) throw ConfigError("seq_lengths", "lengths must be positive");
    if (i > 0 && seq_lengths[i] <= seq_lengths[i - 1]) throw ConfigError("seq_lengths", "must be strictly increasing");
  }
  if (replicas < 2) throw ConfigError("replicas", "must be at least 2");
  if (warmup < 0) throw ConfigError("warmup", "must be non-negative");
}

bool pin_to_single_core(std::string& note) {
  cpu_set_t current;
  CPU_ZERO(&current);
  if (sched_getaffinity(0, sizeof current, &current) != 0) {
    note = "sched_getaffinity failed";
    return false;
  }
  int cpu = -1;
  for (int i = 0; i < CPU_SETSIZE; ++i) {
    if (CPU_ISSET(i, &current)) {
      cpu = i;
      break;
    }
  }
  if (cpu < 0) {
    note = "no cpu in affinity mask";
    return false;
  }
  cpu_set_t one;
  CPU_ZERO(&one);
  CPU_SET(cpu, &one);
  if (sched_setaffinity(0, sizeof one, &one) != 0) {
    note = "sched_setaffinity refused";
    return false;
  }
  note = "cpu " + std::to_string(cpu);
  return true;
}

namespace {

using Clock = std::chrono::steady_clock;

template <typename T>
Tensor<T> random_input(Index batch, Index t, Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> v(static_cast<std::size_t>(batch * t * d));
  for (auto& x : v) x = static_cast<T>(normal(rng));
  return Tensor<T>({batch, t, d}, std::move(v));
}

template <typename T, typename Fn>
std::pair<double, int> time_mean(Fn&& fn) {
  auto start = Clock::now();
  fn();
  double first = std::chrono::duration<double>(Clock::now() - start).count();
  if (first >= 0.01) return {first, 1};
  // Short passes: at least three iterations and about 50 ms in total.
  const int iters = std::clamp(static_cast<int>(std::ceil(0.05 / std::max(first, 1e-7))), 3, 1000);
  start = Clock::now();
  for (int i = 0; i < iters; ++i) fn();
  return {std::chrono::duration<double>(Clock::now() - start).count() / iters, iters};
}

}  // namespace

template <typename T>
BenchRun run_bench(const BenchConfig& config) {
  config.validate();
  BenchRun run;
  run.dtype = dtype_of<T>();
  if (config.pin) {
    run.pinned = pin_to_single_core(run.pin_note);
  } else {
    run.pin_note = "pinning disabled";
  }

  const AttentionKind kinds[] = {AttentionKind::Full, AttentionKind::Agglomerative};
  // Replicas outermost: each sweep covers every length, so slow stretches of
  // a shared host spread across lengths instead of biasing one of them.
  for (int rep = 0; rep < config.replicas; ++rep) {
    for (Index len : config.seq_lengths) {
      for (AttentionKind kind : kinds) {
        const std::string label = to_string(kind) + " seq_len=" + std::to_string(len) + " replica=" + std::to_string(rep);
        try {
          std::seed_seq input_seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                                  static_cast<std::uint32_t>(len), static_cast<std::uint32_t>(rep)};
          std::mt19937_64 input_rng(input_seq);
          Tensor<T> x = random_input<T>(config.batch, len, config.d_model, input_rng);

          std::seed_seq param_seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                                  static_cast<std::uint32_t>(len), static_cast<std::uint32_t>(rep),
                                  static_cast<std::uint32_t>(kind == AttentionKind::Full ? 1 : 2)};
          std::mt19937_64 param_rng(param_seq);
          FullAttentionParams<T> full;
          AggloAttentionParams<T> agglo;
          if (kind == AttentionKind::Full) {
            full = FullAttentionParams<T>::init(config.d_model, config.heads_or_classes, param_rng);
          } else {
            agglo = AggloAttentionParams<T>::init(config.d_model, config.heads_or_classes, param_rng);
          }
          auto forward = [&]() -> Tensor<T> {
            if (kind == AttentionKind::Full) return full_attention(x, x, full, config.masked);
            return config.masked ? agglo_masked(x, x, agglo) : agglo_full(x, x, agglo);
          };

          for (int w = 0; w < config.warmup; ++w) forward();
          reset_allocation_stats();
          auto [seconds, iters] = time_mean<T>([&] { forward(); });
          BenchRecord rec;
          rec.kind = kind;
          rec.masked = config.masked;
          rec.seq_len = len;
          rec.replica = rep;
          rec.seconds = std::max(seconds, 1e-12);
          rec.iterations = iters;
          rec.peak_elements = allocation_stats().peak_elements;
          run.records.push_back(rec);

          if (config.time_backward) {
            std::vector<ParamRef<T>> params =
                kind == AttentionKind::Full ? full.params("attn") : agglo.params("attn");
            for (auto& p : params) p.tensor.set_requires_grad(true);
            auto backward_pass = [&] {
              for (auto& p : params) p.tensor.zero_grad();
              Tape<T> tape;
              TapeScope<T> scope(tape);
              tape.backward(sum_all(forward()));
            };
            backward_pass();
            auto [bsec, biters] = time_mean<T>(backward_pass);
            BenchRecord b = rec;
            b.backward = true;
            b.seconds = std::max(bsec, 1e-12);
            b.iterations = biters;
            run.records.push_back(b);
          }
        } catch (const std::bad_alloc&) {
          run.skipped.push_back(label + ": allocation failed");
        }
      }
    }
  }
  return run;
}

std::map<AttentionKind, std::map<Index, double>> mean_seconds(const std::vector<BenchRecord>& records) {
  std::map<AttentionKind, std::map<Index, std::pair<double, int>>> acc;
  for (const auto& r : records) {
    if (r.backward) continue;
    auto& slot = acc[r.kind][r.seq_len];
    slot.first += r.seconds;
    slot.second += 1;
  }
  std::map<AttentionKind, std::map<Index, double>> out;
  for (const auto& [kind, by_len] : acc) {
    for (const auto& [len, s] : by_len) out[kind][len] = s.first / s.second;
  }
  return out;
}

std::map<AttentionKind, ScalingFit> fit_scaling(const std::vector<BenchRecord>& records) {
  std::map<AttentionKind, ScalingFit> fits;
  for (const auto& [kind, by_len] : mean_seconds(records)) {
    const auto n = by_len.size();
    if (n < 3) {
      throw ContractError(to_string(kind) + " has " + std::to_string(n) + " distinct lengths; scaling fit needs 3");
    }
    const std::size_t k = std::max<std::size_t>(3, (n + 1) / 2);
    std::vector<std::pair<Index, double>> pts(by_len.begin(), by_len.end());
    pts.erase(pts.begin(), pts.end() - static_cast<std::ptrdiff_t>(k));

    double mx = 0;
    double my = 0;
    for (const auto& [len, s] : pts) {
      mx += std::log(static_cast<double>(len));
      my += std::log(s);
    }
    mx /= static_cast<double>(k);
    my /= static_cast<double>(k);
    double sxx = 0;
    double sxy = 0;
    for (const auto& [len, s] : pts) {
      const double dx = std::log(static_cast<double>(len)) - mx;
      sxx += dx * dx;
      sxy += dx * (std::log(s) - my);
    }
    ScalingFit fit;
    fit.slope = sxy / sxx;
    const double intercept = my - fit.slope * mx;
    double ssr = 0;
    for (const auto& [len, s] : pts) {
      const double r = std::log(s) - (intercept + fit.slope * std::log(static_cast<double>(len)));
      ssr += r * r;
    }
    fit.stderr_slope = std::sqrt(ssr / static_cast<double>(k - 2) / sxx);
    for (const auto& p : pts) fit.lengths.push_back(p.first);
    fits[kind] = fit;
  }
  return fits;
}

std::optional<Index> crossover(const std::vector<BenchRecord>& records) {
  const auto means = mean_seconds(records);
  const auto full = means.find(AttentionKind::Full);
  const auto agglo = means.find(AttentionKind::Agglomerative);
  if (full == means.end() || agglo == means.end()) return std::nullopt;
  for (const auto& [len, s] : agglo->second) {
    const auto it = full->second.find(len);
    if (it != full->second.end() && s <= it->second) return len;
  }
  return std::nullopt;
}

void write_bench_csv(const std::string& path, const std::vector<BenchRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << kBenchHeader << '\n';
  char buf[64];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.9e", r.seconds);
    out << to_string(r.kind) << (r.backward ? "+backward" : "") << ',' << (r.masked ? 1 : 0) << ',' << r.seq_len << ','
        << r.replica << ',' << buf << '\n';
  }
  if (!out) throw IoError("error while writing '" + path + "'");
}

std::vector<BenchRecord> read_bench_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != kBenchHeader) throw DataError("'" + path + "' does not start with the bench header");
  std::vector<BenchRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string kind, masked, len, rep, sec;
    if (!std::getline(ss, kind, ',') || !std::getline(ss, masked, ',') || !std::getline(ss, len, ',') ||
        !std::getline(ss, rep, ',') || !std::getline(ss, sec)) {
      throw DataError("malformed bench row '" + line + "'");
    }
    BenchRecord r;
    const auto plus = kind.find('+');
    r.backward = plus != std::string::npos;
    r.kind = parse_attention_kind(kind.substr(0, plus));
    r.masked = masked == "1";
    r.seq_len = std::stoll(len);
    r.replica = std::stoi(rep);
    r.seconds = std::stod(sec);
    out.push_back(r);
  }
  return out;
}

std::string machine_description() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  std::string line;
  while (std::getline(info, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  }
  std::string os = "unknown os";
  utsname u{};
  if (uname(&u) == 0) os = std::string(u.sysname) + " " + u.release + " " + u.machine;
  return cpu + "; " + os + "; " + std::to_string(std::thread::hardware_concurrency()) + " logical cpus";
}

void write_bench_meta(const std::string& path, const BenchConfig& config, const BenchRun& run) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "machine=" << machine_description() << '\n';
  out << "pinned=" << (run.pinned ? "true" : "false") << '\n';
  out << "pin_note=" << run.pin_note << '\n';
  out << "seed=" << config.seed << '\n';
  out << "dtype=" << dtype_name(run.dtype) << '\n';
  out << "batch=" << config.batch << '\n';
  out << "d_model=" << config.d_model << '\n';
  out << "heads_or_classes=" << config.heads_or_classes << '\n';
  out << "seq_lengths=";
  for (std::size_t i = 0; i < config.seq_lengths.size(); ++i) out << (i ? "," : "") << config.seq_lengths[i];
  out << '\n';
  out << "replicas=" << config.replicas << '\n';
  out << "warmup=" << config.warmup << '\n';
  out << "masked=" << (config.masked ? "true" : "false") << '\n';
  out << "time_backward=" << (config.time_backward ? "true" : "false") << '\n';
  for (const auto& s : run.skipped) out << "skipped=" << s << '\n';
  if (!out) throw IoError("error while writing '" + path + "'");
}

std::string bench_summary(const std::vector<BenchRecord>& records) {
  std::ostringstream out;
  char buf[160];
  for (const auto& [kind, by_len] : mean_seconds(records)) {
    out << to_string(kind) << " mean seconds:";
    for (const auto& [len, s] : by_len) {
      std::snprintf(buf, sizeof buf, " %lld:%.4g", static_cast<long long>(len), s);
      out << buf;
    }
    out << '\n';
  }
  try {
    for (const auto& [kind, fit] : fit_scaling(records)) {
      std::snprintf(buf, sizeof buf, "%s slope %.3f +/- %.3f over", to_string(kind).c_str(), fit.slope,
                    fit.stderr_slope);
      out << buf;
      for (Index len : fit.lengths) out << ' ' << len;
      out << '\n';
    }
  } catch (const ContractError& e) {
    out << "slope fit skipped: " << e.what() << '\n';
  }
  const auto cross = crossover(records);
  out << "crossover " << (cross ? std::to_string(*cross) : std::string("none within measured range")) << '\n';
  return out.str();
}

template BenchRun run_bench<float>(const BenchConfig&);
template BenchRun run_bench<double>(const BenchConfig&);

}  // namespace agglo
