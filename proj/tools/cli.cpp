#include "cli.hpp"

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "agglo/attention.hpp"
#include "agglo/errors.hpp"
#include "agglo/verify.hpp"

namespace agglo::cli {

namespace {

std::atomic<bool> g_interrupt{false};

extern "C" void on_sigint(int) { g_interrupt = true; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(key, "expected an integer, got '" + value + "'");
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(key, "expected a number, got '" + value + "'");
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + value + "'");
}

std::vector<Index> parse_lengths(const std::string& key, const std::string& value) {
  std::vector<Index> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError(key, "empty entry in '" + value + "'");
    out.push_back(parse_int(key, item));
  }
  if (out.empty()) throw ConfigError(key, "no lengths given");
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

const char* kPresetCommon =
    "n_blocks=5\n"
    "seq_len=128\n"
    "d_model=64\n"
    "heads_or_classes=8\n"
    "vocab_size=27\n"
    "ffn_multiplier=4\n"
    "conv_width=8\n"
    "batch_size=32\n"
    "max_epochs=100\n"
    "patience=10\n";

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
  auto as_int = [&] { return parse_int(key, value); };
  if (key == "attention") model.attention = parse_attention_kind(value);
  else if (key == "encoding") model.encoding = parse_encoding_kind(value);
  else if (key == "n_blocks") model.n_blocks = as_int();
  else if (key == "seq_len") model.seq_len = as_int();
  else if (key == "d_model") model.d_model = as_int();
  else if (key == "heads_or_classes") model.heads_or_classes = as_int();
  else if (key == "vocab_size") model.vocab_size = as_int();
  else if (key == "ffn_multiplier") model.ffn_multiplier = as_int();
  else if (key == "conv_width") model.conv_width = as_int();
  else if (key == "corpus") corpus = value;
  else if (key == "limit_chars") {
    if (value == "none" || value == "0") {
      limit_chars.reset();
    } else {
      const auto v = as_int();
      if (v < 0) throw ConfigError(key, "must be non-negative");
      limit_chars = static_cast<std::size_t>(v);
    }
  }
  else if (key == "train_fraction") split.train = parse_double(key, value);
  else if (key == "valid_fraction") split.valid = parse_double(key, value);
  else if (key == "test_fraction") split.test = parse_double(key, value);
  else if (key == "batch_size") batch_size = as_int();
  else if (key == "max_epochs") max_epochs = static_cast<int>(as_int());
  else if (key == "patience") patience = static_cast<int>(as_int());
  else if (key == "clip_norm") clip_norm = parse_double(key, value);
  else if (key == "target_valid_bits") {
    if (value == "none") target_valid_bits.reset();
    else target_valid_bits = parse_double(key, value);
  }
  else if (key == "max_batches_per_epoch") max_batches_per_epoch = as_int();
  else if (key == "bench_batch") bench.batch = as_int();
  else if (key == "bench_d_model") bench.d_model = as_int();
  else if (key == "bench_heads_or_classes") bench.heads_or_classes = as_int();
  else if (key == "bench_lengths") bench.seq_lengths = parse_lengths(key, value);
  else if (key == "bench_replicas") bench.replicas = static_cast<int>(as_int());
  else if (key == "bench_warmup") bench.warmup = static_cast<int>(as_int());
  else if (key == "bench_masked") bench.masked = parse_bool(key, value);
  else if (key == "bench_pin") bench.pin = parse_bool(key, value);
  else if (key == "bench_time_backward") bench.time_backward = parse_bool(key, value);
  else if (key == "seed") {
    const auto v = as_int();
    if (v < 0) throw ConfigError(key, "must be non-negative");
    seed = static_cast<std::uint64_t>(v);
  }
  else if (key == "dtype") {
    if (value != "float32" && value != "float64") throw ConfigError(key, "expected float32 or float64");
    dtype = value;
  }
  else throw ConfigError(key, "unknown configuration key");
}

void RunConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected key=value, got '" + line + "'");
    }
    apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << model.to_text();
  out << "corpus=" << corpus << '\n';
  out << "limit_chars=" << (limit_chars ? std::to_string(*limit_chars) : std::string("none")) << '\n';
  out << "train_fraction=" << fmt("%.17g", split.train) << '\n';
  out << "valid_fraction=" << fmt("%.17g", split.valid) << '\n';
  out << "test_fraction=" << fmt("%.17g", split.test) << '\n';
  out << "batch_size=" << batch_size << '\n';
  out << "max_epochs=" << max_epochs << '\n';
  out << "patience=" << patience << '\n';
  out << "clip_norm=" << fmt("%.17g", clip_norm) << '\n';
  out << "target_valid_bits=" << (target_valid_bits ? fmt("%.17g", *target_valid_bits) : std::string("none")) << '\n';
  out << "max_batches_per_epoch=" << max_batches_per_epoch << '\n';
  out << "bench_batch=" << bench.batch << '\n';
  out << "bench_d_model=" << bench.d_model << '\n';
  out << "bench_heads_or_classes=" << bench.heads_or_classes << '\n';
  out << "bench_lengths=";
  for (std::size_t i = 0; i < bench.seq_lengths.size(); ++i) out << (i ? "," : "") << bench.seq_lengths[i];
  out << '\n';
  out << "bench_replicas=" << bench.replicas << '\n';
  out << "bench_warmup=" << bench.warmup << '\n';
  out << "bench_masked=" << (bench.masked ? "true" : "false") << '\n';
  out << "bench_pin=" << (bench.pin ? "true" : "false") << '\n';
  out << "bench_time_backward=" << (bench.time_backward ? "true" : "false") << '\n';
  out << "seed=" << seed << '\n';
  out << "dtype=" << dtype << '\n';
  return out.str();
}

void RunConfig::validate() const {
  model.validate();
  bench.validate();
  if (batch_size <= 0) throw ConfigError("batch_size", "must be positive");
  if (max_epochs < 0) throw ConfigError("max_epochs", "must be non-negative");
  if (patience < 1) throw ConfigError("patience", "must be at least 1");
  if (max_batches_per_epoch < 0) throw ConfigError("max_batches_per_epoch", "must be non-negative");
  for (auto [name, v] : {std::pair{"train_fraction", split.train}, std::pair{"valid_fraction", split.valid},
                         std::pair{"test_fraction", split.test}}) {
    if (!(v > 0 && v < 1)) throw ConfigError(name, "must lie in (0, 1)");
  }
  if (std::abs(split.train + split.valid + split.test - 1.0) > 1e-9) {
    throw ConfigError("train_fraction", "split fractions must sum to 1");
  }
}

std::optional<std::string> preset_text(const std::string& name) {
  std::string head;
  if (name == "text8_full_embedding") head = "attention=full\nencoding=embedding\n";
  else if (name == "text8_full_conv") head = "attention=full\nencoding=convolution\n";
  else if (name == "text8_agglo_embedding") head = "attention=agglomerative\nencoding=embedding\n";
  else if (name == "text8_agglo_conv") head = "attention=agglomerative\nencoding=convolution\n";
  else return std::nullopt;
  return head + kPresetCommon;
}

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<long long> limit_chars;
  std::string lengths;
  bool assert_scaling = false;
  std::string dtype;
  std::string attention;
  std::string encoding;
  std::string corpus;
  std::optional<int> replicas;
  std::optional<int> max_epochs;
  std::string checkpoint;
  std::string split = "test";
  std::string prompt = "the ";
  Index tokens = 200;
  double temperature = 1.0;
  bool break_masking = false;
};

RunConfig resolve(const Flags& f) {
  RunConfig c;
  if (const char* env = std::getenv("AGGLO_TEXT8"); env && *env) c.corpus = env;
  if (!f.config.empty()) {
    if (std::filesystem::exists(f.config)) {
      c.apply_text(read_file(f.config));
    } else if (auto preset = preset_text(f.config)) {
      c.apply_text(*preset);
    } else {
      throw IoError("config '" + f.config + "' is neither a readable file nor a preset name");
    }
  }
  if (f.seed) c.apply("seed", std::to_string(*f.seed));
  if (f.limit_chars) c.apply("limit_chars", std::to_string(*f.limit_chars));
  if (!f.lengths.empty()) c.apply("bench_lengths", f.lengths);
  if (!f.dtype.empty()) c.apply("dtype", f.dtype);
  if (!f.attention.empty()) c.apply("attention", f.attention);
  if (!f.encoding.empty()) c.apply("encoding", f.encoding);
  if (!f.corpus.empty()) c.apply("corpus", f.corpus);
  if (f.replicas) c.apply("bench_replicas", std::to_string(*f.replicas));
  if (f.max_epochs) c.apply("max_epochs", std::to_string(*f.max_epochs));
  c.bench.seed = c.seed;
  c.validate();
  return c;
}

void echo(std::ostream& out, const std::string& command, const RunConfig& c) {
  out << "# " << command << " effective configuration\n" << c.to_text() << std::flush;
}

CorpusSplit load_split(const RunConfig& c) {
  const Corpus corpus = ingest_text8(c.corpus, c.limit_chars);
  return split(corpus.tokens, c.split);
}

template <typename T>
int train_typed(const RunConfig& c, const CorpusSplit& data, const std::filesystem::path& dir, std::ostream& out) {
  TrainOptions opt;
  opt.batch_size = c.batch_size;
  opt.max_epochs = c.max_epochs;
  opt.patience = c.patience;
  opt.clip_norm = c.clip_norm;
  opt.seed = c.seed;
  opt.target_valid_bits = c.target_valid_bits;
  opt.max_batches_per_epoch = c.max_batches_per_epoch;
  opt.out_dir = dir.string();
  opt.interrupt = &g_interrupt;
  opt.on_epoch = [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch << " train_bits " << fmt("%.4f", r.train_bits) << " valid_bits "
        << fmt("%.4f", r.valid_bits) << " seconds " << fmt("%.2f", r.seconds) << '\n'
        << std::flush;
  };
  g_interrupt = false;
  auto previous = std::signal(SIGINT, on_sigint);
  TrainRun<T> run;
  try {
    run = train<T>(c.model, data, opt);
  } catch (...) {
    std::signal(SIGINT, previous);
    throw;
  }
  std::signal(SIGINT, previous);
  if (run.stop_reason == StopReason::Interrupted) {
    out << "interrupted; last.ckpt holds the last completed epoch\n";
    return kInterrupted;
  }
  out << "stopped: " << to_string(run.stop_reason) << "\n";
  if (!run.history.empty()) {
    const double test_bits = evaluate(run.best_model, data.test, c.model.seq_len, c.batch_size);
    out << "best_epoch " << run.best_epoch << " best_valid_bits " << fmt("%.4f", run.best_valid_bits)
        << " test_bits " << fmt("%.4f", test_bits) << '\n';
  }
  return kOk;
}

int cmd_train(const Flags& f, std::ostream& out) {
  const RunConfig c = resolve(f);
  echo(out, "train", c);
  const CorpusSplit data = load_split(c);
  const std::filesystem::path dir(f.out);
  std::filesystem::create_directories(dir);
  write_file(dir / "effective_config.txt", c.to_text());
  out << "parameters " << count_params(c.model) << " train_tokens " << data.train.size() << " valid_tokens "
      << data.valid.size() << '\n';
  return c.dtype == "float64" ? train_typed<double>(c, data, dir, out) : train_typed<float>(c, data, dir, out);
}

const TokenStream& pick_split(const CorpusSplit& data, const std::string& name) {
  if (name == "train") return data.train;
  if (name == "valid") return data.valid;
  if (name == "test") return data.test;
  throw ConfigError("split", "expected train, valid or test, got '" + name + "'");
}

std::string checkpoint_path(const Flags& f) {
  return f.checkpoint.empty() ? (std::filesystem::path(f.out) / "best.ckpt").string() : f.checkpoint;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  RunConfig c = resolve(f);
  const std::string path = checkpoint_path(f);
  const auto model = load_checkpoint<float>(path);
  c.model = model.config();
  echo(out, "eval", c);
  out << "checkpoint=" << path << "\nsplit=" << f.split << '\n';
  const CorpusSplit data = load_split(c);
  const double bits = evaluate(model, pick_split(data, f.split), c.model.seq_len, c.batch_size);
  out << "bpc " << fmt("%.6f", bits) << '\n';
  return kOk;
}

int cmd_generate(const Flags& f, std::ostream& out) {
  RunConfig c = resolve(f);
  const std::string path = checkpoint_path(f);
  const auto model = load_checkpoint<float>(path);
  c.model = model.config();
  echo(out, "generate", c);
  out << "checkpoint=" << path << "\nprompt=" << f.prompt << "\ntokens=" << f.tokens
      << "\ntemperature=" << fmt("%.17g", f.temperature) << '\n';
  const auto ids = generate(model, CharVocab::encode(f.prompt), f.tokens, f.temperature, c.seed);
  out << CharVocab::decode(ids) << '\n';
  return kOk;
}

int cmd_bench(const Flags& f, std::ostream& out) {
  const RunConfig c = resolve(f);
  if (f.assert_scaling && c.bench.seq_lengths.size() < 3) {
    throw ContractError("--assert-scaling needs at least 3 sequence lengths, got " +
                        std::to_string(c.bench.seq_lengths.size()));
  }
  echo(out, "bench", c);
  const std::filesystem::path dir(f.out);
  std::filesystem::create_directories(dir);
  write_file(dir / "effective_config.txt", c.to_text());
  const BenchRun run = c.dtype == "float64" ? run_bench<double>(c.bench) : run_bench<float>(c.bench);
  write_bench_csv((dir / "bench.csv").string(), run.records);
  write_bench_meta((dir / "bench_meta.txt").string(), c.bench, run);
  out << "pinned " << (run.pinned ? "yes" : "no") << " (" << run.pin_note << ")\n";
  for (const auto& s : run.skipped) out << "skipped " << s << '\n';
  out << bench_summary(run.records);
  if (!f.assert_scaling) return kOk;

  const auto fits = fit_scaling(run.records);
  bool ok = true;
  auto check = [&](AttentionKind kind, double lo, double hi) {
    const auto it = fits.find(kind);
    if (it == fits.end() || it->second.slope < lo || it->second.slope > hi) {
      ok = false;
      out << "scaling violation: " << to_string(kind) << " slope outside [" << lo << ", " << hi << "]\n";
    }
  };
  check(AttentionKind::Full, 1.7, 2.3);
  check(AttentionKind::Agglomerative, 0.7, 1.3);
  return ok ? kOk : kVerifyFailed;
}

int cmd_verify(const Flags& f, std::ostream& out, std::ostream& err) {
  const RunConfig c = resolve(f);
  out << "# verify effective configuration\nseed=" << c.seed << "\ndtype=" << c.dtype
      << "\nbreak_masking=" << (f.break_masking ? "true" : "false") << '\n'
      << std::flush;
  testing::set_break_masking(f.break_masking);
  verify::VerifyOptions opt;
  opt.seed = c.seed;
  opt.float32_checks = c.dtype == "float32";
  std::vector<verify::CheckResult> results;
  try {
    results = verify::run_verification(opt);
  } catch (...) {
    testing::set_break_masking(false);
    throw;
  }
  testing::set_break_masking(false);
  out << verify::format_results(results);
  std::string failed;
  for (const auto& r : results) {
    if (!r.passed) failed += " " + r.name;
  }
  if (failed.empty()) {
    out << "all " << results.size() << " checks passed\n";
    return kOk;
  }
  err << "failed checks:" << failed << '\n';
  return kVerifyFailed;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Agglomerative attention language modeling toolkit", "agglo"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&f](CLI::App* sub) {
    sub->add_option("--config", f.config, "Config file or preset name");
    sub->add_option("--seed", f.seed, "Global seed");
    sub->add_option("--dtype", f.dtype, "float32 or float64");
  };
  auto data_flags = [&f](CLI::App* sub) {
    sub->add_option("--corpus", f.corpus, "text8-style corpus file");
    sub->add_option("--limit-chars", f.limit_chars, "Use only the first N characters");
  };
  auto model_flags = [&f](CLI::App* sub) {
    sub->add_option("--attention", f.attention, "full or agglomerative");
    sub->add_option("--encoding", f.encoding, "embedding or convolution");
  };

  auto* train_cmd = app.add_subcommand("train", "Train a character-level model");
  common(train_cmd);
  data_flags(train_cmd);
  model_flags(train_cmd);
  train_cmd->add_option("--out", f.out, "Output directory");
  train_cmd->add_option("--max-epochs", f.max_epochs, "Epoch cap");

  auto* eval_cmd = app.add_subcommand("eval", "Bits per character of a checkpoint");
  common(eval_cmd);
  data_flags(eval_cmd);
  eval_cmd->add_option("--out", f.out, "Directory holding best.ckpt");
  eval_cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
  eval_cmd->add_option("--split", f.split, "train, valid or test");

  auto* gen_cmd = app.add_subcommand("generate", "Sample text from a checkpoint");
  common(gen_cmd);
  gen_cmd->add_option("--out", f.out, "Directory holding best.ckpt");
  gen_cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
  gen_cmd->add_option("--prompt", f.prompt, "Prompt text");
  gen_cmd->add_option("--tokens", f.tokens, "Characters to generate");
  gen_cmd->add_option("--temperature", f.temperature, "Sampling temperature");

  auto* bench_cmd = app.add_subcommand("bench", "Attention runtime scaling benchmark");
  common(bench_cmd);
  bench_cmd->add_option("--out", f.out, "Output directory");
  bench_cmd->add_option("--lengths", f.lengths, "Comma-separated sequence lengths");
  bench_cmd->add_option("--replicas", f.replicas, "Replicas per length");
  bench_cmd->add_flag("--assert-scaling", f.assert_scaling, "Fail unless slopes fall in their bands");

  auto* verify_cmd = app.add_subcommand("verify", "Run oracle, causality and gradient checks");
  common(verify_cmd);
  verify_cmd->add_flag("--break-masking", f.break_masking, "Fault injection: drop the causal restriction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(f, out);
    if (*eval_cmd) return cmd_eval(f, out);
    if (*gen_cmd) return cmd_generate(f, out);
    if (*bench_cmd) return cmd_bench(f, out);
    if (*verify_cmd) return cmd_verify(f, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ContractError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kCheckpointError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kVerifyFailed;
  }
  return kConfigError;
}

}  // namespace agglo::cli
