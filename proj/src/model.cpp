#include "agglo/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "agglo/errors.hpp"
#include "agglo/ops.hpp"

namespace agglo {

std::string to_string(AttentionKind kind) { return kind == AttentionKind::Full ? "full" : "agglomerative"; }
std::string to_string(EncodingKind kind) { return kind == EncodingKind::Embedding ? "embedding" : "convolution"; }

AttentionKind parse_attention_kind(const std::string& text) {
  if (text == "full") return AttentionKind::Full;
  if (text == "agglomerative" || text == "agglo") return AttentionKind::Agglomerative;
  throw ConfigError("attention", "expected full or agglomerative, got '" + text + "'");
}

EncodingKind parse_encoding_kind(const std::string& text) {
  if (text == "embedding") return EncodingKind::Embedding;
  if (text == "convolution" || text == "conv") return EncodingKind::Convolution;
  throw ConfigError("encoding", "expected embedding or convolution, got '" + text + "'");
}

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* field) {
    if (v <= 0) throw ConfigError(field, "must be positive, got " + std::to_string(v));
  };
  if (n_blocks < 0) throw ConfigError("n_blocks", "must be non-negative");
  positive(seq_len, "seq_len");
  positive(d_model, "d_model");
  positive(heads_or_classes, "heads_or_classes");
  positive(ffn_multiplier, "ffn_multiplier");
  positive(conv_width, "conv_width");
  if (vocab_size < 2) throw ConfigError("vocab_size", "must be at least 2");
  if (d_model % heads_or_classes != 0) {
    throw ConfigError("heads_or_classes", "d_model " + std::to_string(d_model) + " is not divisible by " +
                                              std::to_string(heads_or_classes));
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out << "attention=" << to_string(attention) << '\n'
      << "encoding=" << to_string(encoding) << '\n'
      << "n_blocks=" << n_blocks << '\n'
      << "seq_len=" << seq_len << '\n'
      << "d_model=" << d_model << '\n'
      << "heads_or_classes=" << heads_or_classes << '\n'
      << "vocab_size=" << vocab_size << '\n'
      << "ffn_multiplier=" << ffn_multiplier << '\n'
      << "conv_width=" << conv_width << '\n';
  return out.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line, "expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    auto as_int = [&]() -> Index {
      try {
        std::size_t used = 0;
        const Index v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
      } catch (const std::exception&) {
        throw ConfigError(key, "expected an integer, got '" + value + "'");
      }
    };
    if (key == "attention") c.attention = parse_attention_kind(value);
    else if (key == "encoding") c.encoding = parse_encoding_kind(value);
    else if (key == "n_blocks") c.n_blocks = as_int();
    else if (key == "seq_len") c.seq_len = as_int();
    else if (key == "d_model") c.d_model = as_int();
    else if (key == "heads_or_classes") c.heads_or_classes = as_int();
    else if (key == "vocab_size") c.vocab_size = as_int();
    else if (key == "ffn_multiplier") c.ffn_multiplier = as_int();
    else if (key == "conv_width") c.conv_width = as_int();
    else throw ConfigError(key, "unknown model key");
  }
  return c;
}

Index count_params(const ModelConfig& c) {
  c.validate();
  const Index d = c.d_model;
  const Index m = c.heads_or_classes;
  const Index v = c.vocab_size;
  const Index f = c.ffn_multiplier * d;
  const Index encoding = c.encoding == EncodingKind::Embedding ? c.seq_len * d : c.conv_width * d * d;
  const Index attention = c.attention == AttentionKind::Full ? 4 * d * d : 2 * (d * m + m) + d * d + d * d;
  const Index norms = 4 * d;
  const Index ffn = d * f + f + f * d + d;
  return v * d + encoding + attention + norms + ffn + d * v + v;
}

namespace {

template <typename T>
Tensor<T> uniform(Shape shape, double limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor<T> t(std::move(shape));
  for (auto& x : t.mutable_values()) x = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const DecoderBlock<T>& blk) {
  const Tensor<T> h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
  const Tensor<T> attended = blk.kind == AttentionKind::Full ? full_attention(h, h, blk.full, true)
                                                             : agglo_masked(h, h, blk.agglo);
  const Tensor<T> x1 = add(x, attended);
  const Tensor<T> h2 = layer_norm(x1, blk.ln2_gain, blk.ln2_bias);
  const Tensor<T> hidden = relu(add(matmul(h2, blk.ffn_in_w), blk.ffn_in_b));
  return add(x1, add(matmul(hidden, blk.ffn_out_w), blk.ffn_out_b));
}

}  // namespace

template <typename T>
std::vector<ParamRef<T>> DecoderBlock<T>::params(const std::string& prefix) const {
  std::vector<ParamRef<T>> out = kind == AttentionKind::Full ? full.params(prefix + "attn.")
                                                             : agglo.params(prefix + "attn.");
  out.push_back({prefix + "ln1.gain", ln1_gain});
  out.push_back({prefix + "ln1.bias", ln1_bias});
  out.push_back({prefix + "ln2.gain", ln2_gain});
  out.push_back({prefix + "ln2.bias", ln2_bias});
  out.push_back({prefix + "ffn.in.w", ffn_in_w});
  out.push_back({prefix + "ffn.in.b", ffn_in_b});
  out.push_back({prefix + "ffn.out.w", ffn_out_w});
  out.push_back({prefix + "ffn.out.b", ffn_out_b});
  return out;
}

template <typename T>
DecoderModel<T> DecoderModel<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const Index d = config.d_model;
  const Index f = config.ffn_multiplier * d;
  DecoderModel m;
  m.config_ = config;
  m.token_embedding = uniform<T>({config.vocab_size, d}, 0.05, rng);
  if (config.encoding == EncodingKind::Embedding) {
    m.position_embedding = uniform<T>({config.seq_len, d}, 0.05, rng);
  } else {
    const double fan = static_cast<double>(config.conv_width * d);
    m.conv_filter = uniform<T>({config.conv_width, d, d}, std::sqrt(6.0 / (fan + fan)), rng);
  }
  auto& blk = m.block;
  blk.kind = config.attention;
  if (config.attention == AttentionKind::Full) {
    blk.full = FullAttentionParams<T>::init(d, config.heads_or_classes, rng);
  } else {
    blk.agglo = AggloAttentionParams<T>::init(d, config.heads_or_classes, rng);
  }
  blk.ln1_gain = Tensor<T>::full({d}, T(1));
  blk.ln1_bias = Tensor<T>({d});
  blk.ln2_gain = Tensor<T>::full({d}, T(1));
  blk.ln2_bias = Tensor<T>({d});
  blk.ffn_in_w = glorot_uniform<T>(d, f, rng);
  blk.ffn_in_b = Tensor<T>({f});
  blk.ffn_out_w = glorot_uniform<T>(f, d, rng);
  blk.ffn_out_b = Tensor<T>({d});
  // Small output weights keep untrained predictions near uniform; the
  // residual stream has no final normalization and grows with depth.
  m.out_w = uniform<T>({d, config.vocab_size}, 0.01, rng);
  m.out_b = Tensor<T>({config.vocab_size});
  for (auto& p : m.parameters()) p.tensor.set_requires_grad(true);
  return m;
}

template <typename T>
std::vector<ParamRef<T>> DecoderModel<T>::parameters() const {
  std::vector<ParamRef<T>> out{{"token_embedding", token_embedding}};
  if (config_.encoding == EncodingKind::Embedding) {
    out.push_back({"position_embedding", position_embedding});
  } else {
    out.push_back({"conv_filter", conv_filter});
  }
  for (auto& p : block.params("block.")) out.push_back(std::move(p));
  out.push_back({"out.w", out_w});
  out.push_back({"out.b", out_b});
  return out;
}

template <typename T>
Index DecoderModel<T>::parameter_count() const {
  Index n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
DecoderModel<T> DecoderModel<T>::clone() const {
  DecoderModel copy = init(config_, 0);
  copy.assign_from(*this);
  return copy;
}

template <typename T>
void DecoderModel<T>::assign_from(const DecoderModel& other) {
  if (!(other.config_ == config_)) throw ContractError("assign_from: model configs differ");
  auto dst = parameters();
  const auto src = other.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), dst[i].tensor.mutable_values().begin());
  }
}

template <typename T>
Tensor<T> encode_sequence(const IntTensor& tokens, const DecoderModel<T>& model) {
  const auto& c = model.config();
  if (tokens.shape.size() != 2) throw DimensionError("tokens must be [batch, time], got " + shape_str(tokens.shape));
  const Index t = tokens.shape[1];
  if (t > c.seq_len) {
    throw ContractError("sequence length " + std::to_string(t) + " exceeds model seq_len " +
                        std::to_string(c.seq_len));
  }
  const Tensor<T> embedded = embedding(model.token_embedding, tokens);
  if (c.encoding == EncodingKind::Embedding) {
    const Tensor<T> positions = t == c.seq_len ? model.position_embedding : slice(model.position_embedding, 0, 0, t);
    return add(embedded, positions);
  }
  return causal_conv1d(embedded, model.conv_filter);
}

template <typename T>
Tensor<T> decoder_forward(const IntTensor& tokens, const DecoderModel<T>& model, ForwardTrace* trace) {
  Tensor<T> x = encode_sequence(tokens, model);
  for (Index step = 0; step < model.config().n_blocks; ++step) {
    if (trace) {
      std::vector<const void*> ids;
      for (const auto& p : model.block.params("")) ids.push_back(p.tensor.id());
      trace->block_params_per_step.push_back(std::move(ids));
    }
    x = block_forward(x, model.block);
  }
  return add(matmul(x, model.out_w), model.out_b);
}

template <typename T>
Tensor<T> lm_loss(const Tensor<T>& logits, const IntTensor& targets) {
  if (logits.rank() != 3 || targets.shape.size() != 2 || logits.dim(0) != targets.shape[0] ||
      logits.dim(1) != targets.shape[1]) {
    throw DimensionError("lm_loss: logits " + shape_str(logits.shape()) + " vs targets " + shape_str(targets.shape));
  }
  return scale(cross_entropy(logits, targets), static_cast<T>(1.0 / std::log(2.0)));
}

template <typename T>
std::vector<std::int32_t> generate(const DecoderModel<T>& model, const std::vector<std::int32_t>& prompt,
                                   Index n_tokens, double temperature, std::uint64_t seed) {
  if (!(temperature > 0)) throw ContractError("temperature must be positive");
  std::vector<std::int32_t> tokens = prompt;
  if (n_tokens <= 0) return tokens;
  if (prompt.empty()) throw ContractError("generation needs a non-empty prompt");
  NoGradScope<T> no_grad;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Index window = model.config().seq_len;
  const Index vocab = model.config().vocab_size;
  std::vector<double> probs(static_cast<std::size_t>(vocab));
  for (Index n = 0; n < n_tokens; ++n) {
    const Index len = std::min<Index>(window, static_cast<Index>(tokens.size()));
    IntTensor ctx({1, len}, std::vector<std::int32_t>(tokens.end() - len, tokens.end()));
    const Tensor<T> logits = decoder_forward(ctx, model);
    const auto row = logits.values().subspan(static_cast<std::size_t>((len - 1) * vocab));
    const double mx = static_cast<double>(*std::max_element(row.begin(), row.end()));
    double total = 0;
    for (Index k = 0; k < vocab; ++k) {
      probs[k] = std::exp((static_cast<double>(row[k]) - mx) / temperature);
      total += probs[k];
    }
    double u = unit(rng) * total;
    std::int32_t pick = static_cast<std::int32_t>(vocab - 1);
    for (Index k = 0; k < vocab; ++k) {
      if (u < probs[k]) {
        pick = static_cast<std::int32_t>(k);
        break;
      }
      u -= probs[k];
    }
    tokens.push_back(pick);
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'A', 'G', 'G', 'L'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(integer(4)); }
  std::uint64_t u64() { return integer(8); }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated");
  }
  std::uint64_t integer(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

ModelConfig read_header(Reader& r) {
  if (r.bytes(4) != std::string(kMagic, 4)) throw CheckpointError("bad magic: not an AGGL checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t config_len = r.u32();
  try {
    ModelConfig config = ModelConfig::from_text(r.bytes(config_len));
    config.validate();
    return config;
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid config block: ") + e.what());
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const DecoderModel<T>& model, const std::string& path) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string config = model.config().to_text();
  put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  const auto params = model.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (Index e : p.tensor.shape()) put_u64(out, static_cast<std::uint64_t>(e));
    for (T v : p.tensor.values()) put_f32(out, static_cast<float>(v));
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot write checkpoint '" + tmp + "'");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw IoError("failed writing checkpoint '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

template <typename T>
DecoderModel<T> load_checkpoint(const std::string& path) {
  Reader r(read_file(path));
  const ModelConfig config = read_header(r);
  DecoderModel<T> model = DecoderModel<T>::init(config, 0);
  auto params = model.parameters();
  const std::uint32_t count = r.u32();
  if (count != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                          std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::string name = r.bytes(r.u32());
    if (name != p.name) throw CheckpointError("expected tensor '" + p.name + "', found '" + name + "'");
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(r.u64()));
    if (shape != p.tensor.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                            shape_str(p.tensor.shape()));
    }
    for (auto& v : p.tensor.mutable_values()) v = static_cast<T>(r.f32());
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last tensor");
  return model;
}

ModelConfig read_checkpoint_config(const std::string& path) {
  Reader r(read_file(path));
  return read_header(r);
}

#define AGGLO_INSTANTIATE(T)                                                                                       \
  template struct DecoderBlock<T>;                                                                                 \
  template class DecoderModel<T>;                                                                                  \
  template Tensor<T> encode_sequence(const IntTensor&, const DecoderModel<T>&);                                    \
  template Tensor<T> decoder_forward(const IntTensor&, const DecoderModel<T>&, ForwardTrace*);                     \
  template Tensor<T> lm_loss(const Tensor<T>&, const IntTensor&);                                                  \
  template std::vector<std::int32_t> generate(const DecoderModel<T>&, const std::vector<std::int32_t>&, Index,     \
                                              double, std::uint64_t);                                              \
  template void save_checkpoint(const DecoderModel<T>&, const std::string&);                                       \
  template DecoderModel<T> load_checkpoint<T>(const std::string&);

AGGLO_INSTANTIATE(float)
AGGLO_INSTANTIATE(double)

#undef AGGLO_INSTANTIATE

}  // namespace agglo
