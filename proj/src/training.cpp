#include "agglo/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "agglo/errors.hpp"
#include "agglo/ops.hpp"

namespace agglo {

template <typename T>
AdadeltaState<T> AdadeltaState<T>::for_params(const std::vector<ParamRef<T>>& params, double rho, double eps) {
  AdadeltaState s;
  s.rho = rho;
  s.eps = eps;
  for (const auto& p : params) {
    s.sq_grad.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
    s.sq_update.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
  }
  return s;
}

template <typename T>
void adadelta_step(std::vector<ParamRef<T>>& params, AdadeltaState<T>& state) {
  if (state.sq_grad.size() != params.size()) throw ContractError("adadelta state does not match parameter list");
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }
  const double rho = state.rho;
  const double eps = state.eps;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].tensor.mutable_values();
    const auto grad = params[k].tensor.grad();
    auto& eg = state.sq_grad[k];
    auto& edx = state.sq_update[k];
    if (eg.size() != values.size()) throw ContractError("adadelta state shape mismatch for '" + params[k].name + "'");
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      const double eg_new = rho * eg[i] + (1 - rho) * g * g;
      const double dx = -std::sqrt(edx[i] + eps) / std::sqrt(eg_new + eps) * g;
      eg[i] = static_cast<T>(eg_new);
      edx[i] = static_cast<T>(rho * edx[i] + (1 - rho) * dx * dx);
      values[i] = static_cast<T>(values[i] + dx);
    }
  }
}

template <typename T>
double clip_grad_norm(std::vector<ParamRef<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      for (auto& g : p.tensor.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

bool EarlyStopping::update(double valid_loss) {
  ++seen_;
  improved_ = seen_ == 1 || valid_loss < best_;
  if (improved_) {
    best_ = valid_loss;
    best_epoch_ = seen_;
    stale_ = 0;
  } else {
    ++stale_;
  }
  return stale_ >= patience_;
}

std::string to_string(StopReason reason) {
  switch (reason) {
    case StopReason::Patience: return "patience";
    case StopReason::MaxEpochs: return "max_epochs";
    case StopReason::Target: return "target";
    case StopReason::Interrupted: return "interrupted";
  }
  return "unknown";
}

std::string format_metrics_row(const EpochRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.3f", r.epoch, r.train_bits, r.valid_bits, r.seconds);
  return buf;
}

template <typename T>
double evaluate(const DecoderModel<T>& model, const TokenStream& stream, Index seq_len, Index batch_size) {
  NoGradScope<T> no_grad;
  BatchIterator batches(stream, seq_len, batch_size, 0, false, false);
  double total = 0;
  Index rows = 0;
  while (auto batch = batches.next()) {
    const Index n = batch->inputs.shape[0];
    total += static_cast<double>(lm_loss(decoder_forward(batch->inputs, model), batch->targets).item()) *
             static_cast<double>(n);
    rows += n;
  }
  return total / static_cast<double>(rows);
}

template <typename T>
TrainRun<T> train(const ModelConfig& config, const CorpusSplit& corpus, const TrainOptions& options) {
  using Clock = std::chrono::steady_clock;
  config.validate();
  DecoderModel<T> model = DecoderModel<T>::init(config, options.seed);
  auto params = model.parameters();
  auto state = AdadeltaState<T>::for_params(params);

  const Index windows = static_cast<Index>(corpus.train.size()) / (config.seq_len + 1);
  BatchIterator batches(corpus.train, config.seq_len, options.batch_size, options.seed, true,
                        windows >= options.batch_size);
  EarlyStopping stopper(options.patience);

  TrainRun<T> run{config, {}, 0.0, 0, 0, StopReason::MaxEpochs, model.clone()};

  std::ofstream metrics;
  std::string best_path;
  std::string last_path;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    const std::filesystem::path dir(*options.out_dir);
    best_path = (dir / "best.ckpt").string();
    last_path = (dir / "last.ckpt").string();
    metrics.open(dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics.csv under '" + *options.out_dir + "'");
    metrics << kMetricsHeader << '\n' << std::flush;
    save_checkpoint(model, last_path);
  }

  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    const auto start = Clock::now();
    batches.start_epoch(static_cast<std::uint64_t>(epoch));
    double loss_sum = 0;
    Index steps = 0;
    bool interrupted = false;
    while (auto batch = batches.next()) {
      if (options.max_batches_per_epoch > 0 && steps >= options.max_batches_per_epoch) break;
      for (auto& p : params) p.tensor.zero_grad();
      Tensor<T> loss;
      {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        loss = lm_loss(decoder_forward(batch->inputs, model), batch->targets);
        tape.backward(loss);
      }
      if (options.clip_norm > 0) clip_grad_norm(params, options.clip_norm);
      adadelta_step(params, state);
      loss_sum += static_cast<double>(loss.item());
      ++steps;
      if (options.interrupt && options.interrupt->load()) {
        interrupted = true;
        break;
      }
    }
    if (interrupted) {
      run.stop_reason = StopReason::Interrupted;
      break;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_bits = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
    record.valid_bits = evaluate(model, corpus.valid, config.seq_len, options.batch_size);
    record.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    run.history.push_back(record);

    const bool stop = stopper.update(record.valid_bits);
    if (stopper.improved()) {
      run.best_model.assign_from(model);
      if (options.out_dir) save_checkpoint(run.best_model, best_path);
    }
    run.best_valid_bits = stopper.best();
    run.best_epoch = stopper.best_epoch();
    run.stale_epochs = stopper.stale_epochs();
    if (options.out_dir) {
      save_checkpoint(model, last_path);
      metrics << format_metrics_row(record) << '\n' << std::flush;
    }
    if (options.on_epoch) options.on_epoch(record);

    if (options.target_valid_bits && record.valid_bits < *options.target_valid_bits) {
      run.stop_reason = StopReason::Target;
      break;
    }
    if (stop) {
      run.stop_reason = StopReason::Patience;
      break;
    }
  }
  return run;
}

#define AGGLO_INSTANTIATE(T)                                                                                 \
  template struct AdadeltaState<T>;                                                                          \
  template void adadelta_step(std::vector<ParamRef<T>>&, AdadeltaState<T>&);                                 \
  template double clip_grad_norm(std::vector<ParamRef<T>>&, double);                                         \
  template double evaluate(const DecoderModel<T>&, const TokenStream&, Index, Index);                        \
  template TrainRun<T> train<T>(const ModelConfig&, const CorpusSplit&, const TrainOptions&);

AGGLO_INSTANTIATE(float)
AGGLO_INSTANTIATE(double)

#undef AGGLO_INSTANTIATE

}  // namespace agglo
