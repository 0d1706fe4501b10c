#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mindprobe/model.hpp"

namespace mindprobe {

using TokenCorpus = std::vector<std::vector<TokenId>>;

enum class OptimizerKind { sgd, adam };

struct TrainOptions {
  int steps = 0;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
  int batch_size = 8;
  OptimizerKind optimizer = OptimizerKind::sgd;
  /// Cosine decay from learning_rate to learning_rate * final_lr_fraction.
  double final_lr_fraction = 0.0;
  int warmup_steps = 0;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double grad_clip = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::function<void(int step, double loss)> on_step;
  /// Called with the updated weights after every `checkpoint_every` steps.
  int checkpoint_every = 0;
  std::function<void(int step, const Weights& weights)> on_checkpoint;
};

struct TrainResult {
  Weights weights;
  std::vector<double> loss_curve;  // mean nats/token of each step's batch
};

/// Next-token cross-entropy training. Deterministic for a given seed.
/// Throws NumericError naming the step if the loss becomes non-finite.
TrainResult train_lm(Weights weights, const TokenCorpus& corpus, const TrainOptions& options);

template <typename T>
struct LossAndGradient {
  double loss = 0.0;  // mean nats per predicted token
  BasicWeights<T> gradient;
};

/// Mean next-token loss over `batch` and its exact gradient.
template <typename T>
LossAndGradient<T> loss_and_gradient(const BasicWeights<T>& weights, std::span<const std::vector<TokenId>> batch);

/// Mean next-token loss in nats/token over the whole corpus.
double corpus_loss(const Weights& weights, const TokenCorpus& corpus);

}  // namespace mindprobe
