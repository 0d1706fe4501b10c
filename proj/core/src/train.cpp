#include "mindprobe/train.hpp"

#include <cmath>
#include <numeric>

#include "mindprobe/errors.hpp"
#include "mindprobe/rng.hpp"
#include "transformer_kernels.hpp"

namespace mindprobe {
namespace {

void check_corpus(const ModelConfig& c, const TokenCorpus& corpus) {
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& doc = corpus[i];
    if (doc.size() < 2) throw DataError("corpus document " + std::to_string(i) + " has fewer than two tokens");
    if (static_cast<int>(doc.size()) > c.max_seq) {
      throw ConfigError("corpus document " + std::to_string(i) + " is longer than max_seq");
    }
    for (auto t : doc) {
      if (t < 0 || t >= c.vocab_size) {
        throw DataError("corpus document " + std::to_string(i) + " has token " + std::to_string(t) +
                        " outside the vocabulary");
      }
    }
  }
}

template <typename T>
void for_each_pair(BasicWeights<T>& a, const BasicWeights<T>& b, auto&& f) {
  std::vector<const T*> src;
  b.visit([&](const TensorRef&, const T* p) { src.push_back(p); });
  std::size_t i = 0;
  a.visit([&](const TensorRef& ref, T* dst) {
    std::size_t n = 1;
    for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
    f(dst, src[i++], n);
  });
}

}  // namespace

template <typename T>
LossAndGradient<T> loss_and_gradient(const BasicWeights<T>& weights, std::span<const std::vector<TokenId>> batch) {
  LossAndGradient<T> out;
  out.gradient = BasicWeights<T>::zeros(weights.config);
  // Layer norm gains start at one in zeros(); gradients must start at zero.
  out.gradient.visit([](const TensorRef& ref, T* data) {
    std::size_t n = 1;
    for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
    std::fill(data, data + n, T(0));
  });
  std::size_t predicted = 0;
  for (const auto& seq : batch) predicted += seq.size() - 1;
  if (predicted == 0) throw DataError("batch has no predicted tokens");
  const T weight = static_cast<T>(1.0 / static_cast<double>(predicted));

  double total = 0.0;
  for (const auto& seq : batch) {
    detail::ForwardCache<T> cache;
    const Matrix<T> logits = detail::run_forward<T>(weights, seq, {}, nullptr, &cache);
    Matrix<T> dlogits;
    total += detail::next_token_loss<T>(logits, seq, weight, &dlogits);
    detail::run_backward<T>(weights, cache, dlogits, out.gradient);
  }
  out.loss = total / static_cast<double>(predicted);
  return out;
}

template LossAndGradient<float> loss_and_gradient<float>(const BasicWeights<float>&,
                                                         std::span<const std::vector<TokenId>>);
template LossAndGradient<double> loss_and_gradient<double>(const BasicWeights<double>&,
                                                           std::span<const std::vector<TokenId>>);

double corpus_loss(const Weights& weights, const TokenCorpus& corpus) {
  double total = 0.0;
  std::size_t predicted = 0;
  for (const auto& seq : corpus) {
    const MatrixF logits = detail::run_forward<float>(weights, seq, {}, nullptr, nullptr);
    total += detail::next_token_loss<float>(logits, seq, 1.0f, nullptr);
    predicted += seq.size() - 1;
  }
  if (predicted == 0) throw DataError("corpus has no predicted tokens");
  return total / static_cast<double>(predicted);
}

TrainResult train_lm(Weights weights, const TokenCorpus& corpus, const TrainOptions& options) {
  weights.config.validate();
  if (options.steps < 0) throw ConfigError("steps must be >= 0");
  TrainResult result;
  if (options.steps == 0) {
    result.weights = std::move(weights);
    return result;
  }
  if (corpus.empty()) throw DataError("training corpus is empty");
  if (options.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  check_corpus(weights.config, corpus);

  Rng rng(options.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span(order));
  std::size_t cursor = 0;

  Weights m1, m2;
  if (options.optimizer == OptimizerKind::adam) {
    m1 = Weights::zeros(weights.config);
    m2 = Weights::zeros(weights.config);
    for (auto* m : {&m1, &m2}) {
      m->visit([](const TensorRef& ref, float* d) {
        std::size_t n = 1;
        for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
        std::fill(d, d + n, 0.0f);
      });
    }
  }

  std::vector<std::vector<TokenId>> batch;
  for (int step = 0; step < options.steps; ++step) {
    batch.clear();
    for (int b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(std::span(order));
        cursor = 0;
      }
      batch.push_back(corpus[order[cursor++]]);
    }

    auto lg = loss_and_gradient<float>(weights, batch);
    if (!std::isfinite(lg.loss)) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": loss is not finite");
    }
    result.loss_curve.push_back(lg.loss);
    if (options.on_step) options.on_step(step, lg.loss);

    double norm_sq = 0.0;
    lg.gradient.visit([&](const TensorRef& ref, const float* d) {
      std::size_t n = 1;
      for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
      for (std::size_t i = 0; i < n; ++i) norm_sq += static_cast<double>(d[i]) * d[i];
    });
    if (!std::isfinite(norm_sq)) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": gradient is not finite");
    }
    const double norm = std::sqrt(norm_sq);
    const double clip = (options.grad_clip > 0.0 && norm > options.grad_clip) ? options.grad_clip / norm : 1.0;

    const double progress = static_cast<double>(step) / static_cast<double>(options.steps);
    double lr = options.learning_rate *
                (options.final_lr_fraction +
                 (1.0 - options.final_lr_fraction) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
    if (step < options.warmup_steps) lr *= static_cast<double>(step + 1) / options.warmup_steps;

    if (options.optimizer == OptimizerKind::sgd) {
      const float s = static_cast<float>(lr * clip);
      for_each_pair(weights, lg.gradient, [&](float* w, const float* g, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) w[i] -= s * g[i];
      });
    } else {
      const double b1 = options.adam_beta1, b2 = options.adam_beta2;
      const double c1 = 1.0 - std::pow(b1, step + 1), c2 = 1.0 - std::pow(b2, step + 1);
      std::vector<float*> p1, p2;
      m1.visit([&](const TensorRef&, float* d) { p1.push_back(d); });
      m2.visit([&](const TensorRef&, float* d) { p2.push_back(d); });
      std::size_t k = 0;
      for_each_pair(weights, lg.gradient, [&](float* w, const float* g, std::size_t n) {
        float* a = p1[k];
        float* v = p2[k];
        ++k;
        for (std::size_t i = 0; i < n; ++i) {
          const double gi = static_cast<double>(g[i]) * clip;
          a[i] = static_cast<float>(b1 * a[i] + (1.0 - b1) * gi);
          v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
          const double mhat = a[i] / c1, vhat = v[i] / c2;
          w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + options.adam_eps));
        }
      });
    }
    if (options.on_checkpoint && options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0) {
      options.on_checkpoint(step + 1, weights);
    }
  }
  if (!all_finite(weights)) throw NumericError("training produced non-finite weights");
  result.weights = std::move(weights);
  return result;
}

}  // namespace mindprobe
