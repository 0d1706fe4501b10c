#include "mindprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mindprobe/errors.hpp"
#include "mindprobe/rng.hpp"
#include "transformer_kernels.hpp"

namespace mindprobe {

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 1 || max_seq < 1) {
    throw ConfigError("model dimensions must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("n_heads (" + std::to_string(n_heads) + ") does not divide d_model (" +
                      std::to_string(d_model) + ")");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers}, {"d_model", d_model}, {"n_heads", n_heads},
          {"vocab_size", vocab_size}, {"max_seq", max_seq}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

ModelConfig ModelConfig::pythia_70m(int vocab_size, int max_seq) {
  ModelConfig c;
  c.n_layers = 6;
  c.d_model = 512;
  c.n_heads = 8;
  c.vocab_size = vocab_size;
  c.max_seq = max_seq;
  return c;
}

Weights build_model(const ModelConfig& config) {
  config.validate();
  Weights w = Weights::zeros(config);
  Rng rng(config.seed);
  const double std_dev = 0.02;
  // Projections writing into the residual stream are scaled down with depth.
  const double out_std = std_dev / std::sqrt(2.0 * config.n_layers);
  w.visit([&](const TensorRef& ref, float* data) {
    if (ref.shape.size() != 2) return;  // gains stay 1, biases 0
    const bool is_out = ref.name.ends_with("attn.w_o") || ref.name.ends_with("mlp.w_out");
    const double s = is_out ? out_std : std_dev;
    const auto n = static_cast<std::size_t>(ref.shape[0] * ref.shape[1]);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<float>(rng.normal() * s);
  });
  return w;
}

std::uint64_t weights_checksum(const Weights& w) {
  std::uint64_t h = fnv1a64(w.config.to_json().dump());
  w.visit([&](const TensorRef& ref, const float* data) {
    h = fnv1a64(ref.name, h);
    std::size_t n = 1;
    for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
    h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(data), n * sizeof(float)), h);
  });
  return h;
}

std::string weights_fingerprint(const Weights& w) { return hex64(weights_checksum(w)); }

bool all_finite(const Weights& w) {
  bool ok = true;
  w.visit([&](const TensorRef& ref, const float* data) {
    std::size_t n = 1;
    for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
    for (std::size_t i = 0; i < n && ok; ++i) ok = std::isfinite(data[i]);
  });
  return ok;
}

TensorArchive weights_to_archive(const Weights& w) {
  TensorArchive a;
  a.meta = {{"kind", "weights"}, {"config", w.config.to_json()}};
  w.visit([&](const TensorRef& ref, const float* data) {
    std::size_t n = 1;
    for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
    a.add(ref.name, ref.shape, std::vector<float>(data, data + n));
  });
  return a;
}

Weights weights_from_archive(const TensorArchive& archive) {
  if (!archive.meta.contains("config")) throw FormatError("weight archive header has no model config");
  const ModelConfig config = ModelConfig::from_json(archive.meta.at("config"));
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("weight archive carries an invalid config: ") + e.what());
  }
  Weights w = Weights::zeros(config);
  std::size_t expected_count = 0;
  w.visit([&](const TensorRef& ref, float* data) {
    ++expected_count;
    const Tensor* t = archive.find(ref.name);
    if (t == nullptr) throw FormatError("weight archive is missing tensor '" + ref.name + "'");
    if (t->shape != ref.shape) {
      std::string want, got;
      for (auto s : ref.shape) want += std::to_string(s) + " ";
      for (auto s : t->shape) got += std::to_string(s) + " ";
      throw ShapeError("tensor '" + ref.name + "' has shape [ " + got + "] but the config implies [ " + want + "]");
    }
    std::copy(t->data.begin(), t->data.end(), data);
  });
  if (archive.tensors.size() != expected_count) throw FormatError("weight archive has unexpected extra tensors");
  return w;
}

void save_weights(const Weights& w, const std::filesystem::path& path) { write_archive(path, weights_to_archive(w)); }

Weights load_weights(const std::filesystem::path& path) { return weights_from_archive(read_archive(path)); }

std::vector<HookSpec> capture_residual_stream(const ModelConfig& config) {
  std::vector<HookSpec> hooks;
  for (int l = 0; l <= config.n_layers; ++l) hooks.push_back(HookSpec::capture(HookSite::residual(l)));
  return hooks;
}

std::vector<HookSpec> capture_attention_heads(const ModelConfig& config) {
  std::vector<HookSpec> hooks;
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) hooks.push_back(HookSpec::capture(HookSite::attention_head(l, h)));
  }
  return hooks;
}

std::vector<HookSpec> capture_everything(const ModelConfig& config) {
  auto hooks = capture_residual_stream(config);
  auto heads = capture_attention_heads(config);
  hooks.insert(hooks.end(), heads.begin(), heads.end());
  return hooks;
}

ForwardResult forward_with_hooks(const Weights& w, std::span<const TokenId> tokens, std::span<const HookSpec> hooks) {
  ForwardResult r;
  r.logits = detail::run_forward<float>(w, tokens, hooks, &r.trace, nullptr);
  return r;
}

double score_completion(const Weights& w, std::span<const TokenId> prompt, std::span<const TokenId> answer,
                        std::span<const HookSpec> hooks) {
  if (answer.empty()) throw DataError("cannot score an empty answer");
  if (prompt.empty()) throw DataError("cannot score an answer without a prompt");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), answer.begin(), answer.end());
  const MatrixF logits = detail::run_forward<float>(w, seq, hooks, nullptr, nullptr);
  double total = 0.0;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(prompt.size() + i - 1));
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.cols(); ++j) sum += std::exp(static_cast<double>(row(j)) - mx);
    total += static_cast<double>(row(answer[i])) - mx - std::log(sum);
  }
  return total;
}

Ranking rank_answers(const Weights& w, std::span<const TokenId> question,
                     const std::vector<std::vector<TokenId>>& answers, std::span<const HookSpec> hooks) {
  if (answers.size() < 2) throw DataError("ranking needs at least two answers");
  Ranking r;
  r.scores.reserve(answers.size());
  for (const auto& a : answers) r.scores.push_back(score_completion(w, question, a, hooks));
  for (std::size_t i = 1; i < r.scores.size(); ++i) {
    if (r.scores[i] > r.scores[r.best]) r.best = i;
  }
  return r;
}

}  // namespace mindprobe
