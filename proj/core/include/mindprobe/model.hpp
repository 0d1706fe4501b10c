#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mindprobe/tensor_archive.hpp"
#include "mindprobe/tokenizer.hpp"

namespace mindprobe {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 8;
  int vocab_size = 0;
  int max_seq = 256;
  std::uint64_t seed = 0;

  int d_head() const { return d_model / n_heads; }
  int d_mlp() const { return 4 * d_model; }

  /// Throws ConfigError on zero dimensions or heads that do not divide d_model.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  /// Geometry of Pythia-70m (d_model 512, 6 layers, 8 heads).
  static ModelConfig pythia_70m(int vocab_size, int max_seq = 2048);

  bool operator==(const ModelConfig&) const = default;
};

/// Parameters of one pre-norm block. Head h owns columns [h*d_head, (h+1)*d_head)
/// of the query/key/value projections and the same rows of w_o.
template <typename T>
struct LayerParams {
  RowVector<T> ln1_g, ln1_b;
  Matrix<T> w_q, w_k, w_v;
  RowVector<T> b_q, b_k, b_v;
  Matrix<T> w_o;
  RowVector<T> b_o;
  RowVector<T> ln2_g, ln2_b;
  Matrix<T> w_in;
  RowVector<T> b_in;
  Matrix<T> w_out;
  RowVector<T> b_out;
};

struct TensorRef {
  std::string name;
  std::vector<std::int64_t> shape;
};

template <typename T>
struct BasicWeights {
  ModelConfig config;
  Matrix<T> tok_embed;  // vocab_size x d_model
  Matrix<T> pos_embed;  // max_seq x d_model
  Matrix<T> prev_embed;  // vocab_size x d_model, added for the preceding token
  std::vector<LayerParams<T>> layers;
  RowVector<T> lnf_g, lnf_b;
  Matrix<T> unembed;  // d_model x vocab_size, no bias

  /// Allocates zero tensors shaped for `config`; layer norm gains are one.
  static BasicWeights zeros(const ModelConfig& config);

  /// Calls f(TensorRef, T* data) for every tensor in manifest order.
  template <typename F>
  void visit(F&& f);
  template <typename F>
  void visit(F&& f) const;

  std::size_t parameter_count() const;
};

using Weights = BasicWeights<float>;

template <typename To, typename From>
BasicWeights<To> cast_weights(const BasicWeights<From>& w);

/// Deterministic initialisation from config.seed.
Weights build_model(const ModelConfig& config);

std::uint64_t weights_checksum(const Weights& w);
/// Hex form of the checksum, stored alongside derived artifacts.
std::string weights_fingerprint(const Weights& w);
bool all_finite(const Weights& w);

TensorArchive weights_to_archive(const Weights& w);
Weights weights_from_archive(const TensorArchive& archive);
void save_weights(const Weights& w, const std::filesystem::path& path);
Weights load_weights(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Hooks

struct HookSite {
  enum class Kind { residual, head };
  Kind kind = Kind::residual;
  int layer = 0;  // residual: 0..n_layers (0 = embeddings); head: 0..n_layers-1
  int head = 0;

  static HookSite residual(int layer) { return {Kind::residual, layer, 0}; }
  static HookSite attention_head(int layer, int head) { return {Kind::head, layer, head}; }
  bool operator==(const HookSite&) const = default;
};

/// Half-open token range [begin, end).
struct PositionRange {
  std::size_t begin = 0;
  std::size_t end = std::numeric_limits<std::size_t>::max();

  static PositionRange all() { return {}; }
  static PositionRange from(std::size_t begin) { return {begin, std::numeric_limits<std::size_t>::max()}; }
  bool contains(std::size_t t) const { return t >= begin && t < end; }
};

struct HookSpec {
  enum class Action { capture, add };
  HookSite site;
  Action action = Action::capture;
  std::vector<float> vector;  // add only; d_model for residual sites, d_head for heads
  float alpha = 0.0f;
  PositionRange positions;

  static HookSpec capture(HookSite site) { return {site, Action::capture, {}, 0.0f, {}}; }
  static HookSpec add(HookSite site, std::vector<float> v, float alpha, PositionRange positions = {}) {
    return {site, Action::add, std::move(v), alpha, positions};
  }
};

/// Capture hooks for every residual site (and the block outputs between them).
std::vector<HookSpec> capture_residual_stream(const ModelConfig& config);
std::vector<HookSpec> capture_attention_heads(const ModelConfig& config);
std::vector<HookSpec> capture_everything(const ModelConfig& config);

/// Activations recorded by capture hooks. Uncaptured sites stay empty.
/// resid[l] is the stream entering block l (resid[0] = embeddings,
/// resid[n_layers] = input of the final norm), after any add hooks at that
/// site. For hook-free runs resid[l+1] = resid[l] + attn_block_out[l] +
/// mlp_block_out[l].
struct ActivationTrace {
  std::vector<MatrixF> resid;                   // [n_layers+1] of tokens x d_model
  std::vector<std::vector<MatrixF>> head_out;   // [n_layers][n_heads] of tokens x d_head
  std::vector<MatrixF> attn_block_out;          // [n_layers] of tokens x d_model
  std::vector<MatrixF> mlp_block_out;           // [n_layers] of tokens x d_model
};

struct ForwardResult {
  MatrixF logits;  // tokens x vocab_size
  ActivationTrace trace;
};

ForwardResult forward_with_hooks(const Weights& w, std::span<const TokenId> tokens,
                                 std::span<const HookSpec> hooks = {});

/// Sum of log-probabilities of `answer` given `prompt` (no length
/// normalisation). Hook positions index the concatenated sequence.
double score_completion(const Weights& w, std::span<const TokenId> prompt, std::span<const TokenId> answer,
                        std::span<const HookSpec> hooks = {});

struct Ranking {
  std::size_t best = 0;
  std::vector<double> scores;
};

/// Argmax of score_completion over `answers`; ties go to the lowest index.
Ranking rank_answers(const Weights& w, std::span<const TokenId> question,
                     const std::vector<std::vector<TokenId>>& answers, std::span<const HookSpec> hooks = {});

// ---------------------------------------------------------------------------

template <typename T>
template <typename F>
void BasicWeights<T>::visit(F&& f) {
  auto mat = [&](const std::string& name, Matrix<T>& x) {
    f(TensorRef{name, {static_cast<std::int64_t>(x.rows()), static_cast<std::int64_t>(x.cols())}}, x.data());
  };
  auto vec = [&](const std::string& name, RowVector<T>& x) {
    f(TensorRef{name, {static_cast<std::int64_t>(x.cols())}}, x.data());
  };
  mat("embed.tokens", tok_embed);
  mat("embed.positions", pos_embed);
  mat("embed.previous", prev_embed);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& p = layers[l];
    const std::string pre = "L" + std::to_string(l) + ".";
    vec(pre + "ln1.g", p.ln1_g);
    vec(pre + "ln1.b", p.ln1_b);
    mat(pre + "attn.w_q", p.w_q);
    vec(pre + "attn.b_q", p.b_q);
    mat(pre + "attn.w_k", p.w_k);
    vec(pre + "attn.b_k", p.b_k);
    mat(pre + "attn.w_v", p.w_v);
    vec(pre + "attn.b_v", p.b_v);
    mat(pre + "attn.w_o", p.w_o);
    vec(pre + "attn.b_o", p.b_o);
    vec(pre + "ln2.g", p.ln2_g);
    vec(pre + "ln2.b", p.ln2_b);
    mat(pre + "mlp.w_in", p.w_in);
    vec(pre + "mlp.b_in", p.b_in);
    mat(pre + "mlp.w_out", p.w_out);
    vec(pre + "mlp.b_out", p.b_out);
  }
  vec("final_ln.g", lnf_g);
  vec("final_ln.b", lnf_b);
  mat("unembed", unembed);
}

template <typename T>
template <typename F>
void BasicWeights<T>::visit(F&& f) const {
  const_cast<BasicWeights<T>*>(this)->visit([&](const TensorRef& ref, T* data) {
    f(ref, static_cast<const T*>(data));
  });
}

template <typename T>
BasicWeights<T> BasicWeights<T>::zeros(const ModelConfig& c) {
  BasicWeights<T> w;
  w.config = c;
  const int d = c.d_model, m = c.d_mlp();
  w.tok_embed = Matrix<T>::Zero(c.vocab_size, d);
  w.pos_embed = Matrix<T>::Zero(c.max_seq, d);
  w.prev_embed = Matrix<T>::Zero(c.vocab_size, d);
  w.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& p : w.layers) {
    p.ln1_g = RowVector<T>::Ones(d);
    p.ln1_b = RowVector<T>::Zero(d);
    p.w_q = Matrix<T>::Zero(d, d);
    p.w_k = Matrix<T>::Zero(d, d);
    p.w_v = Matrix<T>::Zero(d, d);
    p.b_q = RowVector<T>::Zero(d);
    p.b_k = RowVector<T>::Zero(d);
    p.b_v = RowVector<T>::Zero(d);
    p.w_o = Matrix<T>::Zero(d, d);
    p.b_o = RowVector<T>::Zero(d);
    p.ln2_g = RowVector<T>::Ones(d);
    p.ln2_b = RowVector<T>::Zero(d);
    p.w_in = Matrix<T>::Zero(d, m);
    p.b_in = RowVector<T>::Zero(m);
    p.w_out = Matrix<T>::Zero(m, d);
    p.b_out = RowVector<T>::Zero(d);
  }
  w.lnf_g = RowVector<T>::Ones(d);
  w.lnf_b = RowVector<T>::Zero(d);
  w.unembed = Matrix<T>::Zero(d, c.vocab_size);
  return w;
}

template <typename T>
std::size_t BasicWeights<T>::parameter_count() const {
  std::size_t n = 0;
  visit([&](const TensorRef& ref, const T*) {
    std::size_t k = 1;
    for (auto s : ref.shape) k *= static_cast<std::size_t>(s);
    n += k;
  });
  return n;
}

template <typename To, typename From>
BasicWeights<To> cast_weights(const BasicWeights<From>& w) {
  auto out = BasicWeights<To>::zeros(w.config);
  std::vector<const From*> src;
  w.visit([&](const TensorRef&, const From* p) { src.push_back(p); });
  std::size_t i = 0;
  out.visit([&](const TensorRef& ref, To* dst) {
    std::size_t k = 1;
    for (auto s : ref.shape) k *= static_cast<std::size_t>(s);
    for (std::size_t j = 0; j < k; ++j) dst[j] = static_cast<To>(src[i][j]);
    ++i;
  });
  return out;
}

}  // namespace mindprobe
