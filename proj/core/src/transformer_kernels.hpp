#pragma once

// Templated forward and backward passes shared by inference (float) and the
// gradient check (double). Internal to the library.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mindprobe/errors.hpp"
#include "mindprobe/model.hpp"

namespace mindprobe::detail {

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct NormCache {
  Matrix<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const RowVector<T>& g, const RowVector<T>& b, NormCache<T>* cache) {
  using Column = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  const Column mean = x.rowwise().mean();
  Matrix<T> xhat = x.colwise() - mean;
  const Column r = (xhat.array().square().rowwise().mean() + static_cast<T>(kNormEps)).rsqrt();
  xhat.array().colwise() *= r.array();
  std::vector<T> rstd(r.data(), r.data() + r.size());
  Matrix<T> y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const RowVector<T>& g, const NormCache<T>& c, RowVector<T>& dg,
                              RowVector<T>& db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  Matrix<T> dxhat = dy.array().rowwise() * g.array();
  const auto n = dy.rows();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  Matrix<T> dx(n, dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean_dxhat = dxhat.row(i).sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.row(i).dot(c.xhat.row(i)) * inv_d;
    dx.row(i) = c.rstd[static_cast<std::size_t>(i)] *
                (dxhat.row(i).array() - mean_dxhat - c.xhat.row(i).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC = 0.044715;

/// Tanh-approximated GELU. `th` receives tanh of the inner term for the
/// backward pass.
template <typename T>
Matrix<T> gelu(const Matrix<T>& x, Matrix<T>& th) {
  const auto a = x.array();
  th = (static_cast<T>(kGeluK) * (a + static_cast<T>(kGeluC) * a.cube())).tanh().matrix();
  return (static_cast<T>(0.5) * a * (T(1) + th.array())).matrix();
}

template <typename T>
void gelu_backward(Matrix<T>& d, const Matrix<T>& x, const Matrix<T>& th) {
  const auto a = x.array();
  const auto t = th.array();
  const auto du = static_cast<T>(kGeluK) * (T(1) + static_cast<T>(3 * kGeluC) * a.square());
  d.array() *= static_cast<T>(0.5) * (T(1) + t) + static_cast<T>(0.5) * a * (T(1) - t.square()) * du;
}

template <typename T>
struct BlockCache {
  NormCache<T> ln1;
  Matrix<T> h1;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // per head, tokens x tokens
  Matrix<T> z;                   // concatenated head outputs
  Matrix<T> x_mid;
  NormCache<T> ln2;
  Matrix<T> h2;
  Matrix<T> pre;
  Matrix<T> tanh_inner;
  Matrix<T> act;
};

template <typename T>
struct ForwardCache {
  std::vector<TokenId> tokens;
  std::vector<BlockCache<T>> blocks;
  NormCache<T> lnf;
  Matrix<T> hf;
};

inline void validate_hooks(const ModelConfig& c, std::span<const HookSpec> hooks) {
  for (const auto& h : hooks) {
    if (h.site.kind == HookSite::Kind::residual) {
      if (h.site.layer < 0 || h.site.layer > c.n_layers) {
        throw ConfigError("residual hook layer " + std::to_string(h.site.layer) + " out of range [0, " +
                          std::to_string(c.n_layers) + "]");
      }
      if (h.action == HookSpec::Action::add && static_cast<int>(h.vector.size()) != c.d_model) {
        throw ShapeError("residual add hook expects a " + std::to_string(c.d_model) + "-vector, got " +
                         std::to_string(h.vector.size()));
      }
    } else {
      if (h.site.layer < 0 || h.site.layer >= c.n_layers || h.site.head < 0 || h.site.head >= c.n_heads) {
        throw ConfigError("head hook (" + std::to_string(h.site.layer) + ", " + std::to_string(h.site.head) +
                          ") out of range");
      }
      if (h.action == HookSpec::Action::add && static_cast<int>(h.vector.size()) != c.d_head()) {
        throw ShapeError("head add hook expects a " + std::to_string(c.d_head()) + "-vector, got " +
                         std::to_string(h.vector.size()));
      }
    }
    if (h.action == HookSpec::Action::add && !std::isfinite(h.alpha)) {
      throw ConfigError("hook coefficient must be finite");
    }
  }
}

template <typename Block>
void add_hook_vector(Block&& x, const HookSpec& h) {
  using T = typename std::decay_t<Block>::Scalar;
  const auto n = static_cast<std::size_t>(x.rows());
  const T alpha = static_cast<T>(h.alpha);
  for (std::size_t t = h.positions.begin; t < n && t < h.positions.end; ++t) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      x(static_cast<Eigen::Index>(t), j) += alpha * static_cast<T>(h.vector[static_cast<std::size_t>(j)]);
    }
  }
}

template <typename T>
void apply_residual_hooks(Matrix<T>& x, int layer, std::span<const HookSpec> hooks, ActivationTrace* trace) {
  bool capture = false;
  for (const auto& h : hooks) {
    if (h.site.kind != HookSite::Kind::residual || h.site.layer != layer) continue;
    if (h.action == HookSpec::Action::add) {
      add_hook_vector(x, h);
    } else {
      capture = true;
    }
  }
  if (capture && trace != nullptr) trace->resid[static_cast<std::size_t>(layer)] = x.template cast<float>();
}

inline void prepare_trace(const ModelConfig& c, ActivationTrace& trace) {
  trace.resid.assign(static_cast<std::size_t>(c.n_layers + 1), MatrixF());
  trace.head_out.assign(static_cast<std::size_t>(c.n_layers), std::vector<MatrixF>(static_cast<std::size_t>(c.n_heads)));
  trace.attn_block_out.assign(static_cast<std::size_t>(c.n_layers), MatrixF());
  trace.mlp_block_out.assign(static_cast<std::size_t>(c.n_layers), MatrixF());
}

inline bool wants_capture(std::span<const HookSpec> hooks, HookSite site) {
  for (const auto& h : hooks) {
    if (h.action == HookSpec::Action::capture && h.site == site) return true;
  }
  return false;
}

/// Returns logits (tokens x vocab). Fills `trace` for captured sites and
/// `cache` with everything the backward pass needs.
template <typename T>
Matrix<T> run_forward(const BasicWeights<T>& w, std::span<const TokenId> tokens, std::span<const HookSpec> hooks,
                      ActivationTrace* trace, ForwardCache<T>* cache) {
  const ModelConfig& c = w.config;
  if (tokens.empty()) throw DataError("empty token sequence");
  if (static_cast<int>(tokens.size()) > c.max_seq) {
    throw DataError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                    std::to_string(c.max_seq));
  }
  for (auto t : tokens) {
    if (t < 0 || t >= c.vocab_size) throw DataError("token id " + std::to_string(t) + " out of range");
  }
  validate_hooks(c, hooks);
  if (trace != nullptr) prepare_trace(c, *trace);

  const auto n = static_cast<Eigen::Index>(tokens.size());
  const int d = c.d_model, dh = c.d_head();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Matrix<T> x(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    x.row(t) = w.tok_embed.row(tokens[static_cast<std::size_t>(t)]) + w.pos_embed.row(t);
    if (t > 0) x.row(t) += w.prev_embed.row(tokens[static_cast<std::size_t>(t - 1)]);
  }
  apply_residual_hooks(x, 0, hooks, trace);

  if (cache != nullptr) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->blocks.resize(static_cast<std::size_t>(c.n_layers));
  }

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& p = w.layers[static_cast<std::size_t>(l)];
    BlockCache<T> local;
    BlockCache<T>& bc = cache != nullptr ? cache->blocks[static_cast<std::size_t>(l)] : local;

    NormCache<T>* ln1 = cache != nullptr ? &bc.ln1 : nullptr;
    bc.h1 = layer_norm(x, p.ln1_g, p.ln1_b, ln1);
    bc.q.noalias() = bc.h1 * p.w_q;
    bc.q.rowwise() += p.b_q;
    bc.k.noalias() = bc.h1 * p.w_k;
    bc.k.rowwise() += p.b_k;
    bc.v.noalias() = bc.h1 * p.w_v;
    bc.v.rowwise() += p.b_v;

    bc.z.resize(n, d);
    bc.probs.resize(static_cast<std::size_t>(c.n_heads));
    for (int h = 0; h < c.n_heads; ++h) {
      Matrix<T>& probs = bc.probs[static_cast<std::size_t>(h)];
      probs.noalias() = bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        auto row = probs.row(i).head(i + 1).array();
        row *= scale;
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
        probs.row(i).tail(n - i - 1).setZero();
      }
      auto zh = bc.z.middleCols(h * dh, dh);
      zh.noalias() = probs * bc.v.middleCols(h * dh, dh);
      for (const auto& hook : hooks) {
        if (hook.site.kind == HookSite::Kind::head && hook.site.layer == l && hook.site.head == h &&
            hook.action == HookSpec::Action::add) {
          add_hook_vector(zh, hook);
        }
      }
      if (trace != nullptr && wants_capture(hooks, HookSite::attention_head(l, h))) {
        trace->head_out[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] = Matrix<T>(zh).template cast<float>();
      }
    }
    Matrix<T> attn_out = bc.z * p.w_o;
    attn_out.rowwise() += p.b_o;
    bc.x_mid = x + attn_out;

    NormCache<T>* ln2 = cache != nullptr ? &bc.ln2 : nullptr;
    bc.h2 = layer_norm(bc.x_mid, p.ln2_g, p.ln2_b, ln2);
    bc.pre.noalias() = bc.h2 * p.w_in;
    bc.pre.rowwise() += p.b_in;
    bc.act = gelu(bc.pre, bc.tanh_inner);
    Matrix<T> mlp_out = bc.act * p.w_out;
    mlp_out.rowwise() += p.b_out;

    if (trace != nullptr && wants_capture(hooks, HookSite::residual(l + 1))) {
      trace->attn_block_out[static_cast<std::size_t>(l)] = attn_out.template cast<float>();
      trace->mlp_block_out[static_cast<std::size_t>(l)] = mlp_out.template cast<float>();
    }
    x = bc.x_mid + mlp_out;
    apply_residual_hooks(x, l + 1, hooks, trace);
  }

  NormCache<T> lnf_local;
  Matrix<T> hf = layer_norm(x, w.lnf_g, w.lnf_b, cache != nullptr ? &cache->lnf : &lnf_local);
  Matrix<T> logits = hf * w.unembed;
  if (cache != nullptr) cache->hf = std::move(hf);
  return logits;
}

/// Accumulates parameter gradients into `g` given dLoss/dlogits.
template <typename T>
void run_backward(const BasicWeights<T>& w, const ForwardCache<T>& c, const Matrix<T>& dlogits, BasicWeights<T>& g) {
  const ModelConfig& cfg = w.config;
  const int dh = cfg.d_head();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const auto n = dlogits.rows();

  g.unembed.noalias() += c.hf.transpose() * dlogits;
  Matrix<T> dhf = dlogits * w.unembed.transpose();
  Matrix<T> dx = layer_norm_backward(dhf, w.lnf_g, c.lnf, g.lnf_g, g.lnf_b);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& p = w.layers[static_cast<std::size_t>(l)];
    auto& gp = g.layers[static_cast<std::size_t>(l)];
    const auto& bc = c.blocks[static_cast<std::size_t>(l)];

    // MLP sub-block.
    gp.b_out += dx.colwise().sum();
    gp.w_out.noalias() += bc.act.transpose() * dx;
    Matrix<T> dpre = dx * p.w_out.transpose();
    gelu_backward(dpre, bc.pre, bc.tanh_inner);
    gp.b_in += dpre.colwise().sum();
    gp.w_in.noalias() += bc.h2.transpose() * dpre;
    Matrix<T> dh2 = dpre * p.w_in.transpose();
    Matrix<T> dx_mid = dx + layer_norm_backward(dh2, p.ln2_g, bc.ln2, gp.ln2_g, gp.ln2_b);

    // Attention sub-block.
    gp.b_o += dx_mid.colwise().sum();
    gp.w_o.noalias() += bc.z.transpose() * dx_mid;
    Matrix<T> dz = dx_mid * p.w_o.transpose();
    Matrix<T> dq = Matrix<T>::Zero(n, cfg.d_model);
    Matrix<T> dk = Matrix<T>::Zero(n, cfg.d_model);
    Matrix<T> dv = Matrix<T>::Zero(n, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Matrix<T>& P = bc.probs[static_cast<std::size_t>(h)];
      const auto dzh = dz.middleCols(h * dh, dh);
      Matrix<T> dP = dzh * bc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * dzh;
      const Eigen::Matrix<T, Eigen::Dynamic, 1> dots = (dP.array() * P.array()).rowwise().sum();
      const Matrix<T> dS = ((dP.colwise() - dots).array() * P.array() * scale).matrix();
      dq.middleCols(h * dh, dh).noalias() = dS * bc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = dS.transpose() * bc.q.middleCols(h * dh, dh);
    }
    gp.w_q.noalias() += bc.h1.transpose() * dq;
    gp.w_k.noalias() += bc.h1.transpose() * dk;
    gp.w_v.noalias() += bc.h1.transpose() * dv;
    gp.b_q += dq.colwise().sum();
    gp.b_k += dk.colwise().sum();
    gp.b_v += dv.colwise().sum();
    Matrix<T> dh1 = dq * p.w_q.transpose();
    dh1.noalias() += dk * p.w_k.transpose();
    dh1.noalias() += dv * p.w_v.transpose();
    dx = dx_mid + layer_norm_backward(dh1, p.ln1_g, bc.ln1, gp.ln1_g, gp.ln1_b);
  }

  for (Eigen::Index t = 0; t < n; ++t) {
    g.tok_embed.row(c.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    g.pos_embed.row(t) += dx.row(t);
    if (t > 0) g.prev_embed.row(c.tokens[static_cast<std::size_t>(t - 1)]) += dx.row(t);
  }
}

/// Next-token cross entropy summed over positions 0..n-2. Writes
/// d(sum * weight)/dlogits into `dlogits` when non-null.
template <typename T>
double next_token_loss(const Matrix<T>& logits, std::span<const TokenId> tokens, T weight, Matrix<T>* dlogits) {
  const auto n = logits.rows();
  if (dlogits != nullptr) *dlogits = Matrix<T>::Zero(n, logits.cols());
  double total = 0.0;
  for (Eigen::Index t = 0; t + 1 < n; ++t) {
    const auto row = logits.row(t);
    const T mx = row.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.cols(); ++j) sum += std::exp(static_cast<double>(row(j) - mx));
    const double log_z = static_cast<double>(mx) + std::log(sum);
    const TokenId target = tokens[static_cast<std::size_t>(t + 1)];
    total += log_z - static_cast<double>(row(target));
    if (dlogits != nullptr) {
      for (Eigen::Index j = 0; j < row.cols(); ++j) {
        (*dlogits)(t, j) = static_cast<T>(std::exp(static_cast<double>(row(j)) - log_z)) * weight;
      }
      (*dlogits)(t, target) -= weight;
    }
  }
  return total;
}

}  // namespace mindprobe::detail
