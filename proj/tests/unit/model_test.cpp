#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mindprobe/errors.hpp"
#include "mindprobe/model.hpp"
#include "mindprobe/rng.hpp"
#include "mindprobe/train.hpp"

namespace mindprobe {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 4;
  c.vocab_size = 23;
  c.max_seq = 32;
  c.seed = 7;
  return c;
}

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, int vocab) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.index(static_cast<std::size_t>(vocab)));
  return t;
}

TEST(BuildModel, SameSeedGivesIdenticalChecksum) {
  const auto a = build_model(small_config());
  const auto b = build_model(small_config());
  EXPECT_EQ(weights_checksum(a), weights_checksum(b));
  auto other = small_config();
  other.seed = 8;
  EXPECT_NE(weights_checksum(a), weights_checksum(build_model(other)));
}

TEST(BuildModel, RejectsNonDividingHeads) {
  ModelConfig c = small_config();
  c.d_model = 64;
  c.n_heads = 3;
  EXPECT_THROW(build_model(c), ConfigError);
  c = small_config();
  c.vocab_size = 0;
  EXPECT_THROW(build_model(c), ConfigError);
}

TEST(BuildModel, Pythia70mPresetShapes) {
  const auto c = ModelConfig::pythia_70m(50, 64);
  EXPECT_EQ(c.d_model, 512);
  EXPECT_EQ(c.n_layers, 6);
  const auto w = build_model(c);
  EXPECT_EQ(w.layers.size(), 6u);
  EXPECT_EQ(w.tok_embed.cols(), 512);
  EXPECT_EQ(w.layers[0].w_in.cols(), 2048);
}

TEST(Forward, ZeroCoefficientAddIsBitIdentical) {
  const auto w = build_model(small_config());
  Rng rng(1);
  const auto tokens = random_tokens(rng, 12, 23);
  std::vector<float> v(16);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  const auto plain = forward_with_hooks(w, tokens);
  std::vector<HookSpec> hooks{HookSpec::add(HookSite::residual(1), v, 0.0f)};
  const auto hooked = forward_with_hooks(w, tokens, hooks);
  EXPECT_EQ(0, std::memcmp(plain.logits.data(), hooked.logits.data(), sizeof(float) * plain.logits.size()));
}

TEST(Forward, AddThenSubtractCancels) {
  const auto w = build_model(small_config());
  Rng rng(2);
  const auto tokens = random_tokens(rng, 10, 23);
  std::vector<float> v(16);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  std::vector<HookSpec> hooks{HookSpec::add(HookSite::residual(1), v, 1.5f, PositionRange::from(3)),
                              HookSpec::add(HookSite::residual(1), v, -1.5f, PositionRange::from(3))};
  const auto plain = forward_with_hooks(w, tokens);
  const auto hooked = forward_with_hooks(w, tokens, hooks);
  EXPECT_LE((plain.logits - hooked.logits).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Forward, CaptureDoesNotChangeLogits) {
  const auto w = build_model(small_config());
  Rng rng(3);
  const auto tokens = random_tokens(rng, 9, 23);
  const auto plain = forward_with_hooks(w, tokens);
  const auto hooks = capture_everything(w.config);
  const auto captured = forward_with_hooks(w, tokens, hooks);
  EXPECT_TRUE(plain.logits == captured.logits);
  for (const auto& m : plain.trace.resid) EXPECT_EQ(m.size(), 0);
  ASSERT_EQ(captured.trace.resid.size(), 3u);
  EXPECT_EQ(captured.trace.head_out[1][3].rows(), 9);
  EXPECT_EQ(captured.trace.head_out[1][3].cols(), 4);
}

TEST(Forward, ResidualDecomposition) {
  const auto w = build_model(small_config());
  Rng rng(4);
  const auto tokens = random_tokens(rng, 14, 23);
  const auto r = forward_with_hooks(w, tokens, capture_residual_stream(w.config));
  for (int l = 0; l < w.config.n_layers; ++l) {
    const auto& tr = r.trace;
    const MatrixF recomposed = tr.resid[l] + tr.attn_block_out[l] + tr.mlp_block_out[l];
    const float rel = (recomposed - tr.resid[l + 1]).norm() / tr.resid[l + 1].norm();
    EXPECT_LE(rel, 1e-5f) << "layer " << l;
  }
}

TEST(Forward, PreviousTokenReachesOnlyTheNextPosition) {
  const auto w = build_model(small_config());
  std::vector<TokenId> a{1, 5, 9, 2}, b{1, 6, 9, 2};
  const auto hooks = capture_residual_stream(w.config);
  const auto ra = forward_with_hooks(w, a, hooks).trace.resid[0];
  const auto rb = forward_with_hooks(w, b, hooks).trace.resid[0];
  EXPECT_EQ(ra.row(0), rb.row(0));
  EXPECT_NE(ra.row(1), rb.row(1));
  EXPECT_NE(ra.row(2), rb.row(2));  // same token, different predecessor
  EXPECT_EQ(ra.row(3), rb.row(3));
  const Eigen::RowVectorXf expected = w.tok_embed.row(9) + w.pos_embed.row(2) + w.prev_embed.row(5);
  EXPECT_EQ(ra.row(2), expected);
}

TEST(Forward, RejectsOutOfRangeInput) {
  const auto w = build_model(small_config());
  std::vector<TokenId> bad{1, 2, 99};
  EXPECT_THROW(forward_with_hooks(w, bad), DataError);
  std::vector<TokenId> ok{1, 2, 3};
  std::vector<HookSpec> hooks{HookSpec::capture(HookSite::residual(5))};
  EXPECT_THROW(forward_with_hooks(w, ok, hooks), ConfigError);
  std::vector<HookSpec> head{HookSpec::capture(HookSite::attention_head(0, 4))};
  EXPECT_THROW(forward_with_hooks(w, ok, head), ConfigError);
  std::vector<HookSpec> width{HookSpec::add(HookSite::residual(0), std::vector<float>(3), 1.0f)};
  EXPECT_THROW(forward_with_hooks(w, ok, width), ShapeError);
  std::vector<TokenId> long_seq(40, 1);
  EXPECT_THROW(forward_with_hooks(w, long_seq), DataError);
}

TEST(Score, UniformModelGivesLogInverseVocab) {
  auto w = build_model(small_config());
  w.unembed.setZero();
  std::vector<TokenId> prompt{1, 5, 6};
  std::vector<TokenId> answer{9};
  EXPECT_NEAR(score_completion(w, prompt, answer), std::log(1.0 / 23.0), 1e-9);
  EXPECT_THROW(score_completion(w, prompt, std::vector<TokenId>{}), DataError);
}

TEST(Score, ChainRule) {
  const auto w = build_model(small_config());
  Rng rng(5);
  const auto q = random_tokens(rng, 6, 23);
  const auto a1 = random_tokens(rng, 3, 23);
  const auto a2 = random_tokens(rng, 4, 23);
  std::vector<TokenId> qa1 = q;
  qa1.insert(qa1.end(), a1.begin(), a1.end());
  std::vector<TokenId> a12 = a1;
  a12.insert(a12.end(), a2.begin(), a2.end());
  const double split = score_completion(w, q, a1) + score_completion(w, qa1, a2);
  const double joint = score_completion(w, q, a12);
  EXPECT_NEAR(split, joint, 1e-5 * std::abs(joint));
}

TEST(Rank, DuplicateAnswersTieToFirst) {
  const auto w = build_model(small_config());
  std::vector<TokenId> q{1, 4, 5};
  const auto r = rank_answers(w, q, {{7, 8}, {7, 8}});
  EXPECT_EQ(r.best, 0u);
  EXPECT_THROW(rank_answers(w, q, {{7}}), DataError);
}

TEST(Rank, ArgmaxInvariantUnderLogitShift) {
  auto w = build_model(small_config());
  std::vector<TokenId> q{1, 4, 5, 9};
  const auto before = rank_answers(w, q, {{7, 8}, {3, 2}, {11}});
  // Same u in every unembedding column shifts all logits of a position by h.u.
  Eigen::VectorXf u = Eigen::VectorXf::LinSpaced(w.config.d_model, -0.3f, 0.4f);
  for (Eigen::Index j = 0; j < w.unembed.cols(); ++j) w.unembed.col(j) += u;
  const auto after = rank_answers(w, q, {{7, 8}, {3, 2}, {11}});
  EXPECT_EQ(before.best, after.best);
  for (std::size_t i = 0; i < before.scores.size(); ++i) EXPECT_NEAR(before.scores[i], after.scores[i], 1e-4);
}

TEST(WeightsArchive, RoundTripIsBitExact) {
  const auto w = build_model(small_config());
  const auto path = std::filesystem::temp_directory_path() / "mindprobe_weights_rt.bin";
  save_weights(w, path);
  const auto back = load_weights(path);
  EXPECT_EQ(back.config, w.config);
  EXPECT_EQ(weights_checksum(back), weights_checksum(w));
  std::filesystem::remove(path);
}

TEST(WeightsArchive, TruncatedFileFails) {
  const auto w = build_model(small_config());
  auto bytes = encode_archive(weights_to_archive(w));
  bytes.resize(bytes.size() - 200);
  EXPECT_THROW(weights_from_archive(decode_archive(bytes)), FormatError);
  bytes.resize(5);
  EXPECT_THROW(decode_archive(bytes), FormatError);
}

TEST(WeightsArchive, ShapeMismatchAgainstHeader) {
  // Header claims d_model 512 but the payload was written for 256.
  ModelConfig c = small_config();
  c.d_model = 256;
  c.n_heads = 4;
  auto archive = weights_to_archive(build_model(c));
  archive.meta["config"]["d_model"] = 512;
  const auto bytes = encode_archive(archive);
  EXPECT_THROW(weights_from_archive(decode_archive(bytes)), ShapeError);
}

TEST(WeightsArchive, PayloadsAre64ByteAligned) {
  const auto bytes = encode_archive(weights_to_archive(build_model(small_config())));
  const std::uint64_t header_len = *reinterpret_cast<const std::uint64_t*>(bytes.data());
  const auto header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  for (const auto& t : header["tensors"]) EXPECT_EQ(t["offset"].get<std::uint64_t>() % 64, 0u);
}

TEST(Train, ZeroStepsLeavesWeightsUnchanged) {
  const auto w = build_model(small_config());
  TrainOptions opt;
  opt.steps = 0;
  const auto r = train_lm(w, {{1, 2, 3}}, opt);
  EXPECT_EQ(weights_checksum(r.weights), weights_checksum(w));
  EXPECT_TRUE(r.loss_curve.empty());
}

TEST(Train, DeterministicPerSeed) {
  const auto w = build_model(small_config());
  TokenCorpus corpus{{1, 2, 3, 4, 5}, {1, 6, 7, 8, 9, 10}, {1, 3, 5, 7}};
  TrainOptions opt;
  opt.steps = 15;
  opt.batch_size = 2;
  opt.seed = 3;
  const auto a = train_lm(w, corpus, opt);
  const auto b = train_lm(w, corpus, opt);
  EXPECT_EQ(a.loss_curve.back(), b.loss_curve.back());
  EXPECT_EQ(weights_checksum(a.weights), weights_checksum(b.weights));
}

TEST(Train, CheckpointsSeeUpdatedWeights) {
  const auto w = build_model(small_config());
  TokenCorpus corpus{{1, 2, 3, 4, 5}, {1, 6, 7, 8, 9, 10}};
  TrainOptions opt;
  opt.batch_size = 2;
  opt.checkpoint_every = 3;
  std::vector<int> seen;
  std::uint64_t last = 0;
  opt.on_checkpoint = [&](int step, const Weights& cur) {
    seen.push_back(step);
    last = weights_checksum(cur);
  };
  opt.steps = 6;
  const auto r = train_lm(w, corpus, opt);
  EXPECT_EQ(seen, (std::vector<int>{3, 6}));
  EXPECT_EQ(last, weights_checksum(r.weights));
}

TEST(Train, OverfitsSingleSequence) {
  ModelConfig c = small_config();
  c.d_model = 32;
  c.vocab_size = 30;
  const auto w = build_model(c);
  Rng rng(11);
  TokenCorpus corpus{random_tokens(rng, 20, 30)};
  TrainOptions opt;
  opt.steps = 500;
  opt.batch_size = 1;
  opt.learning_rate = 0.5;
  opt.grad_clip = 0.0;
  const auto r = train_lm(w, corpus, opt);
  EXPECT_LT(r.loss_curve.back(), 0.05);
  EXPECT_LT(corpus_loss(r.weights, corpus), 0.05);
}

TEST(Train, DivergenceReportsStep) {
  const auto w = build_model(small_config());
  TokenCorpus corpus{{1, 2, 3, 4, 5}};
  TrainOptions opt;
  opt.steps = 50;
  opt.batch_size = 1;
  opt.learning_rate = 1e30;
  opt.grad_clip = 0.0;
  try {
    train_lm(w, corpus, opt);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Train, GradientMatchesFiniteDifferences) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 11;
  c.max_seq = 16;
  c.seed = 21;
  const auto wd = cast_weights<double>(build_model(c));
  TokenCorpus batch{{1, 4, 2, 9, 3, 3, 7}, {1, 10, 5, 6}};
  const auto lg = loss_and_gradient<double>(wd, batch);

  std::vector<std::pair<std::string, std::size_t>> picks;
  Rng rng(99);
  std::vector<TensorRef> refs;
  wd.visit([&](const TensorRef& ref, const double*) { refs.push_back(ref); });
  int checked = 0;
  for (int trial = 0; trial < 200 && checked < 40; ++trial) {
    const auto& ref = refs[rng.index(refs.size())];
    std::size_t n = 1;
    for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
    const std::size_t idx = rng.index(n);
    double analytic = 0.0;
    lg.gradient.visit([&](const TensorRef& r, const double* d) {
      if (r.name == ref.name) analytic = d[idx];
    });
    const double eps = 1e-5;
    auto perturbed = [&](double delta) {
      auto w2 = wd;
      w2.visit([&](const TensorRef& r, double* d) {
        if (r.name == ref.name) d[idx] += delta;
      });
      return loss_and_gradient<double>(w2, batch).loss;
    };
    const double numeric = (perturbed(eps) - perturbed(-eps)) / (2 * eps);
    if (std::abs(numeric) < 1e-7 && std::abs(analytic) < 1e-7) continue;  // unused embedding rows
    const double rel = std::abs(numeric - analytic) / std::max(std::abs(numeric), std::abs(analytic));
    EXPECT_LE(rel, 1e-3) << ref.name << "[" << idx << "] analytic " << analytic << " numeric " << numeric;
    ++checked;
  }
  EXPECT_GE(checked, 20);
}

}  // namespace
}  // namespace mindprobe
