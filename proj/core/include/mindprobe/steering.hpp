#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mindprobe/model.hpp"
#include "mindprobe/probing.hpp"
#include "mindprobe/taskgen.hpp"
#include "mindprobe/tokenizer.hpp"

namespace mindprobe {

struct ContrastPair {
  std::vector<TokenId> prompt;
  std::vector<TokenId> positive;
  std::vector<TokenId> negative;
};

/// Evaluation prompt with the correct answer as the positive completion.
std::vector<ContrastPair> make_contrast_pairs(const std::vector<BeliefItem>& items, const Vocabulary& vocab,
                                              std::string_view instruction = kDefaultInstruction);

struct SteeringVector {
  int layer = 0;
  std::vector<float> v;
  std::string source_fingerprint;
  std::size_t n_pairs = 0;
  std::size_t n_skipped = 0;
};

/// Mean over pairs of resid[layer] at the last token of prompt+positive minus
/// the same for prompt+negative. Pairs that do not fit max_seq are skipped.
SteeringVector compute_caa(const Weights& weights, const std::vector<ContrastPair>& pairs, int layer);
/// Vectors for every residual site 0..n_layers from one pass over the pairs.
std::vector<SteeringVector> compute_caa_all_layers(const Weights& weights, const std::vector<ContrastPair>& pairs);

/// Adds alpha * v at `layer` for every position from `first_position` on.
std::vector<HookSpec> caa_hooks(const SteeringVector& v, float alpha, std::size_t first_position);

/// Ranks candidates with the vector added to the answer positions only.
Ranking apply_caa(const Weights& weights, std::span<const TokenId> prompt,
                  const std::vector<std::vector<TokenId>>& candidates, const SteeringVector& v, float alpha);

struct ITIHead {
  int layer = 0;
  int head = 0;
  double validation_accuracy = 0.0;
  double sigma = 0.0;
  std::vector<float> theta;  // unit length, d_head
};

struct ITIPlan {
  std::vector<ITIHead> heads;  // selected, best first
  float alpha = 0.0f;
  std::size_t k = 0;
  std::uint64_t split_seed = 0;
  std::vector<std::string> notes;
};

/// One probe per (layer, head) on the stratified split; keeps the k heads with
/// the best held-out accuracy. Heads whose activations have no variance are
/// excluded with a note.
ITIPlan prepare_iti(const std::vector<std::vector<MatrixD>>& heads, const std::vector<bool>& z, std::size_t k,
                    float alpha, std::uint64_t split_seed, const ProbeOptions& options = {});

std::vector<HookSpec> iti_hooks(const ITIPlan& plan, std::size_t first_position);

Ranking apply_iti(const Weights& weights, std::span<const TokenId> prompt,
                  const std::vector<std::vector<TokenId>>& candidates, const ITIPlan& plan);

void save_steering_vectors(const std::vector<SteeringVector>& vectors, const std::filesystem::path& path);
std::vector<SteeringVector> load_steering_vectors(const std::filesystem::path& path);
void save_iti_plan(const ITIPlan& plan, const std::filesystem::path& path);
ITIPlan load_iti_plan(const std::filesystem::path& path);

}  // namespace mindprobe
