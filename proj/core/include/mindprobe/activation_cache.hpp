#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mindprobe/model.hpp"
#include "mindprobe/taskgen.hpp"
#include "mindprobe/tokenizer.hpp"

namespace mindprobe {

enum class Perspective { protagonist, oracle };
std::string_view to_string(Perspective p);
Perspective parse_perspective(std::string_view s);

struct SkippedItem {
  std::size_t index = 0;
  std::string reason;
};

struct ProbingDataset {
  std::vector<MatrixF> resid;               // [layer] n x d_model, layer 0 = embeddings
  std::vector<std::vector<MatrixF>> heads;  // [layer][head] n x d_head; empty when not captured
  std::vector<bool> z_protagonist;
  std::vector<bool> z_oracle;
  Perspective perspective = Perspective::oracle;
  std::string variation = "original";
  std::string model_fingerprint;
  std::vector<std::size_t> item_index;  // source item of every row
  std::vector<SkippedItem> skipped;

  std::size_t rows() const { return z_oracle.size(); }
  const std::vector<bool>& labels() const { return perspective == Perspective::protagonist ? z_protagonist : z_oracle; }
  /// True when the positive share of labels() is outside [0.45, 0.55].
  bool imbalanced() const;
  std::vector<MatrixD> resid_as_double() const;
  /// Throws ShapeError if row counts disagree.
  void validate() const;
};

struct CacheOptions {
  bool capture_heads = true;
};

ProbingDataset cache_activations(const Weights& weights, const Vocabulary& vocab, const std::vector<BeliefItem>& items,
                                 Perspective perspective, const CacheOptions& options = {});

void save_dataset(const ProbingDataset& ds, const std::filesystem::path& path);
ProbingDataset load_dataset(const std::filesystem::path& path);

/// Warning text when the dataset was not produced by `weights`.
std::optional<std::string> fingerprint_warning(const ProbingDataset& ds, const Weights& weights);

}  // namespace mindprobe
