#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <iterator>
#include <vector>

#include <json.hpp>

#include "mindprobe/activation_cache.hpp"
#include "mindprobe/model.hpp"
#include "mindprobe/taskgen.hpp"

namespace mindprobe {

struct TrainingConfig {
  int steps = 2000;
  double learning_rate = 3e-3;
  int batch_size = 8;
  int warmup_steps = 50;
  double final_lr_fraction = 0.1;
  double grad_clip = 1.0;
  std::optional<std::uint64_t> seed;
};

struct ProbeConfig {
  std::optional<std::uint64_t> split_seed;
  double C = 10.0;
  int max_iterations = 1000;
  double gradient_tolerance = 1e-6;
};

struct CaaConfig {
  std::vector<float> alphas{1.0f, 1.5f, 2.0f};
  int first_layer = 0;
  int last_layer = -1;  // -1 means the final residual site (n_layers)
};

struct ItiConfig {
  std::vector<float> alphas{0.0f, 10.0f, 15.0f, 20.0f};
  std::size_t k = 16;
  Perspective perspective = Perspective::protagonist;
};

struct EvalConfig {
  /// Share of templates whose Forward Belief items feed the steering vectors.
  double steering_fraction = 0.5;
  std::optional<std::uint64_t> split_seed;
  std::vector<Task> tasks{std::begin(kAllTasks), std::end(kAllTasks)};
  /// Overrides the default instruction line when non-empty.
  std::string instruction_file;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  ModelConfig model;  // vocab_size is taken from the generated vocabulary
  TrainingConfig training;
  CorpusOptions corpus;
  std::optional<std::uint64_t> corpus_seed_override;
  std::optional<std::uint64_t> model_seed_override;
  std::vector<VariationKind> variations{VariationKind::original};
  std::vector<Perspective> perspectives{Perspective::protagonist, Perspective::oracle};
  ProbeConfig probe;
  std::vector<std::size_t> pca_k_list{1, 2, 4, 8, 16, 32, 64, 128};
  CaaConfig caa;
  ItiConfig iti;
  EvalConfig eval;
  std::filesystem::path output_dir = "mindprobe-out";

  /// Unknown keys anywhere are rejected with ConfigError.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);
  /// Fully resolved form, derived seeds included.
  nlohmann::json to_json() const;
  void validate() const;

  std::uint64_t corpus_seed() const;
  std::uint64_t model_seed() const;
  std::uint64_t training_seed() const;
  std::uint64_t split_seed() const;
  std::uint64_t eval_split_seed() const;
  std::uint64_t variation_seed(VariationKind kind) const;
};

/// Narrows a stage to a subset of its work.
struct StageSelection {
  std::optional<Perspective> perspective;
  std::optional<VariationKind> variation;
  std::optional<Task> task;
};

struct RunOptions {
  bool force = false;
  StageSelection selection;
  std::function<void(const std::string&)> log;
};

struct StageOutcome {
  std::string stage;
  std::vector<std::string> units_run;
  std::vector<std::string> units_skipped;
};

const std::vector<std::string>& stage_names();

/// Runs one stage. Throws PrerequisiteError naming the stage that must run
/// first, ConfigError when a unit was produced under a different config and
/// `force` is off, NumericError on training divergence.
StageOutcome run_stage(const std::string& stage, const PipelineConfig& config, const RunOptions& options = {});

/// Every stage in order.
std::vector<StageOutcome> run_pipeline(const PipelineConfig& config, const RunOptions& options = {});

/// Exit code for an exception escaping a stage: 2 config, 3 prerequisite,
/// 4 numeric, 1 anything else.
int exit_code_for(const std::exception& e);

/// Artifact paths relative to the output directory.
namespace artifacts {
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kConfig = "config.resolved.json";
inline constexpr const char* kTrainingDocs = "corpus/training.txt";
inline constexpr const char* kVocab = "corpus/vocab.json";
inline constexpr const char* kItems = "corpus/items.jsonl";
inline constexpr const char* kWeights = "model/weights.bin";
inline constexpr const char* kTrainingLog = "model/training.json";
inline constexpr const char* kCaaVectors = "steer/caa.bin";
inline constexpr const char* kSteerSplit = "steer/split.json";
inline constexpr const char* kItiPlan = "steer/iti.bin";
inline constexpr const char* kReportCsv = "report/results.csv";
inline constexpr const char* kReportJson = "report/results.json";
inline constexpr const char* kReportTable = "report/table.txt";
std::string cache(VariationKind v);
std::string probe(VariationKind v, Perspective p, const std::string& ext);
std::string pca(VariationKind v, Perspective p, const std::string& ext);
std::string eval(Task t);  // per-task JSON; a CSV of the grid sits next to it
}  // namespace artifacts

}  // namespace mindprobe
