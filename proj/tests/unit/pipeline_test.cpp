#include <gtest/gtest.h>

#include <filesystem>

#include "mindprobe/errors.hpp"
#include "mindprobe/pipeline.hpp"
#include "mindprobe/tensor_archive.hpp"

namespace mindprobe {
namespace {

namespace fs = std::filesystem;

nlohmann::json tiny_json(const fs::path& out) {
  return {{"seed", 4},
          {"model", {{"n_layers", 2}, {"d_model", 16}, {"n_heads", 2}, {"max_seq", 256}}},
          {"training", {{"steps", 15}, {"batch_size", 4}, {"warmup_steps", 2}}},
          {"corpus", {{"n_templates", 30}, {"n_training_documents", 60}}},
          {"variations", {"original", "time_spec"}},
          {"pca_k_list", {2, 4}},
          {"caa", {{"alphas", {1.0}}}},
          {"iti", {{"alphas", {0.0, 5.0}}, {"k", 2}}},
          {"output_dir", out.string()}};
}

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("mindprobe_pipeline_" + std::to_string(::getpid()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  PipelineConfig tiny(const std::string& sub = "out") { return PipelineConfig::from_json(tiny_json(root_ / sub)); }

  fs::path root_;
};

TEST_F(PipelineTest, ConfigRoundTripAndUnknownKeys) {
  const auto c = tiny();
  const auto again = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(again.to_json(), c.to_json());
  EXPECT_EQ(c.model.n_layers, 2);
  EXPECT_EQ(c.caa.alphas, std::vector<float>{1.0f});

  auto j = tiny_json(root_);
  j["colour"] = "blue";
  EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
  j = tiny_json(root_);
  j["probe"] = {{"C", 1.0}, {"penalty", "l1"}};
  EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
  j = tiny_json(root_);
  j["caa"]["alphas"] = nlohmann::json::array();
  EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
  j = tiny_json(root_);
  j["iti"]["k"] = 5;
  EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
  j = tiny_json(root_);
  j["model"]["n_layers"] = "four";
  EXPECT_THROW(PipelineConfig::from_json(j), ConfigError);
}

TEST_F(PipelineTest, SeedsDeriveFromBaseUnlessGiven) {
  auto c = tiny();
  const auto s = c.corpus_seed();
  c.seed = 5;
  EXPECT_NE(c.corpus_seed(), s);
  auto j = tiny_json(root_);
  j["corpus"]["seed"] = 77;
  EXPECT_EQ(PipelineConfig::from_json(j).corpus_seed(), 77u);
}

TEST_F(PipelineTest, MissingPrerequisiteNamesTheStage) {
  const auto c = tiny();
  try {
    run_stage("probe", c);
    FAIL() << "expected PrerequisiteError";
  } catch (const PrerequisiteError& e) {
    EXPECT_EQ(e.stage(), "cache");
    EXPECT_NE(std::string(e.what()).find("'cache'"), std::string::npos);
    EXPECT_EQ(exit_code_for(e), 3);
  }
  try {
    run_stage("train-model", c);
    FAIL() << "expected PrerequisiteError";
  } catch (const PrerequisiteError& e) {
    EXPECT_EQ(e.stage(), "gen-corpus");
  }
  EXPECT_THROW(run_stage("bogus", c), ConfigError);
}

TEST_F(PipelineTest, FullRunIsResumableAndDeterministic) {
  const auto c = tiny("a");
  const auto first = run_pipeline(c);
  for (const char* f : {artifacts::kReportCsv, artifacts::kReportJson, artifacts::kReportTable, artifacts::kManifest}) {
    EXPECT_TRUE(fs::exists(c.output_dir / f)) << f;
  }
  EXPECT_TRUE(fs::exists(c.output_dir / artifacts::pca(VariationKind::time_spec, Perspective::oracle, "csv")));
  for (const auto& o : first) EXPECT_FALSE(o.units_run.empty()) << o.stage;

  const auto second = run_pipeline(c);
  for (const auto& o : second) {
    EXPECT_TRUE(o.units_run.empty()) << o.stage;
    EXPECT_FALSE(o.units_skipped.empty()) << o.stage;
  }

  const auto d = tiny("b");
  run_pipeline(d);
  EXPECT_EQ(read_text_file(c.output_dir / artifacts::kReportJson), read_text_file(d.output_dir / artifacts::kReportJson));
  EXPECT_EQ(read_text_file(c.output_dir / artifacts::kReportTable), read_text_file(d.output_dir / artifacts::kReportTable));

  const auto report = nlohmann::json::parse(read_text_file(c.output_dir / artifacts::kReportJson));
  ASSERT_EQ(report["steering"].size(), 3u);
  EXPECT_EQ(report["steering"][0]["rows"].size(), 3u);
  EXPECT_EQ(report["probing"].size(), 4u);
}

TEST_F(PipelineTest, ChangedConfigNeedsForceAndStaleInputsRerun) {
  auto c = tiny();
  for (const char* s : {"gen-corpus", "train-model", "cache", "probe"}) run_stage(s, c);
  c.probe.C = 1.0;
  EXPECT_THROW(run_stage("probe", c), ConfigError);
  RunOptions force;
  force.force = true;
  const auto o = run_stage("probe", c, force);
  EXPECT_EQ(o.units_run.size(), 4u);

  // Retraining changes the weights, so downstream units rerun without --force.
  auto retrained = c;
  retrained.training.steps = 16;
  EXPECT_THROW(run_stage("train-model", retrained), ConfigError);
  run_stage("train-model", retrained, force);
  EXPECT_EQ(run_stage("cache", retrained).units_run.size(), 2u);
}

TEST_F(PipelineTest, SelectionNarrowsUnits) {
  const auto c = tiny();
  for (const char* s : {"gen-corpus", "train-model"}) run_stage(s, c);
  RunOptions only;
  only.selection.variation = VariationKind::original;
  EXPECT_EQ(run_stage("cache", c, only).units_run, std::vector<std::string>{"cache:original"});
  only.selection.perspective = Perspective::oracle;
  EXPECT_EQ(run_stage("probe", c, only).units_run, std::vector<std::string>{"probe:original:oracle"});
  EXPECT_FALSE(fs::exists(c.output_dir / artifacts::probe(VariationKind::original, Perspective::protagonist, "json")));
}

TEST_F(PipelineTest, TransferTasksNeedTheForwardBeliefRun) {
  const auto c = tiny();
  for (const char* s : {"gen-corpus", "train-model", "cache", "steer-caa", "steer-iti"}) run_stage(s, c);
  RunOptions only;
  only.selection.task = Task::backward_belief;
  try {
    run_stage("eval", c, only);
    FAIL() << "expected PrerequisiteError";
  } catch (const PrerequisiteError& e) {
    EXPECT_EQ(e.stage(), "eval");
  }
}

TEST(ExitCodes, MapErrorKinds) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
  EXPECT_EQ(exit_code_for(PrerequisiteError("cache", "x")), 3);
  EXPECT_EQ(exit_code_for(NumericError("x")), 4);
  EXPECT_EQ(exit_code_for(FormatError("x")), 1);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

}  // namespace
}  // namespace mindprobe
