#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mindprobe/model.hpp"
#include "mindprobe/steering.hpp"
#include "mindprobe/taskgen.hpp"
#include "mindprobe/tokenizer.hpp"

namespace mindprobe {

struct NoIntervention {};
struct CaaIntervention {
  SteeringVector vector;
  float alpha = 1.0f;
};
using Intervention = std::variant<NoIntervention, CaaIntervention, ITIPlan>;

std::string method_name(const Intervention& iv);

struct ItemPrediction {
  std::size_t index = 0;  // position in the evaluated item list
  std::int64_t template_id = -1;
  Condition condition = Condition::true_belief;
  std::size_t chosen = 0;
  bool correct = false;
};

struct TaskResult {
  std::string method = "none";
  Task task = Task::forward_belief;
  std::vector<ItemPrediction> predictions;
  double tb = 0.0;    // percent
  double fb = 0.0;    // percent
  double both = 0.0;  // percent of templates with TB and FB both correct
  std::size_t n_pairs = 0;
  std::size_t n_unpaired = 0;  // items left out of Both for lack of a partner
  nlohmann::json hyperparameters = nlohmann::json::object();

  nlohmann::json to_json() const;
};

/// Fills tb, fb, both, n_pairs and n_unpaired from `predictions`.
void compute_accuracies(TaskResult& result);

TaskResult evaluate_task(const Weights& weights, const Vocabulary& vocab, const std::vector<BeliefItem>& items,
                         const Intervention& intervention = NoIntervention{},
                         std::string_view instruction = kDefaultInstruction);

struct SignificanceResult {
  std::size_t b = 0;  // a correct, b wrong
  std::size_t c = 0;  // a wrong, b correct
  double p_value = 1.0;
  bool significant = false;
  std::string method;  // "exact" or "chi2_cc"
};

/// Paired test on correctness vectors.
SignificanceResult mcnemar_from_correct(const std::vector<bool>& a_correct, const std::vector<bool>& b_correct);
SignificanceResult mcnemar_test(const std::vector<std::size_t>& preds_a, const std::vector<std::size_t>& preds_b,
                                const std::vector<std::size_t>& gold);
/// Two-sided exact binomial p for discordant counts (b, c).
double mcnemar_exact_p(std::size_t b, std::size_t c);

/// "66_{+22}" with a trailing "*" when significant. Delta is rounded from the
/// unrounded difference.
std::string format_delta_cell(double value, double baseline, bool significant);

struct DeltaRow {
  std::string method;
  nlohmann::json hyperparameters;
  double tb = 0, fb = 0, both = 0;
  std::optional<double> d_tb, d_fb, d_both;  // empty on the baseline row
  bool significant = false;
  std::optional<SignificanceResult> test;
  std::string cell_tb, cell_fb, cell_both;
};

struct DeltaReport {
  Task task = Task::forward_belief;
  std::vector<DeltaRow> rows;  // baseline first

  std::string to_text() const;
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// Pooled McNemar per treatment against the baseline on the same items.
DeltaReport delta_report(const TaskResult& baseline, const std::vector<TaskResult>& treatments);

/// Several task reports as one aligned table.
std::string render_table(const std::vector<DeltaReport>& reports);

}  // namespace mindprobe
