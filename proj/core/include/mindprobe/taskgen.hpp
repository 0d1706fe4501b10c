#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mindprobe/tokenizer.hpp"

namespace mindprobe {

enum class Condition { true_belief, false_belief };
enum class Task { forward_belief, forward_action, backward_belief };
enum class VariationKind { original, random, misleading, time_spec, initial_belief };

std::string_view to_string(Condition c);
std::string_view to_string(Task t);
std::string_view to_string(VariationKind k);
Condition parse_condition(std::string_view s);
Task parse_task(std::string_view s);
VariationKind parse_variation(std::string_view s);

inline constexpr Task kAllTasks[] = {Task::forward_belief, Task::forward_action, Task::backward_belief};

struct StoryTemplate {
  std::string name;
  std::string role;
  std::string place;
  std::string product;
  std::string container;
  std::string other;  // agent of the causal event
  std::string initial_content;
  std::string swapped_content;
  bool witness = false;
};

struct Variation {
  VariationKind kind = VariationKind::original;
  std::uint64_t seed = 0;
  // What was inserted, so the edit can be undone.
  std::string belief_prefix;
  std::string belief_suffix;
  std::string story_insert;
  std::size_t story_insert_at = 0;  // byte offset in the varied story

  nlohmann::json to_json() const;
  static Variation from_json(const nlohmann::json& j);
};

struct BeliefItem {
  std::string story;   // space separated word tokens
  std::string belief;  // belief statement, same convention
  std::string question;
  std::vector<std::string> answers;
  std::size_t correct_index = 0;
  bool z_p = false;  // protagonist perspective
  bool z_o = false;  // oracle perspective
  Condition condition = Condition::true_belief;
  Task task = Task::forward_belief;
  Variation variation;
  std::int64_t template_id = -1;
  // Number of the sentence (0-based) after which the protagonist's initial
  // belief may be revealed; -1 when unknown.
  int percept_index = -1;
  std::string initial_belief_sentence;
  std::size_t oov = 0;

  nlohmann::json to_json() const;
  static BeliefItem from_json(const nlohmann::json& j);
};

struct CorpusOptions {
  std::size_t n_templates = 200;
  std::uint64_t seed = 0;
  /// Number of training narration documents.
  std::size_t n_training_documents = 4000;
  /// Fraction of question/answer training documents drawn from false-belief
  /// stories. Low values give the trained model a reality bias.
  double qa_false_belief_fraction = 0.15;
  /// Fraction of training documents that are question/answer documents; the
  /// rest are narrations followed by judged belief statements.
  double qa_fraction = 0.5;
  /// Adds judged "world : ..." lines about the container to each narration.
  bool world_statements = true;
  std::size_t max_vocab = 0;  // 0 = unlimited
};

struct GeneratedCorpus {
  std::vector<std::string> training_documents;
  std::vector<StoryTemplate> templates;
  // Items for each task, in template order, TB before FB.
  std::vector<BeliefItem> forward_belief;
  std::vector<BeliefItem> forward_action;
  std::vector<BeliefItem> backward_belief;

  const std::vector<BeliefItem>& items(Task t) const;
};

/// Every word the generator and the prompt layouts can emit.
std::vector<std::string> generator_lexicon();
Vocabulary generator_vocabulary();

StoryTemplate sample_template(std::uint64_t seed);

/// Builds the three task items of one template and condition.
std::vector<BeliefItem> make_items(const StoryTemplate& t, std::int64_t template_id, bool statement_uses_initial,
                                   std::uint64_t answer_order_seed);

GeneratedCorpus generate_corpus(const CorpusOptions& options);

/// Surface edit of the prompt; labels and answers are untouched. Misleading
/// draws its second statement from another template in `batch`.
BeliefItem apply_variation(const BeliefItem& item, const Variation& variation,
                           std::span<const BeliefItem> batch = {});
BeliefItem revert_variation(const BeliefItem& item);
/// Applies `kind` to every item, seeding each from `seed` and the item index.
std::vector<BeliefItem> apply_variation_all(const std::vector<BeliefItem>& items, VariationKind kind,
                                            std::uint64_t seed);

/// "story : ... <nl> belief : ..."
std::string probe_prompt(const BeliefItem& item);

inline constexpr std::string_view kDefaultInstruction =
    "answer the questions based on the context . keep your answer concise , few words are enough , "
    "maximum one sentence . answer as ' answer : <option> ) <answer> ' .";

/// Evaluation prompt up to and including the trailing "answer :".
std::string eval_prompt(const BeliefItem& item, std::string_view instruction = kDefaultInstruction);

void write_items_jsonl(const std::vector<BeliefItem>& items, const std::filesystem::path& path);
std::vector<BeliefItem> read_items_jsonl(const std::filesystem::path& path);

/// Reads BigToM-style CSV, JSON array or JSON-lines files. Required columns:
/// story, question, answer_a, answer_b, correct_index, condition.
std::vector<BeliefItem> load_bigtom(const std::filesystem::path& path, const Vocabulary& vocabulary);

}  // namespace mindprobe
