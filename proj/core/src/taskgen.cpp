#include "mindprobe/taskgen.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <sstream>

#include "mindprobe/errors.hpp"
#include "mindprobe/rng.hpp"
#include "mindprobe/tensor_archive.hpp"

namespace mindprobe {

namespace {

struct Scenario {
  const char* role;
  const char* place;
  const char* product;
  const char* container;
  std::array<const char*, 4> contents;
};

constexpr Scenario kScenarios[] = {
    {"barista", "coffee shop", "latte", "pitcher", {"oat", "almond", "soy", "coconut"}},
    {"baker", "bakery", "cake", "jar", {"sugar", "salt", "flour", "cocoa"}},
    {"painter", "studio", "mural", "bucket", {"red", "blue", "green", "white"}},
    {"cook", "restaurant", "soup", "pot", {"broth", "cream", "water", "wine"}},
    {"chemist", "lab", "solution", "flask", {"acid", "ethanol", "brine", "glycerin"}},
    {"bartender", "bar", "cocktail", "bottle", {"rum", "gin", "vodka", "tequila"}},
    {"mechanic", "garage", "repair", "can", {"oil", "fuel", "coolant", "grease"}},
    {"florist", "flower shop", "bouquet", "vase", {"water", "vinegar", "syrup", "juice"}},
};

constexpr const char* kNames[] = {"noor", "amir", "lena", "kofi", "mei",   "ravi",
                                  "sofia", "tomas", "yara", "ivan", "zara", "omar"};
constexpr const char* kOthers[] = {"coworker", "friend", "neighbor", "assistant"};

// Judgement words that follow a belief statement in training narration,
// indexed by [protagonist holds it][it is actually so].
constexpr const char* kJudgement[2][2] = {{"false", "unaware"}, {"outdated", "correct"}};

constexpr std::string_view kQuestionScaffold =
    "story question choose one of the following a b ) answer belief does believe or what will do ? in end";

std::string join(const std::vector<std::string>& parts, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

struct Sentences {
  std::string context, desire, percept, causal, witness, action, initial_belief;
};

Sentences sentences_of(const StoryTemplate& t) {
  Sentences s;
  s.context = t.name + " works as a " + t.role + " at a busy " + t.place + " .";
  s.desire = t.name + " wants to make a " + t.product + " with " + t.initial_content + " .";
  s.percept = t.name + " fills the " + t.container + " with " + t.initial_content + " .";
  s.causal = "a " + t.other + " swaps the " + t.initial_content + " in the " + t.container + " with " +
             t.swapped_content + " while " + t.name + " is busy .";
  s.witness = t.witness ? t.name + " sees the " + t.other + " swapping the " + t.initial_content + " ."
                        : t.name + " does not see the " + t.other + " swapping the " + t.initial_content + " .";
  s.action = t.witness ? t.name + " goes back and reaches for the " + t.initial_content + " ."
                       : t.name + " makes the " + t.product + " using the " + t.container + " .";
  s.initial_belief = t.name + " believes that the " + t.container + " contains " + t.initial_content + " .";
  return s;
}

// Replays the story's events and tracks what is in the container and what the
// protagonist last saw in it.
struct WorldState {
  std::string content;
  std::string belief;
};

WorldState simulate(const StoryTemplate& t) {
  WorldState w;
  w.content = t.initial_content;  // percept: filled by the protagonist
  w.belief = t.initial_content;
  w.content = t.swapped_content;  // causal event
  if (t.witness) w.belief = t.swapped_content;
  return w;
}

std::string belief_statement(const StoryTemplate& t, const std::string& content) {
  return t.name + " believes the " + t.container + " contains " + content + " .";
}

std::string judged_statement(const StoryTemplate& t, const std::string& content) {
  const WorldState w = simulate(t);
  return belief_statement(t, content) + " " + kJudgement[content == w.belief][content == w.content] + " .";
}

// Oracle-side counterpart of judged_statement.
std::string world_statement(const StoryTemplate& t, const std::string& content) {
  return "world : the " + t.container + " contains " + content + " . " + (content == simulate(t).content ? "yes" : "no") +
         " .";
}

std::string forward_story(const Sentences& s) {
  return s.context + " " + s.desire + " " + s.percept + " " + s.causal + " " + s.witness;
}

std::string backward_story(const Sentences& s) {
  return s.context + " " + s.desire + " " + s.percept + " " + s.causal + " " + s.action;
}

std::string prompt_with_options(std::string_view instruction, const std::string& story, const std::string& question,
                                const std::vector<std::string>& answers) {
  static constexpr const char* kLetters[] = {"a", "b", "c", "d", "e", "f"};
  std::string out;
  out.reserve(512);
  out += instruction;
  out += " <nl> <nl> story : ";
  out += story;
  out += " <nl> question : ";
  out += question;
  out += " <nl> choose one of the following :";
  for (std::size_t i = 0; i < answers.size(); ++i) {
    out += " <nl> ";
    out += i < std::size(kLetters) ? kLetters[i] : "?";
    out += " ) ";
    out += answers[i];
  }
  out += " <nl> answer :";
  return out;
}

const std::vector<std::string>& lexicon_words() {
  static const std::vector<std::string> words = [] {
    std::set<std::string> seen;
    std::vector<std::string> out;
    auto add_text = [&](std::string_view text) {
      for (auto& w : split_words(text)) {
        if (w == Vocabulary::kNewline || w == Vocabulary::kBos || w == Vocabulary::kUnknown) continue;
        if (seen.insert(w).second) out.push_back(w);
      }
    };
    add_text(kDefaultInstruction);
    add_text(kQuestionScaffold);
    for (const auto& sc : kScenarios) {
      for (const auto* content : sc.contents) {
        for (const auto* other : kOthers) {
          StoryTemplate t{kNames[0], sc.role, sc.place, sc.product, sc.container, other, content,
                          content == sc.contents[0] ? sc.contents[1] : sc.contents[0], true};
          for (bool witness : {true, false}) {
            t.witness = witness;
            const auto s = sentences_of(t);
            add_text(forward_story(s));
            add_text(s.action);
            add_text(s.initial_belief);
            add_text(judged_statement(t, content));
            add_text(world_statement(t, content));
            add_text(world_statement(t, t.swapped_content));
          }
          add_text(t.name + " will make the " + t.product + " using the " + t.container + " .");
          add_text(t.name + " will replace the " + t.swapped_content + " with " + t.initial_content + " .");
        }
      }
    }
    for (const auto* name : kNames) add_text(name);
    for (const auto& row : kJudgement) {
      for (const auto* j : row) add_text(j);
    }
    return out;
  }();
  return words;
}

std::string question_for(Task task, const StoryTemplate& t, const std::vector<std::string>& order) {
  if (task == Task::forward_action) return "what will " + t.name + " do ?";
  return "does " + t.name + " believe the " + t.container + " contains " + order[0] + " or " + order[1] + " ?";
}

std::size_t nth_sentence_end(const std::string& story, int index) {
  // Offset just past the "." token that closes sentence `index`.
  int seen = -1;
  std::size_t pos = 0;
  while (pos < story.size()) {
    const std::size_t end = story.find(' ', pos);
    const std::size_t stop = end == std::string::npos ? story.size() : end;
    if (story.compare(pos, stop - pos, ".") == 0 && ++seen == index) return stop;
    pos = stop + 1;
  }
  throw DataError("story has fewer than " + std::to_string(index + 1) + " sentences");
}

}  // namespace

std::string_view to_string(Condition c) { return c == Condition::true_belief ? "TB" : "FB"; }

std::string_view to_string(Task t) {
  switch (t) {
    case Task::forward_belief: return "forward_belief";
    case Task::forward_action: return "forward_action";
    case Task::backward_belief: return "backward_belief";
  }
  return "?";
}

std::string_view to_string(VariationKind k) {
  switch (k) {
    case VariationKind::original: return "original";
    case VariationKind::random: return "random";
    case VariationKind::misleading: return "misleading";
    case VariationKind::time_spec: return "time_spec";
    case VariationKind::initial_belief: return "initial_belief";
  }
  return "?";
}

Condition parse_condition(std::string_view s) {
  std::string v(s);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "tb" || v == "true_belief" || v == "true belief") return Condition::true_belief;
  if (v == "fb" || v == "false_belief" || v == "false belief") return Condition::false_belief;
  throw DataError("unknown condition '" + std::string(s) + "'");
}

Task parse_task(std::string_view s) {
  for (Task t : kAllTasks) {
    if (to_string(t) == s) return t;
  }
  throw DataError("unknown task '" + std::string(s) + "'");
}

VariationKind parse_variation(std::string_view s) {
  for (auto k : {VariationKind::original, VariationKind::random, VariationKind::misleading, VariationKind::time_spec,
                 VariationKind::initial_belief}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown variation '" + std::string(s) + "'");
}

nlohmann::json Variation::to_json() const {
  return {{"kind", std::string(mindprobe::to_string(kind))},
          {"seed", seed},
          {"belief_prefix", belief_prefix},
          {"belief_suffix", belief_suffix},
          {"story_insert", story_insert},
          {"story_insert_at", story_insert_at}};
}

Variation Variation::from_json(const nlohmann::json& j) {
  Variation v;
  if (j.is_string()) {
    v.kind = parse_variation(j.get<std::string>());
    return v;
  }
  v.kind = parse_variation(j.at("kind").get<std::string>());
  v.seed = j.value("seed", std::uint64_t{0});
  v.belief_prefix = j.value("belief_prefix", std::string());
  v.belief_suffix = j.value("belief_suffix", std::string());
  v.story_insert = j.value("story_insert", std::string());
  v.story_insert_at = j.value("story_insert_at", std::size_t{0});
  return v;
}

nlohmann::json BeliefItem::to_json() const {
  return {{"story", story},
          {"belief", belief},
          {"question", question},
          {"z_p", z_p},
          {"z_o", z_o},
          {"condition", std::string(mindprobe::to_string(condition))},
          {"task", std::string(mindprobe::to_string(task))},
          {"variation", variation.to_json()},
          {"answers", answers},
          {"correct_index", correct_index},
          {"template_id", template_id},
          {"percept_index", percept_index},
          {"initial_belief_sentence", initial_belief_sentence},
          {"oov", oov}};
}

BeliefItem BeliefItem::from_json(const nlohmann::json& j) {
  BeliefItem item;
  for (const char* key : {"story", "belief", "z_p", "z_o", "condition", "task", "answers", "correct_index"}) {
    if (!j.contains(key)) throw MissingFieldError(key);
  }
  item.story = j.at("story").get<std::string>();
  item.belief = j.at("belief").get<std::string>();
  item.question = j.value("question", std::string());
  item.z_p = j.at("z_p").get<bool>();
  item.z_o = j.at("z_o").get<bool>();
  item.condition = parse_condition(j.at("condition").get<std::string>());
  item.task = parse_task(j.at("task").get<std::string>());
  if (j.contains("variation")) item.variation = Variation::from_json(j.at("variation"));
  item.answers = j.at("answers").get<std::vector<std::string>>();
  item.correct_index = j.at("correct_index").get<std::size_t>();
  if (item.answers.size() < 2 || item.correct_index >= item.answers.size()) {
    throw DataError("item needs at least two answers and a valid correct_index");
  }
  item.template_id = j.value("template_id", std::int64_t{-1});
  item.percept_index = j.value("percept_index", -1);
  item.initial_belief_sentence = j.value("initial_belief_sentence", std::string());
  item.oov = j.value("oov", std::size_t{0});
  return item;
}

const std::vector<BeliefItem>& GeneratedCorpus::items(Task t) const {
  switch (t) {
    case Task::forward_belief: return forward_belief;
    case Task::forward_action: return forward_action;
    case Task::backward_belief: return backward_belief;
  }
  return forward_belief;
}

std::vector<std::string> generator_lexicon() { return lexicon_words(); }

Vocabulary generator_vocabulary() { return Vocabulary(lexicon_words()); }

StoryTemplate sample_template(std::uint64_t seed) {
  Rng rng(seed);
  const auto& sc = kScenarios[rng.index(std::size(kScenarios))];
  StoryTemplate t;
  t.name = kNames[rng.index(std::size(kNames))];
  t.role = sc.role;
  t.place = sc.place;
  t.product = sc.product;
  t.container = sc.container;
  t.other = kOthers[rng.index(std::size(kOthers))];
  const std::size_t a = rng.index(4);
  std::size_t b = rng.index(3);
  if (b >= a) ++b;
  t.initial_content = sc.contents[a];
  t.swapped_content = sc.contents[b];
  t.witness = rng.coin();
  return t;
}

std::vector<BeliefItem> make_items(const StoryTemplate& base, std::int64_t template_id, bool statement_uses_initial,
                                   std::uint64_t answer_order_seed) {
  if (base.initial_content == base.swapped_content) throw DataError("initial and swapped content must differ");
  Rng rng(answer_order_seed);
  const bool flip = rng.coin();
  std::vector<std::string> content_order{base.initial_content, base.swapped_content};
  if (flip) std::swap(content_order[0], content_order[1]);

  std::vector<BeliefItem> out;
  for (Task task : kAllTasks) {
    for (bool witness : {true, false}) {
      StoryTemplate t = base;
      t.witness = witness;
      const Sentences s = sentences_of(t);
      const WorldState w = simulate(t);
      BeliefItem item;
      item.task = task;
      item.condition = witness ? Condition::true_belief : Condition::false_belief;
      item.template_id = template_id;
      item.story = task == Task::backward_belief ? backward_story(s) : forward_story(s);
      item.percept_index = 2;
      item.initial_belief_sentence = s.initial_belief;
      const std::string& statement_content = statement_uses_initial ? t.initial_content : t.swapped_content;
      item.belief = belief_statement(t, statement_content);
      item.z_p = statement_content == w.belief;
      item.z_o = statement_content == w.content;
      item.question = question_for(task, t, content_order);
      if (task == Task::forward_action) {
        std::vector<std::string> actions{
            t.name + " will make the " + t.product + " using the " + t.container + " .",
            t.name + " will replace the " + t.swapped_content + " with " + t.initial_content + " ."};
        // Someone who knows about the swap undoes it.
        const std::size_t correct = w.belief == t.swapped_content ? 1 : 0;
        if (flip) {
          std::swap(actions[0], actions[1]);
          item.correct_index = 1 - correct;
        } else {
          item.correct_index = correct;
        }
        item.answers = actions;
      } else {
        item.answers = {belief_statement(t, content_order[0]), belief_statement(t, content_order[1])};
        item.correct_index = content_order[0] == w.belief ? 0 : 1;
      }
      out.push_back(std::move(item));
    }
  }
  return out;
}

GeneratedCorpus generate_corpus(const CorpusOptions& options) {
  if (options.n_templates < 1) throw ConfigError("n_templates must be at least 1");
  if (options.qa_fraction < 0 || options.qa_fraction > 1 || options.qa_false_belief_fraction < 0 ||
      options.qa_false_belief_fraction > 1) {
    throw ConfigError("corpus fractions must lie in [0, 1]");
  }
  const auto& lexicon = lexicon_words();
  if (options.max_vocab != 0 && lexicon.size() + Vocabulary::kNumSpecial > options.max_vocab) {
    throw ConfigError("generator vocabulary needs " + std::to_string(lexicon.size() + Vocabulary::kNumSpecial) +
                      " tokens but the model allows " + std::to_string(options.max_vocab));
  }

  GeneratedCorpus corpus;
  for (std::size_t i = 0; i < options.n_templates; ++i) {
    StoryTemplate t = sample_template(derive_seed(options.seed, 2 * i));
    corpus.templates.push_back(t);
    // Alternating statement content keeps both labels exactly balanced.
    auto items = make_items(t, static_cast<std::int64_t>(i), i % 2 == 0, derive_seed(options.seed, 2 * i + 1));
    for (auto& item : items) {
      switch (item.task) {
        case Task::forward_belief: corpus.forward_belief.push_back(std::move(item)); break;
        case Task::forward_action: corpus.forward_action.push_back(std::move(item)); break;
        case Task::backward_belief: corpus.backward_belief.push_back(std::move(item)); break;
      }
    }
  }

  Rng rng(derive_seed(options.seed, 0x7261696eULL));
  corpus.training_documents.reserve(options.n_training_documents);
  for (std::size_t d = 0; d < options.n_training_documents; ++d) {
    StoryTemplate t = sample_template(rng.next());
    const Sentences s = sentences_of(t);
    if (rng.uniform() < options.qa_fraction) {
      t.witness = rng.uniform() >= options.qa_false_belief_fraction;
      const Task task = kAllTasks[rng.index(3)];
      auto items = make_items(t, -1, rng.coin(), rng.next());
      const auto& item = items[static_cast<std::size_t>(task) * 2 + (t.witness ? 0 : 1)];
      corpus.training_documents.push_back(eval_prompt(item) + " " + item.answers[item.correct_index]);
    } else {
      const bool action_story = rng.uniform() < 0.2;
      std::string doc = "story : " + (action_story ? backward_story(s) : forward_story(s));
      std::vector<std::string> contents{t.initial_content, t.swapped_content};
      rng.shuffle(std::span<std::string>(contents));
      std::vector<std::string> lines;
      for (const auto& c : contents) {
        lines.push_back(" <nl> belief : " + judged_statement(t, c));
        if (options.world_statements) lines.push_back(" <nl> " + world_statement(t, c));
      }
      rng.shuffle(std::span<std::string>(lines));
      for (const auto& l : lines) doc += l;
      corpus.training_documents.push_back(std::move(doc));
    }
  }
  return corpus;
}

BeliefItem apply_variation(const BeliefItem& item, const Variation& variation, std::span<const BeliefItem> batch) {
  if (item.variation.kind != VariationKind::original) {
    throw DataError("item already carries variation '" + std::string(to_string(item.variation.kind)) + "'");
  }
  BeliefItem out = item;
  out.variation = Variation{};
  out.variation.kind = variation.kind;
  out.variation.seed = variation.seed;
  Rng rng(variation.seed);
  switch (variation.kind) {
    case VariationKind::original:
      break;
    case VariationKind::random: {
      const auto& words = lexicon_words();
      std::vector<std::string> noise(10);
      for (auto& w : noise) w = words[rng.index(words.size())];
      out.variation.belief_prefix = join(noise) + " ";
      out.belief = out.variation.belief_prefix + item.belief;
      break;
    }
    case VariationKind::misleading: {
      std::vector<std::size_t> others;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& b = batch[i];
        const bool same = item.template_id >= 0 ? b.template_id == item.template_id : b.story == item.story;
        if (!same) others.push_back(i);
      }
      if (others.empty()) throw DataError("misleading variation needs at least two stories in the batch");
      const auto& pick = batch[others[rng.index(others.size())]];
      out.variation.belief_suffix = " <nl> belief : " + revert_variation(pick).belief;
      out.belief = item.belief + out.variation.belief_suffix;
      break;
    }
    case VariationKind::time_spec:
      out.variation.belief_prefix = "in the end , ";
      out.belief = out.variation.belief_prefix + item.belief;
      break;
    case VariationKind::initial_belief: {
      if (item.percept_index < 0 || item.initial_belief_sentence.empty()) {
        throw DataError("initial_belief variation needs the percept position and the initial belief");
      }
      const std::size_t at = nth_sentence_end(item.story, item.percept_index);
      out.variation.story_insert = " " + item.initial_belief_sentence;
      out.variation.story_insert_at = at;
      out.story = item.story.substr(0, at) + out.variation.story_insert + item.story.substr(at);
      break;
    }
  }
  return out;
}

BeliefItem revert_variation(const BeliefItem& item) {
  BeliefItem out = item;
  const Variation& v = item.variation;
  const auto& p = v.belief_prefix;
  const auto& s = v.belief_suffix;
  if (out.belief.compare(0, p.size(), p) != 0 || out.belief.size() < p.size() + s.size() ||
      out.belief.compare(out.belief.size() - s.size(), s.size(), s) != 0) {
    throw DataError("belief statement does not carry the recorded variation");
  }
  out.belief = out.belief.substr(p.size(), out.belief.size() - p.size() - s.size());
  if (!v.story_insert.empty()) {
    if (out.story.compare(v.story_insert_at, v.story_insert.size(), v.story_insert) != 0) {
      throw DataError("story does not carry the recorded insertion");
    }
    out.story.erase(v.story_insert_at, v.story_insert.size());
  }
  out.variation = Variation{};
  return out;
}

std::vector<BeliefItem> apply_variation_all(const std::vector<BeliefItem>& items, VariationKind kind,
                                            std::uint64_t seed) {
  std::vector<BeliefItem> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    Variation v;
    v.kind = kind;
    v.seed = derive_seed(seed, i);
    out.push_back(apply_variation(items[i], v, items));
  }
  return out;
}

std::string probe_prompt(const BeliefItem& item) { return "story : " + item.story + " <nl> belief : " + item.belief; }

std::string eval_prompt(const BeliefItem& item, std::string_view instruction) {
  return prompt_with_options(instruction, item.story, item.question, item.answers);
}

void write_items_jsonl(const std::vector<BeliefItem>& items, const std::filesystem::path& path) {
  std::string text;
  for (const auto& item : items) {
    text += item.to_json().dump();
    text += '\n';
  }
  write_file_atomic(path, text);
}

std::vector<BeliefItem> read_items_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::vector<BeliefItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      items.push_back(BeliefItem::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return items;
}

}  // namespace mindprobe
