#include <algorithm>
#include <map>

#include "mindprobe/errors.hpp"
#include "mindprobe/taskgen.hpp"
#include "mindprobe/tensor_archive.hpp"

namespace mindprobe {

namespace {

using Row = std::map<std::string, std::string>;

// RFC 4180 style: quoted fields may contain commas, quotes ("") and newlines.
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
      if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
      row.clear();
    } else {
      field += ch;
      field_started = true;
    }
  }
  if (quoted) throw FormatError("unterminated quoted CSV field");
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<Row> read_rows(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw DataError(path.string() + " is empty");
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });

  auto row_of = [](const nlohmann::json& obj) {
    if (!obj.is_object()) throw FormatError("expected a JSON object per record");
    Row r;
    for (const auto& [k, v] : obj.items()) r[k] = v.is_string() ? v.get<std::string>() : v.dump();
    return r;
  };

  std::vector<Row> rows;
  if (ext == ".json" || ext == ".jsonl") {
    try {
      const auto first = text.find_first_not_of(" \t\r\n");
      if (text[first] == '[') {
        for (const auto& obj : nlohmann::json::parse(text)) rows.push_back(row_of(obj));
      } else {
        std::size_t pos = 0;
        while (pos < text.size()) {
          std::size_t end = text.find('\n', pos);
          if (end == std::string::npos) end = text.size();
          const std::string line = text.substr(pos, end - pos);
          if (line.find_first_not_of(" \t\r") != std::string::npos) rows.push_back(row_of(nlohmann::json::parse(line)));
          pos = end + 1;
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  } else {
    const auto table = parse_csv(text);
    if (table.empty()) throw DataError(path.string() + " is empty");
    const auto& header = table.front();
    for (std::size_t i = 1; i < table.size(); ++i) {
      if (table[i].size() != header.size()) {
        throw FormatError(path.string() + ": row " + std::to_string(i) + " has " + std::to_string(table[i].size()) +
                          " fields, header has " + std::to_string(header.size()));
      }
      Row r;
      for (std::size_t c = 0; c < header.size(); ++c) r[header[c]] = table[i][c];
      rows.push_back(std::move(r));
    }
    // Header-only files still need the right columns to produce a useful error.
    if (rows.empty()) {
      Row r;
      for (const auto& h : header) r[h] = "";
      rows.push_back(std::move(r));
      rows.back()["__header_only"] = "1";
    }
  }
  if (rows.empty()) throw DataError(path.string() + " has no records");
  return rows;
}

std::string normalise(const std::string& text, const Vocabulary& vocab, std::size_t& oov) {
  auto words = split_words(text);
  for (const auto& w : words) {
    if (!vocab.contains(w)) ++oov;
  }
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::size_t parse_index(const std::string& raw) {
  std::string v;
  for (char c : raw) {
    if (!std::isspace(static_cast<unsigned char>(c)) && c != '"') v += static_cast<char>(std::tolower(c));
  }
  if (v == "0" || v == "a") return 0;
  if (v == "1" || v == "b") return 1;
  throw DataError("correct_index must be 0/1 or a/b, got '" + raw + "'");
}

}  // namespace

std::vector<BeliefItem> load_bigtom(const std::filesystem::path& path, const Vocabulary& vocabulary) {
  const auto rows = read_rows(path);
  static constexpr const char* kRequired[] = {"story", "question", "answer_a", "answer_b", "correct_index",
                                              "condition"};
  for (const char* col : kRequired) {
    if (!rows.front().count(col)) throw MissingFieldError(col);
  }
  if (rows.front().count("__header_only")) throw DataError(path.string() + " has no records");

  std::vector<BeliefItem> items;
  items.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Row& row = rows[r];
    for (const char* col : kRequired) {
      if (!row.count(col)) throw MissingFieldError(col);
    }
    BeliefItem item;
    std::size_t oov = 0;
    item.story = normalise(row.at("story"), vocabulary, oov);
    item.question = normalise(row.at("question"), vocabulary, oov);
    item.answers = {normalise(row.at("answer_a"), vocabulary, oov), normalise(row.at("answer_b"), vocabulary, oov)};
    item.correct_index = parse_index(row.at("correct_index"));
    item.condition = parse_condition(row.at("condition"));
    item.task = row.count("task") && !row.at("task").empty() ? parse_task(row.at("task")) : Task::forward_belief;
    item.template_id = row.count("template_id") && !row.at("template_id").empty()
                           ? std::stoll(row.at("template_id"))
                           : static_cast<std::int64_t>(r);

    // Without an explicit statement the correct answer is the protagonist's
    // belief, which matches reality exactly in the true-belief condition.
    const bool tb = item.condition == Condition::true_belief;
    if (row.count("belief") && !row.at("belief").empty()) {
      item.belief = normalise(row.at("belief"), vocabulary, oov);
      if (item.belief == item.answers[item.correct_index]) {
        item.z_p = true;
        item.z_o = tb;
      } else if (item.belief == item.answers[1 - item.correct_index]) {
        item.z_p = false;
        item.z_o = !tb;
      } else {
        throw DataError("row " + std::to_string(r + 1) + ": belief statement matches neither answer");
      }
    } else {
      item.belief = item.answers[item.correct_index];
      item.z_p = true;
      item.z_o = tb;
    }
    if (row.count("initial_belief") && !row.at("initial_belief").empty()) {
      item.initial_belief_sentence = normalise(row.at("initial_belief"), vocabulary, oov);
      item.percept_index = 2;
    }
    item.oov = oov;
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace mindprobe
