#include "mindprobe/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "mindprobe/errors.hpp"

namespace mindprobe {

namespace {

double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
         std::lgamma(static_cast<double>(n - k) + 1);
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string hyper_text(const nlohmann::json& h) {
  std::string out;
  for (const auto& [k, v] : h.items()) {
    if (!out.empty()) out += ' ';
    out += k + "=" + (v.is_string() ? v.get<std::string>() : v.dump());
  }
  return out;
}

}  // namespace

std::string method_name(const Intervention& iv) {
  if (std::holds_alternative<CaaIntervention>(iv)) return "CAA";
  if (std::holds_alternative<ITIPlan>(iv)) return "ITI";
  return "none";
}

nlohmann::json TaskResult::to_json() const {
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : predictions) {
    preds.push_back({{"index", p.index},
                     {"template_id", p.template_id},
                     {"condition", std::string(to_string(p.condition))},
                     {"chosen", p.chosen},
                     {"correct", p.correct}});
  }
  return {{"method", method},
          {"task", std::string(to_string(task))},
          {"TB", tb},
          {"FB", fb},
          {"Both", both},
          {"n_pairs", n_pairs},
          {"n_unpaired", n_unpaired},
          {"hyperparameters", hyperparameters},
          {"predictions", preds}};
}

void compute_accuracies(TaskResult& r) {
  std::size_t n[2] = {0, 0}, ok[2] = {0, 0};
  std::map<std::int64_t, std::vector<const ItemPrediction*>> by_template;
  for (const auto& p : r.predictions) {
    const int k = p.condition == Condition::false_belief ? 1 : 0;
    ++n[k];
    ok[k] += p.correct;
    by_template[p.template_id].push_back(&p);
  }
  r.tb = n[0] ? 100.0 * static_cast<double>(ok[0]) / static_cast<double>(n[0]) : 0.0;
  r.fb = n[1] ? 100.0 * static_cast<double>(ok[1]) / static_cast<double>(n[1]) : 0.0;
  std::size_t pairs = 0, both = 0, unpaired = 0;
  for (const auto& [id, group] : by_template) {
    const ItemPrediction* tb = nullptr;
    const ItemPrediction* fb = nullptr;
    std::size_t n_tb = 0, n_fb = 0;
    for (const auto* p : group) {
      if (p->condition == Condition::true_belief) {
        tb = p;
        ++n_tb;
      } else {
        fb = p;
        ++n_fb;
      }
    }
    if (id < 0 || n_tb != 1 || n_fb != 1) {
      unpaired += group.size();
      continue;
    }
    ++pairs;
    both += tb->correct && fb->correct;
  }
  r.n_pairs = pairs;
  r.n_unpaired = unpaired;
  r.both = pairs ? 100.0 * static_cast<double>(both) / static_cast<double>(pairs) : 0.0;
}

TaskResult evaluate_task(const Weights& weights, const Vocabulary& vocab, const std::vector<BeliefItem>& items,
                         const Intervention& intervention, std::string_view instruction) {
  if (items.empty()) throw DataError("no items to evaluate");
  TaskResult result;
  result.task = items.front().task;
  result.method = method_name(intervention);
  if (const auto* caa = std::get_if<CaaIntervention>(&intervention)) {
    result.hyperparameters = {{"alpha", caa->alpha}, {"layer", caa->vector.layer}};
  } else if (const auto* iti = std::get_if<ITIPlan>(&intervention)) {
    result.hyperparameters = {{"alpha", iti->alpha}, {"k", iti->heads.size()}};
  }

  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    if (item.task != result.task) throw DataError("evaluate_task needs items from a single task");
    const auto prompt = vocab.encode_document(eval_prompt(item, instruction)).ids;
    std::vector<std::vector<TokenId>> candidates;
    for (const auto& a : item.answers) candidates.push_back(vocab.encode(a).ids);
    Ranking ranking;
    if (const auto* caa = std::get_if<CaaIntervention>(&intervention)) {
      ranking = apply_caa(weights, prompt, candidates, caa->vector, caa->alpha);
    } else if (const auto* iti = std::get_if<ITIPlan>(&intervention)) {
      ranking = apply_iti(weights, prompt, candidates, *iti);
    } else {
      ranking = rank_answers(weights, prompt, candidates);
    }
    result.predictions.push_back({i, item.template_id, item.condition, ranking.best, ranking.best == item.correct_index});
  }
  compute_accuracies(result);
  return result;
}

double mcnemar_exact_p(std::size_t b, std::size_t c) {
  const std::size_t n = b + c;
  if (n == 0) return 1.0;
  const std::size_t lo = std::min(b, c);
  double tail = 0.0;
  for (std::size_t i = 0; i <= lo; ++i) tail += std::exp(log_choose(n, i) - static_cast<double>(n) * std::log(2.0));
  return std::min(1.0, 2.0 * tail);
}

SignificanceResult mcnemar_from_correct(const std::vector<bool>& a_correct, const std::vector<bool>& b_correct) {
  if (a_correct.size() != b_correct.size()) throw DataError("McNemar inputs differ in length");
  if (a_correct.empty()) throw DataError("McNemar needs at least one paired observation");
  SignificanceResult s;
  for (std::size_t i = 0; i < a_correct.size(); ++i) {
    if (a_correct[i] && !b_correct[i]) ++s.b;
    if (!a_correct[i] && b_correct[i]) ++s.c;
  }
  const std::size_t n = s.b + s.c;
  if (n <= 25) {
    s.method = "exact";
    s.p_value = mcnemar_exact_p(s.b, s.c);
  } else {
    s.method = "chi2_cc";
    const double diff = std::abs(static_cast<double>(s.b) - static_cast<double>(s.c)) - 1.0;
    const double stat = std::max(0.0, diff) * std::max(0.0, diff) / static_cast<double>(n);
    s.p_value = std::min(1.0, std::erfc(std::sqrt(stat / 2.0)));
  }
  s.significant = s.p_value < 0.05;
  return s;
}

SignificanceResult mcnemar_test(const std::vector<std::size_t>& preds_a, const std::vector<std::size_t>& preds_b,
                                const std::vector<std::size_t>& gold) {
  if (preds_a.size() != gold.size() || preds_b.size() != gold.size()) {
    throw DataError("McNemar inputs differ in length");
  }
  std::vector<bool> a(gold.size()), b(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) {
    a[i] = preds_a[i] == gold[i];
    b[i] = preds_b[i] == gold[i];
  }
  return mcnemar_from_correct(a, b);
}

std::string format_delta_cell(double value, double baseline, bool significant) {
  const long shown = std::lround(value);
  const long delta = std::lround(value - baseline);
  std::string out = std::to_string(shown) + "_{" + (delta >= 0 ? "+" : "-") + std::to_string(std::labs(delta)) + "}";
  if (significant) out += "*";
  return out;
}

DeltaReport delta_report(const TaskResult& baseline, const std::vector<TaskResult>& treatments) {
  DeltaReport report;
  report.task = baseline.task;
  DeltaRow base;
  base.method = "No int.";
  base.hyperparameters = baseline.hyperparameters;
  base.tb = baseline.tb;
  base.fb = baseline.fb;
  base.both = baseline.both;
  base.cell_tb = std::to_string(std::lround(base.tb));
  base.cell_fb = std::to_string(std::lround(base.fb));
  base.cell_both = std::to_string(std::lround(base.both));
  report.rows.push_back(base);

  std::vector<bool> base_correct;
  for (const auto& p : baseline.predictions) base_correct.push_back(p.correct);
  for (const auto& t : treatments) {
    if (t.task != baseline.task || t.predictions.size() != baseline.predictions.size()) {
      throw DataError("treatment '" + t.method + "' was not evaluated on the baseline's items");
    }
    std::vector<bool> correct;
    for (std::size_t i = 0; i < t.predictions.size(); ++i) {
      const auto& p = t.predictions[i];
      const auto& q = baseline.predictions[i];
      if (p.index != q.index || p.template_id != q.template_id || p.condition != q.condition) {
        throw DataError("treatment '" + t.method + "' was not evaluated on the baseline's items");
      }
      correct.push_back(p.correct);
    }
    DeltaRow row;
    row.method = t.method;
    row.hyperparameters = t.hyperparameters;
    row.tb = t.tb;
    row.fb = t.fb;
    row.both = t.both;
    row.d_tb = t.tb - baseline.tb;
    row.d_fb = t.fb - baseline.fb;
    row.d_both = t.both - baseline.both;
    if (!base_correct.empty()) {
      row.test = mcnemar_from_correct(base_correct, correct);
      row.significant = row.test->significant;
    }
    row.cell_tb = format_delta_cell(t.tb, baseline.tb, row.significant);
    row.cell_fb = format_delta_cell(t.fb, baseline.fb, row.significant);
    row.cell_both = format_delta_cell(t.both, baseline.both, row.significant);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string DeltaReport::to_text() const { return render_table({*this}); }

std::string DeltaReport::to_csv() const {
  std::string out = "task,method,hyperparameters,TB,FB,Both,cell_TB,cell_FB,cell_Both,p_value,test\n";
  for (const auto& r : rows) {
    out += std::string(to_string(task)) + "," + csv_field(r.method) + "," + csv_field(hyper_text(r.hyperparameters)) +
           "," + number(r.tb) + "," + number(r.fb) + "," + number(r.both) + "," + r.cell_tb + "," + r.cell_fb + "," +
           r.cell_both + "," + (r.test ? number(r.test->p_value) : "") + "," + (r.test ? r.test->method : "") + "\n";
  }
  return out;
}

nlohmann::json DeltaReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row{{"method", r.method},
                       {"hyperparameters", r.hyperparameters},
                       {"TB", r.tb},
                       {"FB", r.fb},
                       {"Both", r.both},
                       {"cells", {r.cell_tb, r.cell_fb, r.cell_both}},
                       {"significant", r.significant}};
    if (r.d_tb) row["delta"] = {{"TB", *r.d_tb}, {"FB", *r.d_fb}, {"Both", *r.d_both}};
    if (r.test) {
      row["mcnemar"] = {{"b", r.test->b}, {"c", r.test->c}, {"p_value", r.test->p_value}, {"method", r.test->method}};
    }
    rows_json.push_back(std::move(row));
  }
  return {{"task", std::string(to_string(task))}, {"rows", rows_json}};
}

std::string render_table(const std::vector<DeltaReport>& reports) {
  std::vector<std::vector<std::string>> grid;
  grid.push_back({"task", "method", "TB", "FB", "TB^FB", "setting"});
  for (const auto& rep : reports) {
    for (const auto& r : rep.rows) {
      grid.push_back({std::string(to_string(rep.task)), r.method, r.cell_tb, r.cell_fb, r.cell_both,
                      hyper_text(r.hyperparameters)});
    }
  }
  std::vector<std::size_t> width(grid.front().size(), 0);
  for (const auto& row : grid) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  for (const auto& row : grid) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      line += c + 1 < row.size() ? pad(row[c], width[c] + 2) : row[c];
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

}  // namespace mindprobe
