#include "mindprobe/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mindprobe/errors.hpp"
#include "mindprobe/evalkit.hpp"
#include "mindprobe/probing.hpp"
#include "mindprobe/rng.hpp"
#include "mindprobe/steering.hpp"
#include "mindprobe/tensor_archive.hpp"
#include "mindprobe/train.hpp"

namespace mindprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- config parsing -------------------------------------------------------

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, std::optional<T>& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T v{};
  read(j, key, v, where);
  out = v;
}

template <typename T, typename Parse>
void read_enum_list(const json& j, const char* key, std::vector<T>& out, Parse parse, const std::string& where) {
  if (!j.contains(key)) return;
  std::vector<std::string> names;
  read(j, key, names, where);
  out.clear();
  for (const auto& n : names) out.push_back(parse(n));
}

template <typename T>
json opt_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename T>
json names_json(const std::vector<T>& values) {
  json out = json::array();
  for (const auto& v : values) out.push_back(std::string(to_string(v)));
  return out;
}

// ---- manifest --------------------------------------------------------------

std::string file_fingerprint(const fs::path& path) {
  const std::string bytes = read_text_file(path);
  return hex64(fnv1a64(bytes));
}

std::string producer_of(const std::string& artifact) {
  static const std::vector<std::pair<std::string, std::string>> prefixes{
      {"corpus/", "gen-corpus"}, {"model/", "train-model"}, {"cache/", "cache"},  {"probe/", "probe"},
      {"pca/", "pca"},           {"steer/caa", "steer-caa"}, {"steer/split", "steer-caa"},
      {"steer/iti", "steer-iti"}, {"eval/", "eval"},        {"report/", "report"}};
  for (const auto& [prefix, stage] : prefixes) {
    if (artifact.rfind(prefix, 0) == 0) return stage;
  }
  return "gen-corpus";
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Unit {
  std::string name;
  json config;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::function<void()> run;
};

class Runner {
 public:
  Runner(const PipelineConfig& config, const RunOptions& options) : config_(config), options_(options) {
    const fs::path p = path(artifacts::kManifest);
    if (fs::exists(p)) {
      try {
        manifest_ = json::parse(read_text_file(p));
      } catch (const json::exception& e) {
        throw FormatError(p.string() + ": " + e.what());
      }
    }
    if (!manifest_.is_object()) manifest_ = json::object();
    if (!manifest_.contains("units")) manifest_["units"] = json::object();
  }

  fs::path path(const std::string& rel) const { return config_.output_dir / rel; }

  void log(const std::string& msg) const {
    if (options_.log) options_.log(msg);
  }

  void run(Unit unit, StageOutcome& outcome) {
    for (const auto& in : unit.inputs) {
      if (!fs::exists(path(in))) {
        const std::string stage = producer_of(in);
        throw PrerequisiteError(stage, unit.name + " needs " + in + "; run the '" + stage + "' stage first");
      }
    }
    const std::string hash = hex64(fnv1a64(unit.config.dump()));
    json inputs = json::object();
    for (const auto& in : unit.inputs) inputs[in] = file_fingerprint(path(in));

    auto& units = manifest_["units"];
    if (units.contains(unit.name)) {
      const auto& entry = units[unit.name];
      if (entry.value("config_hash", std::string()) != hash && !options_.force) {
        throw ConfigError(unit.name + " was produced under a different config (hash " +
                          entry.value("config_hash", std::string()) + ", now " + hash + "); rerun with --force");
      }
      if (!options_.force && entry.value("config_hash", std::string()) == hash && entry.value("inputs", json()) == inputs &&
          outputs_intact(entry)) {
        log(unit.name + ": up to date");
        outcome.units_skipped.push_back(unit.name);
        return;
      }
    }

    log(unit.name + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    unit.run();
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    json outputs = json::object();
    for (const auto& out : unit.outputs) {
      if (!fs::exists(path(out))) throw DataError(unit.name + " did not produce " + out);
      outputs[out] = file_fingerprint(path(out));
    }
    units[unit.name] = {{"config_hash", hash},
                        {"config", unit.config},
                        {"inputs", inputs},
                        {"outputs", outputs},
                        {"finished_at", utc_now()},
                        {"seconds", seconds}};
    write_file_atomic(path(artifacts::kManifest), manifest_.dump(2) + "\n");
    outcome.units_run.push_back(unit.name);
  }

 private:
  bool outputs_intact(const json& entry) const {
    if (!entry.contains("outputs")) return false;
    for (const auto& [rel, fp] : entry["outputs"].items()) {
      if (!fs::exists(path(rel)) || file_fingerprint(path(rel)) != fp.get<std::string>()) return false;
    }
    return true;
  }

  const PipelineConfig& config_;
  const RunOptions& options_;
  json manifest_;
};

// ---- stage helpers ----------------------------------------------------------

std::vector<std::string> read_lines(const fs::path& p) {
  std::istringstream in(read_text_file(p));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

Vocabulary load_vocab(const fs::path& p) {
  try {
    return Vocabulary::from_json(json::parse(read_text_file(p)));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

json load_json(const fs::path& p) {
  try {
    return json::parse(read_text_file(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

std::vector<BeliefItem> items_of(const std::vector<BeliefItem>& all, Task task) {
  std::vector<BeliefItem> out;
  for (const auto& it : all) {
    if (it.task == task) out.push_back(it);
  }
  return out;
}

std::vector<BeliefItem> items_in(const std::vector<BeliefItem>& items, const std::set<std::int64_t>& templates) {
  std::vector<BeliefItem> out;
  for (const auto& it : items) {
    if (templates.count(it.template_id)) out.push_back(it);
  }
  return out;
}

ProbeOptions probe_options(const PipelineConfig& c) {
  ProbeOptions o;
  o.l2_inverse_strength = c.probe.C;
  o.max_iter = c.probe.max_iterations;
  o.gradient_tolerance = c.probe.gradient_tolerance;
  o.seed = c.split_seed();
  return o;
}

const std::vector<bool>& labels_for(const ProbingDataset& ds, Perspective p) {
  return p == Perspective::protagonist ? ds.z_protagonist : ds.z_oracle;
}

std::string instruction_text(const PipelineConfig& c) {
  if (c.eval.instruction_file.empty()) return std::string(kDefaultInstruction);
  fs::path p = c.eval.instruction_file;
  if (p.is_relative()) p = c.output_dir / p;
  if (!fs::exists(p)) throw ConfigError("instruction file " + p.string() + " does not exist");
  std::string text = read_text_file(p);
  while (!text.empty() && (text.back() == '\n' || text.back() == ' ')) text.pop_back();
  if (text.empty()) throw ConfigError("instruction file " + p.string() + " is empty");
  return text;
}

int last_caa_layer(const PipelineConfig& c) { return c.caa.last_layer < 0 ? c.model.n_layers : c.caa.last_layer; }

template <typename T>
std::vector<T> selected(const std::vector<T>& all, const std::optional<T>& pick) {
  if (!pick) return all;
  return {*pick};
}

struct GridEntry {
  std::string method;
  float alpha = 0;
  int layer_or_k = 0;
  TaskResult result;
};

std::string grid_csv(Task task, const std::vector<GridEntry>& entries) {
  std::ostringstream os;
  os.precision(17);
  os << "method,alpha,layer_or_k,task,TB,FB,Both\n";
  for (const auto& e : entries) {
    os << e.method << "," << e.alpha << "," << e.layer_or_k << "," << to_string(task) << "," << e.result.tb << ","
       << e.result.fb << "," << e.result.both << "\n";
  }
  return os.str();
}

// Highest FB accuracy, then Both, then TB; earlier grid entries win ties.
const GridEntry* best_entry(const std::vector<GridEntry>& entries, const std::string& method) {
  const GridEntry* best = nullptr;
  for (const auto& e : entries) {
    if (e.method != method) continue;
    if (!best || std::tie(e.result.fb, e.result.both, e.result.tb) >
                     std::tie(best->result.fb, best->result.both, best->result.tb)) {
      best = &e;
    }
  }
  return best;
}

// ---- stages -----------------------------------------------------------------

void stage_gen_corpus(Runner& r, const PipelineConfig& c, StageOutcome& out) {
  CorpusOptions opts = c.corpus;
  opts.seed = c.corpus_seed();
  Unit u{"gen-corpus", {{"corpus", c.to_json()["corpus"]}}, {}, {artifacts::kTrainingDocs, artifacts::kVocab, artifacts::kItems}, nullptr};
  u.run = [&r, opts] {
    const auto corpus = generate_corpus(opts);
    std::string docs;
    for (const auto& d : corpus.training_documents) docs += d + "\n";
    write_file_atomic(r.path(artifacts::kTrainingDocs), docs);
    write_file_atomic(r.path(artifacts::kVocab), generator_vocabulary().to_json().dump() + "\n");
    std::vector<BeliefItem> items;
    for (Task t : kAllTasks) {
      const auto& part = corpus.items(t);
      items.insert(items.end(), part.begin(), part.end());
    }
    const fs::path tmp = r.path(std::string(artifacts::kItems) + ".partial");
    write_items_jsonl(items, tmp);
    fs::rename(tmp, r.path(artifacts::kItems));
  };
  r.run(std::move(u), out);
}

void stage_train(Runner& r, const PipelineConfig& c, StageOutcome& out) {
  const json cfg = c.to_json();
  Unit u{"train-model",
         {{"model", cfg["model"]}, {"training", cfg["training"]}},
         {artifacts::kTrainingDocs, artifacts::kVocab},
         {artifacts::kWeights, artifacts::kTrainingLog},
         nullptr};
  u.run = [&r, &c] {
    const auto vocab = load_vocab(r.path(artifacts::kVocab));
    TokenCorpus corpus;
    for (const auto& doc : read_lines(r.path(artifacts::kTrainingDocs))) corpus.push_back(vocab.encode_document(doc).ids);
    if (corpus.empty()) throw DataError("training corpus is empty");
    ModelConfig mc = c.model;
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.seed = c.model_seed();
    for (const auto& doc : corpus) {
      if (doc.size() > static_cast<std::size_t>(mc.max_seq)) {
        throw ConfigError("a training document has " + std::to_string(doc.size()) + " tokens but max_seq is " +
                          std::to_string(mc.max_seq));
      }
    }
    TrainOptions t;
    t.steps = c.training.steps;
    t.learning_rate = c.training.learning_rate;
    t.batch_size = c.training.batch_size;
    t.warmup_steps = c.training.warmup_steps;
    t.final_lr_fraction = c.training.final_lr_fraction;
    t.grad_clip = c.training.grad_clip;
    t.optimizer = OptimizerKind::adam;
    t.seed = c.training_seed();
    t.on_step = [&r, steps = t.steps](int step, double loss) {
      if (step % 100 == 0 || step + 1 == steps) r.log("  step " + std::to_string(step) + " loss " + std::to_string(loss));
    };
    const auto result = train_lm(build_model(mc), corpus, t);
    const std::size_t tail = std::min<std::size_t>(50, result.loss_curve.size());
    double final_loss = 0;
    for (std::size_t i = result.loss_curve.size() - tail; i < result.loss_curve.size(); ++i) final_loss += result.loss_curve[i];
    final_loss = tail ? final_loss / static_cast<double>(tail) : 0.0;
    const std::size_t n_eval = std::min<std::size_t>(200, corpus.size());
    const TokenCorpus eval_docs(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(n_eval));
    const double corpus_nats = corpus_loss(result.weights, eval_docs);
    save_weights(result.weights, r.path(artifacts::kWeights));
    json log{{"steps", t.steps},
             {"final_loss", final_loss},
             {"corpus_loss", corpus_nats},
             {"corpus_loss_documents", n_eval},
             {"parameters", result.weights.parameter_count()},
             {"fingerprint", weights_fingerprint(result.weights)},
             {"loss_curve", result.loss_curve}};
    write_file_atomic(r.path(artifacts::kTrainingLog), log.dump() + "\n");
  };
  r.run(std::move(u), out);
}

void stage_cache(Runner& r, const PipelineConfig& c, const StageSelection& sel, StageOutcome& out) {
  for (VariationKind v : selected(c.variations, sel.variation)) {
    Unit u{"cache:" + std::string(to_string(v)),
           {{"variation", std::string(to_string(v))}, {"seed", c.variation_seed(v)}},
           {artifacts::kWeights, artifacts::kVocab, artifacts::kItems},
           {artifacts::cache(v)},
           nullptr};
    u.run = [&r, &c, v] {
      const auto weights = load_weights(r.path(artifacts::kWeights));
      const auto vocab = load_vocab(r.path(artifacts::kVocab));
      auto items = items_of(read_items_jsonl(r.path(artifacts::kItems)), Task::forward_belief);
      if (v != VariationKind::original) items = apply_variation_all(items, v, c.variation_seed(v));
      const auto ds = cache_activations(weights, vocab, items, Perspective::oracle);
      for (const auto& s : ds.skipped) r.log("  skipped item " + std::to_string(s.index) + ": " + s.reason);
      save_dataset(ds, r.path(artifacts::cache(v)));
    };
    r.run(std::move(u), out);
  }
}

void stage_probe(Runner& r, const PipelineConfig& c, const StageSelection& sel, bool pca, StageOutcome& out) {
  const json cfg = c.to_json();
  for (VariationKind v : selected(c.variations, sel.variation)) {
    for (Perspective p : selected(c.perspectives, sel.perspective)) {
      const std::string tag = std::string(to_string(v)) + ":" + std::string(to_string(p));
      json unit_cfg{{"probe", cfg["probe"]}, {"perspective", std::string(to_string(p))}};
      if (pca) unit_cfg["k_list"] = c.pca_k_list;
      const std::string json_out = pca ? artifacts::pca(v, p, "json") : artifacts::probe(v, p, "json");
      const std::string csv_out = pca ? artifacts::pca(v, p, "csv") : artifacts::probe(v, p, "csv");
      Unit u{(pca ? "pca:" : "probe:") + tag, unit_cfg, {artifacts::cache(v)}, {json_out, csv_out}, nullptr};
      u.run = [&r, &c, v, p, pca, json_out, csv_out] {
        const auto ds = load_dataset(r.path(artifacts::cache(v)));
        const auto& z = labels_for(ds, p);
        const auto layers = ds.resid_as_double();
        json report;
        std::string csv;
        if (pca) {
          std::vector<int> ks(c.pca_k_list.begin(), c.pca_k_list.end());
          const auto rep = memorisation_sweep(layers, z, c.split_seed(), ks, probe_options(c));
          report = rep.to_json();
          csv = rep.to_csv();
        } else {
          const auto rep = layer_sweep(layers, z, c.split_seed(), probe_options(c));
          report = rep.to_json();
          csv = rep.to_csv();
        }
        report["variation"] = std::string(to_string(v));
        report["perspective"] = std::string(to_string(p));
        report["model_fingerprint"] = ds.model_fingerprint;
        write_file_atomic(r.path(json_out), report.dump(2) + "\n");
        write_file_atomic(r.path(csv_out), csv);
      };
      r.run(std::move(u), out);
    }
  }
}

void stage_steer_caa(Runner& r, const PipelineConfig& c, StageOutcome& out) {
  Unit u{"steer-caa",
         {{"steering_fraction", c.eval.steering_fraction},
          {"split_seed", c.eval_split_seed()},
          {"instruction", instruction_text(c)}},
         {artifacts::kWeights, artifacts::kVocab, artifacts::kItems},
         {artifacts::kCaaVectors, artifacts::kSteerSplit},
         nullptr};
  u.run = [&r, &c] {
    const auto weights = load_weights(r.path(artifacts::kWeights));
    const auto vocab = load_vocab(r.path(artifacts::kVocab));
    const auto fb_items = items_of(read_items_jsonl(r.path(artifacts::kItems)), Task::forward_belief);
    std::vector<std::int64_t> templates;
    for (const auto& it : fb_items) {
      if (std::find(templates.begin(), templates.end(), it.template_id) == templates.end()) templates.push_back(it.template_id);
    }
    Rng rng(c.eval_split_seed());
    rng.shuffle(std::span<std::int64_t>(templates));
    const auto n_steer = static_cast<std::size_t>(std::lround(c.eval.steering_fraction * static_cast<double>(templates.size())));
    if (n_steer == 0 || n_steer >= templates.size()) {
      throw ConfigError("steering_fraction leaves no templates on one side of the split");
    }
    std::vector<std::int64_t> steer(templates.begin(), templates.begin() + static_cast<std::ptrdiff_t>(n_steer));
    std::vector<std::int64_t> held(templates.begin() + static_cast<std::ptrdiff_t>(n_steer), templates.end());
    std::sort(steer.begin(), steer.end());
    std::sort(held.begin(), held.end());
    const auto pairs = make_contrast_pairs(items_in(fb_items, {steer.begin(), steer.end()}), vocab, instruction_text(c));
    auto vectors = compute_caa_all_layers(weights, pairs);
    save_steering_vectors(vectors, r.path(artifacts::kCaaVectors));
    write_file_atomic(r.path(artifacts::kSteerSplit),
                      json{{"steering_templates", steer}, {"heldout_templates", held}, {"n_pairs", vectors.front().n_pairs},
                           {"n_skipped", vectors.front().n_skipped}}
                              .dump() +
                          "\n");
  };
  r.run(std::move(u), out);
}

void stage_steer_iti(Runner& r, const PipelineConfig& c, StageOutcome& out) {
  const json cfg = c.to_json();
  Unit u{"steer-iti",
         {{"iti", cfg["iti"]}, {"probe", cfg["probe"]}},
         {artifacts::cache(VariationKind::original)},
         {artifacts::kItiPlan},
         nullptr};
  u.run = [&r, &c] {
    const auto ds = load_dataset(r.path(artifacts::cache(VariationKind::original)));
    if (ds.heads.empty()) throw DataError("cached dataset has no head activations");
    std::vector<std::vector<MatrixD>> heads;
    for (const auto& layer : ds.heads) {
      heads.emplace_back();
      for (const auto& h : layer) heads.back().push_back(h.cast<double>());
    }
    const float alpha = c.iti.alphas.empty() ? 0.0f : c.iti.alphas.front();
    const auto plan = prepare_iti(heads, labels_for(ds, c.iti.perspective), c.iti.k, alpha, c.split_seed(), probe_options(c));
    for (const auto& n : plan.notes) r.log("  " + n);
    save_iti_plan(plan, r.path(artifacts::kItiPlan));
  };
  r.run(std::move(u), out);
}

void stage_eval(Runner& r, const PipelineConfig& c, const StageSelection& sel, StageOutcome& out) {
  const json cfg = c.to_json();
  std::vector<Task> tasks = c.eval.tasks;
  // Forward Belief selects the hyperparameters the other tasks reuse.
  std::stable_sort(tasks.begin(), tasks.end(), [](Task a, Task b) {
    return (a == Task::forward_belief) > (b == Task::forward_belief);
  });
  for (Task task : selected(tasks, sel.task)) {
    const bool selects = task == Task::forward_belief;
    std::vector<std::string> inputs{artifacts::kWeights, artifacts::kVocab, artifacts::kItems, artifacts::kCaaVectors,
                                    artifacts::kSteerSplit, artifacts::kItiPlan};
    if (!selects) inputs.push_back(artifacts::eval(Task::forward_belief));
    const std::string csv_out = "eval/" + std::string(to_string(task)) + ".csv";
    Unit u{"eval:" + std::string(to_string(task)),
           {{"caa", cfg["caa"]}, {"iti_alphas", cfg["iti"]["alphas"]}, {"instruction", instruction_text(c)}},
           inputs,
           {artifacts::eval(task), csv_out},
           nullptr};
    u.run = [&r, &c, task, selects, csv_out] {
      const auto weights = load_weights(r.path(artifacts::kWeights));
      const auto vocab = load_vocab(r.path(artifacts::kVocab));
      const auto split = load_json(r.path(artifacts::kSteerSplit));
      const auto held = split.at("heldout_templates").get<std::vector<std::int64_t>>();
      const auto items = items_in(items_of(read_items_jsonl(r.path(artifacts::kItems)), task), {held.begin(), held.end()});
      if (items.empty()) throw DataError("no held-out items for " + std::string(to_string(task)));
      const auto vectors = load_steering_vectors(r.path(artifacts::kCaaVectors));
      const auto plan = load_iti_plan(r.path(artifacts::kItiPlan));
      const std::string instruction = instruction_text(c);

      auto vector_at = [&](int layer) -> const SteeringVector& {
        for (const auto& v : vectors) {
          if (v.layer == layer) return v;
        }
        throw ConfigError("no steering vector for layer " + std::to_string(layer));
      };

      const TaskResult baseline = evaluate_task(weights, vocab, items, NoIntervention{}, instruction);
      std::vector<GridEntry> grid;
      GridEntry caa_pick, iti_pick;
      if (selects) {
        for (int layer = c.caa.first_layer; layer <= last_caa_layer(c); ++layer) {
          for (float a : c.caa.alphas) {
            r.log("  CAA layer " + std::to_string(layer) + " alpha " + std::to_string(a));
            grid.push_back({"CAA", a, layer, evaluate_task(weights, vocab, items, CaaIntervention{vector_at(layer), a}, instruction)});
          }
        }
        for (float a : c.iti.alphas) {
          ITIPlan p = plan;
          p.alpha = a;
          grid.push_back({"ITI", a, static_cast<int>(p.heads.size()), evaluate_task(weights, vocab, items, p, instruction)});
        }
        if (const auto* b = best_entry(grid, "CAA")) caa_pick = *b;
        if (const auto* b = best_entry(grid, "ITI")) iti_pick = *b;
      } else {
        const auto fb = load_json(r.path(artifacts::eval(Task::forward_belief)));
        const auto& s = fb.at("selected");
        const int layer = s.at("CAA").at("layer").get<int>();
        const float caa_alpha = s.at("CAA").at("alpha").get<float>();
        ITIPlan p = plan;
        p.alpha = s.at("ITI").at("alpha").get<float>();
        grid.push_back({"CAA", caa_alpha, layer,
                        evaluate_task(weights, vocab, items, CaaIntervention{vector_at(layer), caa_alpha}, instruction)});
        grid.push_back({"ITI", p.alpha, static_cast<int>(p.heads.size()), evaluate_task(weights, vocab, items, p, instruction)});
        caa_pick = grid[0];
        iti_pick = grid[1];
      }
      json result{{"task", std::string(to_string(task))},
                  {"n_items", items.size()},
                  {"baseline", baseline.to_json()},
                  {"CAA", caa_pick.result.to_json()},
                  {"ITI", iti_pick.result.to_json()},
                  {"selected",
                   {{"CAA", {{"alpha", caa_pick.alpha}, {"layer", caa_pick.layer_or_k}}},
                    {"ITI", {{"alpha", iti_pick.alpha}, {"k", iti_pick.layer_or_k}}}}}};
      std::vector<GridEntry> rows{{"none", 0.0f, 0, baseline}};
      rows.insert(rows.end(), grid.begin(), grid.end());
      write_file_atomic(r.path(csv_out), grid_csv(task, rows));
      write_file_atomic(r.path(artifacts::eval(task)), result.dump(2) + "\n");
    };
    r.run(std::move(u), out);
  }
}

TaskResult task_result_from_json(const json& j) {
  TaskResult t;
  t.method = j.at("method").get<std::string>();
  t.task = parse_task(j.at("task").get<std::string>());
  t.hyperparameters = j.at("hyperparameters");
  for (const auto& p : j.at("predictions")) {
    t.predictions.push_back({p.at("index").get<std::size_t>(), p.at("template_id").get<std::int64_t>(),
                             parse_condition(p.at("condition").get<std::string>()), p.at("chosen").get<std::size_t>(),
                             p.at("correct").get<bool>()});
  }
  compute_accuracies(t);
  return t;
}

void stage_report(Runner& r, const PipelineConfig& c, StageOutcome& out) {
  std::vector<std::string> inputs{artifacts::kTrainingLog};
  for (Task t : c.eval.tasks) inputs.push_back(artifacts::eval(t));
  for (VariationKind v : c.variations) {
    for (Perspective p : c.perspectives) {
      inputs.push_back(artifacts::probe(v, p, "json"));
      inputs.push_back(artifacts::pca(v, p, "json"));
    }
  }
  Unit u{"report",
         {{"tasks", names_json(c.eval.tasks)}, {"variations", names_json(c.variations)},
          {"perspectives", names_json(c.perspectives)}},
         inputs,
         {artifacts::kReportCsv, artifacts::kReportJson, artifacts::kReportTable},
         nullptr};
  u.run = [&r, &c] {
    const auto training = load_json(r.path(artifacts::kTrainingLog));
    json probing = json::array();
    std::ostringstream probe_table;
    probe_table << "probing (best layer, test accuracy)\n";
    for (VariationKind v : c.variations) {
      for (Perspective p : c.perspectives) {
        const auto rep = load_json(r.path(artifacts::probe(v, p, "json")));
        const auto mem = load_json(r.path(artifacts::pca(v, p, "json")));
        json accs = json::array();
        for (const auto& l : rep.at("layers")) accs.push_back(l.at("accuracy"));
        probing.push_back({{"variation", std::string(to_string(v))},
                           {"perspective", std::string(to_string(p))},
                           {"best_layer", rep.at("best_layer")},
                           {"best_accuracy", rep.at("best_accuracy")},
                           {"layer_accuracy", accs},
                           {"memorisation", mem.at("cells")}});
        char line[160];
        std::snprintf(line, sizeof(line), "  %-16s %-12s layer %d  %.1f%%\n", std::string(to_string(v)).c_str(),
                      std::string(to_string(p)).c_str(), rep.at("best_layer").get<int>(),
                      100.0 * rep.at("best_accuracy").get<double>());
        probe_table << line;
      }
    }

    std::vector<DeltaReport> reports;
    json steering = json::array();
    std::string csv;
    for (Task t : c.eval.tasks) {
      const auto ev = load_json(r.path(artifacts::eval(t)));
      const auto base = task_result_from_json(ev.at("baseline"));
      const auto iti = task_result_from_json(ev.at("ITI"));
      const auto caa = task_result_from_json(ev.at("CAA"));
      reports.push_back(delta_report(base, {iti, caa}));
      steering.push_back(reports.back().to_json());
      const std::string part = reports.back().to_csv();
      csv += csv.empty() ? part : part.substr(part.find('\n') + 1);
    }
    json report{{"training",
                 {{"steps", training.at("steps")},
                  {"final_loss", training.at("final_loss")},
                  {"corpus_loss", training.at("corpus_loss")},
                  {"fingerprint", training.at("fingerprint")}}},
                {"probing", probing},
                {"steering", steering}};
    std::ostringstream table;
    table << "training: final loss " << training.at("final_loss").get<double>() << " nats/token\n\n"
          << probe_table.str() << "\n"
          << render_table(reports);
    write_file_atomic(r.path(artifacts::kReportJson), report.dump(2) + "\n");
    write_file_atomic(r.path(artifacts::kReportCsv), csv);
    write_file_atomic(r.path(artifacts::kReportTable), table.str());
  };
  r.run(std::move(u), out);
}

}  // namespace

// ---- config -----------------------------------------------------------------

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  check_keys(j, {"seed", "model", "training", "corpus", "variations", "perspectives", "probe", "pca_k_list", "caa", "iti",
                 "eval", "output_dir"},
             "config");
  read(j, "seed", c.seed, "config");
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"n_layers", "d_model", "n_heads", "max_seq", "seed"}, "model");
    read(m, "n_layers", c.model.n_layers, "model");
    read(m, "d_model", c.model.d_model, "model");
    read(m, "n_heads", c.model.n_heads, "model");
    read(m, "max_seq", c.model.max_seq, "model");
    read_opt(m, "seed", c.model_seed_override, "model");
  }
  if (j.contains("training")) {
    const auto& t = j["training"];
    check_keys(t, {"steps", "learning_rate", "batch_size", "warmup_steps", "final_lr_fraction", "grad_clip", "seed"},
               "training");
    read(t, "steps", c.training.steps, "training");
    read(t, "learning_rate", c.training.learning_rate, "training");
    read(t, "batch_size", c.training.batch_size, "training");
    read(t, "warmup_steps", c.training.warmup_steps, "training");
    read(t, "final_lr_fraction", c.training.final_lr_fraction, "training");
    read(t, "grad_clip", c.training.grad_clip, "training");
    read_opt(t, "seed", c.training.seed, "training");
  }
  if (j.contains("corpus")) {
    const auto& k = j["corpus"];
    check_keys(k, {"seed", "n_templates", "n_training_documents", "qa_fraction", "qa_false_belief_fraction",
                   "world_statements"}, "corpus");
    read_opt(k, "seed", c.corpus_seed_override, "corpus");
    read(k, "n_templates", c.corpus.n_templates, "corpus");
    read(k, "n_training_documents", c.corpus.n_training_documents, "corpus");
    read(k, "qa_fraction", c.corpus.qa_fraction, "corpus");
    read(k, "qa_false_belief_fraction", c.corpus.qa_false_belief_fraction, "corpus");
    read(k, "world_statements", c.corpus.world_statements, "corpus");
  }
  read_enum_list(j, "variations", c.variations, [](const std::string& s) { return parse_variation(s); }, "config");
  read_enum_list(j, "perspectives", c.perspectives, [](const std::string& s) { return parse_perspective(s); }, "config");
  if (j.contains("probe")) {
    const auto& p = j["probe"];
    check_keys(p, {"split_seed", "C", "max_iterations", "gradient_tolerance"}, "probe");
    read_opt(p, "split_seed", c.probe.split_seed, "probe");
    read(p, "C", c.probe.C, "probe");
    read(p, "max_iterations", c.probe.max_iterations, "probe");
    read(p, "gradient_tolerance", c.probe.gradient_tolerance, "probe");
  }
  read(j, "pca_k_list", c.pca_k_list, "config");
  if (j.contains("caa")) {
    const auto& a = j["caa"];
    check_keys(a, {"alphas", "first_layer", "last_layer"}, "caa");
    read(a, "alphas", c.caa.alphas, "caa");
    read(a, "first_layer", c.caa.first_layer, "caa");
    read(a, "last_layer", c.caa.last_layer, "caa");
  }
  if (j.contains("iti")) {
    const auto& i = j["iti"];
    check_keys(i, {"alphas", "k", "perspective"}, "iti");
    read(i, "alphas", c.iti.alphas, "iti");
    read(i, "k", c.iti.k, "iti");
    std::string p = std::string(to_string(c.iti.perspective));
    read(i, "perspective", p, "iti");
    c.iti.perspective = parse_perspective(p);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    check_keys(e, {"steering_fraction", "split_seed", "tasks", "instruction_file"}, "eval");
    read(e, "steering_fraction", c.eval.steering_fraction, "eval");
    read_opt(e, "split_seed", c.eval.split_seed, "eval");
    read_enum_list(e, "tasks", c.eval.tasks, [](const std::string& s) { return parse_task(s); }, "eval");
    read(e, "instruction_file", c.eval.instruction_file, "eval");
  }
  std::string out = c.output_dir.string();
  read(j, "output_dir", out, "config");
  c.output_dir = out;
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

json PipelineConfig::to_json() const {
  return {{"seed", seed},
          {"model",
           {{"n_layers", model.n_layers},
            {"d_model", model.d_model},
            {"n_heads", model.n_heads},
            {"max_seq", model.max_seq},
            {"seed", model_seed()}}},
          {"training",
           {{"steps", training.steps},
            {"learning_rate", training.learning_rate},
            {"batch_size", training.batch_size},
            {"warmup_steps", training.warmup_steps},
            {"final_lr_fraction", training.final_lr_fraction},
            {"grad_clip", training.grad_clip},
            {"seed", training_seed()}}},
          {"corpus",
           {{"seed", corpus_seed()},
            {"n_templates", corpus.n_templates},
            {"n_training_documents", corpus.n_training_documents},
            {"qa_fraction", corpus.qa_fraction},
            {"qa_false_belief_fraction", corpus.qa_false_belief_fraction},
            {"world_statements", corpus.world_statements}}},
          {"variations", names_json(variations)},
          {"perspectives", names_json(perspectives)},
          {"probe",
           {{"split_seed", split_seed()},
            {"C", probe.C},
            {"max_iterations", probe.max_iterations},
            {"gradient_tolerance", probe.gradient_tolerance}}},
          {"pca_k_list", pca_k_list},
          {"caa", {{"alphas", caa.alphas}, {"first_layer", caa.first_layer}, {"last_layer", last_caa_layer(*this)}}},
          {"iti", {{"alphas", iti.alphas}, {"k", iti.k}, {"perspective", std::string(to_string(iti.perspective))}}},
          {"eval",
           {{"steering_fraction", eval.steering_fraction},
            {"split_seed", eval_split_seed()},
            {"tasks", names_json(eval.tasks)},
            {"instruction_file", eval.instruction_file}}},
          {"output_dir", output_dir.string()}};
}

void PipelineConfig::validate() const {
  ModelConfig m = model;
  m.vocab_size = 1;
  m.validate();
  if (training.steps < 0) throw ConfigError("training.steps must be non-negative");
  if (training.batch_size < 1) throw ConfigError("training.batch_size must be positive");
  if (!(training.learning_rate > 0)) throw ConfigError("training.learning_rate must be positive");
  if (corpus.n_templates < 1) throw ConfigError("corpus.n_templates must be at least 1");
  if (variations.empty()) throw ConfigError("variations must not be empty");
  if (perspectives.empty()) throw ConfigError("perspectives must not be empty");
  if (std::find(variations.begin(), variations.end(), VariationKind::original) == variations.end()) {
    throw ConfigError("variations must include 'original'");
  }
  if (pca_k_list.empty()) throw ConfigError("pca_k_list must not be empty");
  for (auto k : pca_k_list) {
    if (k == 0) throw ConfigError("pca_k_list entries must be positive");
  }
  if (!(probe.C > 0)) throw ConfigError("probe.C must be positive");
  if (caa.alphas.empty()) throw ConfigError("caa.alphas must not be empty");
  if (iti.alphas.empty()) throw ConfigError("iti.alphas must not be empty");
  for (float a : caa.alphas) {
    if (!std::isfinite(a)) throw ConfigError("caa.alphas must be finite");
  }
  for (float a : iti.alphas) {
    if (!std::isfinite(a)) throw ConfigError("iti.alphas must be finite");
  }
  const int last = last_caa_layer(*this);
  if (caa.first_layer < 0 || caa.first_layer > last || last > model.n_layers) {
    throw ConfigError("caa layer range must lie within 0.." + std::to_string(model.n_layers));
  }
  const std::size_t total_heads = static_cast<std::size_t>(model.n_layers) * static_cast<std::size_t>(model.n_heads);
  if (iti.k < 1 || iti.k > total_heads) {
    throw ConfigError("iti.k must lie in 1.." + std::to_string(total_heads));
  }
  if (!(eval.steering_fraction > 0 && eval.steering_fraction < 1)) {
    throw ConfigError("eval.steering_fraction must lie strictly between 0 and 1");
  }
  if (eval.tasks.empty()) throw ConfigError("eval.tasks must not be empty");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

std::uint64_t PipelineConfig::corpus_seed() const { return corpus_seed_override.value_or(derive_seed(seed, 1)); }
std::uint64_t PipelineConfig::model_seed() const { return model_seed_override.value_or(derive_seed(seed, 2)); }
std::uint64_t PipelineConfig::training_seed() const { return training.seed.value_or(derive_seed(seed, 3)); }
std::uint64_t PipelineConfig::split_seed() const { return probe.split_seed.value_or(derive_seed(seed, 4)); }
std::uint64_t PipelineConfig::eval_split_seed() const { return eval.split_seed.value_or(derive_seed(seed, 5)); }
std::uint64_t PipelineConfig::variation_seed(VariationKind kind) const {
  return derive_seed(seed, 100 + static_cast<std::uint64_t>(kind));
}

// ---- public entry points ------------------------------------------------------

namespace artifacts {
std::string cache(VariationKind v) { return "cache/" + std::string(to_string(v)) + ".bin"; }
std::string probe(VariationKind v, Perspective p, const std::string& ext) {
  return "probe/" + std::string(to_string(v)) + "_" + std::string(to_string(p)) + "." + ext;
}
std::string pca(VariationKind v, Perspective p, const std::string& ext) {
  return "pca/" + std::string(to_string(v)) + "_" + std::string(to_string(p)) + "." + ext;
}
std::string eval(Task t) { return "eval/" + std::string(to_string(t)) + ".json"; }
}  // namespace artifacts

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-corpus", "train-model", "cache",    "probe", "pca",
                                              "steer-caa",  "steer-iti",   "eval",     "report"};
  return names;
}

StageOutcome run_stage(const std::string& stage, const PipelineConfig& config, const RunOptions& options) {
  config.validate();
  if (std::find(stage_names().begin(), stage_names().end(), stage) == stage_names().end()) {
    throw ConfigError("unknown stage '" + stage + "'");
  }
  fs::create_directories(config.output_dir);
  write_file_atomic(config.output_dir / artifacts::kConfig, config.to_json().dump(2) + "\n");
  Runner runner(config, options);
  StageOutcome out;
  out.stage = stage;
  const auto& sel = options.selection;
  if (stage == "gen-corpus") stage_gen_corpus(runner, config, out);
  else if (stage == "train-model") stage_train(runner, config, out);
  else if (stage == "cache") stage_cache(runner, config, sel, out);
  else if (stage == "probe") stage_probe(runner, config, sel, false, out);
  else if (stage == "pca") stage_probe(runner, config, sel, true, out);
  else if (stage == "steer-caa") stage_steer_caa(runner, config, out);
  else if (stage == "steer-iti") stage_steer_iti(runner, config, out);
  else if (stage == "eval") stage_eval(runner, config, sel, out);
  else stage_report(runner, config, out);
  return out;
}

std::vector<StageOutcome> run_pipeline(const PipelineConfig& config, const RunOptions& options) {
  std::vector<StageOutcome> outcomes;
  for (const auto& stage : stage_names()) outcomes.push_back(run_stage(stage, config, options));
  return outcomes;
}

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->kind()) {
      case ErrorKind::config: return 2;
      case ErrorKind::prerequisite: return 3;
      case ErrorKind::numeric: return 4;
      default: return 1;
    }
  }
  return 1;
}

}  // namespace mindprobe
