#include "mindprobe/steering.hpp"

#include <algorithm>
#include <cmath>

#include "mindprobe/errors.hpp"
#include "mindprobe/tensor_archive.hpp"

namespace mindprobe {

namespace {

std::vector<TokenId> concat(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  std::vector<TokenId> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

bool fits(const ContrastPair& p, int max_seq) {
  const auto longest = p.prompt.size() + std::max(p.positive.size(), p.negative.size());
  return longest <= static_cast<std::size_t>(max_seq);
}

// Last-token residual rows of every site for one sequence.
std::vector<Eigen::VectorXd> final_rows(const Weights& w, const std::vector<TokenId>& tokens,
                                        const std::vector<HookSpec>& hooks) {
  const auto r = forward_with_hooks(w, tokens, hooks);
  std::vector<Eigen::VectorXd> rows;
  for (const auto& m : r.trace.resid) {
    if (m.size() == 0) {
      rows.emplace_back();
      continue;
    }
    rows.push_back(m.row(m.rows() - 1).transpose().cast<double>());
  }
  return rows;
}

std::vector<SteeringVector> compute_caa_sites(const Weights& weights, const std::vector<ContrastPair>& pairs,
                                              const std::vector<int>& layers) {
  const ModelConfig& c = weights.config;
  if (pairs.empty()) throw DataError("CAA needs at least one contrast pair");
  std::vector<HookSpec> hooks;
  for (int l : layers) {
    if (l < 0 || l > c.n_layers) throw ConfigError("CAA layer " + std::to_string(l) + " is out of range");
    hooks.push_back(HookSpec::capture(HookSite::residual(l)));
  }
  std::vector<Eigen::VectorXd> sums(layers.size(), Eigen::VectorXd::Zero(c.d_model));
  std::size_t used = 0, skipped = 0;
  for (const auto& p : pairs) {
    if (p.positive.empty() || p.negative.empty()) throw DataError("contrast completions must be non-empty");
    if (!fits(p, c.max_seq)) {
      ++skipped;
      continue;
    }
    const auto pos = final_rows(weights, concat(p.prompt, p.positive), hooks);
    const auto neg = final_rows(weights, concat(p.prompt, p.negative), hooks);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto site = static_cast<std::size_t>(layers[i]);
      sums[i] += pos[site] - neg[site];
    }
    ++used;
  }
  if (used == 0) throw DataError("no usable contrast pairs (all " + std::to_string(skipped) + " exceed max_seq)");

  const auto fingerprint = weights_fingerprint(weights);
  std::vector<SteeringVector> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    SteeringVector sv;
    sv.layer = layers[i];
    const Eigen::VectorXd mean = sums[i] / static_cast<double>(used);
    sv.v.resize(static_cast<std::size_t>(c.d_model));
    for (int j = 0; j < c.d_model; ++j) sv.v[static_cast<std::size_t>(j)] = static_cast<float>(mean[j]);
    sv.source_fingerprint = fingerprint;
    sv.n_pairs = used;
    sv.n_skipped = skipped;
    out.push_back(std::move(sv));
  }
  return out;
}

}  // namespace

std::vector<ContrastPair> make_contrast_pairs(const std::vector<BeliefItem>& items, const Vocabulary& vocab,
                                              std::string_view instruction) {
  std::vector<ContrastPair> pairs;
  for (const auto& item : items) {
    if (item.answers.size() != 2) throw DataError("contrast pairs need exactly two answers per item");
    ContrastPair p;
    p.prompt = vocab.encode_document(eval_prompt(item, instruction)).ids;
    p.positive = vocab.encode(item.answers[item.correct_index]).ids;
    p.negative = vocab.encode(item.answers[1 - item.correct_index]).ids;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

SteeringVector compute_caa(const Weights& weights, const std::vector<ContrastPair>& pairs, int layer) {
  return compute_caa_sites(weights, pairs, {layer}).front();
}

std::vector<SteeringVector> compute_caa_all_layers(const Weights& weights, const std::vector<ContrastPair>& pairs) {
  std::vector<int> layers(static_cast<std::size_t>(weights.config.n_layers + 1));
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i] = static_cast<int>(i);
  return compute_caa_sites(weights, pairs, layers);
}

std::vector<HookSpec> caa_hooks(const SteeringVector& v, float alpha, std::size_t first_position) {
  if (!std::isfinite(alpha)) throw ConfigError("CAA coefficient must be finite");
  return {HookSpec::add(HookSite::residual(v.layer), v.v, alpha, PositionRange::from(first_position))};
}

Ranking apply_caa(const Weights& weights, std::span<const TokenId> prompt,
                  const std::vector<std::vector<TokenId>>& candidates, const SteeringVector& v, float alpha) {
  const auto hooks = caa_hooks(v, alpha, prompt.size());
  return rank_answers(weights, prompt, candidates, hooks);
}

ITIPlan prepare_iti(const std::vector<std::vector<MatrixD>>& heads, const std::vector<bool>& z, std::size_t k,
                    float alpha, std::uint64_t split_seed, const ProbeOptions& options) {
  if (!std::isfinite(alpha)) throw ConfigError("ITI coefficient must be finite");
  std::size_t total = 0;
  for (const auto& layer : heads) total += layer.size();
  if (total == 0) throw DataError("no per-head activations; cache them first");
  if (k > total) throw ConfigError("ITI k = " + std::to_string(k) + " exceeds the " + std::to_string(total) + " heads");

  const Split split = stratified_split(z, split_seed);
  const auto z_train = select_labels(z, split.train);
  const auto z_test = select_labels(z, split.test);
  ITIPlan plan;
  plan.alpha = alpha;
  plan.k = k;
  plan.split_seed = split_seed;

  std::vector<ITIHead> candidates;
  for (std::size_t l = 0; l < heads.size(); ++l) {
    for (std::size_t h = 0; h < heads[l].size(); ++h) {
      const MatrixD x_train = select_rows(heads[l][h], split.train);
      const double spread = (x_train.rowwise() - x_train.colwise().mean()).squaredNorm();
      const std::string where = "L" + std::to_string(l) + "/H" + std::to_string(h);
      if (!(spread > 0.0)) {
        plan.notes.push_back(where + " excluded: activations have zero variance");
        continue;
      }
      const Probe p = train_probe(x_train, z_train, options);
      const double norm = p.w.norm();
      if (!(norm > 0.0)) {
        plan.notes.push_back(where + " excluded: probe direction is zero");
        continue;
      }
      ITIHead head;
      head.layer = static_cast<int>(l);
      head.head = static_cast<int>(h);
      head.validation_accuracy = eval_probe(p, select_rows(heads[l][h], split.test), z_test);
      const Eigen::VectorXd theta = p.w / norm;
      const Eigen::VectorXd proj = x_train * theta;
      head.sigma = std::sqrt((proj.array() - proj.mean()).square().mean());
      head.theta.resize(static_cast<std::size_t>(theta.size()));
      for (Eigen::Index i = 0; i < theta.size(); ++i) head.theta[static_cast<std::size_t>(i)] = static_cast<float>(theta[i]);
      candidates.push_back(std::move(head));
    }
  }
  if (candidates.size() < k) {
    throw DataError("only " + std::to_string(candidates.size()) + " usable heads for ITI k = " + std::to_string(k));
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const ITIHead& a, const ITIHead& b) {
    return a.validation_accuracy > b.validation_accuracy;
  });
  candidates.resize(k);
  plan.heads = std::move(candidates);
  return plan;
}

std::vector<HookSpec> iti_hooks(const ITIPlan& plan, std::size_t first_position) {
  std::vector<HookSpec> hooks;
  for (const auto& h : plan.heads) {
    hooks.push_back(HookSpec::add(HookSite::attention_head(h.layer, h.head), h.theta,
                                  plan.alpha * static_cast<float>(h.sigma), PositionRange::from(first_position)));
  }
  return hooks;
}

Ranking apply_iti(const Weights& weights, std::span<const TokenId> prompt,
                  const std::vector<std::vector<TokenId>>& candidates, const ITIPlan& plan) {
  const auto hooks = iti_hooks(plan, prompt.size());
  return rank_answers(weights, prompt, candidates, hooks);
}

void save_steering_vectors(const std::vector<SteeringVector>& vectors, const std::filesystem::path& path) {
  if (vectors.empty()) throw DataError("no steering vectors to save");
  TensorArchive archive;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& sv : vectors) {
    const std::string name = "caa/L" + std::to_string(sv.layer);
    entries.push_back({{"name", name},
                       {"layer", sv.layer},
                       {"source_fingerprint", sv.source_fingerprint},
                       {"n_pairs", sv.n_pairs},
                       {"n_skipped", sv.n_skipped}});
    archive.add(name, {static_cast<std::int64_t>(sv.v.size())}, sv.v);
  }
  archive.meta = {{"kind", "steering_vectors"}, {"vectors", entries}};
  write_archive(path, archive);
}

std::vector<SteeringVector> load_steering_vectors(const std::filesystem::path& path) {
  const auto archive = read_archive(path);
  if (archive.meta.value("kind", std::string()) != "steering_vectors") {
    throw FormatError(path.string() + " does not hold steering vectors");
  }
  std::vector<SteeringVector> out;
  try {
    for (const auto& e : archive.meta.at("vectors")) {
      SteeringVector sv;
      sv.layer = e.at("layer").get<int>();
      sv.source_fingerprint = e.at("source_fingerprint").get<std::string>();
      sv.n_pairs = e.at("n_pairs").get<std::size_t>();
      sv.n_skipped = e.value("n_skipped", std::size_t{0});
      sv.v = archive.at(e.at("name").get<std::string>()).data;
      out.push_back(std::move(sv));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

void save_iti_plan(const ITIPlan& plan, const std::filesystem::path& path) {
  TensorArchive archive;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& h : plan.heads) {
    const std::string name = "iti/L" + std::to_string(h.layer) + "/H" + std::to_string(h.head);
    entries.push_back({{"name", name},
                       {"layer", h.layer},
                       {"head", h.head},
                       {"validation_accuracy", h.validation_accuracy},
                       {"sigma", h.sigma}});
    archive.add(name, {static_cast<std::int64_t>(h.theta.size())}, h.theta);
  }
  archive.meta = {{"kind", "iti_plan"},
                  {"alpha", plan.alpha},
                  {"k", plan.k},
                  {"split_seed", plan.split_seed},
                  {"notes", plan.notes},
                  {"heads", entries}};
  write_archive(path, archive);
}

ITIPlan load_iti_plan(const std::filesystem::path& path) {
  const auto archive = read_archive(path);
  if (archive.meta.value("kind", std::string()) != "iti_plan") throw FormatError(path.string() + " is not an ITI plan");
  ITIPlan plan;
  try {
    plan.alpha = archive.meta.at("alpha").get<float>();
    plan.k = archive.meta.at("k").get<std::size_t>();
    plan.split_seed = archive.meta.at("split_seed").get<std::uint64_t>();
    plan.notes = archive.meta.at("notes").get<std::vector<std::string>>();
    for (const auto& e : archive.meta.at("heads")) {
      ITIHead h;
      h.layer = e.at("layer").get<int>();
      h.head = e.at("head").get<int>();
      h.validation_accuracy = e.at("validation_accuracy").get<double>();
      h.sigma = e.at("sigma").get<double>();
      h.theta = archive.at(e.at("name").get<std::string>()).data;
      plan.heads.push_back(std::move(h));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return plan;
}

}  // namespace mindprobe
