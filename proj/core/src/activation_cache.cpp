#include "mindprobe/activation_cache.hpp"

#include <algorithm>
#include <cstring>

#include "mindprobe/errors.hpp"
#include "mindprobe/tensor_archive.hpp"

namespace mindprobe {

namespace {

std::string head_name(std::size_t l, std::size_t h) {
  return "head/L" + std::to_string(l) + "/H" + std::to_string(h);
}

void add_matrix(TensorArchive& archive, std::string name, const MatrixF& m) {
  archive.add(std::move(name), {static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())},
              std::vector<float>(m.data(), m.data() + m.size()));
}

MatrixF from_tensor(const Tensor& t) {
  if (t.shape.size() != 2) throw ShapeError(t.name + " must be a matrix");
  MatrixF m(t.shape[0], t.shape[1]);
  if (t.data.size() != static_cast<std::size_t>(m.size())) throw ShapeError(t.name + " payload size mismatch");
  std::memcpy(m.data(), t.data.data(), sizeof(float) * t.data.size());
  return m;
}

}  // namespace

std::string_view to_string(Perspective p) { return p == Perspective::protagonist ? "protagonist" : "oracle"; }

Perspective parse_perspective(std::string_view s) {
  if (s == "protagonist") return Perspective::protagonist;
  if (s == "oracle") return Perspective::oracle;
  throw ConfigError("unknown perspective '" + std::string(s) + "'");
}

bool ProbingDataset::imbalanced() const {
  const auto& z = labels();
  if (z.empty()) return true;
  const double share = static_cast<double>(std::count(z.begin(), z.end(), true)) / static_cast<double>(z.size());
  return share < 0.45 || share > 0.55;
}

std::vector<MatrixD> ProbingDataset::resid_as_double() const {
  std::vector<MatrixD> out;
  out.reserve(resid.size());
  for (const auto& m : resid) out.push_back(m.cast<double>());
  return out;
}

void ProbingDataset::validate() const {
  const auto n = static_cast<Eigen::Index>(rows());
  if (z_protagonist.size() != z_oracle.size() || item_index.size() != z_oracle.size()) {
    throw ShapeError("dataset label columns differ in length");
  }
  for (std::size_t l = 0; l < resid.size(); ++l) {
    if (resid[l].rows() != n) throw ShapeError("resid/L" + std::to_string(l) + " row count differs from labels");
  }
  for (std::size_t l = 0; l < heads.size(); ++l) {
    for (std::size_t h = 0; h < heads[l].size(); ++h) {
      if (heads[l][h].rows() != n) throw ShapeError(head_name(l, h) + " row count differs from labels");
    }
  }
}

ProbingDataset cache_activations(const Weights& weights, const Vocabulary& vocab, const std::vector<BeliefItem>& items,
                                 Perspective perspective, const CacheOptions& options) {
  if (items.empty()) throw DataError("no items to cache");
  const ModelConfig& c = weights.config;
  ProbingDataset ds;
  ds.perspective = perspective;
  ds.model_fingerprint = weights_fingerprint(weights);
  ds.variation = std::string(to_string(items.front().variation.kind));

  const auto hooks = options.capture_heads ? capture_everything(c) : capture_residual_stream(c);
  std::vector<std::vector<float>> resid_rows(static_cast<std::size_t>(c.n_layers + 1));
  std::vector<std::vector<std::vector<float>>> head_rows;
  if (options.capture_heads) {
    head_rows.assign(static_cast<std::size_t>(c.n_layers), std::vector<std::vector<float>>(static_cast<std::size_t>(c.n_heads)));
  }

  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    if (std::string(to_string(item.variation.kind)) != ds.variation) ds.variation = "mixed";
    const auto encoded = vocab.encode_document(probe_prompt(item));
    if (encoded.ids.size() > static_cast<std::size_t>(c.max_seq)) {
      ds.skipped.push_back({i, "prompt has " + std::to_string(encoded.ids.size()) + " tokens, max_seq is " +
                                   std::to_string(c.max_seq)});
      continue;
    }
    const auto result = forward_with_hooks(weights, encoded.ids, hooks);
    const Eigen::Index last = static_cast<Eigen::Index>(encoded.ids.size()) - 1;
    for (std::size_t l = 0; l < resid_rows.size(); ++l) {
      const auto row = result.trace.resid[l].row(last);
      resid_rows[l].insert(resid_rows[l].end(), row.data(), row.data() + row.size());
    }
    for (std::size_t l = 0; l < head_rows.size(); ++l) {
      for (std::size_t h = 0; h < head_rows[l].size(); ++h) {
        const auto row = result.trace.head_out[l][h].row(last);
        head_rows[l][h].insert(head_rows[l][h].end(), row.data(), row.data() + row.size());
      }
    }
    ds.z_protagonist.push_back(item.z_p);
    ds.z_oracle.push_back(item.z_o);
    ds.item_index.push_back(i);
  }
  if (ds.rows() == 0) throw DataError("every item was skipped; no activations cached");

  const auto n = static_cast<Eigen::Index>(ds.rows());
  auto to_matrix = [n](const std::vector<float>& flat, int width) {
    return MatrixF(Eigen::Map<const MatrixF>(flat.data(), n, width));
  };
  for (const auto& flat : resid_rows) ds.resid.push_back(to_matrix(flat, c.d_model));
  for (const auto& layer : head_rows) {
    ds.heads.emplace_back();
    for (const auto& flat : layer) ds.heads.back().push_back(to_matrix(flat, c.d_head()));
  }
  return ds;
}

void save_dataset(const ProbingDataset& ds, const std::filesystem::path& path) {
  if (ds.rows() == 0 || ds.resid.empty()) throw DataError("refusing to save an empty dataset");
  ds.validate();
  TensorArchive archive;
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& s : ds.skipped) skipped.push_back({{"index", s.index}, {"reason", s.reason}});
  archive.meta = {{"kind", "probing_dataset"},
                  {"perspective", std::string(to_string(ds.perspective))},
                  {"variation", ds.variation},
                  {"model_fingerprint", ds.model_fingerprint},
                  {"z_p", ds.z_protagonist},
                  {"z_o", ds.z_oracle},
                  {"item_index", ds.item_index},
                  {"skipped", skipped},
                  {"n_layers", ds.resid.size()},
                  {"n_heads", ds.heads.empty() ? 0 : ds.heads.front().size()}};
  for (std::size_t l = 0; l < ds.resid.size(); ++l) add_matrix(archive, "resid/L" + std::to_string(l), ds.resid[l]);
  for (std::size_t l = 0; l < ds.heads.size(); ++l) {
    for (std::size_t h = 0; h < ds.heads[l].size(); ++h) add_matrix(archive, head_name(l, h), ds.heads[l][h]);
  }
  write_archive(path, archive);
}

ProbingDataset load_dataset(const std::filesystem::path& path) {
  const auto archive = read_archive(path);
  const auto& m = archive.meta;
  if (m.value("kind", std::string()) != "probing_dataset") throw FormatError(path.string() + " is not a probing dataset");
  ProbingDataset ds;
  try {
    ds.perspective = parse_perspective(m.at("perspective").get<std::string>());
    ds.variation = m.at("variation").get<std::string>();
    ds.model_fingerprint = m.at("model_fingerprint").get<std::string>();
    ds.z_protagonist = m.at("z_p").get<std::vector<bool>>();
    ds.z_oracle = m.at("z_o").get<std::vector<bool>>();
    ds.item_index = m.at("item_index").get<std::vector<std::size_t>>();
    for (const auto& s : m.at("skipped")) ds.skipped.push_back({s.at("index").get<std::size_t>(), s.at("reason").get<std::string>()});
    const auto n_layers = m.at("n_layers").get<std::size_t>();
    const auto n_heads = m.at("n_heads").get<std::size_t>();
    for (std::size_t l = 0; l < n_layers; ++l) ds.resid.push_back(from_tensor(archive.at("resid/L" + std::to_string(l))));
    if (n_heads > 0) {
      for (std::size_t l = 0; l + 1 < n_layers; ++l) {
        ds.heads.emplace_back();
        for (std::size_t h = 0; h < n_heads; ++h) ds.heads.back().push_back(from_tensor(archive.at(head_name(l, h))));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  ds.validate();
  return ds;
}

std::optional<std::string> fingerprint_warning(const ProbingDataset& ds, const Weights& weights) {
  const auto fp = weights_fingerprint(weights);
  if (fp == ds.model_fingerprint) return std::nullopt;
  return "dataset was cached from model " + ds.model_fingerprint + " but the current model is " + fp;
}

}  // namespace mindprobe
