// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
//
//   mindprobe_acceptance [--workdir DIR] [--only 1,2,...]

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mindprobe/activation_cache.hpp"
#include "mindprobe/evalkit.hpp"
#include "mindprobe/pipeline.hpp"
#include "mindprobe/probing.hpp"
#include "mindprobe/steering.hpp"
#include "mindprobe/tensor_archive.hpp"
#include "mindprobe/train.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace mindprobe;
using nlohmann::json;

namespace {

// Pinned tolerances.
constexpr double kIdentitySeconds = 10.0;
constexpr double kSolverLossSlack = 1e-4;
constexpr double kAccuracySlack = 0.01;
constexpr double kTrainedNats = 1.5;
constexpr double kOracleProbeMin = 0.95;
constexpr double kProtagonistMarginMin = 0.10;
constexpr double kPipelineSeconds = 600.0;
constexpr double kFixtureP = 0.001953125;
constexpr double kFixturePTol = 1e-6;
constexpr double kExactPTol = 1e-12;
constexpr double kExactR2Tol = 1e-12;
constexpr double kExtractedR2Min = 0.95;
constexpr double kGradientRelErr = 1e-3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

json load_json(const fs::path& p) { return json::parse(read_text_file(p)); }

// Default configuration with every stage run once into `dir`.
struct DefaultRun {
  fs::path dir;
  PipelineConfig config;
  double seconds = 0.0;
  bool done = false;

  void ensure() {
    if (done) return;
    config = PipelineConfig{};
    config.output_dir = dir;
    RunOptions o;
    o.log = [](const std::string& line) { std::cerr << line << "\n"; };
    const auto t0 = std::chrono::steady_clock::now();
    run_pipeline(config, o);
    seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    // A resumed run skips finished units, so take stage timings from the manifest.
    const auto manifest = load_json(dir / artifacts::kManifest);
    double total = 0.0;
    for (const auto& [name, unit] : manifest.at("units").items()) total += unit.value("seconds", 0.0);
    seconds = std::max(seconds, total);
    done = true;
  }
};

Outcome identity_interventions() {
  ModelConfig c;
  c.vocab_size = static_cast<int>(generator_vocabulary().size());
  c.seed = 17;
  const Weights w = build_model(c);
  Rng rng(2024);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t mismatches = 0;
  for (int p = 0; p < 100; ++p) {
    std::vector<TokenId> ids(8 + rng.index(56));
    for (auto& t : ids) t = static_cast<TokenId>(rng.index(static_cast<std::size_t>(c.vocab_size)));
    SteeringVector v;
    v.layer = static_cast<int>(rng.index(static_cast<std::size_t>(c.n_layers + 1)));
    v.v.resize(static_cast<std::size_t>(c.d_model));
    for (auto& x : v.v) x = static_cast<float>(rng.normal());
    const auto base = forward_with_hooks(w, ids).logits;
    const auto caa = forward_with_hooks(w, ids, caa_hooks(v, 0.0f, rng.index(ids.size()))).logits;
    const auto iti = forward_with_hooks(w, ids, iti_hooks(ITIPlan{}, 0)).logits;
    const auto bytes = static_cast<std::size_t>(base.size()) * sizeof(float);
    if (std::memcmp(base.data(), caa.data(), bytes) != 0) ++mismatches;
    if (std::memcmp(base.data(), iti.data(), bytes) != 0) ++mismatches;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {mismatches == 0 && secs < kIdentitySeconds,
          std::to_string(mismatches) + " mismatching prompts, " + fmt(secs, 3) + " s"};
}

Outcome probe_solver_oracle() {
  double worst_gap = -1e300, worst_acc = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MatrixD x;
    std::vector<bool> z;
    oracle::noisy_linear_dataset(1000 + seed, 200, 32, x, z);
    const auto probe = train_probe(x, z);
    const auto gd = oracle::gradient_descent_logistic(x, z, 10.0, 20000);
    std::vector<double> w(probe.w.data(), probe.w.data() + probe.w.size());
    const double ours = oracle::logistic_loss(x, z, w, probe.b, 10.0);
    worst_gap = std::max(worst_gap, ours - gd.loss);
    worst_acc = std::max(worst_acc, std::abs(oracle::accuracy(x, z, w, probe.b) - oracle::accuracy(x, z, gd.w, gd.b)));
  }
  return {worst_gap <= kSolverLossSlack && worst_acc <= kAccuracySlack,
          "max loss excess " + fmt(worst_gap) + ", max accuracy gap " + fmt(worst_acc)};
}

Outcome pca_recovery(DefaultRun& run) {
  run.ensure();
  const auto ds = load_dataset(run.dir / artifacts::cache(VariationKind::original));
  const auto layers = ds.resid_as_double();
  const int d = static_cast<int>(layers.front().cols());
  double worst = 0.0;
  for (const auto* z : {&ds.z_oracle, &ds.z_protagonist}) {
    const auto report = memorisation_sweep(layers, *z, run.config.split_seed(), {d});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto* full = report.find(static_cast<int>(l), std::nullopt);
      const auto* rotated = report.find(static_cast<int>(l), d);
      if (!full || !rotated || !full->accuracy || !rotated->accuracy) return {false, "missing cell at layer " + std::to_string(l)};
      worst = std::max(worst, std::abs(*full->accuracy - *rotated->accuracy));
    }
  }
  return {worst <= kAccuracySlack, "max |all components - raw| = " + fmt(worst) + " over " +
                                       std::to_string(layers.size()) + " layers, both perspectives"};
}

Outcome synthetic_probing(DefaultRun& run) {
  run.ensure();
  const auto training = load_json(run.dir / artifacts::kTrainingLog);
  const double nats = training.at("corpus_loss").get<double>();
  const double oracle_best =
      load_json(run.dir / artifacts::probe(VariationKind::original, Perspective::oracle, "json")).at("best_accuracy").get<double>();
  const double protagonist_best =
      load_json(run.dir / artifacts::probe(VariationKind::original, Perspective::protagonist, "json"))
          .at("best_accuracy")
          .get<double>();
  const bool ok = nats <= kTrainedNats && oracle_best >= kOracleProbeMin &&
                  protagonist_best - 0.5 >= kProtagonistMarginMin && run.seconds <= kPipelineSeconds;
  return {ok, "corpus loss " + fmt(nats) + " nats/token, oracle best " + fmt(oracle_best) + ", protagonist best " +
                  fmt(protagonist_best) + ", pipeline " + fmt(run.seconds, 4) + " s"};
}

Outcome steering_efficacy(DefaultRun& run) {
  run.ensure();
  const auto fb = load_json(run.dir / artifacts::eval(Task::forward_belief));
  const double base_fb = fb.at("baseline").at("FB").get<double>();
  const double caa_fb = fb.at("CAA").at("FB").get<double>();
  std::string detail = "FB " + fmt(base_fb) + " -> " + fmt(caa_fb) + " (" + fb.at("selected").at("CAA").dump() + ")";
  bool ok = caa_fb > base_fb;
  for (Task t : {Task::forward_action, Task::backward_belief}) {
    const auto ev = load_json(run.dir / artifacts::eval(t));
    const double delta = ev.at("CAA").at("Both").get<double>() - ev.at("baseline").at("Both").get<double>();
    detail += ", " + std::string(to_string(t)) + " Both " + (delta >= 0 ? "+" : "") + fmt(delta);
    ok = ok && delta >= 0.0;
  }
  return {ok, detail};
}

// Two-sided: share of fair assignments at least as lopsided as observed.
double enumerated_p(std::size_t b, std::size_t c) {
  const std::size_t n = b + c;
  const long observed = std::labs(static_cast<long>(b) - static_cast<long>(c));
  std::size_t hits = 0;
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    const long k = __builtin_popcountll(mask);
    if (std::labs(2 * k - static_cast<long>(n)) >= observed) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(1ULL << n);
}

Outcome mcnemar_oracle() {
  double worst = 0.0;
  for (std::size_t n = 0; n <= 12; ++n) {
    for (std::size_t b = 0; b <= n; ++b) worst = std::max(worst, std::abs(mcnemar_exact_p(b, n - b) - enumerated_p(b, n - b)));
  }
  const auto s = mcnemar_from_correct(std::vector<bool>(10, true), std::vector<bool>(10, false));
  const bool ok = worst <= kExactPTol && s.b == 10 && s.c == 0 && std::abs(s.p_value - kFixtureP) <= kFixturePTol;
  return {ok, "max |exact - enumerated| " + fmt(worst) + ", p(10,0) = " + fmt(s.p_value, 10)};
}

// 100 paired templates; TB correct on [0, tb_end), FB correct on [fb_begin, fb_end).
TaskResult paired(std::size_t tb_end, std::size_t fb_begin, std::size_t fb_end, const std::string& method) {
  TaskResult r;
  r.method = method;
  for (std::size_t t = 0; t < 100; ++t) {
    const bool tb = t < tb_end, fb = t >= fb_begin && t < fb_end;
    r.predictions.push_back({2 * t, static_cast<std::int64_t>(t), Condition::true_belief, tb ? 0u : 1u, tb});
    r.predictions.push_back({2 * t + 1, static_cast<std::int64_t>(t), Condition::false_belief, fb ? 0u : 1u, fb});
  }
  compute_accuracies(r);
  return r;
}

Outcome table_fixture() {
  // Baseline 44/44/44; treatment 66/71/54.
  const auto report = delta_report(paired(44, 0, 44, "none"), {paired(66, 12, 83, "CAA")});
  const auto& row = report.rows.at(1);
  const bool cells = row.cell_tb.rfind("66_{+22}", 0) == 0 && row.cell_fb.rfind("71_{+27}", 0) == 0 &&
                     row.cell_both.rfind("54_{+10}", 0) == 0;
  const bool plain = format_delta_cell(66, 44, false) == "66_{+22}" && format_delta_cell(71, 44, false) == "71_{+27}" &&
                     format_delta_cell(54, 44, false) == "54_{+10}";
  const std::string table = render_table({report});
  const bool rendered = table.find("66_{+22}") != std::string::npos && table.find("54_{+10}") != std::string::npos;
  return {cells && plain && rendered, "cells " + row.cell_tb + " " + row.cell_fb + " " + row.cell_both};
}

Outcome scaling_fixture() {
  const std::vector<double> sizes{0.07, 0.16, 0.41, 1.0, 1.4, 2.8, 6.9, 12.0};
  std::vector<double> exact;
  for (double s : sizes) exact.push_back(0.62 + 0.045 * std::log(s));
  const auto fit = fit_scaling(sizes, exact, ScalingKind::logarithmic);
  // The base-model best accuracies are only plotted, not tabulated, so the
  // regime check uses points built to have R^2 = 0.98 exactly: a logarithmic
  // trend plus a residual orthogonal to [1, log size].
  const std::vector<double> base_sizes{7.0, 13.0, 70.0};
  Eigen::Vector3d x, ones = Eigen::Vector3d::Ones();
  for (int i = 0; i < 3; ++i) x[i] = std::log(base_sizes[static_cast<std::size_t>(i)]);
  const Eigen::Vector3d centred = x.array() - x.mean();
  Eigen::Vector3d r = ones.cross(x);
  const double ss_trend = 0.05 * 0.05 * centred.squaredNorm();
  r *= std::sqrt(ss_trend * (1.0 / 0.98 - 1.0)) / r.norm();
  std::vector<double> base_best;
  for (int i = 0; i < 3; ++i) base_best.push_back(0.6 + 0.05 * x[i] + r[i]);
  const auto read = fit_scaling(base_sizes, base_best, ScalingKind::logarithmic);
  const bool ok = std::abs(fit.r_squared - 1.0) <= kExactR2Tol && std::abs(read.r_squared - 0.98) <= 1e-9 &&
                  read.r_squared >= kExtractedR2Min;
  return {ok, "exact R^2 " + fmt(fit.r_squared, 15) + ", constructed 0.98 fixture R^2 " + fmt(read.r_squared, 6) +
                  " (published points are plotted only)"};
}

Outcome gradient_check() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 13;
  c.max_seq = 16;
  c.seed = 31;
  const auto wd = cast_weights<double>(build_model(c));
  const TokenCorpus batch{{1, 4, 2, 9, 3, 3, 7, 12}, {1, 10, 5, 6, 11}};
  const auto lg = loss_and_gradient<double>(wd, batch);
  std::vector<TensorRef> refs;
  wd.visit([&](const TensorRef& ref, const double*) { refs.push_back(ref); });
  Rng rng(7);
  double worst = 0.0;
  int checked = 0;
  for (int trial = 0; trial < 400 && checked < 60; ++trial) {
    const auto& ref = refs[rng.index(refs.size())];
    std::size_t n = 1;
    for (auto s : ref.shape) n *= static_cast<std::size_t>(s);
    const std::size_t idx = rng.index(n);
    double analytic = 0.0;
    lg.gradient.visit([&](const TensorRef& r, const double* d) {
      if (r.name == ref.name) analytic = d[idx];
    });
    auto perturbed = [&](double delta) {
      auto w2 = wd;
      w2.visit([&](const TensorRef& r, double* d) {
        if (r.name == ref.name) d[idx] += delta;
      });
      return loss_and_gradient<double>(w2, batch).loss;
    };
    const double eps = 1e-5;
    const double numeric = (perturbed(eps) - perturbed(-eps)) / (2 * eps);
    if (std::abs(numeric) < 1e-7 && std::abs(analytic) < 1e-7) continue;
    worst = std::max(worst, std::abs(numeric - analytic) / std::max(std::abs(numeric), std::abs(analytic)));
    ++checked;
  }
  return {checked >= 30 && worst <= kGradientRelErr,
          std::to_string(checked) + " coordinates, max relative error " + fmt(worst)};
}

PipelineConfig small_config(const fs::path& out) {
  return PipelineConfig::from_json({{"seed", 11},
                                    {"model", {{"n_layers", 2}, {"d_model", 32}, {"n_heads", 4}}},
                                    {"training", {{"steps", 60}}},
                                    {"corpus", {{"n_templates", 60}, {"n_training_documents", 400}}},
                                    {"variations", {"original", "random"}},
                                    {"pca_k_list", {2, 8}},
                                    {"iti", {{"k", 4}}},
                                    {"output_dir", out.string()}});
}

Outcome determinism(const fs::path& work) {
  const auto a = small_config(work / "det-a");
  const auto b = small_config(work / "det-b");
  fs::remove_all(a.output_dir);
  fs::remove_all(b.output_dir);
  run_pipeline(a);
  run_pipeline(b);
  const auto ja = read_text_file(a.output_dir / artifacts::kReportJson);
  const auto jb = read_text_file(b.output_dir / artifacts::kReportJson);
  return {ja == jb && !ja.empty(), std::to_string(ja.size()) + " bytes, " + (ja == jb ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mindprobe acceptance checks"};
  std::string workdir = (fs::temp_directory_path() / "mindprobe-acceptance").string();
  std::string only;
  app.add_option("--workdir", workdir, "Directory for pipeline outputs; finished stages are reused");
  app.add_option("--only", only, "Comma separated criterion numbers");
  CLI11_PARSE(app, argc, argv);

  std::set<int> wanted;
  std::stringstream ss(only);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) wanted.insert(std::stoi(item));
  }
  const fs::path work = workdir;
  fs::create_directories(work);
  DefaultRun run{work / "default"};

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"identity interventions", identity_interventions},
      {"probe solver oracle", probe_solver_oracle},
      {"PCA recovery", [&] { return pca_recovery(run); }},
      {"synthetic-task probing", [&] { return synthetic_probing(run); }},
      {"steering efficacy", [&] { return steering_efficacy(run); }},
      {"McNemar oracle", mcnemar_oracle},
      {"table format", table_fixture},
      {"scaling fit", scaling_fixture},
      {"gradient check", gradient_check},
      {"determinism", [&] { return determinism(work); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(number)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << "criterion " << number << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << " - "
              << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
