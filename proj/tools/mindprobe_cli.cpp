#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "mindprobe/errors.hpp"
#include "mindprobe/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::string perspective;
  std::string variation;
  std::string task;
  std::string instruction_file;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--out", f.out, "Output directory (overrides output_dir)");
  cmd->add_option("--seed", f.seed, "Base seed (overrides seed)");
  cmd->add_flag("--force", f.force, "Rerun even if up to date or produced under another config");
  cmd->add_option("--perspective", f.perspective, "Restrict probe/pca to one perspective")
      ->check(CLI::IsMember({"protagonist", "oracle"}));
  cmd->add_option("--variation", f.variation, "Restrict cache/probe/pca to one variation");
  cmd->add_option("--task", f.task, "Restrict eval to one task");
  cmd->add_option("--instruction-file", f.instruction_file, "Evaluation instruction text (relative to --out)");
  cmd->add_flag("-q,--quiet", f.quiet, "Only print errors");
}

mindprobe::PipelineConfig resolve(const Flags& f) {
  mindprobe::PipelineConfig c = f.config.empty() ? mindprobe::PipelineConfig{} : mindprobe::PipelineConfig::load(f.config);
  if (!f.out.empty()) c.output_dir = f.out;
  if (f.seed) c.seed = *f.seed;
  if (!f.instruction_file.empty()) c.eval.instruction_file = f.instruction_file;
  c.validate();
  return c;
}

mindprobe::RunOptions run_options(const Flags& f) {
  mindprobe::RunOptions o;
  o.force = f.force;
  if (!f.perspective.empty()) o.selection.perspective = mindprobe::parse_perspective(f.perspective);
  if (!f.variation.empty()) o.selection.variation = mindprobe::parse_variation(f.variation);
  if (!f.task.empty()) o.selection.task = mindprobe::parse_task(f.task);
  if (!f.quiet) o.log = [](const std::string& msg) { std::cerr << msg << "\n"; };
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probe and steer belief representations in a small transformer"};
  app.require_subcommand(1);
  Flags flags;
  std::string chosen;
  for (const auto& stage : mindprobe::stage_names()) {
    auto* cmd = app.add_subcommand(stage, "Run the " + stage + " stage");
    add_common(cmd, flags);
    cmd->callback([&chosen, stage] { chosen = stage; });
  }
  auto* all = app.add_subcommand("run", "Run every stage in order");
  add_common(all, flags);
  all->callback([&chosen] { chosen = "run"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto config = resolve(flags);
    const auto options = run_options(flags);
    if (chosen == "run") {
      mindprobe::run_pipeline(config, options);
    } else {
      mindprobe::run_stage(chosen, config, options);
    }
  } catch (const mindprobe::PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return mindprobe::exit_code_for(e);
  }
  return 0;
}
