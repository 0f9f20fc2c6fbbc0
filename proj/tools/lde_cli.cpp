#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "lde/pipeline.hpp"

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDependency = 3;
constexpr int kExitCheck = 4;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw lde::ConfigError("--config", "cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Appearance-knowledge pipeline: corpus, embeddings, elements, toy training and checks."};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  lde::StageOptions opts;
  std::string out = "out";
  app.add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", sets, "Override a config field, e.g. toy.sigma_v=0.5");
  app.add_option("-o,--out", out, "Artifact directory")->capture_default_str();
  app.add_flag("-f,--force", opts.force, "Rerun even when inputs are unchanged");
  app.add_option("-j,--jobs", opts.jobs, "Parallel sweep jobs")->check(CLI::PositiveNumber)->capture_default_str();

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"gen-corpus", "Render the description corpus (corpus.jsonl)"},
      {"encode", "Embed the corpus (embeddings.ldae)"},
      {"cluster", "K-means centroids, assignments and element partition"},
      {"tune", "Prompt tuning; writes prompts, elements and the classifier head"},
      {"analyze", "Per-element attribute report and partition balance"},
      {"train-toy", "Toy task with and without elements; overhead report"},
      {"sweep", "K sweep over toy.ks and toy.seeds"},
      {"gradcheck", "Finite-difference checks of every trainable path"},
      {"report", "Summarize artifacts into report.md"},
  };
  for (const auto& [name, help] : stages) app.add_subcommand(name, help);
  app.add_subcommand("all", "Run every stage in order");
  app.add_subcommand("print-config", "Print the effective configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  opts.out = out;

  try {
    const lde::PipelineConfig config = lde::parse_config(config_path.empty() ? "" : slurp(config_path), sets);
    const std::string chosen = app.get_subcommands().front()->get_name();
    if (chosen == "print-config") {
      std::cout << config.to_json();
      return 0;
    }
    std::vector<std::string> run;
    if (chosen == "all") {
      for (auto s : lde::kStages) run.emplace_back(s);
    } else {
      run.push_back(chosen);
    }
    for (const auto& stage : run) {
      const lde::StageResult r = lde::run_stage(stage, config, opts);
      std::cout << stage << (r.skipped ? ": up to date" : ": done") << " (";
      if (!r.skipped) std::cout << r.wall_seconds << " s; ";
      for (std::size_t i = 0; i < r.outputs.size(); ++i) std::cout << (i ? " " : "") << r.outputs[i];
      std::cout << ")\n";
    }
    return 0;
  } catch (const lde::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const lde::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return kExitDependency;
  } catch (const lde::CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kExitCheck;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}
