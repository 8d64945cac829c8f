// calm: command-line front end for manifest-driven alignment runs.

#include "calm/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Cue-weighting policy alignment toolkit"};
  app.require_subcommand(1);

  calm::Overrides overrides;
  std::string manifest;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  int folds = 0;
  int resamples = 0;
  std::string out;

  const std::vector<std::pair<std::string, std::string>> verbs{
      {"fit", "Fit the benchmark policy and report its cross-validated ceiling"},
      {"subsample", "Write the working case set and its base rates"},
      {"externalize", "Write organizational and introspective guidance"},
      {"run-agent", "Collect every agent's decisions under each condition"},
      {"compare", "Alignment table with significance tests"},
      {"audit", "Attribute reliance and protected-attribute comparison"},
      {"plot", "Alignment vs. accuracy figure from the compare output"},
      {"report", "Run every stage and write a summary report"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : verbs) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--manifest,-m", manifest, "Run manifest (JSON)")->required();
    sub->add_option("--seed", seed, "Master seed; replaces every sub-seed");
    sub->add_option("--lambda", lambda, "Ridge penalty; disables the lambda grid");
    sub->add_option("--folds", folds, "Cross-validation folds");
    sub->add_option("--resamples", resamples, "Resamples for inference");
    sub->add_option("--out", out, "Output directory");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed")) overrides.seed = seed;
  if (chosen->count("--lambda")) overrides.lambda = lambda;
  if (chosen->count("--folds")) overrides.folds = folds;
  if (chosen->count("--resamples")) overrides.resamples = resamples;
  if (chosen->count("--out")) overrides.out = out;
  return calm::run_command(chosen->get_name(), manifest, overrides, std::cout, std::cerr);
}
