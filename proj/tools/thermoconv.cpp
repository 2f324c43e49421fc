#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "thermoconv/errors.hpp"
#include "thermoconv/harness.hpp"

// Exit codes: 0 all required verdicts hold, 1 a required verdict failed,
// 2 configuration error, 3 numerical or runtime failure.
int main(int argc, char** argv) {
  CLI::App app{"thermoconv: convergence audits for slow-fast diffusions"};
  std::string experiment, config, out;
  std::uint64_t seed = 0;
  app.add_option("experiment", experiment, "Experiment name")
      ->required()
      ->check(CLI::IsMember(thermoconv::experiment_names()));
  app.add_option("--config", config, "JSON config path")->required();
  app.add_option("--out", out, "Output directory")->required();
  auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  CLI11_PARSE(app, argc, argv);

  try {
    thermoconv::ExperimentConfig cfg = thermoconv::load_config(config);
    if (!cfg.experiment.empty() && cfg.experiment != experiment)
      throw thermoconv::ConfigError("experiment: config names " + cfg.experiment + " but " + experiment +
                                    " was requested");
    cfg.experiment = experiment;
    if (seed_opt->count() > 0) {
      cfg.seed = seed;
      cfg.raw["seed"] = seed;
    }
    const thermoconv::RunResult r = thermoconv::run(cfg);
    thermoconv::write_outputs(cfg, r, out);
    for (const auto& [name, ok] : r.verdicts) {
      const auto req = cfg.require.find(name);
      const bool required = req != cfg.require.end() && req->second;
      std::printf("%-20s %s%s\n", name.c_str(), ok ? "true" : "false", required ? " (required)" : "");
    }
    return r.required_ok ? 0 : 1;
  } catch (const thermoconv::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
