// srlab command line: one subcommand per experiment.

#include "srlab/harness.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"srlab: successor representations under action repetition"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::vector<std::uint64_t> seeds;
  unsigned threads = 1;
  bool quiet = false;

  struct Verb {
    const char* name;
    const char* help;
    int (*run)(const srlab::ExperimentConfig&, const srlab::RunOptions&);
  };
  const Verb verbs[] = {
      {"spectrum-sweep", "Exact SR spectra over (k, gamma)", srlab::cmd_spectrum_sweep},
      {"ablation", "FB training grid over (k, d, gamma, seed)", srlab::cmd_ablation},
      {"bounds-audit", "Audit the singular-value, stable-rank and gap bounds", srlab::cmd_bounds_audit},
      {"heatmap", "Export SR rows or Q values onto the grid", srlab::cmd_heatmap},
      {"train-fb", "Train one FB representation and save it", srlab::cmd_train_fb},
  };
  for (const Verb& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "Output directory (overrides output_dir)");
    sub->add_option("--seeds", seeds, "Seeds (overrides the config list)")->delimiter(',');
    sub->add_option("--threads", threads, "Concurrent sweep cells")->check(CLI::Range(1U, 256U));
    sub->add_flag("--quiet", quiet, "No progress output");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? srlab::kExitOk : srlab::kExitConfig;
  }

  const Verb* chosen = nullptr;
  for (const Verb& v : verbs) {
    if (app.got_subcommand(v.name)) chosen = &v;
  }

  try {
    srlab::ExperimentConfig config = srlab::load_config(config_path);
    if (!out_dir.empty()) config.output_dir = out_dir;
    if (!seeds.empty()) config.seeds = seeds;
    config.validate();
    srlab::RunOptions options;
    options.threads = threads;
    options.log = quiet ? nullptr : &std::cerr;
    return chosen->run(config, options);
  } catch (const srlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return srlab::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
