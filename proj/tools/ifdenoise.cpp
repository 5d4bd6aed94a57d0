#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ifdenoise/commands.hpp"

namespace cli = ifdenoise::cli;

int main(int argc, char** argv) {
  CLI::App app{"Influence-function denoising toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  int jobs = 1;
  std::string strategy;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const cli::Options&, std::ostream&);
    bool strategy;
  };
  const Command commands[] = {
      {"gen", "write a synthetic dataset (data.jsonl, test.jsonl)", cli::gen, false},
      {"denoise", "run the bootstrap on one dataset", cli::denoise, true},
      {"validate-if", "influence estimates vs leave-one-out retraining", cli::validate_if, false},
      {"lemma-check", "first-order relabel update vs retraining", cli::lemma_check, false},
      {"sweep", "run an experiment grid", cli::sweep, true},
      {"report", "re-aggregate the run files under --out", cli::report, false},
  };

  struct Parsed {
    CLI::App* app = nullptr;
    CLI::Option* seed = nullptr;
    CLI::Option* strategy = nullptr;
  };
  std::vector<Parsed> subs;
  for (const auto& c : commands) {
    Parsed p;
    p.app = app.add_subcommand(c.name, c.help);
    if (std::string(c.name) != "report") {
      p.app->add_option("--config", config_path, "flat key=value config file")->check(CLI::ExistingFile);
      p.seed = p.app->add_option("--seed", seed, "seed override");
    }
    p.app->add_option("--out", out, "output directory")->required();
    p.app->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    if (c.strategy) {
      p.strategy = p.app->add_option("--strategy", strategy, "selection strategy")
                       ->check(CLI::IsMember({"cr1", "cr2", "cr2ts", "conf"}));
    }
    subs.push_back(p);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitConfig;
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i].app->parsed()) continue;
    try {
      cli::Options o;
      if (!config_path.empty()) o.config = ifdenoise::load_flat_config(config_path);
      if (subs[i].seed && subs[i].seed->count()) o.seed = seed;
      if (subs[i].strategy && subs[i].strategy->count()) o.strategy = strategy;
      o.out = out;
      o.jobs = jobs;
      return commands[i].run(o, commands[i].run == cli::report ? std::cout : std::cerr);
    } catch (const ifdenoise::ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return cli::kExitConfig;
    } catch (const ifdenoise::Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return cli::kExitFailed;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return cli::kExitFailed;
    }
  }
  return cli::kExitConfig;
}
