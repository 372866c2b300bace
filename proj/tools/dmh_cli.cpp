#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dmh/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Differentiable Metropolis-Hastings experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool paper_scale = false;
  std::string out_path;

  const std::pair<const char*, const char*> commands[] = {
      {"sweep", "lag-1 objective and its derivative over a grid of proposal scales"},
      {"tune", "Adam on the Cholesky factor of a random-walk proposal"},
      {"sensitivity", "power-scaling prior sensitivity of a Bayesian linear regression"},
      {"diagnose", "ESS, R-hat and Monte Carlo error of independent chains"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--threads", threads, "maximum concurrent chains")->check(CLI::PositiveNumber);
    sub->add_flag("--paper-scale", paper_scale, "use the full-length run settings");
    sub->add_option("--out", out_path, "CSV output path (default: config 'output' or stdout)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    dmh::cli::json config = dmh::cli::read_config_file(config_path);
    if (config.is_object() && config.contains("output")) {
      if (!config["output"].is_string()) throw dmh::cli::ConfigError("output must be a string");
      if (out_path.empty()) out_path = config["output"].get<std::string>();
      config.erase("output");
    }
    dmh::cli::RunFlags flags;
    flags.seed = seed;
    flags.threads = threads;
    flags.paper_scale = paper_scale;
    flags.config_dir = std::filesystem::path(config_path).parent_path();

    const dmh::cli::CommandOutput result = dmh::cli::run_command(command, config, flags);
    if (out_path.empty()) {
      std::cout << result.csv;
    } else {
      std::ofstream out(out_path, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write " + out_path);
      out << result.csv;
    }
    if (!result.all_finite) {
      std::cerr << "dmh " << command << ": non-finite estimates or skipped iterations, see the CSV trailer\n";
      return 1;
    }
    return 0;
  } catch (const dmh::cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
