// pvm: run hyperparameter tuning experiments from configuration files.
//
//   pvm run <config>       tune with the configured method, write a report
//   pvm phi-map <config>   sample, solve and fit the value-function surrogate
//   pvm report <dir>       collect report.json files into table2.csv

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "pvm/experiment.hpp"

namespace {

int fail(const pvm::Error& e, const std::string& fragment, int code) {
  pvm::Json record{{"error", e.kind()}, {"message", e.what()}};
  if (!fragment.empty()) record["config"] = fragment;
  std::cerr << record.dump() << '\n';
  return code;
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const pvm::ConfigError& e) {
    return fail(e, "", 2);
  } catch (const pvm::ExperimentError& e) {
    return fail(e, e.fragment(), 1);
  } catch (const pvm::Error& e) {
    return fail(e, "", 1);
  } catch (const std::exception& e) {
    std::cerr << pvm::Json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperparameter tuning with the penalized validation method"};
  app.require_subcommand(1);

  std::string run_config, phi_config, report_dir, output_override;

  auto* run = app.add_subcommand("run", "Tune hyperparameters with the configured method");
  run->add_option("config", run_config, "Experiment configuration file")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--output", output_override, "Override the output directory");

  auto* phi = app.add_subcommand("phi-map", "Fit and tabulate the value-function surrogate");
  phi->add_option("config", phi_config, "Experiment configuration file")->required()->check(CLI::ExistingFile);
  phi->add_option("-o,--output", output_override, "Override the output directory");

  auto* report = app.add_subcommand("report", "Aggregate report.json files into table2.csv");
  report->add_option("dir", report_dir, "Directory searched recursively")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  auto load = [&](const std::string& path) {
    auto config = pvm::load_config(path);
    if (!output_override.empty()) config.output = output_override;
    return config;
  };

  if (run->parsed()) {
    return guarded([&] {
      const auto outcome = pvm::run_experiment(load(run_config));
      const auto& r = outcome.row;
      std::cout << r.label << ": validation loss " << pvm::format_double(r.validation_loss);
      if (r.test_loss) std::cout << ", test loss " << pvm::format_double(*r.test_loss);
      std::cout << ", lower solves " << r.solves_label() << ", output " << outcome.directory.string() << '\n';
    });
  }
  if (phi->parsed()) {
    return guarded([&] {
      const auto config = load(phi_config);
      const auto outcome = pvm::phi_map(config);
      std::cout << "surrogate fitted to " << outcome.samples.size() << " samples ("
                << outcome.counted_solves << " lower solves), written to " << config.output.string() << '\n';
    });
  }
  return guarded([&] {
    const auto rows = pvm::aggregate_reports(report_dir);
    std::cout << rows.size() << " reports written to "
              << (std::filesystem::path(report_dir) / "table2.csv").string() << '\n';
  });
}
