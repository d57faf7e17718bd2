#include <iostream>

#include <CLI11.hpp>

#include "elab/cli.hpp"

namespace cli = elab::cli;

int main(int argc, char** argv) {
  CLI::App app{"Directed action experiments in random space-time potentials"};
  app.require_subcommand(1);

  struct Job {
    std::string config;
    std::string out;
    std::size_t workers = 0;
  };
  std::map<std::string, Job> jobs;
  for (const auto& [name, exp] : cli::experiment_names()) {
    auto& job = jobs[name];
    auto* sub = app.add_subcommand(name, "run the " + name + " experiment from a JSON config");
    sub->add_option("config", job.config, "config file")->required();
    sub->add_option("-o,--out", job.out, "output directory (relative paths resolve under $ELAB_OUTPUT_ROOT)");
    sub->add_option("-j,--workers", job.workers, "worker threads; overrides params.workers");
  }

  std::string report_dir, report_out;
  auto* rep = app.add_subcommand("report", "merge every run found under a results directory");
  rep->add_option("dir", report_dir, "results directory")->required()->check(CLI::ExistingDirectory);
  rep->add_option("-o,--out", report_out, "where to write the summary (default: the results directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kExitConfig;
  }

  return cli::guarded(std::cerr, [&] {
    if (rep->parsed()) {
      const auto summary = cli::report(report_dir, report_out.empty() ? report_dir : report_out);
      std::cout << "pooled " << summary.at("runs").size() << " run(s)\n";
      return;
    }
    for (const auto& [name, exp] : cli::experiment_names()) {
      if (!app.got_subcommand(name)) continue;
      const auto& job = jobs[name];
      auto cfg = cli::load_config(job.config, exp);
      if (job.workers > 0) cfg.params.workers = job.workers;
      const auto dir = cli::resolve_output(cfg, job.out.empty() ? std::nullopt
                                                                : std::optional<std::filesystem::path>(job.out));
      const auto manifest = cli::run(cfg, dir);
      std::cout << name << " " << manifest.at("config_hash").get<std::string>() << " -> " << dir.string() << "\n";
    }
  });
}
