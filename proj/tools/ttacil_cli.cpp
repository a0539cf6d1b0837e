// Command-line front end: run experiments, render tables and plots.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ttacil/experiment.hpp"
#include "ttacil/report.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

int cmd_run(const std::string& config_path, const std::string& seeds, const std::string& out) {
  ttacil::ExperimentConfig cfg = ttacil::parse_config(config_path);
  if (!seeds.empty()) {
    ttacil::Json list = ttacil::Json::array();
    std::size_t pos = 0;
    while (pos <= seeds.size()) {
      const std::size_t comma = std::min(seeds.find(',', pos), seeds.size());
      const std::string tok = seeds.substr(pos, comma - pos);
      std::size_t used = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (tok.empty() || used != tok.size() || tok.front() == '-') {
        throw ttacil::ConfigError("--seeds", "expected comma-separated non-negative integers, got '" + seeds + "'");
      }
      list.push_back(static_cast<std::uint64_t>(v));
      pos = comma + 1;
    }
    cfg.seeds = list.get<std::vector<std::uint64_t>>();
  }
  if (!out.empty()) cfg.output = out;
  const std::size_t workers = ttacil::worker_count_from_env();
  const auto summary = ttacil::run_experiment(cfg, workers);
  std::cout << "runs planned " << summary.planned << ", already present " << summary.skipped << ", written "
            << summary.written << " -> " << cfg.output << '\n';
  return kOk;
}

int cmd_report(const std::string& table, const std::string& in, const std::string& format) {
  const auto records = ttacil::read_records(in);
  const auto t = ttacil::make_table(records, table);
  std::cout << (format == "csv" ? ttacil::render_csv(t) : ttacil::render_text(t));
  return kOk;
}

int cmd_plot(const std::string& in, const std::string& out) {
  const auto svg = ttacil::plot_svg(ttacil::read_records(in));
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write '" + out + "'");
  f << svg;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time adaptation for class-incremental learning: experiments and reports"};
  app.require_subcommand(1);

  std::string config_path, seeds, out;
  auto* run = app.add_subcommand("run", "Run every (method, seed, order) cell of an experiment config");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seeds", seeds, "Comma-separated seeds, overriding the config");
  run->add_option("--out", out, "Results file (JSON lines), overriding the config");

  std::string table, in, format = "text";
  std::vector<std::string> names;
  for (auto n : ttacil::table_names()) names.emplace_back(n);
  auto* report = app.add_subcommand("report", "Aggregate results into a table (mean ± std over seeds)");
  report->add_option("--table", table, "Table name")->required()->check(CLI::IsMember(names));
  report->add_option("--in", in, "Results file")->required();
  report->add_option("--format", format, "text or csv")->check(CLI::IsMember({"text", "csv"}));

  std::string plot_in, plot_out;
  auto* plot = app.add_subcommand("plot", "Accuracy per task as an SVG line chart");
  plot->add_option("--in", plot_in, "Results file")->required();
  plot->add_option("--out", plot_out, "Output SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, seeds, out);
    if (*report) return cmd_report(table, in, format);
    if (*plot) return cmd_plot(plot_in, plot_out);
  } catch (const ttacil::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
