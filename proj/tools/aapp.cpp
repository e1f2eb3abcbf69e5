// Command-line front end: calibrate histories, run experiments, sweep
// (method, ratio, seed) grids and aggregate the results.

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aapp/commands.hpp"

namespace {

std::vector<double> parse_ratios(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::vector<aapp::Method> parse_methods(const std::string& s) {
  std::vector<aapp::Method> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto m = aapp::method_from_name(item);
    if (!m) throw CLI::ValidationError("unknown method: " + item);
    out.push_back(*m);
  }
  return out;
}

// "1,2,3" or "1..20"
std::vector<uint64_t> parse_seeds(const std::string& s) {
  std::vector<uint64_t> out;
  const auto dots = s.find("..");
  if (dots != std::string::npos) {
    const uint64_t lo = std::stoull(s.substr(0, dots));
    const uint64_t hi = std::stoull(s.substr(dots + 2));
    for (uint64_t v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic structured pruning with alignment-aware channel selection"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "run config JSON file");
  app.add_option("--set", overrides, "override a config key, e.g. --set prune.prune_ratio=0.3");

  auto* cal = app.add_subcommand("calibrate", "build the general/benign/harmful history bank");
  std::string bank_path = "out/bank.bin";
  cal->add_option("--bank", bank_path, "output bank file");

  auto* run = app.add_subcommand("run", "run one experiment and write metrics");
  std::string run_bank = "out/bank.bin";
  std::string metrics_path = "out/metrics.json";
  std::string decisions_path = "out/decisions.csv";
  std::string method_flag, ratio_flag, seed_flag;
  run->add_option("--bank", run_bank, "bank file (required for PP/AAPP)");
  run->add_option("--metrics", metrics_path, "output metrics JSON");
  run->add_option("--decisions", decisions_path, "output per-batch decision CSV");
  run->add_option("--method", method_flag, "Dense | PP | AAPP | Random");
  run->add_option("--ratio", ratio_flag, "prune ratio");
  run->add_option("--seed", seed_flag, "root seed");

  auto* sweep = app.add_subcommand("sweep", "run a (method, ratio, seed) grid");
  std::string ratios_s = "0.15,0.3,0.45";
  std::string methods_s = "PP,AAPP";
  std::string seeds_s = "1..5";
  std::string sweep_out = "out/sweep.csv";
  sweep->add_option("--ratios", ratios_s, "comma-separated prune ratios");
  sweep->add_option("--methods", methods_s, "comma-separated methods");
  sweep->add_option("--seeds", seeds_s, "comma-separated seeds or lo..hi");
  sweep->add_option("--out", sweep_out, "output CSV");

  auto* report = app.add_subcommand("report", "aggregate a sweep CSV (mean +/- stderr)");
  std::string report_in = "out/sweep.csv";
  std::string report_out = "out/report.csv";
  report->add_option("--input", report_in, "sweep CSV");
  report->add_option("--out", report_out, "aggregated CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      if (!method_flag.empty()) overrides.push_back("method=\"" + method_flag + "\"");
      if (!ratio_flag.empty()) overrides.push_back("prune.prune_ratio=" + ratio_flag);
      if (!seed_flag.empty()) overrides.push_back("seed=" + seed_flag);
    }
    const aapp::RunConfig cfg = aapp::load_run_config(config_path, overrides);

    if (cal->parsed()) {
      aapp::cmd_calibrate(cfg, bank_path, std::cout);
    } else if (run->parsed()) {
      aapp::cmd_run(cfg, run_bank, metrics_path, decisions_path, std::cout);
    } else if (sweep->parsed()) {
      aapp::cmd_sweep(cfg, parse_ratios(ratios_s), parse_methods(methods_s),
                      parse_seeds(seeds_s), sweep_out, std::cout);
    } else if (report->parsed()) {
      aapp::cmd_report(report_in, report_out, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
