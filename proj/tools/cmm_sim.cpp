// Command-line front end: run simulated scenarios, replay logged
// pseudo-ranges, and summarize result directories.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <map>
#include <regex>

#include "cmm/geodesy.hpp"
#include "cmm/harness.hpp"

namespace fs = std::filesystem;
using namespace cmm;

namespace {

harness::ScenarioConfig load_or_default(const std::string& scenario_path) {
  if (scenario_path.empty()) return harness::ScenarioConfig{};
  return harness::load_scenario(scenario_path);
}

std::string run_path(const std::string& dir, const std::string& kind,
                     const std::string& algo, std::uint64_t seed) {
  return dir + "/" + kind + "_" + algo + "_seed" + std::to_string(seed) + ".csv";
}

int cmd_simulate(const std::string& scenario_path, const std::string& algo_name,
                 int particles, std::int64_t seed, int n_seeds, const std::string& out_dir,
                 bool export_log) {
  auto cfg = load_or_default(scenario_path);
  if (particles > 0) cfg.filter.n_particles = particles;
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  const auto algo = harness::parse_algorithm(algo_name);
  fs::create_directories(out_dir);

  std::vector<harness::RunResult> runs;
  for (int s = 0; s < n_seeds; ++s) {
    auto run_cfg = cfg;
    run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(s);
    const auto result = harness::run_simulation(run_cfg, algo);
    harness::write_metrics_csv(run_path(out_dir, "run", algo_name, run_cfg.seed),
                               result.records);
    if (!result.bias_records.empty())
      harness::write_bias_csv(run_path(out_dir, "bias", algo_name, run_cfg.seed),
                              result.bias_records);
    if (export_log)
      harness::write_replay_log(
          out_dir + "/log_seed" + std::to_string(run_cfg.seed) + ".csv", result.log_rows);
    if (result.divergence_count > 0)
      std::cerr << "warning: filter reinitialized weights " << result.divergence_count
                << " time(s) (seed " << run_cfg.seed << ")\n";
    runs.push_back(result);
  }
  const auto summary = harness::compute_summary(algo_name, runs);
  std::cout << harness::format_summary_table({summary});
  return 0;
}

int cmd_replay(const std::string& log_path, const std::string& scenario_path,
               const std::string& algo_name, const std::string& out_dir,
               const std::vector<std::string>& drops) {
  auto cfg = load_or_default(scenario_path);
  const auto algo = harness::parse_algorithm(algo_name);

  std::string effective_log = log_path;
  if (!drops.empty()) {
    // Withhold selected vehicle:satellite channels, e.g. --drop 0:3
    auto rows = harness::read_replay_log(log_path);
    std::vector<std::pair<int, int>> filters;
    for (const auto& d : drops) {
      const auto colon = d.find(':');
      if (colon == std::string::npos)
        throw std::runtime_error("--drop expects vehicle:sat, got " + d);
      filters.emplace_back(std::stoi(d.substr(0, colon)), std::stoi(d.substr(colon + 1)));
    }
    std::vector<harness::ReplayRow> kept;
    for (const auto& r : rows) {
      const bool drop = std::any_of(filters.begin(), filters.end(), [&](const auto& f) {
        return f.first == r.vehicle_id && f.second == r.sat_id;
      });
      if (!drop) kept.push_back(r);
    }
    fs::create_directories(out_dir);
    effective_log = out_dir + "/filtered_log.csv";
    harness::write_replay_log(effective_log, kept);
  }

  const auto result = harness::replay(effective_log, cfg, algo);
  fs::create_directories(out_dir);
  harness::write_metrics_csv(run_path(out_dir, "run", algo_name, cfg.seed), result.records);
  const auto summary = harness::compute_summary(algo_name, {result});
  std::cout << harness::format_summary_table({summary});
  return 0;
}

int cmd_report(const std::string& in_dir) {
  const std::regex pattern(R"(run_([a-z]+)_seed(\d+)\.csv)");
  std::map<std::string, std::vector<harness::RunResult>> by_algo;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(in_dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    std::smatch m;
    const std::string name = path.filename().string();
    if (!std::regex_match(name, m, pattern)) continue;
    harness::RunResult run;
    run.records = harness::read_metrics_csv(path.string());
    const fs::path bias = path.parent_path() / ("bias_" + m[1].str() + "_seed" + m[2].str() + ".csv");
    if (fs::exists(bias)) run.bias_records = harness::read_bias_csv(bias.string());
    by_algo[m[1].str()].push_back(std::move(run));
  }
  if (by_algo.empty()) {
    std::cerr << "no run_*.csv files in " << in_dir << "\n";
    return 1;
  }
  std::vector<harness::SummaryRow> rows;
  for (const auto& [algo, runs] : by_algo)
    rows.push_back(harness::compute_summary(algo, runs));
  std::cout << harness::format_summary_table(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cooperative map matching simulator"};
  app.require_subcommand(1);

  std::string scenario_path, algo = "rbpf", out_dir = "out", log_path, in_dir;
  int particles = 0, n_seeds = 1;
  std::int64_t seed = -1;
  bool export_log = false;
  std::vector<std::string> drops;

  auto* sim = app.add_subcommand("simulate", "run a simulated scenario");
  sim->add_option("--scenario", scenario_path, "scenario JSON (defaults when omitted)");
  sim->add_option("--algo", algo, "rbpf|static|smoothed|ego")->capture_default_str();
  sim->add_option("--particles", particles, "override particle count");
  sim->add_option("--seed", seed, "override master seed");
  sim->add_option("--seeds", n_seeds, "number of consecutive seeds to run")
      ->capture_default_str();
  sim->add_option("--out", out_dir, "output directory")->capture_default_str();
  sim->add_flag("--export-log", export_log, "write the raw pseudo-range log");

  auto* rep = app.add_subcommand("replay", "drive an algorithm from a logged file");
  rep->add_option("--log", log_path, "replay log CSV")->required();
  rep->add_option("--scenario", scenario_path, "scenario JSON (defaults when omitted)");
  rep->add_option("--algo", algo, "rbpf|static|smoothed|ego")->capture_default_str();
  rep->add_option("--out", out_dir, "output directory")->capture_default_str();
  rep->add_option("--drop", drops, "withhold vehicle:sat channels, repeatable");

  auto* report = app.add_subcommand("report", "summarize a results directory");
  report->add_option("--in", in_dir, "directory with run_*.csv files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed())
      return cmd_simulate(scenario_path, algo, particles, seed, n_seeds, out_dir, export_log);
    if (rep->parsed()) return cmd_replay(log_path, scenario_path, algo, out_dir, drops);
    if (report->parsed()) return cmd_report(in_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
