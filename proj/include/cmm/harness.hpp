#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cmm/baselines.hpp"
#include "cmm/error_models.hpp"
#include "cmm/filter_rbpf.hpp"
#include "cmm/geodesy.hpp"
#include "cmm/map_constraints.hpp"
#include "cmm/multipath.hpp"

namespace cmm::harness {

/// Piecewise-linear path travelled at constant speed.
struct TrajectorySpec {
  std::vector<Eigen::Vector2d> waypoints;
  double speed_mps = 5.0;

  Eigen::Vector2d position_at(double t) const;
  Eigen::Vector2d velocity_at(double t) const;
};

struct Toggles {
  bool multipath = false;
  bool blockage = false;
  bool clock = false;
  bool adaptive_noise = false;
};

struct ForcedBlockage {
  int vehicle_id = 0;
  std::vector<int> sat_ids;
};

enum class Algorithm { kRbpf, kStatic, kSmoothed, kEgo };
Algorithm parse_algorithm(const std::string& name);
std::string algorithm_name(Algorithm algo);

struct ScenarioConfig {
  std::string name = "fig2_intersection";
  std::uint64_t seed = 1;
  int steps = 300;
  geo::GeodeticCoord origin{42.2808 * 3.14159265358979323846 / 180.0,
                            -83.7430 * 3.14159265358979323846 / 180.0, 270.0};
  std::string ephemeris_path;  // empty: bundled constellation
  int n_sats = 6;
  double elevation_mask_deg = 10.0;
  std::string lane_map_builtin = "fig2_intersection";  // or empty with a path
  std::string lane_map_path;
  std::string building_map_builtin;  // "fig3_intersection" or empty
  std::string building_map_path;
  std::vector<TrajectorySpec> vehicles;  // empty: crossing-roads default set
  errors::NoiseConfig noise;
  double common_bias_magnitude = 5.0;  // [m] truth-side per satellite
  rbpf::FilterConfig filter;
  Toggles toggles;
  std::vector<ForcedBlockage> forced_blockage;
  multipath::DllModel dll;
  baselines::StaticCmmConfig cmm;
  double init_pos_std = 10.0;  // [m] EKF init around the first ego fix
  double init_vel_std = 5.0;   // [m/s]
  double init_clk_std = 10.0;  // [m]

  void validate() const;  // throws with the offending field in the message
};

ScenarioConfig load_scenario(const std::string& path);
void save_scenario(const std::string& path, const ScenarioConfig& cfg);

maps::LaneMap fig2_lane_map();
multipath::BuildingMap fig3_building_map();
std::vector<TrajectorySpec> fig2_vehicles();

/// Per-step, per-vehicle output record.
struct MetricsRecord {
  double time_s = 0.0;
  int vehicle_id = 0;
  double est_x = 0.0;
  double est_y = 0.0;
  double err_horizontal = 0.0;  // [m], NaN when no estimate / no truth
  double cov_det = 0.0;         // [m^4]
  double n_sats_used = 0.0;
  double n_flagged = 0.0;
  int n_blocked = 0;
  bool diverged = false;
};

struct BiasRecord {
  double time_s = 0.0;
  int sat_id = 0;
  double bias_est = 0.0;
  double bias_true = 0.0;
};

/// One pseudo-range exported to (or read from) a replay log.
struct ReplayRow {
  double time_s = 0.0;
  int vehicle_id = 0;
  int sat_id = 0;
  double pseudorange = 0.0;
  Eigen::Vector3d sat_pos_enu = Eigen::Vector3d::Zero();
  bool has_truth = false;
  double truth_x = 0.0;
  double truth_y = 0.0;
};

struct RunResult {
  std::vector<MetricsRecord> records;
  std::vector<BiasRecord> bias_records;  // RBPF simulation runs only
  std::vector<ReplayRow> log_rows;       // filled by run_simulation
  int divergence_count = 0;
};

RunResult run_simulation(const ScenarioConfig& cfg, Algorithm algo);

/// Drive an algorithm from logged pseudo-ranges instead of the simulator.
/// The step interval is inferred from the log timestamps. Rows carrying
/// truth columns drive the error metrics.
RunResult replay(const std::string& log_path, const ScenarioConfig& cfg, Algorithm algo);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);
void write_bias_csv(const std::string& path, const std::vector<BiasRecord>& records);
std::vector<BiasRecord> read_bias_csv(const std::string& path);
void write_replay_log(const std::string& path, const std::vector<ReplayRow>& rows);
std::vector<ReplayRow> read_replay_log(const std::string& path);

struct SummaryRow {
  std::string algorithm;
  int n_runs = 0;
  double mean_error = 0.0;     // [m] mean over runs of per-run mean error
  double error_3sigma = 0.0;   // [m] 3x std over per-run means
  double mean_cov_det = 0.0;   // [m^4]
  double bias_rmse = 0.0;      // [m], NaN when no bias records
};

SummaryRow compute_summary(const std::string& algorithm,
                           const std::vector<RunResult>& runs);
std::string format_summary_table(const std::vector<SummaryRow>& rows);

}  // namespace cmm::harness
