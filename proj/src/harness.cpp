#include "cmm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cmm::harness {

namespace {

constexpr double kPi = 3.14159265358979323846;

enum StreamTag : std::uint64_t {
  kTruthBiasInit = 101,
  kTruthBiasStep = 102,
  kTruthClock = 103,
  kTruthMeas = 104,
  kCmmStep = 105,
};

double mean_finite(const std::vector<double>& v) {
  double sum = 0.0;
  int n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      sum += x;
      ++n;
    }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

void append_num(std::string& s, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  s += buf;
}

void append_num17(std::string& s, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  s += buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

}  // namespace

Eigen::Vector2d TrajectorySpec::position_at(double t) const {
  if (waypoints.empty()) return Eigen::Vector2d::Zero();
  if (waypoints.size() == 1) return waypoints[0];
  double remaining = speed_mps * std::max(0.0, t);
  for (size_t i = 0; i + 1 < waypoints.size(); ++i) {
    const Eigen::Vector2d seg = waypoints[i + 1] - waypoints[i];
    const double len = seg.norm();
    if (remaining <= len) return waypoints[i] + (remaining / len) * seg;
    remaining -= len;
  }
  return waypoints.back();
}

Eigen::Vector2d TrajectorySpec::velocity_at(double t) const {
  if (waypoints.size() < 2) return Eigen::Vector2d::Zero();
  double remaining = speed_mps * std::max(0.0, t);
  for (size_t i = 0; i + 1 < waypoints.size(); ++i) {
    const Eigen::Vector2d seg = waypoints[i + 1] - waypoints[i];
    const double len = seg.norm();
    if (remaining <= len) return speed_mps * seg / len;
    remaining -= len;
  }
  return Eigen::Vector2d::Zero();  // parked at the path end
}

Algorithm parse_algorithm(const std::string& name) {
  if (name == "rbpf") return Algorithm::kRbpf;
  if (name == "static") return Algorithm::kStatic;
  if (name == "smoothed") return Algorithm::kSmoothed;
  if (name == "ego") return Algorithm::kEgo;
  throw std::invalid_argument("unknown algorithm: " + name);
}

std::string algorithm_name(Algorithm algo) {
  switch (algo) {
    case Algorithm::kRbpf: return "rbpf";
    case Algorithm::kStatic: return "static";
    case Algorithm::kSmoothed: return "smoothed";
    case Algorithm::kEgo: return "ego";
  }
  return "?";
}

void ScenarioConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("scenario.steps: must be >= 1");
  if (n_sats < 3) throw std::invalid_argument("scenario.n_sats: must be >= 3");
  if (!(elevation_mask_deg >= 0.0 && elevation_mask_deg < 90.0))
    throw std::invalid_argument("scenario.elevation_mask_deg: must be in [0, 90)");
  if (common_bias_magnitude < 0.0)
    throw std::invalid_argument("scenario.common_bias_magnitude: must be >= 0");
  for (const auto& v : vehicles) {
    if (v.waypoints.size() < 2)
      throw std::invalid_argument("scenario.vehicles: each needs >= 2 waypoints");
    if (!(v.speed_mps > 0.0))
      throw std::invalid_argument("scenario.vehicles: speed must be > 0");
  }
  if (!lane_map_path.empty() && !std::ifstream(lane_map_path))
    throw std::invalid_argument("scenario.lane_map.path: file not found: " + lane_map_path);
  if (!building_map_path.empty() && !std::ifstream(building_map_path))
    throw std::invalid_argument("scenario.building_map.path: file not found: " +
                                building_map_path);
  if (!ephemeris_path.empty() && !std::ifstream(ephemeris_path))
    throw std::invalid_argument("scenario.ephemeris_path: file not found: " + ephemeris_path);
  noise.validate();
  filter.validate();
  dll.validate();
  for (double s : {init_pos_std, init_vel_std, init_clk_std})
    if (s < 0.0) throw std::invalid_argument("scenario.init: stds must be >= 0");
}

ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("scenario " + path + ": " + e.what());
  }

  ScenarioConfig cfg;
  try {
    cfg.name = j.value("name", cfg.name);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.steps = j.value("steps", cfg.steps);
    if (j.contains("origin")) {
      const auto& o = j.at("origin");
      cfg.origin.lat_rad = o.value("lat_deg", cfg.origin.lat_rad * 180.0 / kPi) * kPi / 180.0;
      cfg.origin.lon_rad = o.value("lon_deg", cfg.origin.lon_rad * 180.0 / kPi) * kPi / 180.0;
      cfg.origin.alt_m = o.value("alt_m", cfg.origin.alt_m);
    }
    cfg.ephemeris_path = j.value("ephemeris_path", cfg.ephemeris_path);
    cfg.n_sats = j.value("n_sats", cfg.n_sats);
    cfg.elevation_mask_deg = j.value("elevation_mask_deg", cfg.elevation_mask_deg);
    if (j.contains("lane_map")) {
      const auto& m = j.at("lane_map");
      cfg.lane_map_builtin = m.value("builtin", std::string{});
      cfg.lane_map_path = m.value("path", std::string{});
    }
    if (j.contains("building_map")) {
      const auto& m = j.at("building_map");
      cfg.building_map_builtin = m.value("builtin", std::string{});
      cfg.building_map_path = m.value("path", std::string{});
    }
    if (j.contains("vehicles")) {
      cfg.vehicles.clear();
      for (const auto& v : j.at("vehicles")) {
        TrajectorySpec tr;
        for (const auto& w : v.at("waypoints"))
          tr.waypoints.emplace_back(w.at(0).get<double>(), w.at(1).get<double>());
        tr.speed_mps = v.value("speed_mps", 5.0);
        cfg.vehicles.push_back(std::move(tr));
      }
    }
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      cfg.noise.sigma_z = n.value("sigma_z", cfg.noise.sigma_z);
      cfg.noise.sigma_c = n.value("sigma_c", cfg.noise.sigma_c);
      cfg.noise.sigma_b = n.value("sigma_b", cfg.noise.sigma_b);
      cfg.noise.sigma_d = n.value("sigma_d", cfg.noise.sigma_d);
      cfg.noise.sigma_ax = n.value("sigma_ax", cfg.noise.sigma_ax);
      cfg.noise.sigma_ay = n.value("sigma_ay", cfg.noise.sigma_ay);
      cfg.noise.sigma_init_common = n.value("sigma_init_common", cfg.noise.sigma_init_common);
      cfg.noise.delta_t = n.value("delta_t", cfg.noise.delta_t);
    }
    cfg.common_bias_magnitude = j.value("common_bias_magnitude", cfg.common_bias_magnitude);
    if (j.contains("filter")) {
      const auto& f = j.at("filter");
      cfg.filter.n_particles = f.value("n_particles", cfg.filter.n_particles);
      cfg.filter.alpha1 = f.value("alpha1", cfg.filter.alpha1);
      cfg.filter.alpha2 = f.value("alpha2", cfg.filter.alpha2);
      cfg.filter.alpha3 = f.value("alpha3", cfg.filter.alpha3);
      cfg.filter.n_mc = f.value("n_mc", cfg.filter.n_mc);
      cfg.filter.adaptive_window = f.value("adaptive_window", cfg.filter.adaptive_window);
      cfg.filter.ess_threshold = f.value("ess_threshold", cfg.filter.ess_threshold);
      cfg.filter.clock_in_measurement =
          f.value("clock_jacobian", cfg.filter.clock_in_measurement);
    }
    if (j.contains("toggles")) {
      const auto& t = j.at("toggles");
      cfg.toggles.multipath = t.value("multipath", cfg.toggles.multipath);
      cfg.toggles.blockage = t.value("blockage", cfg.toggles.blockage);
      cfg.toggles.clock = t.value("clock", cfg.toggles.clock);
      cfg.toggles.adaptive_noise = t.value("adaptive_noise", cfg.toggles.adaptive_noise);
    }
    if (j.contains("forced_blockage")) {
      for (const auto& b : j.at("forced_blockage")) {
        ForcedBlockage fb;
        fb.vehicle_id = b.at("vehicle_id").get<int>();
        for (const auto& s : b.at("sats")) fb.sat_ids.push_back(s.get<int>());
        cfg.forced_blockage.push_back(std::move(fb));
      }
    }
    if (j.contains("dll")) {
      const auto& d = j.at("dll");
      cfg.dll.reflection_amplitude = d.value("reflection_amplitude", cfg.dll.reflection_amplitude);
      cfg.dll.chip_half_time = d.value("chip_half_time_s", cfg.dll.chip_half_time);
      cfg.dll.carrier_angular_freq =
          d.value("carrier_angular_freq", cfg.dll.carrier_angular_freq);
    }
    if (j.contains("cmm")) {
      const auto& c = j.at("cmm");
      cfg.cmm.n_candidates = c.value("n_candidates", cfg.cmm.n_candidates);
      cfg.cmm.prior_std = c.value("prior_std", cfg.cmm.prior_std);
      cfg.cmm.n_mc = c.value("n_mc", cfg.cmm.n_mc);
      cfg.cmm.blur_scale = c.value("blur_scale", cfg.cmm.blur_scale);
    }
    if (j.contains("init")) {
      const auto& i = j.at("init");
      cfg.init_pos_std = i.value("pos_std", cfg.init_pos_std);
      cfg.init_vel_std = i.value("vel_std", cfg.init_vel_std);
      cfg.init_clk_std = i.value("clk_std", cfg.init_clk_std);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("scenario " + path + ": " + e.what());
  }
  cfg.filter.noise = cfg.noise;
  cfg.validate();
  return cfg;
}

void save_scenario(const std::string& path, const ScenarioConfig& cfg) {
  nlohmann::json j;
  j["name"] = cfg.name;
  j["seed"] = cfg.seed;
  j["steps"] = cfg.steps;
  j["origin"] = {{"lat_deg", cfg.origin.lat_rad * 180.0 / kPi},
                 {"lon_deg", cfg.origin.lon_rad * 180.0 / kPi},
                 {"alt_m", cfg.origin.alt_m}};
  if (!cfg.ephemeris_path.empty()) j["ephemeris_path"] = cfg.ephemeris_path;
  j["n_sats"] = cfg.n_sats;
  j["elevation_mask_deg"] = cfg.elevation_mask_deg;
  if (!cfg.lane_map_builtin.empty())
    j["lane_map"] = {{"builtin", cfg.lane_map_builtin}};
  else if (!cfg.lane_map_path.empty())
    j["lane_map"] = {{"path", cfg.lane_map_path}};
  if (!cfg.building_map_builtin.empty())
    j["building_map"] = {{"builtin", cfg.building_map_builtin}};
  else if (!cfg.building_map_path.empty())
    j["building_map"] = {{"path", cfg.building_map_path}};
  nlohmann::json vehicles = nlohmann::json::array();
  for (const auto& v : cfg.vehicles) {
    nlohmann::json w = nlohmann::json::array();
    for (const auto& p : v.waypoints) w.push_back({p.x(), p.y()});
    vehicles.push_back({{"waypoints", w}, {"speed_mps", v.speed_mps}});
  }
  if (!vehicles.empty()) j["vehicles"] = vehicles;
  j["noise"] = {{"sigma_z", cfg.noise.sigma_z},
                {"sigma_c", cfg.noise.sigma_c},
                {"sigma_b", cfg.noise.sigma_b},
                {"sigma_d", cfg.noise.sigma_d},
                {"sigma_ax", cfg.noise.sigma_ax},
                {"sigma_ay", cfg.noise.sigma_ay},
                {"sigma_init_common", cfg.noise.sigma_init_common},
                {"delta_t", cfg.noise.delta_t}};
  j["common_bias_magnitude"] = cfg.common_bias_magnitude;
  j["filter"] = {{"n_particles", cfg.filter.n_particles},
                 {"alpha1", cfg.filter.alpha1},
                 {"alpha2", cfg.filter.alpha2},
                 {"alpha3", cfg.filter.alpha3},
                 {"n_mc", cfg.filter.n_mc},
                 {"adaptive_window", cfg.filter.adaptive_window},
                 {"ess_threshold", cfg.filter.ess_threshold},
                 {"clock_jacobian", cfg.filter.clock_in_measurement}};
  j["toggles"] = {{"multipath", cfg.toggles.multipath},
                  {"blockage", cfg.toggles.blockage},
                  {"clock", cfg.toggles.clock},
                  {"adaptive_noise", cfg.toggles.adaptive_noise}};
  if (!cfg.forced_blockage.empty()) {
    nlohmann::json fb = nlohmann::json::array();
    for (const auto& b : cfg.forced_blockage)
      fb.push_back({{"vehicle_id", b.vehicle_id}, {"sats", b.sat_ids}});
    j["forced_blockage"] = fb;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write scenario file: " + path);
  out << j.dump(2) << "\n";
}

maps::LaneMap fig2_lane_map() {
  maps::LaneMap map;
  const double half = 3.5;  // two 3.5 m lanes per road
  maps::LanePolygon ew;
  ew.vertices = {{-100, -half}, {100, -half}, {100, half}, {-100, half}};
  maps::LanePolygon ns;
  ns.vertices = {{-half, -100}, {half, -100}, {half, 100}, {-half, 100}};
  map.lanes = {ew, ns};
  return map;
}

multipath::BuildingMap fig3_building_map() {
  multipath::BuildingMap map;
  map.blocks = {
      {{12, 12, 0}, {42, 42, 18}},      // NE corner
      {{-42, 12, 0}, {-12, 42, 30}},    // NW corner, the tall structure
      {{-42, -42, 0}, {-12, -12, 12}},  // SW corner
      {{12, -42, 0}, {42, -12, 22}},    // SE corner
  };
  return map;
}

std::vector<TrajectorySpec> fig2_vehicles() {
  std::vector<TrajectorySpec> v(4);
  v[0].waypoints = {{-85.0, -1.75}, {65.0, -1.75}};
  v[1].waypoints = {{85.0, 1.75}, {-65.0, 1.75}};
  v[2].waypoints = {{1.75, -85.0}, {1.75, 65.0}};
  v[3].waypoints = {{-1.75, 85.0}, {-1.75, -65.0}};
  for (auto& t : v) t.speed_mps = 5.0;
  return v;
}

namespace {

maps::LaneMap resolve_lane_map(const ScenarioConfig& cfg) {
  if (!cfg.lane_map_path.empty()) return maps::load_lane_map(cfg.lane_map_path);
  if (cfg.lane_map_builtin == "fig2_intersection" || cfg.lane_map_builtin.empty())
    return fig2_lane_map();
  throw std::invalid_argument("scenario.lane_map.builtin: unknown name " +
                              cfg.lane_map_builtin);
}

std::optional<multipath::BuildingMap> resolve_building_map(const ScenarioConfig& cfg) {
  if (!cfg.building_map_path.empty())
    return multipath::load_building_map(cfg.building_map_path);
  if (cfg.building_map_builtin == "fig3_intersection") return fig3_building_map();
  if (cfg.building_map_builtin.empty()) return std::nullopt;
  throw std::invalid_argument("scenario.building_map.builtin: unknown name " +
                              cfg.building_map_builtin);
}

/// Constellation slice actually used by a run: elements and ids sorted by id.
struct SelectedConstellation {
  std::vector<geo::KeplerianElements> elements;
  std::vector<int> sat_ids;
};

SelectedConstellation select_satellites(const ScenarioConfig& cfg,
                                        const geo::EnuFrame& frame) {
  std::vector<geo::KeplerianElements> all =
      cfg.ephemeris_path.empty() ? geo::builtin_constellation(frame)
                                 : geo::load_ephemeris(cfg.ephemeris_path);
  struct Cand {
    geo::KeplerianElements el;
    double elev;
  };
  std::vector<Cand> cands;
  const double mask = cfg.elevation_mask_deg * kPi / 180.0;
  for (const auto& el : all) {
    const auto pos = geo::kepler_to_ecef(el, 0.0);
    const auto [elev, az] = geo::elevation_azimuth(frame.origin_ecef(), pos);
    if (elev >= mask) cands.push_back({el, elev});
  }
  if (static_cast<int>(cands.size()) < cfg.n_sats)
    throw std::runtime_error("not enough satellites above the elevation mask");
  std::sort(cands.begin(), cands.end(),
            [](const Cand& a, const Cand& b) { return a.elev > b.elev; });
  cands.resize(cfg.n_sats);
  std::sort(cands.begin(), cands.end(),
            [](const Cand& a, const Cand& b) { return a.el.sat_id < b.el.sat_id; });
  SelectedConstellation sel;
  for (const auto& c : cands) {
    sel.elements.push_back(c.el);
    sel.sat_ids.push_back(c.el.sat_id);
  }
  return sel;
}

/// Shared per-step algorithm driver for simulation and replay.
class AlgoRunner {
 public:
  struct VehicleEstimate {
    bool valid = false;
    Eigen::Vector2d pos = Eigen::Vector2d::Zero();
    double cov_det = std::numeric_limits<double>::quiet_NaN();
    double n_used = 0.0;
    double n_flagged = 0.0;
  };
  struct StepOut {
    std::vector<VehicleEstimate> vehicles;
    Eigen::VectorXd bias_mean;
    bool has_bias = false;
    bool diverged = false;
  };

  AlgoRunner(const ScenarioConfig& cfg, Algorithm algo, int n_vehicles,
             std::vector<int> sat_ids, const maps::LaneMap* lane_map)
      : cfg_(cfg), algo_(algo), nv_(n_vehicles), sat_ids_(std::move(sat_ids)),
        lane_map_(lane_map) {
    if (algo_ == Algorithm::kSmoothed)
      smoothers_.assign(nv_, baselines::PositionSmoother(cfg_.noise.sigma_ax,
                                                         cfg_.noise.sigma_ay));
  }

  /// Build the filter from first-epoch ego fixes and the bias prior center.
  void initialize(const std::vector<std::vector<rbpf::SatelliteObservation>>& first_obs,
                  const Eigen::VectorXd& bias_init) {
    if (algo_ != Algorithm::kRbpf) return;
    filter_ = std::make_unique<rbpf::RbpfFilter>(cfg_.filter, nv_, sat_ids_, cfg_.seed);
    std::vector<rbpf::VehicleEkfState> init(nv_);
    for (int i = 0; i < nv_; ++i) {
      Eigen::Vector2d pos = Eigen::Vector2d::Zero();
      double clk = 0.0;
      if (first_obs[i].size() >= 3) {
        try {
          const auto ego = baselines::ego_localize(first_obs[i], 0.0, cfg_.noise.sigma_z);
          pos = ego.position;
          clk = ego.clock_bias;
        } catch (const std::exception&) {
        }
      }
      init[i].mean << pos.x(), 0.0, pos.y(), 0.0, (cfg_.toggles.clock ? clk : 0.0), 0.0;
      Eigen::Matrix<double, 6, 1> d;
      const double clk_var = cfg_.toggles.clock ? cfg_.init_clk_std * cfg_.init_clk_std : 0.0;
      const double drift_var = cfg_.toggles.clock ? 1.0 : 0.0;
      d << cfg_.init_pos_std * cfg_.init_pos_std, cfg_.init_vel_std * cfg_.init_vel_std,
          cfg_.init_pos_std * cfg_.init_pos_std, cfg_.init_vel_std * cfg_.init_vel_std,
          clk_var, drift_var;
      init[i].cov = d.asDiagonal();
    }
    filter_->initialize(bias_init, init);
  }

  StepOut step(int t, const std::vector<std::vector<rbpf::SatelliteObservation>>& obs) {
    StepOut out;
    out.vehicles.assign(nv_, VehicleEstimate{});
    switch (algo_) {
      case Algorithm::kRbpf: {
        const auto est = filter_->step(obs, lane_map_);
        out.diverged = est.diverged;
        out.bias_mean = est.bias_mean;
        out.has_bias = true;
        for (int i = 0; i < nv_; ++i) {
          auto& v = out.vehicles[i];
          v.valid = true;
          v.pos = {est.vehicle_mean[i][0], est.vehicle_mean[i][2]};
          v.cov_det = est.horizontal_cov[i].determinant();
          v.n_used = est.n_used[i];
          v.n_flagged = est.n_flagged[i];
        }
        break;
      }
      case Algorithm::kEgo: {
        for (int i = 0; i < nv_; ++i) {
          const auto ego = try_ego(obs[i]);
          if (!ego) continue;
          auto& v = out.vehicles[i];
          v.valid = true;
          v.pos = ego->position;
          v.cov_det = ego->covariance.topLeftCorner<2, 2>().determinant();
          v.n_used = static_cast<double>(obs[i].size());
        }
        break;
      }
      case Algorithm::kStatic:
      case Algorithm::kSmoothed: {
        std::vector<std::optional<baselines::EgoSolution>> egos(nv_);
        for (int i = 0; i < nv_; ++i) egos[i] = try_ego(obs[i]);

        std::vector<Eigen::Vector2d> positions;
        std::vector<Eigen::Matrix2d> pos_cov(nv_);
        std::vector<int> pos_vehicle;
        double blur_sq = 0.0;
        if (algo_ == Algorithm::kStatic) {
          for (int i = 0; i < nv_; ++i) {
            if (!egos[i]) continue;
            positions.push_back(egos[i]->position);
            pos_cov[i] = egos[i]->covariance.topLeftCorner<2, 2>();
            pos_vehicle.push_back(i);
            blur_sq += 0.5 * (pos_cov[i](0, 0) + pos_cov[i](1, 1));
          }
        } else {
          for (int i = 0; i < nv_; ++i) {
            smoothers_[i].predict(cfg_.noise.delta_t);
            if (egos[i])
              smoothers_[i].update(egos[i]->position,
                                   egos[i]->covariance.topLeftCorner<2, 2>());
            if (!smoothers_[i].initialized()) continue;
            positions.push_back(smoothers_[i].position());
            pos_cov[i] = smoothers_[i].position_cov();
            pos_vehicle.push_back(i);
            blur_sq += 0.5 * (pos_cov[i](0, 0) + pos_cov[i](1, 1));
          }
        }
        if (positions.empty()) break;
        const double blur =
            cfg_.cmm.blur_scale * std::max(0.3, std::sqrt(blur_sq / positions.size()));
        RngStream rng = RngStream::keyed(cfg_.seed, {kCmmStep, static_cast<std::uint64_t>(t)});
        const auto corr = baselines::static_cmm(positions, *lane_map_, blur, cfg_.cmm, rng);
        for (size_t p = 0; p < pos_vehicle.size(); ++p) {
          const int i = pos_vehicle[p];
          auto& v = out.vehicles[i];
          v.valid = true;
          v.pos = positions[p] + corr.correction;
          v.cov_det = (pos_cov[i] + corr.covariance).determinant();
          v.n_used = static_cast<double>(obs[i].size());
        }
        break;
      }
    }
    return out;
  }

 private:
  std::optional<baselines::EgoSolution> try_ego(
      const std::vector<rbpf::SatelliteObservation>& obs) const {
    if (obs.size() < 3) return std::nullopt;
    try {
      return baselines::ego_localize(obs, 0.0, cfg_.noise.sigma_z);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  const ScenarioConfig& cfg_;
  Algorithm algo_;
  int nv_;
  std::vector<int> sat_ids_;
  const maps::LaneMap* lane_map_;
  std::unique_ptr<rbpf::RbpfFilter> filter_;
  std::vector<baselines::PositionSmoother> smoothers_;
};

}  // namespace

RunResult run_simulation(const ScenarioConfig& cfg_in, Algorithm algo) {
  ScenarioConfig cfg = cfg_in;
  if (cfg.vehicles.empty()) cfg.vehicles = fig2_vehicles();
  if (!cfg.toggles.clock) {
    cfg.noise.sigma_b = 0.0;
    cfg.noise.sigma_d = 0.0;
  }
  cfg.filter.noise = cfg.noise;
  cfg.filter.use_adaptive_noise = cfg.toggles.adaptive_noise;
  cfg.validate();

  const auto frame = geo::EnuFrame::from_geodetic(cfg.origin);
  const auto sel = select_satellites(cfg, frame);
  const maps::LaneMap lane_map = resolve_lane_map(cfg);
  const auto buildings = resolve_building_map(cfg);

  const int nv = static_cast<int>(cfg.vehicles.size());
  const int ns = cfg.n_sats;
  const double mask = cfg.elevation_mask_deg * kPi / 180.0;

  std::vector<errors::VehicleTruthState> truth(nv);
  RngStream bias_init_stream = RngStream::keyed(cfg.seed, {kTruthBiasInit});
  errors::CommonBiasVector biases =
      errors::init_common_biases(ns, cfg.common_bias_magnitude, bias_init_stream);

  AlgoRunner runner(cfg, algo, nv, sel.sat_ids, &lane_map);
  RunResult out;

  for (int t = 0; t < cfg.steps; ++t) {
    const double time = t * cfg.noise.delta_t;

    if (t > 0) {
      RngStream bs = RngStream::keyed(cfg.seed, {kTruthBiasStep, static_cast<std::uint64_t>(t)});
      biases = errors::propagate_common_biases(biases, cfg.noise, bs);
      if (cfg.toggles.clock) {
        for (int i = 0; i < nv; ++i) {
          RngStream cs = RngStream::keyed(cfg.seed, {kTruthClock, static_cast<std::uint64_t>(t),
                                                     static_cast<std::uint64_t>(i)});
          std::tie(truth[i].clock_bias, truth[i].clock_drift) =
              errors::propagate_clock(truth[i].clock_bias, truth[i].clock_drift, cfg.noise, cs);
        }
      }
    }
    for (int i = 0; i < nv; ++i) {
      const Eigen::Vector2d p = cfg.vehicles[i].position_at(time);
      const Eigen::Vector2d v = cfg.vehicles[i].velocity_at(time);
      truth[i].x = p.x();
      truth[i].y = p.y();
      truth[i].vx = v.x();
      truth[i].vy = v.y();
      truth[i].altitude = lane_map.altitude_at(p.x(), p.y());
    }

    std::vector<Eigen::Vector3d> sat_enu(ns);
    for (int j = 0; j < ns; ++j)
      sat_enu[j] = frame.to_enu(geo::kepler_to_ecef(sel.elements[j], time)).v;

    std::vector<std::vector<rbpf::SatelliteObservation>> obs(nv);
    std::vector<int> blocked(nv, 0);
    for (int i = 0; i < nv; ++i) {
      const Eigen::Vector3d rx{truth[i].x, truth[i].y, truth[i].altitude};
      for (int j = 0; j < ns; ++j) {
        const int sat_id = sel.sat_ids[j];
        const Eigen::Vector3d los = sat_enu[j] - rx;
        if (std::asin(los.z() / los.norm()) < mask) continue;
        const bool forced = std::any_of(
            cfg.forced_blockage.begin(), cfg.forced_blockage.end(), [&](const auto& fb) {
              return fb.vehicle_id == i &&
                     std::find(fb.sat_ids.begin(), fb.sat_ids.end(), sat_id) !=
                         fb.sat_ids.end();
            });
        if (forced) {
          ++blocked[i];
          continue;
        }
        double mp = 0.0;
        if (buildings) {
          const auto [err, visible] =
              multipath::total_multipath_error(*buildings, rx, sat_enu[j], cfg.dll);
          if (!visible && cfg.toggles.blockage) {
            ++blocked[i];
            continue;
          }
          if (cfg.toggles.multipath && visible) mp = err;
        }
        RngStream ms = RngStream::keyed(cfg.seed, {kTruthMeas, static_cast<std::uint64_t>(t),
                                                   static_cast<std::uint64_t>(i),
                                                   static_cast<std::uint64_t>(sat_id)});
        const auto z = errors::generate_pseudorange(truth[i], sat_enu[j], sat_id,
                                                    biases.values[j], mp, time, i, cfg.noise, ms);
        obs[i].push_back({sat_id, z.range_m, sat_enu[j]});
        ReplayRow row;
        row.time_s = time;
        row.vehicle_id = i;
        row.sat_id = sat_id;
        row.pseudorange = z.range_m;
        row.sat_pos_enu = sat_enu[j];
        row.has_truth = true;
        row.truth_x = truth[i].x;
        row.truth_y = truth[i].y;
        out.log_rows.push_back(row);
      }
    }

    if (t == 0) runner.initialize(obs, biases.values);
    const auto step_out = runner.step(t, obs);
    if (step_out.diverged) ++out.divergence_count;

    for (int i = 0; i < nv; ++i) {
      const auto& v = step_out.vehicles[i];
      MetricsRecord rec;
      rec.time_s = time;
      rec.vehicle_id = i;
      if (v.valid) {
        rec.est_x = v.pos.x();
        rec.est_y = v.pos.y();
        rec.err_horizontal =
            (v.pos - Eigen::Vector2d{truth[i].x, truth[i].y}).norm();
        rec.cov_det = v.cov_det;
      } else {
        rec.est_x = rec.est_y = rec.err_horizontal = rec.cov_det =
            std::numeric_limits<double>::quiet_NaN();
      }
      rec.n_sats_used = v.n_used;
      rec.n_flagged = v.n_flagged;
      rec.n_blocked = blocked[i];
      rec.diverged = step_out.diverged;
      out.records.push_back(rec);
    }
    if (step_out.has_bias) {
      for (int j = 0; j < ns; ++j) {
        BiasRecord br;
        br.time_s = time;
        br.sat_id = sel.sat_ids[j];
        br.bias_est = step_out.bias_mean[j];
        br.bias_true = biases.values[j];
        out.bias_records.push_back(br);
      }
    }
  }
  return out;
}

RunResult replay(const std::string& log_path, const ScenarioConfig& cfg_in, Algorithm algo) {
  ScenarioConfig cfg = cfg_in;
  if (cfg.vehicles.empty()) cfg.vehicles = fig2_vehicles();
  if (!cfg.toggles.clock) {
    cfg.noise.sigma_b = 0.0;
    cfg.noise.sigma_d = 0.0;
  }

  std::vector<ReplayRow> rows = read_replay_log(log_path);
  if (rows.empty()) throw std::runtime_error("replay: empty log");
  for (size_t r = 1; r < rows.size(); ++r)
    if (rows[r].time_s < rows[r - 1].time_s)
      throw std::runtime_error("replay: log rows not sorted by time");

  // Drop rows whose satellite position is unusable.
  std::vector<ReplayRow> usable;
  for (const auto& r : rows) {
    if (!r.sat_pos_enu.allFinite()) {
      std::cerr << "replay: skipping measurement for satellite " << r.sat_id
                << " at t=" << r.time_s << " (missing satellite position)\n";
      continue;
    }
    usable.push_back(r);
  }

  std::vector<double> times;
  for (const auto& r : usable)
    if (times.empty() || r.time_s > times.back()) times.push_back(r.time_s);
  if (times.size() >= 2) {
    std::vector<double> diffs;
    for (size_t i = 1; i < times.size(); ++i) diffs.push_back(times[i] - times[i - 1]);
    std::nth_element(diffs.begin(), diffs.begin() + diffs.size() / 2, diffs.end());
    cfg.noise.delta_t = diffs[diffs.size() / 2];
  }
  cfg.filter.noise = cfg.noise;
  cfg.filter.use_adaptive_noise = cfg.toggles.adaptive_noise;

  std::set<int> sat_set;
  int max_vehicle = 0;
  for (const auto& r : usable) {
    sat_set.insert(r.sat_id);
    max_vehicle = std::max(max_vehicle, r.vehicle_id);
  }
  const std::vector<int> sat_ids(sat_set.begin(), sat_set.end());
  const int nv = max_vehicle + 1;

  const maps::LaneMap lane_map = resolve_lane_map(cfg);

  // Bias prior center: regenerated from the configured seed, matching the
  // simulator's draw so that simulator-exported logs replay identically.
  RngStream bias_init_stream = RngStream::keyed(cfg.seed, {kTruthBiasInit});
  const errors::CommonBiasVector bias_init = errors::init_common_biases(
      static_cast<int>(sat_ids.size()), cfg.common_bias_magnitude, bias_init_stream);

  AlgoRunner runner(cfg, algo, nv, sat_ids, &lane_map);
  RunResult out;

  size_t cursor = 0;
  for (size_t t = 0; t < times.size(); ++t) {
    const double time = times[t];
    std::vector<std::vector<rbpf::SatelliteObservation>> obs(nv);
    std::vector<std::optional<Eigen::Vector2d>> truth(nv);
    while (cursor < usable.size() && usable[cursor].time_s <= time) {
      const auto& r = usable[cursor];
      obs[r.vehicle_id].push_back({r.sat_id, r.pseudorange, r.sat_pos_enu});
      if (r.has_truth) truth[r.vehicle_id] = Eigen::Vector2d{r.truth_x, r.truth_y};
      ++cursor;
    }

    if (t == 0) runner.initialize(obs, bias_init.values);
    const auto step_out = runner.step(static_cast<int>(t), obs);
    if (step_out.diverged) ++out.divergence_count;

    for (int i = 0; i < nv; ++i) {
      const auto& v = step_out.vehicles[i];
      MetricsRecord rec;
      rec.time_s = time;
      rec.vehicle_id = i;
      if (v.valid) {
        rec.est_x = v.pos.x();
        rec.est_y = v.pos.y();
        rec.cov_det = v.cov_det;
        rec.err_horizontal = truth[i] ? (v.pos - *truth[i]).norm()
                                      : std::numeric_limits<double>::quiet_NaN();
      } else {
        rec.est_x = rec.est_y = rec.err_horizontal = rec.cov_det =
            std::numeric_limits<double>::quiet_NaN();
      }
      rec.n_sats_used = v.n_used;
      rec.n_flagged = v.n_flagged;
      rec.diverged = step_out.diverged;
      out.records.push_back(rec);
    }
  }
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::string s = "time,vehicle_id,est_x,est_y,err_horizontal_m,cov_det_m4,n_sats_used,n_flagged\n";
  for (const auto& r : records) {
    append_num(s, r.time_s);
    s += ',';
    s += std::to_string(r.vehicle_id);
    s += ',';
    append_num(s, r.est_x);
    s += ',';
    append_num(s, r.est_y);
    s += ',';
    append_num(s, r.err_horizontal);
    s += ',';
    append_num(s, r.cov_det);
    s += ',';
    append_num(s, r.n_sats_used);
    s += ',';
    append_num(s, r.n_flagged);
    s += '\n';
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << s;
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::getline(in, line);  // header
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() < 8) throw std::runtime_error("bad metrics row in " + path);
    MetricsRecord r;
    r.time_s = std::stod(f[0]);
    r.vehicle_id = std::stoi(f[1]);
    r.est_x = std::stod(f[2]);
    r.est_y = std::stod(f[3]);
    r.err_horizontal = std::stod(f[4]);
    r.cov_det = std::stod(f[5]);
    r.n_sats_used = std::stod(f[6]);
    r.n_flagged = std::stod(f[7]);
    out.push_back(r);
  }
  return out;
}

void write_bias_csv(const std::string& path, const std::vector<BiasRecord>& records) {
  std::string s = "time,sat_id,bias_est_m,bias_true_m\n";
  for (const auto& r : records) {
    append_num(s, r.time_s);
    s += ',';
    s += std::to_string(r.sat_id);
    s += ',';
    append_num(s, r.bias_est);
    s += ',';
    append_num(s, r.bias_true);
    s += '\n';
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << s;
}

std::vector<BiasRecord> read_bias_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::vector<BiasRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() < 4) throw std::runtime_error("bad bias row in " + path);
    BiasRecord r;
    r.time_s = std::stod(f[0]);
    r.sat_id = std::stoi(f[1]);
    r.bias_est = std::stod(f[2]);
    r.bias_true = std::stod(f[3]);
    out.push_back(r);
  }
  return out;
}

void write_replay_log(const std::string& path, const std::vector<ReplayRow>& rows) {
  const bool with_truth =
      std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.has_truth; });
  std::string s = "time_s,vehicle_id,sat_id,pseudorange_m,sat_x_m,sat_y_m,sat_z_m";
  if (with_truth) s += ",truth_x_m,truth_y_m";
  s += '\n';
  for (const auto& r : rows) {
    append_num17(s, r.time_s);
    s += ',';
    s += std::to_string(r.vehicle_id);
    s += ',';
    s += std::to_string(r.sat_id);
    s += ',';
    append_num17(s, r.pseudorange);
    s += ',';
    append_num17(s, r.sat_pos_enu.x());
    s += ',';
    append_num17(s, r.sat_pos_enu.y());
    s += ',';
    append_num17(s, r.sat_pos_enu.z());
    if (with_truth) {
      s += ',';
      append_num17(s, r.has_truth ? r.truth_x : std::numeric_limits<double>::quiet_NaN());
      s += ',';
      append_num17(s, r.has_truth ? r.truth_y : std::numeric_limits<double>::quiet_NaN());
    }
    s += '\n';
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << s;
}

std::vector<ReplayRow> read_replay_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open replay log: " + path);
  std::string line;
  std::getline(in, line);
  const bool with_truth = line.find("truth_x_m") != std::string::npos;
  std::vector<ReplayRow> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() < 7) throw std::runtime_error("bad replay row in " + path);
    ReplayRow r;
    r.time_s = std::stod(f[0]);
    r.vehicle_id = std::stoi(f[1]);
    r.sat_id = std::stoi(f[2]);
    r.pseudorange = std::stod(f[3]);
    r.sat_pos_enu = {std::stod(f[4]), std::stod(f[5]), std::stod(f[6])};
    if (with_truth && f.size() >= 9) {
      r.truth_x = std::stod(f[7]);
      r.truth_y = std::stod(f[8]);
      r.has_truth = std::isfinite(r.truth_x) && std::isfinite(r.truth_y);
    }
    out.push_back(r);
  }
  return out;
}

SummaryRow compute_summary(const std::string& algorithm,
                           const std::vector<RunResult>& runs) {
  SummaryRow row;
  row.algorithm = algorithm;
  row.n_runs = static_cast<int>(runs.size());
  std::vector<double> run_means, run_dets;
  double bias_sq_sum = 0.0;
  int bias_n = 0;
  for (const auto& run : runs) {
    std::vector<double> errs, dets;
    for (const auto& r : run.records) {
      errs.push_back(r.err_horizontal);
      dets.push_back(r.cov_det);
    }
    run_means.push_back(mean_finite(errs));
    run_dets.push_back(mean_finite(dets));
    for (const auto& b : run.bias_records) {
      const double d = b.bias_est - b.bias_true;
      bias_sq_sum += d * d;
      ++bias_n;
    }
  }
  row.mean_error = mean_finite(run_means);
  row.mean_cov_det = mean_finite(run_dets);
  if (run_means.size() > 1) {
    double var = 0.0;
    for (double m : run_means) var += (m - row.mean_error) * (m - row.mean_error);
    var /= static_cast<double>(run_means.size() - 1);
    row.error_3sigma = 3.0 * std::sqrt(var);
  }
  row.bias_rmse = bias_n ? std::sqrt(bias_sq_sum / bias_n)
                         : std::numeric_limits<double>::quiet_NaN();
  return row;
}

std::string format_summary_table(const std::vector<SummaryRow>& rows) {
  char buf[160];
  std::string s;
  std::snprintf(buf, sizeof(buf), "%-10s %5s %12s %10s %16s %12s\n", "algorithm", "runs",
                "mean_err_m", "3sigma_m", "mean_cov_det_m4", "bias_rmse_m");
  s += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-10s %5d %12.3f %10.3f %16.4e %12.3f\n",
                  r.algorithm.c_str(), r.n_runs, r.mean_error, r.error_3sigma,
                  r.mean_cov_det, r.bias_rmse);
    s += buf;
  }
  return s;
}

}  // namespace cmm::harness
