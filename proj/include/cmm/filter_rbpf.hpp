#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <map>
#include <vector>

#include "cmm/error_models.hpp"
#include "cmm/map_constraints.hpp"
#include "cmm/rng.hpp"

namespace cmm::rbpf {

using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;

/// Conditional Gaussian over one vehicle state (x, vx, y, vy, b, bdot).
struct VehicleEkfState {
  Vector6d mean = Vector6d::Zero();
  Matrix6d cov = Matrix6d::Zero();
};

/// One joint hypothesis: a common-bias vector, one EKF per vehicle, and an
/// importance weight.
struct Particle {
  Eigen::VectorXd biases;  // [m], one per satellite slot
  std::vector<VehicleEkfState> ekfs;
  double weight = 0.0;
  double log_weight = 0.0;  // within-step accumulator
};

struct FilterConfig {
  int n_particles = 200;
  double alpha1 = 0.95;  // multipath rejection confidence
  double alpha2 = 1.0;   // multipath acceptance confidence
  double alpha3 = 0.99;  // weight penalty level for flagged measurements
  int n_mc = 100;        // map-constraint Monte Carlo sample count
  int adaptive_window = 30;
  bool use_adaptive_noise = false;
  bool clock_in_measurement = true;  // dZ/db = 1 in the update Jacobian
  double ess_threshold = 0.0;        // fraction of N; <= 0 resamples every step
  errors::NoiseConfig noise;

  void validate() const;
};

/// Linearized scalar measurement at the predicted state.
struct MeasurementGeometry {
  double h_x = 0.0;  // dZ/dx
  double h_y = 0.0;  // dZ/dy
  double jac_clock = 1.0;
  double predicted = 0.0;             // [m]
  double innovation_variance = 0.0;   // [m^2], >= sigma_z^2
  double mahalanobis_sq = 0.0;
};

/// One pseudo-range handed to the filter, scenario ENU frame.
struct SatelliteObservation {
  int sat_id = 0;
  double pseudorange = 0.0;  // [m]
  Eigen::Vector3d sat_pos_enu = Eigen::Vector3d::Zero();
};

/// chi-squared (1 dof) CDF and inverse. chi2_inv(1) returns +inf.
double chi2_cdf(double d2);
double chi2_inv(double p);

/// Constant-velocity transition and process noise blocks (Table-style
/// parameters: accelerations for x/y, bias/drift derivatives for the clock).
Matrix6d process_matrix(double dt);
Matrix6d process_noise(const errors::NoiseConfig& n);

void predict_ekf(VehicleEkfState& ekf, const errors::NoiseConfig& n);

MeasurementGeometry measurement_geometry(const VehicleEkfState& ekf, double common_bias,
                                         const Eigen::Vector3d& sat_pos_enu,
                                         double measured_range, double altitude,
                                         double sigma_z, bool clock_in_measurement);

/// Gate thresholds precomputed from the confidence levels.
struct Chi2Gate {
  double alpha1 = 0.95, alpha2 = 1.0;
  double thresh_lo = 0.0;  // chi2_inv(alpha1)
  double thresh_hi = 0.0;  // chi2_inv(alpha2), +inf when alpha2 == 1

  static Chi2Gate from(double alpha1, double alpha2);
};

/// Multipath indicator: 0 below the lower gate, 1 above the upper gate, and
/// randomized in between with probability (F(D^2)-a1)/(a2-a1).
int classify_multipath(double mahalanobis_sq, const Chi2Gate& gate, double u_draw);

/// Log-weight contribution of one measurement. Accepted measurements score
/// the Gaussian log-density of the innovation; flagged ones a fixed penalty
/// at Mahalanobis level penalty_d2 = chi2_inv(alpha3).
double log_weight_increment(const MeasurementGeometry& g, int indicator,
                            double penalty_d2);

/// Batch EKF update: K = cov*H' * (H*cov*H' + Q)^-1 with diagonal Q.
/// Throws std::domain_error when the innovation covariance is singular.
void batch_update(VehicleEkfState& ekf, const Eigen::MatrixXd& jacobian,
                  const Eigen::VectorXd& innovation, const Eigen::VectorXd& noise_diag);

/// Systematic resampling; returns source index per survivor slot.
/// Throws std::runtime_error when all weights are zero.
std::vector<int> systematic_resample(const std::vector<double>& weights, double u01);

/// Per-vehicle innovation history keyed by satellite id, used to inflate the
/// update noise when the innovations run hotter than sigma_z predicts.
class InnovationWindow {
 public:
  explicit InnovationWindow(int capacity) : capacity_(capacity) {}

  void push(int sat_id, double innovation);
  /// max((1/(k-1)) * sum innov^2 - hph, sigma_z^2); the floor also applies
  /// when the channel holds fewer than 2 samples.
  double channel_noise(int sat_id, double hph, double sigma_z) const;
  int length(int sat_id) const;

 private:
  int capacity_;
  std::map<int, std::deque<double>> channels_;
};

struct StepEstimates {
  std::vector<Vector6d> vehicle_mean;
  std::vector<Eigen::Matrix2d> horizontal_cov;  // weighted mixture
  Eigen::VectorXd bias_mean;
  Eigen::VectorXd bias_var;
  std::vector<double> n_used;     // weighted mean accepted per vehicle
  std::vector<double> n_flagged;  // weighted mean flagged per vehicle
  bool diverged = false;
};

/// The Rao-Blackwellized filter: particles over common biases, conditional
/// per-vehicle EKFs, chi-squared multipath gating, map-constraint
/// reweighting and systematic resampling.
class RbpfFilter {
 public:
  RbpfFilter(FilterConfig cfg, int n_vehicles, std::vector<int> sat_ids,
             std::uint64_t seed);

  /// Every particle starts from bias_init perturbed by
  /// N(0, sigma_init_common^2) per satellite, with identical EKFs.
  void initialize(const Eigen::VectorXd& bias_init,
                  const std::vector<VehicleEkfState>& ekf_init);

  /// One prediction-update cycle over time-aligned measurements
  /// (obs[vehicle] may be empty under blockage). Altitudes are taken from
  /// the lane map when given, else zero. Pass lane_map = nullptr to disable
  /// the map constraint.
  StepEstimates step(const std::vector<std::vector<SatelliteObservation>>& obs,
                     const maps::LaneMap* lane_map);

  /// As step(), with an explicit vehicle processing order.
  StepEstimates step_ordered(const std::vector<std::vector<SatelliteObservation>>& obs,
                             const maps::LaneMap* lane_map,
                             const std::vector<int>& vehicle_order);

  const std::vector<Particle>& particles() const { return particles_; }
  std::vector<Particle>& mutable_particles() { return particles_; }
  /// Normalized weights of the last step before resampling.
  const std::vector<double>& last_weights() const { return last_weights_; }
  const FilterConfig& config() const { return cfg_; }
  int n_vehicles() const { return n_vehicles_; }
  int step_index() const { return step_; }
  int sat_slot(int sat_id) const;

 private:
  StepEstimates compute_estimates() const;

  FilterConfig cfg_;
  int n_vehicles_;
  std::vector<int> sat_ids_;
  std::map<int, int> slot_of_sat_;
  std::uint64_t seed_;
  int step_ = 0;
  Chi2Gate gate_;
  double penalty_d2_ = 0.0;
  std::vector<Particle> particles_;
  std::vector<InnovationWindow> windows_;  // one per vehicle
  std::vector<double> last_flagged_;       // per vehicle, weighted
  std::vector<double> last_used_;
  std::vector<double> last_weights_;       // pre-resample, normalized
};

}  // namespace cmm::rbpf
