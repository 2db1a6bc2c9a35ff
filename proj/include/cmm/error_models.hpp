#pragma once

#include <Eigen/Dense>

#include "cmm/rng.hpp"

namespace cmm::errors {

/// Per-satellite pseudo-range common biases, one entry per satellite slot. [m]
struct CommonBiasVector {
  Eigen::VectorXd values;
};

/// Truth-side vehicle state in the scenario ENU frame.
struct VehicleTruthState {
  double x = 0.0;         // [m] east
  double y = 0.0;         // [m] north
  double vx = 0.0;        // [m/s]
  double vy = 0.0;        // [m/s]
  double clock_bias = 0.0;   // [m]
  double clock_drift = 0.0;  // [m/s]
  double altitude = 0.0;     // [m], from the lane map
};

struct PseudorangeMeasurement {
  double time_s = 0.0;
  int vehicle_id = 0;
  int sat_id = 0;
  double range_m = 0.0;
};

/// Noise and timing parameters, SI units.
struct NoiseConfig {
  double sigma_z = 1.0;    // [m] receiver white noise
  double sigma_c = 0.1;    // [m/s] common-bias drift
  double sigma_b = 1.0;    // [m/s] clock bias derivative noise
  double sigma_d = 1.0;    // [m/s^2] clock drift derivative noise
  double sigma_ax = 1.0;   // [m/s^2] along-lane acceleration
  double sigma_ay = 0.1;   // [m/s^2] cross-lane acceleration
  double sigma_init_common = 0.5;  // [m] filter-side bias init noise
  double delta_t = 0.1;    // [s]

  void validate() const;  // all sigmas >= 0, delta_t > 0
};

/// Draw initial common biases, each ~ N(0, magnitude^2), independent.
CommonBiasVector init_common_biases(int n_sats, double magnitude_m, RngStream& rng);

/// One Gauss-Markov step: each entry gets an independent N(0, sigma_c^2)*dt
/// increment (increment std = sigma_c * delta_t).
CommonBiasVector propagate_common_biases(const CommonBiasVector& c,
                                         const NoiseConfig& cfg, RngStream& rng);

/// Two-state clock random walk. The increment covariance matches the
/// bias/drift process noise block used by the filter prediction.
std::pair<double, double> propagate_clock(double bias_m, double drift_mps,
                                          const NoiseConfig& cfg, RngStream& rng);

/// Synthesize one pseudo-range: geometric 3-D range (vehicle altitude from
/// the map) + common bias + receiver clock + multipath + white noise.
/// `sat_pos_enu` must be in the same ENU frame as the truth state.
PseudorangeMeasurement generate_pseudorange(const VehicleTruthState& truth,
                                            const Eigen::Vector3d& sat_pos_enu,
                                            int sat_id, double common_bias_m,
                                            double multipath_error_m,
                                            double time_s, int vehicle_id,
                                            const NoiseConfig& cfg, RngStream& rng);

}  // namespace cmm::errors
