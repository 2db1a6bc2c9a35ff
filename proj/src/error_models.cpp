#include "cmm/error_models.hpp"

#include <cmath>
#include <stdexcept>

namespace cmm::errors {

void NoiseConfig::validate() const {
  for (double s : {sigma_z, sigma_c, sigma_b, sigma_d, sigma_ax, sigma_ay, sigma_init_common})
    if (!(s >= 0.0) || !std::isfinite(s))
      throw std::invalid_argument("noise config: sigmas must be finite and >= 0");
  if (!(delta_t > 0.0)) throw std::invalid_argument("noise config: delta_t must be > 0");
}

CommonBiasVector init_common_biases(int n_sats, double magnitude_m, RngStream& rng) {
  if (n_sats < 1) throw std::invalid_argument("init_common_biases: n_sats must be >= 1");
  if (magnitude_m < 0.0) throw std::invalid_argument("init_common_biases: magnitude < 0");
  CommonBiasVector c;
  c.values.resize(n_sats);
  for (int j = 0; j < n_sats; ++j) c.values[j] = rng.normal(0.0, magnitude_m);
  return c;
}

CommonBiasVector propagate_common_biases(const CommonBiasVector& c,
                                         const NoiseConfig& cfg, RngStream& rng) {
  CommonBiasVector out = c;
  for (int j = 0; j < out.values.size(); ++j)
    out.values[j] += rng.normal(0.0, cfg.sigma_c) * cfg.delta_t;
  return out;
}

std::pair<double, double> propagate_clock(double bias_m, double drift_mps,
                                          const NoiseConfig& cfg, RngStream& rng) {
  const double dt = cfg.delta_t;
  const double wd = rng.normal(0.0, cfg.sigma_d);
  const double wb = rng.normal(0.0, cfg.sigma_b);
  // wd acts as a constant acceleration over the interval so the increment
  // covariance is [[sd^2 dt^4/4 + sb^2 dt^2, sd^2 dt^3/2], [., sd^2 dt^2]].
  const double new_bias = bias_m + drift_mps * dt + 0.5 * wd * dt * dt + wb * dt;
  const double new_drift = drift_mps + wd * dt;
  return {new_bias, new_drift};
}

PseudorangeMeasurement generate_pseudorange(const VehicleTruthState& truth,
                                            const Eigen::Vector3d& sat_pos_enu,
                                            int sat_id, double common_bias_m,
                                            double multipath_error_m,
                                            double time_s, int vehicle_id,
                                            const NoiseConfig& cfg, RngStream& rng) {
  const Eigen::Vector3d p{truth.x, truth.y, truth.altitude};
  const double geometric = (p - sat_pos_enu).norm();
  PseudorangeMeasurement z;
  z.time_s = time_s;
  z.vehicle_id = vehicle_id;
  z.sat_id = sat_id;
  z.range_m = geometric + common_bias_m + truth.clock_bias + multipath_error_m +
              rng.normal(0.0, cfg.sigma_z);
  if (!(z.range_m > 0.0) || !std::isfinite(z.range_m))
    throw std::runtime_error("generate_pseudorange: non-positive or non-finite range");
  return z;
}

}  // namespace cmm::errors
