#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "cmm/filter_rbpf.hpp"
#include "cmm/map_constraints.hpp"
#include "cmm/rng.hpp"

namespace cmm::baselines {

/// Standalone single-receiver fix with known altitude: unknowns (x, y, b).
struct EgoSolution {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();  // [m] ENU horizontal
  double clock_bias = 0.0;                             // [m]
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();  // over (x, y, b)
  std::vector<int> used_sats;
};

/// Iterative least squares on pseudo-range residuals; stops when the step
/// norm drops below 1e-4 m. Covariance is sigma_z^2 * (G'G)^-1.
/// Throws with fewer than 3 satellites or on divergence.
EgoSolution ego_localize(const std::vector<rbpf::SatelliteObservation>& obs,
                         double altitude, double sigma_z,
                         const Eigen::Vector3d& initial_guess = Eigen::Vector3d::Zero());

struct StaticCmmConfig {
  int n_candidates = 500;
  double prior_std = 5.0;   // [m] scale of the common position bias
  int n_mc = 100;           // blurred-indicator Monte Carlo samples
  double blur_scale = 4.0;  // conservative widening of the indicator blur
};

struct CmmCorrection {
  Eigen::Vector2d correction = Eigen::Vector2d::Zero();  // [m]
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Zero();  // candidate spread
  bool low_confidence = false;  // every candidate scored zero
};

/// Memoryless map matching: sample candidate common translations from a
/// zero-mean Gaussian prior, score each by the product over vehicles of the
/// Gaussian-blurred in-lane likelihood, return the weighted mean.
CmmCorrection static_cmm(const std::vector<Eigen::Vector2d>& positions,
                         const maps::LaneMap& map, double blur_std,
                         const StaticCmmConfig& cfg, RngStream& rng);

/// Constant-velocity Kalman smoother over one vehicle's position fixes,
/// state (x, vx, y, vy).
class PositionSmoother {
 public:
  PositionSmoother(double sigma_ax, double sigma_ay) : sax_(sigma_ax), say_(sigma_ay) {}

  void predict(double dt);
  void update(const Eigen::Vector2d& pos, const Eigen::Matrix2d& noise);
  bool initialized() const { return initialized_; }
  Eigen::Vector2d position() const { return {mean_[0], mean_[2]}; }
  Eigen::Matrix2d position_cov() const;

 private:
  double sax_, say_;
  bool initialized_ = false;
  Eigen::Vector4d mean_ = Eigen::Vector4d::Zero();
  Eigen::Matrix4d cov_ = Eigen::Matrix4d::Zero();
};

}  // namespace cmm::baselines
