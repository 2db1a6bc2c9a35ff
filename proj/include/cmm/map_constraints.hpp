#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "cmm/rng.hpp"

namespace cmm::maps {

/// Simple 2-D polygon in the scenario ENU frame. [m]
struct LanePolygon {
  std::vector<Eigen::Vector2d> vertices;
  double altitude = 0.0;  // [m]
};

struct LaneMap {
  std::vector<LanePolygon> lanes;

  void validate() const;  // >= 3 vertices, simple polygons
  /// Altitude of the lane containing (x, y), or 0 when outside.
  double altitude_at(double x, double y) const;
};

LaneMap load_lane_map(const std::string& path);
void save_lane_map(const std::string& path, const LaneMap& map);

/// True iff (x, y) lies inside (or on the boundary of) any lane polygon.
bool point_in_lane(const LaneMap& map, double x, double y);

/// Monte Carlo estimate of P((x,y) in lane) for (x,y) ~ N(mean, cov).
/// Sampling uses the Cholesky factor; rank-deficient covariances are handled
/// by clamping negative eigenvalues at zero. Throws on indefinite input.
double containment_probability(const Eigen::Vector2d& mean, const Eigen::Matrix2d& cov,
                               const LaneMap& map, int n_samples, RngStream& rng);

}  // namespace cmm::maps
