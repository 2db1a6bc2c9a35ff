#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace cmm::multipath {

/// Axis-aligned rectangular block, scenario ENU frame. [m]
struct Block {
  Eigen::Vector3d min;
  Eigen::Vector3d max;
};

struct BuildingMap {
  std::vector<Block> blocks;

  void validate() const;  // positive extent on every axis
};

BuildingMap load_building_map(const std::string& path);

/// Single-bounce ray-trace result for one receiver/satellite pair.
struct RayTraceResult {
  bool los_blocked = false;
  double direct_length = 0.0;              // [m]
  std::vector<double> reflected_lengths;   // [m], each > direct_length
};

/// Delay-lock-loop model: coherent early/late correlators at +-t_c around
/// the prompt, triangular code autocorrelation with one-chip support.
struct DllModel {
  double carrier_angular_freq = 2.0 * 3.14159265358979323846 * 1575.42e6;  // [rad/s]
  double chip_half_time = 0.5 / 1.023e6;  // [s] half a C/A chip (~146.5 m)
  double reflection_amplitude = 0.5;      // relative to the direct path
  double direct_amplitude = 1.0;

  void validate() const;
};

/// True iff the segment rx->sat passes through the interior of any block.
bool los_blocked(const BuildingMap& map, const Eigen::Vector3d& rx,
                 const Eigen::Vector3d& sat);

/// Image-method single reflections off vertical block faces. A reflection is
/// kept when the mirrored ray hits the finite face rectangle and both
/// sub-segments are unobstructed.
RayTraceResult trace_single_reflections(const BuildingMap& map,
                                        const Eigen::Vector3d& rx,
                                        const Eigen::Vector3d& sat);

/// Code-tracking range error [m] caused by one reflected path of relative
/// amplitude dll.reflection_amplitude and excess length d_m - d_d.
/// Zero once the excess delay reaches 1.5 chips (3 * t_c): the echo no
/// longer overlaps the correlators.
double multipath_range_error(double d_d, double d_m, const DllModel& dll);

/// Numeric zero of the early-minus-late discriminator, searched within
/// radius 2*t_c of the direct propagation time. Returns t_p [s].
double dll_discriminator_zero(double d_d, double d_m, const DllModel& dll);

/// Combined scene evaluation: {error, visible}. visible=false when the LOS
/// is blocked (the measurement is dropped). With LOS and reflections, the
/// strongest (shortest) reflected path drives the error.
std::pair<double, bool> total_multipath_error(const BuildingMap& map,
                                              const Eigen::Vector3d& rx,
                                              const Eigen::Vector3d& sat,
                                              const DllModel& dll);

}  // namespace cmm::multipath
