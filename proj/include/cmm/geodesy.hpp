#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace cmm::geo {

// WGS-84 ellipsoid.
inline constexpr double kWgs84SemiMajorAxis = 6378137.0;         // [m]
inline constexpr double kWgs84Flattening = 1.0 / 298.257223563;  // [-]
inline constexpr double kEarthMu = 3.986004418e14;               // [m^3/s^2]
inline constexpr double kSpeedOfLight = 299792458.0;             // [m/s]

struct EcefPosition {
  Eigen::Vector3d v;  // [m]
};

struct EnuPosition {
  Eigen::Vector3d v;  // [m], relative to a frame origin
};

struct GeodeticCoord {
  double lat_rad = 0.0;
  double lon_rad = 0.0;
  double alt_m = 0.0;
};

/// Local East-North-Up frame anchored at an ECEF origin.
class EnuFrame {
 public:
  static EnuFrame from_geodetic(const GeodeticCoord& origin);
  static EnuFrame from_ecef(const EcefPosition& origin);

  EnuPosition to_enu(const EcefPosition& p) const;
  EcefPosition to_ecef(const EnuPosition& p) const;

  const EcefPosition& origin_ecef() const { return origin_; }
  const GeodeticCoord& origin_geodetic() const { return geodetic_; }
  /// Rows are the East, North, Up unit vectors in ECEF.
  const Eigen::Matrix3d& rotation() const { return rot_; }

 private:
  EcefPosition origin_;
  GeodeticCoord geodetic_;
  Eigen::Matrix3d rot_;
};

EcefPosition geodetic_to_ecef(const GeodeticCoord& g);
GeodeticCoord ecef_to_geodetic(const EcefPosition& p);

/// Keplerian orbital elements. Angles in radians.
struct KeplerianElements {
  int sat_id = 0;
  double semi_major_axis_m = 0.0;
  double eccentricity = 0.0;
  double inclination_rad = 0.0;
  double raan_rad = 0.0;
  double arg_perigee_rad = 0.0;
  double mean_anomaly_epoch_rad = 0.0;
  double epoch_s = 0.0;
  double mu = kEarthMu;

  void validate() const;  // throws std::invalid_argument on bad fields
};

struct SatelliteState {
  int sat_id = 0;
  EcefPosition position;
  double elevation_rad = 0.0;  // w.r.t. a receiver
  double azimuth_rad = 0.0;
};

/// Solve Kepler's equation M = E - e*sin(E) for E.
/// Newton iteration with a bisection fallback; |residual| < 1e-12 rad.
double solve_kepler(double mean_anomaly_rad, double eccentricity);

/// Satellite ECEF position on the osculating ellipse at time t.
EcefPosition kepler_to_ecef(const KeplerianElements& el, double t_s);

/// Elevation and azimuth of `sat` as seen from `receiver`.
/// Elevation is asin of the Up component of the unit line of sight.
std::pair<double, double> elevation_azimuth(const EcefPosition& receiver,
                                            const EcefPosition& sat);

/// Horizontal dilution of precision for a receiver with known altitude
/// (unknowns x, y, clock). Rows of the geometry matrix are
/// [-east, -north, 1] of the unit line of sight in the receiver's ENU frame.
/// Throws std::domain_error on degenerate geometry.
double hdop(const EcefPosition& receiver, const std::vector<SatelliteState>& sats);

/// Ephemeris file I/O. JSON array of element sets, angles in degrees.
std::vector<KeplerianElements> load_ephemeris(const std::string& path);
void save_ephemeris(const std::string& path, const std::vector<KeplerianElements>& els);

/// Circular orbit whose position at t=0 lies along the given azimuth and
/// elevation from the frame origin, at radius `semi_major_axis_m`.
KeplerianElements orbit_through_direction(const EnuFrame& origin, double az_rad,
                                          double el_rad, double semi_major_axis_m,
                                          int sat_id);

/// Bundled default constellation: eight GPS-like circular orbits spread in
/// azimuth and elevation as seen from `origin` at t=0.
std::vector<KeplerianElements> builtin_constellation(const EnuFrame& origin);

}  // namespace cmm::geo
