#include "cmm/geodesy.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cmm::geo {

namespace {
constexpr double kPi = 3.14159265358979323846;

double wrap_two_pi(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a < 0.0) a += 2.0 * kPi;
  return a;
}
}  // namespace

EcefPosition geodetic_to_ecef(const GeodeticCoord& g) {
  const double e2 = kWgs84Flattening * (2.0 - kWgs84Flattening);
  const double sl = std::sin(g.lat_rad);
  const double cl = std::cos(g.lat_rad);
  const double n = kWgs84SemiMajorAxis / std::sqrt(1.0 - e2 * sl * sl);
  return {Eigen::Vector3d{(n + g.alt_m) * cl * std::cos(g.lon_rad),
                          (n + g.alt_m) * cl * std::sin(g.lon_rad),
                          (n * (1.0 - e2) + g.alt_m) * sl}};
}

GeodeticCoord ecef_to_geodetic(const EcefPosition& p) {
  const double e2 = kWgs84Flattening * (2.0 - kWgs84Flattening);
  const double x = p.v.x(), y = p.v.y(), z = p.v.z();
  const double rho = std::hypot(x, y);
  GeodeticCoord g;
  g.lon_rad = std::atan2(y, x);
  double lat = std::atan2(z, rho * (1.0 - e2));
  double alt = 0.0;
  for (int i = 0; i < 12; ++i) {
    const double sl = std::sin(lat);
    const double n = kWgs84SemiMajorAxis / std::sqrt(1.0 - e2 * sl * sl);
    alt = rho / std::cos(lat) - n;
    lat = std::atan2(z, rho * (1.0 - e2 * n / (n + alt)));
  }
  g.lat_rad = lat;
  g.alt_m = alt;
  return g;
}

EnuFrame EnuFrame::from_geodetic(const GeodeticCoord& origin) {
  EnuFrame f;
  f.geodetic_ = origin;
  f.origin_ = geodetic_to_ecef(origin);
  const double sl = std::sin(origin.lat_rad), cl = std::cos(origin.lat_rad);
  const double so = std::sin(origin.lon_rad), co = std::cos(origin.lon_rad);
  f.rot_ << -so, co, 0.0,                 // East
      -sl * co, -sl * so, cl,             // North
      cl * co, cl * so, sl;               // Up
  return f;
}

EnuFrame EnuFrame::from_ecef(const EcefPosition& origin) {
  return from_geodetic(ecef_to_geodetic(origin));
}

EnuPosition EnuFrame::to_enu(const EcefPosition& p) const {
  return {rot_ * (p.v - origin_.v)};
}

EcefPosition EnuFrame::to_ecef(const EnuPosition& p) const {
  return {origin_.v + rot_.transpose() * p.v};
}

void KeplerianElements::validate() const {
  if (!(semi_major_axis_m > 0.0) || !std::isfinite(semi_major_axis_m))
    throw std::invalid_argument("keplerian elements: semi-major axis must be > 0");
  if (!(eccentricity >= 0.0 && eccentricity < 1.0))
    throw std::invalid_argument("keplerian elements: eccentricity must be in [0,1)");
  for (double a : {inclination_rad, raan_rad, arg_perigee_rad, mean_anomaly_epoch_rad, epoch_s})
    if (!std::isfinite(a)) throw std::invalid_argument("keplerian elements: non-finite angle");
  if (!(mu > 0.0)) throw std::invalid_argument("keplerian elements: mu must be > 0");
}

double solve_kepler(double mean_anomaly_rad, double eccentricity) {
  const double m = wrap_two_pi(mean_anomaly_rad);
  const double e = eccentricity;
  const double tol = 1e-12;
  double ecc_anom = (e < 0.8) ? m : kPi;
  // Newton steps; e < 1 keeps the derivative bounded away from zero.
  for (int i = 0; i < 50; ++i) {
    const double f = ecc_anom - e * std::sin(ecc_anom) - m;
    if (std::abs(f) < tol) return ecc_anom;
    ecc_anom -= f / (1.0 - e * std::cos(ecc_anom));
  }
  // Bisection fallback on [0, 2pi]; f is monotone in E.
  double lo = 0.0, hi = 2.0 * kPi;
  for (int i = 0; i < 200; ++i) {
    ecc_anom = 0.5 * (lo + hi);
    const double f = ecc_anom - e * std::sin(ecc_anom) - m;
    if (std::abs(f) < tol) return ecc_anom;
    (f < 0.0 ? lo : hi) = ecc_anom;
  }
  throw std::runtime_error("solve_kepler: no convergence; elements likely invalid");
}

EcefPosition kepler_to_ecef(const KeplerianElements& el, double t_s) {
  el.validate();
  const double n = std::sqrt(el.mu / std::pow(el.semi_major_axis_m, 3));
  const double m = el.mean_anomaly_epoch_rad + n * (t_s - el.epoch_s);
  const double ecc_anom = solve_kepler(m, el.eccentricity);
  const double e = el.eccentricity;
  const double nu = std::atan2(std::sqrt(1.0 - e * e) * std::sin(ecc_anom),
                               std::cos(ecc_anom) - e);
  const double r = el.semi_major_axis_m * (1.0 - e * std::cos(ecc_anom));
  const Eigen::Vector3d perifocal{r * std::cos(nu), r * std::sin(nu), 0.0};

  const auto rot_z = [](double a) {
    Eigen::Matrix3d r;
    r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    return r;
  };
  const auto rot_x = [](double a) {
    Eigen::Matrix3d r;
    r << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
    return r;
  };
  return {rot_z(el.raan_rad) * rot_x(el.inclination_rad) * rot_z(el.arg_perigee_rad) *
          perifocal};
}

std::pair<double, double> elevation_azimuth(const EcefPosition& receiver,
                                            const EcefPosition& sat) {
  const Eigen::Vector3d d = sat.v - receiver.v;
  if (d.norm() < 1e-9)
    throw std::invalid_argument("elevation_azimuth: coincident receiver and satellite");
  const EnuFrame frame = EnuFrame::from_ecef(receiver);
  const Eigen::Vector3d los = (frame.rotation() * d).normalized();
  return {std::asin(std::clamp(los.z(), -1.0, 1.0)), std::atan2(los.x(), los.y())};
}

double hdop(const EcefPosition& receiver, const std::vector<SatelliteState>& sats) {
  if (sats.size() < 4)
    throw std::invalid_argument("hdop: need at least 4 satellites");
  const EnuFrame frame = EnuFrame::from_ecef(receiver);
  Eigen::MatrixXd g(sats.size(), 3);
  for (size_t i = 0; i < sats.size(); ++i) {
    const Eigen::Vector3d los =
        (frame.rotation() * (sats[i].position.v - receiver.v)).normalized();
    g.row(i) << -los.x(), -los.y(), 1.0;
  }
  const Eigen::Matrix3d gtg = g.transpose() * g;
  Eigen::FullPivLU<Eigen::Matrix3d> lu(gtg);
  if (!lu.isInvertible())
    throw std::domain_error("hdop: degenerate satellite geometry");
  const Eigen::Matrix3d cov = lu.inverse();
  return std::sqrt(cov(0, 0) + cov(1, 1));
}

std::vector<KeplerianElements> load_ephemeris(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open ephemeris file: " + path);
  nlohmann::json j;
  in >> j;
  const double d2r = kPi / 180.0;
  std::vector<KeplerianElements> out;
  for (const auto& e : j) {
    KeplerianElements k;
    k.sat_id = e.at("sat_id").get<int>();
    k.semi_major_axis_m = e.at("semi_major_axis_m").get<double>();
    k.eccentricity = e.at("eccentricity").get<double>();
    k.inclination_rad = e.at("inclination_deg").get<double>() * d2r;
    k.raan_rad = e.at("raan_deg").get<double>() * d2r;
    k.arg_perigee_rad = e.at("arg_perigee_deg").get<double>() * d2r;
    k.mean_anomaly_epoch_rad = e.at("mean_anomaly_deg").get<double>() * d2r;
    k.epoch_s = e.value("epoch_s", 0.0);
    if (e.contains("mu_m3s2")) k.mu = e.at("mu_m3s2").get<double>();
    k.validate();
    out.push_back(k);
  }
  return out;
}

void save_ephemeris(const std::string& path, const std::vector<KeplerianElements>& els) {
  nlohmann::json j = nlohmann::json::array();
  const double r2d = 180.0 / kPi;
  for (const auto& k : els) {
    j.push_back({{"sat_id", k.sat_id},
                 {"semi_major_axis_m", k.semi_major_axis_m},
                 {"eccentricity", k.eccentricity},
                 {"inclination_deg", k.inclination_rad * r2d},
                 {"raan_deg", k.raan_rad * r2d},
                 {"arg_perigee_deg", k.arg_perigee_rad * r2d},
                 {"mean_anomaly_deg", k.mean_anomaly_epoch_rad * r2d},
                 {"epoch_s", k.epoch_s},
                 {"mu_m3s2", k.mu}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write ephemeris file: " + path);
  out << j.dump(2) << "\n";
}

KeplerianElements orbit_through_direction(const EnuFrame& origin, double az_rad,
                                          double el_rad, double semi_major_axis_m,
                                          int sat_id) {
  const Eigen::Vector3d los_enu{std::sin(az_rad) * std::cos(el_rad),
                                std::cos(az_rad) * std::cos(el_rad),
                                std::sin(el_rad)};
  const Eigen::Vector3d d = origin.rotation().transpose() * los_enu;
  const Eigen::Vector3d o = origin.origin_ecef().v;
  // |o + rho*d| = a, smallest positive root.
  const double b = o.dot(d);
  const double disc = b * b + semi_major_axis_m * semi_major_axis_m - o.squaredNorm();
  const double rho = -b + std::sqrt(disc);
  const Eigen::Vector3d s = (o + rho * d) / semi_major_axis_m;

  const double lat_gc = std::asin(std::clamp(s.z(), -1.0, 1.0));
  double incl = 55.0 * kPi / 180.0;
  if (std::abs(lat_gc) >= incl) incl = std::abs(lat_gc) + 5.0 * kPi / 180.0;

  // Solve raan and argument of latitude u so the orbit passes through s.
  const double su = s.z() / std::sin(incl);
  const double u = std::asin(std::clamp(su, -1.0, 1.0));
  const double cu = std::cos(u);
  const double ci = std::cos(incl);
  const double denom = cu * cu + su * su * ci * ci;
  const double cos_raan = (cu * s.x() + su * ci * s.y()) / denom;
  const double sin_raan = (-su * ci * s.x() + cu * s.y()) / denom;

  KeplerianElements k;
  k.sat_id = sat_id;
  k.semi_major_axis_m = semi_major_axis_m;
  k.eccentricity = 0.0;
  k.inclination_rad = incl;
  k.raan_rad = std::atan2(sin_raan, cos_raan);
  k.arg_perigee_rad = 0.0;
  k.mean_anomaly_epoch_rad = wrap_two_pi(u);  // circular orbit: M = true anomaly
  k.epoch_s = 0.0;
  return k;
}

std::vector<KeplerianElements> builtin_constellation(const EnuFrame& origin) {
  // GPS-like radius; azimuths spread around the horizon, elevations mixed.
  const double a = 26560e3;
  const double d2r = kPi / 180.0;
  const struct {
    double az_deg, el_deg;
  } sky[] = {{30, 72}, {95, 55}, {160, 48}, {215, 40},
             {275, 62}, {330, 35}, {125, 28}, {10, 25}};
  std::vector<KeplerianElements> out;
  int id = 1;
  for (const auto& s : sky)
    out.push_back(orbit_through_direction(origin, s.az_deg * d2r, s.el_deg * d2r, a, id++));
  return out;
}

}  // namespace cmm::geo
