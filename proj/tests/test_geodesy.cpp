#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "cmm/geodesy.hpp"
#include "cmm/rng.hpp"

using namespace cmm;
using namespace cmm::geo;

namespace {

constexpr double kPi = 3.14159265358979323846;

KeplerianElements circular(double a = 26560e3) {
  KeplerianElements el;
  el.sat_id = 1;
  el.semi_major_axis_m = a;
  el.eccentricity = 0.0;
  el.inclination_rad = 55.0 * kPi / 180.0;
  el.raan_rad = 0.7;
  el.arg_perigee_rad = 0.0;
  el.mean_anomaly_epoch_rad = 0.3;
  return el;
}

// Independent bisection solver for Kepler's equation (test oracle).
double kepler_bisect(double m, double e) {
  double lo = m - e, hi = m + e;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    ((mid - e * std::sin(mid) - m) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

GeodeticCoord test_origin() { return {42.0 * kPi / 180.0, -83.0 * kPi / 180.0, 250.0}; }

EcefPosition sat_at(const EnuFrame& frame, double az, double el, double range) {
  const Eigen::Vector3d los{std::sin(az) * std::cos(el), std::cos(az) * std::cos(el),
                            std::sin(el)};
  return {frame.origin_ecef().v + frame.rotation().transpose() * (range * los)};
}

}  // namespace

TEST_CASE("circular orbit radius at epoch") {
  const auto el = circular();
  const auto p = kepler_to_ecef(el, 0.0);
  CHECK(p.v.norm() == doctest::Approx(el.semi_major_axis_m).epsilon(1e-12));
}

TEST_CASE("quarter period advances true anomaly by 90 degrees") {
  const auto el = circular();
  const double period = 2.0 * kPi * std::sqrt(std::pow(el.semi_major_axis_m, 3) / el.mu);
  const auto p0 = kepler_to_ecef(el, 0.0);
  const auto p1 = kepler_to_ecef(el, period / 4.0);
  const double cosang = p0.v.dot(p1.v) / (p0.v.norm() * p1.v.norm());
  CHECK(std::abs(cosang) < 1e-9);
}

TEST_CASE("kepler solver agrees with bisection oracle") {
  const double e = 0.01, m = 0.5;
  const double expected = kepler_bisect(m, e);
  CHECK(std::abs(solve_kepler(m, e) - expected) < 1e-10);
  // residual bound holds across eccentricities
  for (double ecc : {0.0, 0.2, 0.7, 0.97}) {
    for (double ma : {0.0, 0.5, 2.0, 3.1, 5.9}) {
      const double ea = solve_kepler(ma, ecc);
      CHECK(std::abs(ea - ecc * std::sin(ea) -
                     std::fmod(ma + 2.0 * kPi, 2.0 * kPi)) < 1e-11);
    }
  }
}

TEST_CASE("orbit radius constant over a full period for e=0") {
  const auto el = circular();
  const double period = 2.0 * kPi * std::sqrt(std::pow(el.semi_major_axis_m, 3) / el.mu);
  for (int i = 0; i <= 100; ++i) {
    const auto p = kepler_to_ecef(el, period * i / 100.0);
    CHECK(std::abs(p.v.norm() - el.semi_major_axis_m) / el.semi_major_axis_m < 1e-6);
  }
}

TEST_CASE("invalid elements are rejected") {
  auto el = circular();
  el.eccentricity = 1.0;
  CHECK_THROWS_AS(kepler_to_ecef(el, 0.0), std::invalid_argument);
  el = circular();
  el.semi_major_axis_m = -1.0;
  CHECK_THROWS_AS(kepler_to_ecef(el, 0.0), std::invalid_argument);
}

TEST_CASE("enu of the origin is zero") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  const auto e = frame.to_enu(frame.origin_ecef());
  CHECK(e.v.norm() < 1e-12);
}

TEST_CASE("enu/ecef round trip under 1e-9 m") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  RngStream rng(42);
  for (int i = 0; i < 10000; ++i) {
    const EnuPosition p{{(rng.uniform01() - 0.5) * 2e4, (rng.uniform01() - 0.5) * 2e4,
                         (rng.uniform01() - 0.5) * 2e3}};
    const auto back = frame.to_enu(frame.to_ecef(p));
    CHECK((back.v - p.v).norm() < 1e-9);
  }
}

TEST_CASE("point 100 m geodetic east maps to enu (100, 0, 0)") {
  const auto origin = test_origin();
  const auto frame = EnuFrame::from_geodetic(origin);
  // Oracle: walk 100 m along the parallel on the reference ellipsoid.
  const double e2 = kWgs84Flattening * (2.0 - kWgs84Flattening);
  const double sl = std::sin(origin.lat_rad);
  const double n = kWgs84SemiMajorAxis / std::sqrt(1.0 - e2 * sl * sl);
  GeodeticCoord east = origin;
  east.lon_rad += 100.0 / ((n + origin.alt_m) * std::cos(origin.lat_rad));
  const auto enu = frame.to_enu(geodetic_to_ecef(east));
  CHECK(enu.v.x() == doctest::Approx(100.0).epsilon(1e-6));
  CHECK(std::abs(enu.v.y()) < 1e-3);
  CHECK(std::abs(enu.v.z()) < 1e-2);
}

TEST_CASE("geodetic conversion round trip") {
  RngStream rng(7);
  for (int i = 0; i < 1000; ++i) {
    GeodeticCoord g{(rng.uniform01() - 0.5) * kPi * 0.98,
                    (rng.uniform01() - 0.5) * 2.0 * kPi, rng.uniform01() * 10000.0};
    const auto back = ecef_to_geodetic(geodetic_to_ecef(g));
    CHECK(std::abs(back.lat_rad - g.lat_rad) < 1e-11);
    CHECK(std::abs(back.lon_rad - g.lon_rad) < 1e-11);
    CHECK(std::abs(back.alt_m - g.alt_m) < 1e-5);
  }
}

TEST_CASE("elevation at zenith and horizon") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  const auto zenith = sat_at(frame, 0.3, kPi / 2.0, 2.0e7);
  CHECK(elevation_azimuth(frame.origin_ecef(), zenith).first ==
        doctest::Approx(kPi / 2.0).epsilon(1e-6));
  const auto horizon = sat_at(frame, 1.1, 0.0, 2.0e7);
  CHECK(std::abs(elevation_azimuth(frame.origin_ecef(), horizon).first) < 1e-9);
}

TEST_CASE("elevation matches dot-product oracle") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  const Eigen::Vector3d up = frame.rotation().row(2);
  RngStream rng(11);
  for (int i = 0; i < 100; ++i) {
    const double az = rng.uniform01() * 2.0 * kPi;
    const double el = (rng.uniform01() - 0.1) * kPi / 2.2;
    const auto sat = sat_at(frame, az, el, 2.2e7);
    const Eigen::Vector3d los = (sat.v - frame.origin_ecef().v).normalized();
    const double oracle = kPi / 2.0 - std::acos(std::clamp(los.dot(up), -1.0, 1.0));
    const auto [elev, azim] = elevation_azimuth(frame.origin_ecef(), sat);
    CHECK(elev == doctest::Approx(oracle).epsilon(1e-9));
    CHECK(std::abs(std::remainder(azim - az, 2.0 * kPi)) < 1e-6);
  }
}

TEST_CASE("coincident receiver and satellite is an error") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  CHECK_THROWS_AS(elevation_azimuth(frame.origin_ecef(), frame.origin_ecef()),
                  std::invalid_argument);
}

TEST_CASE("hdop closed form for azimuth-quadrature constellations") {
  // Oracle: with all satellites at elevation el and azimuths 0/90/180/270,
  // G'G = diag(2 cos^2 el, 2 cos^2 el, 4), so HDOP = 1 / cos(el).
  const auto frame = EnuFrame::from_geodetic(test_origin());
  for (double el_deg : {60.0, 45.0, 30.0}) {
    const double el = el_deg * kPi / 180.0;
    std::vector<SatelliteState> sats;
    int id = 1;
    for (double az_deg : {0.0, 90.0, 180.0, 270.0}) {
      SatelliteState s;
      s.sat_id = id++;
      s.position = sat_at(frame, az_deg * kPi / 180.0, el, 2.2e7);
      sats.push_back(s);
    }
    CHECK(hdop(frame.origin_ecef(), sats) ==
          doctest::Approx(1.0 / std::cos(el)).epsilon(1e-9));
  }
}

TEST_CASE("a fifth satellite never increases hdop") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  RngStream rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<SatelliteState> sats;
    for (int i = 0; i < 4; ++i) {
      SatelliteState s;
      s.sat_id = i + 1;
      s.position = sat_at(frame, rng.uniform01() * 2.0 * kPi,
                          0.2 + rng.uniform01() * 1.2, 2.2e7);
      sats.push_back(s);
    }
    double before;
    try {
      before = hdop(frame.origin_ecef(), sats);
    } catch (const std::domain_error&) {
      continue;  // degenerate draw
    }
    SatelliteState extra;
    extra.sat_id = 5;
    extra.position =
        sat_at(frame, rng.uniform01() * 2.0 * kPi, 0.2 + rng.uniform01() * 1.2, 2.2e7);
    sats.push_back(extra);
    CHECK(hdop(frame.origin_ecef(), sats) <= before + 1e-9);
  }
}

TEST_CASE("hdop invariant under a common azimuth rotation") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  const double els[4] = {0.4, 0.8, 1.1, 0.6};
  const double azs[4] = {0.1, 1.9, 3.3, 5.0};
  const auto build = [&](double offset) {
    std::vector<SatelliteState> sats;
    for (int i = 0; i < 4; ++i) {
      SatelliteState s;
      s.sat_id = i + 1;
      s.position = sat_at(frame, azs[i] + offset, els[i], 2.2e7);
      sats.push_back(s);
    }
    return sats;
  };
  const double base = hdop(frame.origin_ecef(), build(0.0));
  for (double offset : {0.5, 1.7, 4.0})
    CHECK(hdop(frame.origin_ecef(), build(offset)) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("hdop error cases") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  std::vector<SatelliteState> sats(3);
  CHECK_THROWS_AS(hdop(frame.origin_ecef(), sats), std::invalid_argument);
  // all satellites at one azimuth: east column is identically zero
  sats.clear();
  for (int i = 0; i < 4; ++i) {
    SatelliteState s;
    s.sat_id = i + 1;
    s.position = sat_at(frame, 0.0, 0.3 + 0.2 * i, 2.2e7);
    sats.push_back(s);
  }
  CHECK_THROWS_AS(hdop(frame.origin_ecef(), sats), std::domain_error);
}

TEST_CASE("ephemeris json round trip with degree conversion") {
  std::vector<KeplerianElements> els{circular()};
  els[0].inclination_rad = 55.0 * kPi / 180.0;
  const std::string path = "test_ephemeris.json";
  save_ephemeris(path, els);
  const auto loaded = load_ephemeris(path);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].sat_id == els[0].sat_id);
  CHECK(loaded[0].semi_major_axis_m == doctest::Approx(els[0].semi_major_axis_m));
  CHECK(loaded[0].inclination_rad == doctest::Approx(55.0 * kPi / 180.0).epsilon(1e-12));
  CHECK(loaded[0].mean_anomaly_epoch_rad ==
        doctest::Approx(els[0].mean_anomaly_epoch_rad).epsilon(1e-12));
  std::remove(path.c_str());
}

TEST_CASE("orbit through a requested sky direction") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  for (double az_deg : {15.0, 140.0, 260.0}) {
    for (double el_deg : {25.0, 50.0, 75.0}) {
      const auto el = orbit_through_direction(frame, az_deg * kPi / 180.0,
                                              el_deg * kPi / 180.0, 26560e3, 1);
      const auto pos = kepler_to_ecef(el, 0.0);
      const auto [elev, azim] = elevation_azimuth(frame.origin_ecef(), pos);
      CHECK(elev == doctest::Approx(el_deg * kPi / 180.0).epsilon(1e-6));
      CHECK(std::abs(std::remainder(azim - az_deg * kPi / 180.0, 2.0 * kPi)) < 1e-6);
    }
  }
}

TEST_CASE("builtin constellation is visible and well spread") {
  const auto frame = EnuFrame::from_geodetic(test_origin());
  const auto els = builtin_constellation(frame);
  CHECK(els.size() == 8);
  int high = 0;
  std::set<int> ids;
  for (const auto& el : els) {
    ids.insert(el.sat_id);
    const auto [elev, az] = elevation_azimuth(frame.origin_ecef(), kepler_to_ecef(el, 0.0));
    if (elev > 20.0 * kPi / 180.0) ++high;
  }
  CHECK(ids.size() == 8);
  CHECK(high >= 6);
}
