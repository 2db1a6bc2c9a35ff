#include "cmm/multipath.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "cmm/geodesy.hpp"

namespace cmm::multipath {

namespace {

constexpr double kC = geo::kSpeedOfLight;

// Parametric overlap of segment a + t(b-a), t in (lo, hi), with a box
// interior. Returns true when the overlap interval has positive length.
bool segment_in_box_interior(const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                             const Block& box, double lo, double hi) {
  double t0 = lo, t1 = hi;
  for (int k = 0; k < 3; ++k) {
    const double d = b[k] - a[k];
    if (std::abs(d) < 1e-15) {
      if (a[k] <= box.min[k] || a[k] >= box.max[k]) return false;
      continue;
    }
    double ta = (box.min[k] - a[k]) / d;
    double tb = (box.max[k] - a[k]) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 >= t1) return false;
  }
  return t0 < t1;
}

bool blocked_between(const BuildingMap& map, const Eigen::Vector3d& a,
                     const Eigen::Vector3d& b) {
  // Endpoints pulled in slightly so points lying exactly on a face (e.g. a
  // reflection point) do not register as crossings.
  for (const auto& blk : map.blocks)
    if (segment_in_box_interior(a, b, blk, 1e-9, 1.0 - 1e-9)) return true;
  return false;
}

}  // namespace

void BuildingMap::validate() const {
  for (const auto& b : blocks)
    for (int k = 0; k < 3; ++k)
      if (!(b.max[k] > b.min[k]))
        throw std::invalid_argument("building map: block with non-positive extent");
}

BuildingMap load_building_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open building map: " + path);
  nlohmann::json j;
  in >> j;
  BuildingMap map;
  for (const auto& e : j.at("blocks")) {
    Block b;
    for (int k = 0; k < 3; ++k) {
      b.min[k] = e.at("min").at(k).get<double>();
      b.max[k] = e.at("max").at(k).get<double>();
    }
    map.blocks.push_back(b);
  }
  map.validate();
  return map;
}

void DllModel::validate() const {
  if (!(chip_half_time > 0.0)) throw std::invalid_argument("dll: chip_half_time <= 0");
  if (!(reflection_amplitude >= 0.0 && reflection_amplitude < 1.0))
    throw std::invalid_argument("dll: reflection amplitude must be in [0,1)");
  if (!(direct_amplitude >= 0.0)) throw std::invalid_argument("dll: direct amplitude < 0");
}

bool los_blocked(const BuildingMap& map, const Eigen::Vector3d& rx,
                 const Eigen::Vector3d& sat) {
  for (const auto& blk : map.blocks)
    if (segment_in_box_interior(rx, sat, blk, 0.0, 1.0)) return true;
  return false;
}

RayTraceResult trace_single_reflections(const BuildingMap& map,
                                        const Eigen::Vector3d& rx,
                                        const Eigen::Vector3d& sat) {
  RayTraceResult out;
  out.direct_length = (sat - rx).norm();
  out.los_blocked = los_blocked(map, rx, sat);

  for (const auto& blk : map.blocks) {
    // The four vertical faces: (axis, plane coordinate, outward sign).
    const struct {
      int axis;
      double plane;
      double sign;
    } faces[4] = {{0, blk.min[0], -1.0},
                  {0, blk.max[0], +1.0},
                  {1, blk.min[1], -1.0},
                  {1, blk.max[1], +1.0}};
    for (const auto& f : faces) {
      const int a = f.axis;
      // Both endpoints must be on the outward side of the face plane.
      if (f.sign * (rx[a] - f.plane) <= 0.0) continue;
      if (f.sign * (sat[a] - f.plane) <= 0.0) continue;

      Eigen::Vector3d mirror = rx;
      mirror[a] = 2.0 * f.plane - rx[a];
      const double denom = sat[a] - mirror[a];
      if (std::abs(denom) < 1e-12) continue;
      const double t = (f.plane - mirror[a]) / denom;
      if (t <= 0.0 || t >= 1.0) continue;
      const Eigen::Vector3d hit = mirror + t * (sat - mirror);

      // Hit must land inside the finite face rectangle.
      const int u = (a == 0) ? 1 : 0;
      if (hit[u] <= blk.min[u] || hit[u] >= blk.max[u]) continue;
      if (hit[2] <= blk.min[2] || hit[2] >= blk.max[2]) continue;

      if (blocked_between(map, rx, hit) || blocked_between(map, hit, sat)) continue;

      const double d_m = (hit - rx).norm() + (sat - hit).norm();
      if (d_m > out.direct_length) out.reflected_lengths.push_back(d_m);
    }
  }
  return out;
}

double multipath_range_error(double d_d, double d_m, const DllModel& dll) {
  dll.validate();
  if (!(d_m > d_d)) throw std::invalid_argument("multipath error: d_m must exceed d_d");
  const double t_c = dll.chip_half_time;
  const double t_d = (d_m - d_d) / kC;
  if (t_d >= 3.0 * t_c) return 0.0;  // 1.5 chips: echo outside the correlators

  const double phi_d = dll.carrier_angular_freq * t_d + 3.14159265358979323846;
  const double a = dll.reflection_amplitude * std::cos(phi_d);

  // Zero of the early-minus-late discriminator for a two-path signal with
  // triangular code correlation. The first branch is the short-delay regime
  // (both echo correlator samples on the inner slope); the second covers
  // delays out to 3*t_c where the echo rides the outer slope.
  double u;
  if (t_d <= (1.0 + a) * t_c)
    u = a * t_d / (1.0 + a);
  else
    u = a * (3.0 * t_c - t_d) / (2.0 - a);
  return kC * u;
}

double dll_discriminator_zero(double d_d, double d_m, const DllModel& dll) {
  dll.validate();
  if (!(d_m > d_d)) throw std::invalid_argument("dll zero: d_m must exceed d_d");
  const double t_c = dll.chip_half_time;
  const double t_0 = d_d / kC;
  const double t_d = (d_m - d_d) / kC;
  const double phi_d = dll.carrier_angular_freq * t_d + 3.14159265358979323846;
  const double r = dll.reflection_amplitude * std::cos(phi_d);

  const auto corr = [t_c](double tau) {
    return std::max(0.0, 1.0 - std::abs(tau) / (2.0 * t_c));
  };
  // Coherent early-minus-late discriminator, direct + single echo.
  const auto discr = [&](double u) {
    return (corr(u - t_c) - corr(u + t_c)) +
           r * (corr(u - t_c - t_d) - corr(u + t_c - t_d));
  };

  double lo = -t_c, hi = t_c;
  double flo = discr(lo), fhi = discr(hi);
  if (!(flo < 0.0 && fhi > 0.0))
    throw std::runtime_error("dll zero: no sign change in bracket (model violation)");
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double fm = discr(mid);
    if (fm == 0.0) return t_0 + mid;
    if ((flo < 0.0) == (fm < 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return t_0 + 0.5 * (lo + hi);
}

std::pair<double, bool> total_multipath_error(const BuildingMap& map,
                                              const Eigen::Vector3d& rx,
                                              const Eigen::Vector3d& sat,
                                              const DllModel& dll) {
  const RayTraceResult trace = trace_single_reflections(map, rx, sat);
  if (trace.los_blocked) return {0.0, false};
  if (trace.reflected_lengths.empty()) return {0.0, true};
  const double d_m =
      *std::min_element(trace.reflected_lengths.begin(), trace.reflected_lengths.end());
  return {multipath_range_error(trace.direct_length, d_m, dll), true};
}

}  // namespace cmm::multipath
