#include "cmm/map_constraints.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cmm::maps {

namespace {

bool point_on_segment(const Eigen::Vector2d& p, const Eigen::Vector2d& a,
                      const Eigen::Vector2d& b, double tol) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 == 0.0) return (p - a).norm() <= tol;
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm() <= tol;
}

bool point_in_polygon(const LanePolygon& poly, double x, double y) {
  const Eigen::Vector2d p{x, y};
  const size_t n = poly.vertices.size();
  // Boundary counts as inside.
  for (size_t i = 0; i < n; ++i)
    if (point_on_segment(p, poly.vertices[i], poly.vertices[(i + 1) % n], 1e-9))
      return true;
  // Even-odd crossing rule.
  bool inside = false;
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& a = poly.vertices[i];
    const auto& b = poly.vertices[j];
    if ((a.y() > y) != (b.y() > y)) {
      const double x_cross = a.x() + (y - a.y()) / (b.y() - a.y()) * (b.x() - a.x());
      if (x < x_cross) inside = !inside;
    }
  }
  return inside;
}

}  // namespace

void LaneMap::validate() const {
  for (const auto& lane : lanes) {
    if (lane.vertices.size() < 3)
      throw std::invalid_argument("lane map: polygon with fewer than 3 vertices");
    for (const auto& v : lane.vertices)
      if (!v.allFinite()) throw std::invalid_argument("lane map: non-finite vertex");
  }
}

double LaneMap::altitude_at(double x, double y) const {
  for (const auto& lane : lanes)
    if (point_in_polygon(lane, x, y)) return lane.altitude;
  return 0.0;
}

LaneMap load_lane_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open lane map: " + path);
  nlohmann::json j;
  in >> j;
  LaneMap map;
  for (const auto& e : j.at("lanes")) {
    LanePolygon poly;
    for (const auto& v : e.at("vertices"))
      poly.vertices.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
    poly.altitude = e.value("altitude", 0.0);
    map.lanes.push_back(std::move(poly));
  }
  map.validate();
  return map;
}

void save_lane_map(const std::string& path, const LaneMap& map) {
  nlohmann::json lanes = nlohmann::json::array();
  for (const auto& lane : map.lanes) {
    nlohmann::json verts = nlohmann::json::array();
    for (const auto& v : lane.vertices) verts.push_back({v.x(), v.y()});
    lanes.push_back({{"vertices", verts}, {"altitude", lane.altitude}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write lane map: " + path);
  out << nlohmann::json{{"lanes", lanes}}.dump(2) << "\n";
}

bool point_in_lane(const LaneMap& map, double x, double y) {
  for (const auto& lane : map.lanes)
    if (point_in_polygon(lane, x, y)) return true;
  return false;
}

double containment_probability(const Eigen::Vector2d& mean, const Eigen::Matrix2d& cov,
                               const LaneMap& map, int n_samples, RngStream& rng) {
  if (n_samples < 1) throw std::invalid_argument("containment: n_samples must be >= 1");
  const Eigen::Matrix2d sym = 0.5 * (cov + cov.transpose());

  Eigen::Matrix2d transform;
  Eigen::LLT<Eigen::Matrix2d> llt(sym);
  if (llt.info() == Eigen::Success) {
    transform = llt.matrixL();
  } else {
    // Semidefinite or slightly perturbed input: clamp eigenvalues at zero.
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(sym);
    const double scale = std::max(1.0, sym.trace());
    if (eig.eigenvalues().minCoeff() < -1e-9 * scale)
      throw std::invalid_argument("containment: covariance is not positive semidefinite");
    const Eigen::Vector2d clamped = eig.eigenvalues().cwiseMax(0.0);
    transform = eig.eigenvectors() * clamped.cwiseSqrt().asDiagonal();
  }

  int inside = 0;
  for (int i = 0; i < n_samples; ++i) {
    const Eigen::Vector2d z{rng.normal(), rng.normal()};
    const Eigen::Vector2d p = mean + transform * z;
    if (point_in_lane(map, p.x(), p.y())) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(n_samples);
}

}  // namespace cmm::maps
