#include "cmm/filter_rbpf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cmm::rbpf {

namespace {
constexpr double kTwoPi = 6.28318530717958647692529;
constexpr double kInnovVarFloor = 1e-6;  // [m^2]

enum StreamTag : std::uint64_t {
  kTagInit = 1,
  kTagPredict = 2,
  kTagClassify = 3,
  kTagMap = 4,
  kTagResample = 5,
};
}  // namespace

void FilterConfig::validate() const {
  if (n_particles < 1) throw std::invalid_argument("filter config: n_particles < 1");
  if (!(alpha1 > 0.0 && alpha1 < alpha2 && alpha2 <= 1.0))
    throw std::invalid_argument("filter config: need 0 < alpha1 < alpha2 <= 1");
  if (!(alpha3 > 0.0 && alpha3 < 1.0))
    throw std::invalid_argument("filter config: alpha3 must be in (0,1)");
  if (n_mc < 1) throw std::invalid_argument("filter config: n_mc < 1");
  if (adaptive_window < 2) throw std::invalid_argument("filter config: adaptive_window < 2");
  noise.validate();
}

double chi2_cdf(double d2) {
  if (d2 < 0.0) throw std::invalid_argument("chi2_cdf: negative argument");
  return std::erf(std::sqrt(0.5 * d2));
}

double chi2_inv(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("chi2_inv: p outside [0,1]");
  if (p == 1.0) return std::numeric_limits<double>::infinity();
  if (p <= 0.0) return 0.0;
  double hi = 1.0;
  while (chi2_cdf(hi) < p) hi *= 2.0;
  double lo = 0.0;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    (chi2_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Matrix6d process_matrix(double dt) {
  Matrix6d a = Matrix6d::Identity();
  a(0, 1) = dt;
  a(2, 3) = dt;
  a(4, 5) = dt;
  return a;
}

Matrix6d process_noise(const errors::NoiseConfig& n) {
  const double dt = n.delta_t;
  const double dt2 = dt * dt, dt3 = dt2 * dt, dt4 = dt3 * dt;
  Matrix6d r = Matrix6d::Zero();
  const auto block = [&](int o, double var) {
    r(o, o) += var * dt4 / 4.0;
    r(o, o + 1) += var * dt3 / 2.0;
    r(o + 1, o) += var * dt3 / 2.0;
    r(o + 1, o + 1) += var * dt2;
  };
  block(0, n.sigma_ax * n.sigma_ax);
  block(2, n.sigma_ay * n.sigma_ay);
  block(4, n.sigma_d * n.sigma_d);
  r(4, 4) += n.sigma_b * n.sigma_b * dt2;
  return r;
}

void predict_ekf(VehicleEkfState& ekf, const errors::NoiseConfig& n) {
  const Matrix6d a = process_matrix(n.delta_t);
  ekf.mean = a * ekf.mean;
  ekf.cov = a * ekf.cov * a.transpose() + process_noise(n);
  ekf.cov = 0.5 * (ekf.cov + ekf.cov.transpose()).eval();
}

MeasurementGeometry measurement_geometry(const VehicleEkfState& ekf, double common_bias,
                                         const Eigen::Vector3d& sat_pos_enu,
                                         double measured_range, double altitude,
                                         double sigma_z, bool clock_in_measurement) {
  const Eigen::Vector3d p{ekf.mean[0], ekf.mean[2], altitude};
  const Eigen::Vector3d d = p - sat_pos_enu;
  const double range = d.norm();
  if (range < 1e-6)
    throw std::invalid_argument("measurement_geometry: satellite at receiver position");

  MeasurementGeometry g;
  g.h_x = d.x() / range;
  g.h_y = d.y() / range;
  g.jac_clock = clock_in_measurement ? 1.0 : 0.0;
  g.predicted = range + common_bias + ekf.mean[4];

  Eigen::Matrix2d sxy;
  sxy << ekf.cov(0, 0), ekf.cov(0, 2), ekf.cov(2, 0), ekf.cov(2, 2);
  const Eigen::Vector2d h{g.h_x, g.h_y};
  const double hph = std::max(0.0, h.dot(sxy * h));
  g.innovation_variance = std::max(hph + sigma_z * sigma_z, kInnovVarFloor);
  const double innov = measured_range - g.predicted;
  g.mahalanobis_sq = innov * innov / g.innovation_variance;
  return g;
}

Chi2Gate Chi2Gate::from(double alpha1, double alpha2) {
  Chi2Gate g;
  g.alpha1 = alpha1;
  g.alpha2 = alpha2;
  g.thresh_lo = chi2_inv(alpha1);
  g.thresh_hi = chi2_inv(alpha2);
  return g;
}

int classify_multipath(double mahalanobis_sq, const Chi2Gate& gate, double u_draw) {
  if (mahalanobis_sq <= gate.thresh_lo) return 0;
  if (mahalanobis_sq >= gate.thresh_hi) return 1;
  const double band =
      (chi2_cdf(mahalanobis_sq) - gate.alpha1) / (gate.alpha2 - gate.alpha1);
  return (u_draw <= band) ? 1 : 0;
}

double log_weight_increment(const MeasurementGeometry& g, int indicator,
                            double penalty_d2) {
  const double log_norm = -0.5 * std::log(kTwoPi * g.innovation_variance);
  return log_norm - 0.5 * (indicator == 0 ? g.mahalanobis_sq : penalty_d2);
}

void batch_update(VehicleEkfState& ekf, const Eigen::MatrixXd& jacobian,
                  const Eigen::VectorXd& innovation, const Eigen::VectorXd& noise_diag) {
  const Eigen::Index n = jacobian.rows();
  if (n == 0) return;
  Eigen::MatrixXd s = jacobian * ekf.cov * jacobian.transpose();
  s.diagonal() += noise_diag;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(s);
  if (!lu.isInvertible())
    throw std::domain_error("batch_update: singular innovation covariance");
  const Eigen::MatrixXd gain = lu.solve(jacobian * ekf.cov).transpose();
  ekf.mean += gain * innovation;
  ekf.cov = (Matrix6d::Identity() - gain * jacobian) * ekf.cov;
  ekf.cov = 0.5 * (ekf.cov + ekf.cov.transpose()).eval();
}

std::vector<int> systematic_resample(const std::vector<double>& weights, double u01) {
  const size_t n = weights.size();
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0))
    throw std::runtime_error("systematic_resample: all weights zero (filter divergence)");
  std::vector<int> out;
  out.reserve(n);
  size_t j = 0;
  double cum = weights[0];
  for (size_t i = 0; i < n; ++i) {
    const double target = (static_cast<double>(i) + u01) / static_cast<double>(n) * total;
    while (cum < target && j + 1 < n) cum += weights[++j];
    out.push_back(static_cast<int>(j));
  }
  return out;
}

void InnovationWindow::push(int sat_id, double innovation) {
  auto& ch = channels_[sat_id];
  ch.push_back(innovation);
  if (static_cast<int>(ch.size()) > capacity_) ch.pop_front();
}

double InnovationWindow::channel_noise(int sat_id, double hph, double sigma_z) const {
  const double floor = sigma_z * sigma_z;
  const auto it = channels_.find(sat_id);
  if (it == channels_.end() || it->second.size() < 2) return floor;
  double sum_sq = 0.0;
  for (double v : it->second) sum_sq += v * v;
  const double q = sum_sq / static_cast<double>(it->second.size() - 1) - hph;
  return std::max(q, floor);
}

int InnovationWindow::length(int sat_id) const {
  const auto it = channels_.find(sat_id);
  return it == channels_.end() ? 0 : static_cast<int>(it->second.size());
}

RbpfFilter::RbpfFilter(FilterConfig cfg, int n_vehicles, std::vector<int> sat_ids,
                       std::uint64_t seed)
    : cfg_(std::move(cfg)), n_vehicles_(n_vehicles), sat_ids_(std::move(sat_ids)),
      seed_(seed) {
  cfg_.validate();
  if (n_vehicles_ < 1) throw std::invalid_argument("rbpf: need at least one vehicle");
  if (sat_ids_.empty()) throw std::invalid_argument("rbpf: empty satellite list");
  for (size_t i = 0; i < sat_ids_.size(); ++i)
    slot_of_sat_[sat_ids_[i]] = static_cast<int>(i);
  gate_ = Chi2Gate::from(cfg_.alpha1, cfg_.alpha2);
  penalty_d2_ = chi2_inv(cfg_.alpha3);
  windows_.assign(n_vehicles_, InnovationWindow(cfg_.adaptive_window));
  last_flagged_.assign(n_vehicles_, 0.0);
  last_used_.assign(n_vehicles_, 0.0);
}

int RbpfFilter::sat_slot(int sat_id) const {
  const auto it = slot_of_sat_.find(sat_id);
  return it == slot_of_sat_.end() ? -1 : it->second;
}

void RbpfFilter::initialize(const Eigen::VectorXd& bias_init,
                            const std::vector<VehicleEkfState>& ekf_init) {
  if (bias_init.size() != static_cast<Eigen::Index>(sat_ids_.size()))
    throw std::invalid_argument("rbpf: bias_init dimension mismatch");
  if (ekf_init.size() != static_cast<size_t>(n_vehicles_))
    throw std::invalid_argument("rbpf: ekf_init count mismatch");
  const int np = cfg_.n_particles;
  particles_.assign(np, Particle{});
  for (int k = 0; k < np; ++k) {
    auto& p = particles_[k];
    RngStream rs = RngStream::keyed(seed_, {kTagInit, static_cast<std::uint64_t>(k)});
    p.biases = bias_init;
    for (Eigen::Index j = 0; j < p.biases.size(); ++j)
      p.biases[j] += rs.normal(0.0, cfg_.noise.sigma_init_common);
    p.ekfs = ekf_init;
    p.weight = 1.0 / np;
  }
  step_ = 0;
  windows_.assign(n_vehicles_, InnovationWindow(cfg_.adaptive_window));
}

StepEstimates RbpfFilter::step(const std::vector<std::vector<SatelliteObservation>>& obs,
                               const maps::LaneMap* lane_map) {
  std::vector<int> order(n_vehicles_);
  std::iota(order.begin(), order.end(), 0);
  return step_ordered(obs, lane_map, order);
}

StepEstimates RbpfFilter::step_ordered(
    const std::vector<std::vector<SatelliteObservation>>& obs,
    const maps::LaneMap* lane_map, const std::vector<int>& vehicle_order) {
  if (obs.size() != static_cast<size_t>(n_vehicles_))
    throw std::invalid_argument("rbpf step: observation list count mismatch");
  const auto t = static_cast<std::uint64_t>(step_);
  const auto& noise = cfg_.noise;
  const int np = cfg_.n_particles;

  // Satellites processed in ascending id.
  std::vector<std::vector<SatelliteObservation>> sorted = obs;
  for (auto& vo : sorted) {
    std::sort(vo.begin(), vo.end(),
              [](const auto& a, const auto& b) { return a.sat_id < b.sat_id; });
    for (const auto& ob : vo)
      if (sat_slot(ob.sat_id) < 0)
        throw std::invalid_argument("rbpf step: observation for unknown satellite id");
  }

  // Step 1: predict biases and EKFs; each particle draws its own bias noise.
  for (int k = 0; k < np; ++k) {
    auto& p = particles_[k];
    RngStream rs = RngStream::keyed(seed_, {kTagPredict, t, static_cast<std::uint64_t>(k)});
    for (Eigen::Index j = 0; j < p.biases.size(); ++j)
      p.biases[j] += rs.normal(0.0, noise.sigma_c) * noise.delta_t;
    for (auto& ekf : p.ekfs) predict_ekf(ekf, noise);
    p.log_weight = std::log(p.weight);
  }

  // Adaptive measurement noise from fused predicted innovations.
  std::vector<std::map<int, double>> channel_q(n_vehicles_);
  if (cfg_.use_adaptive_noise) {
    Eigen::VectorXd fused_bias = Eigen::VectorXd::Zero(sat_ids_.size());
    for (const auto& p : particles_) fused_bias += p.weight * p.biases;
    for (int i = 0; i < n_vehicles_; ++i) {
      if (sorted[i].empty()) continue;
      VehicleEkfState fused;
      fused.mean.setZero();
      for (const auto& p : particles_) fused.mean += p.weight * p.ekfs[i].mean;
      fused.cov.setZero();
      for (const auto& p : particles_) {
        const Vector6d d = p.ekfs[i].mean - fused.mean;
        fused.cov += p.weight * (p.ekfs[i].cov + d * d.transpose());
      }
      const double alt =
          lane_map ? lane_map->altitude_at(fused.mean[0], fused.mean[2]) : 0.0;
      for (const auto& ob : sorted[i]) {
        const int slot = sat_slot(ob.sat_id);
        const MeasurementGeometry g =
            measurement_geometry(fused, fused_bias[slot], ob.sat_pos_enu, ob.pseudorange,
                                 alt, noise.sigma_z, cfg_.clock_in_measurement);
        windows_[i].push(ob.sat_id, ob.pseudorange - g.predicted);
        const double hph =
            std::max(0.0, g.innovation_variance - noise.sigma_z * noise.sigma_z);
        channel_q[i][ob.sat_id] = windows_[i].channel_noise(ob.sat_id, hph, noise.sigma_z);
      }
    }
  }

  // Steps 2-3 per vehicle: classify, weight, batch EKF update.
  std::vector<std::vector<int>> flagged(np, std::vector<int>(n_vehicles_, 0));
  std::vector<std::vector<int>> used(np, std::vector<int>(n_vehicles_, 0));
  for (int i : vehicle_order) {
    const auto& vo = sorted[i];
    if (vo.empty()) continue;
    for (int k = 0; k < np; ++k) {
      auto& p = particles_[k];
      auto& ekf = p.ekfs[i];
      const double alt = lane_map ? lane_map->altitude_at(ekf.mean[0], ekf.mean[2]) : 0.0;

      std::vector<MeasurementGeometry> geoms;
      std::vector<int> lambdas;
      geoms.reserve(vo.size());
      lambdas.reserve(vo.size());
      int n_accepted = 0;
      for (const auto& ob : vo) {
        const int slot = sat_slot(ob.sat_id);
        const MeasurementGeometry g =
            measurement_geometry(ekf, p.biases[slot], ob.sat_pos_enu, ob.pseudorange,
                                 alt, noise.sigma_z, cfg_.clock_in_measurement);
        // One u per measurement, shared across particles (common random
        // numbers): hypotheses still split through their own D^2, while
        // spurious selection noise from independent draws is avoided.
        const double u = RngStream::keyed(seed_, {kTagClassify, t,
                                                  static_cast<std::uint64_t>(i),
                                                  static_cast<std::uint64_t>(ob.sat_id)})
                             .uniform01();
        const int lambda = classify_multipath(g.mahalanobis_sq, gate_, u);
        p.log_weight += log_weight_increment(g, lambda, penalty_d2_);
        geoms.push_back(g);
        lambdas.push_back(lambda);
        if (lambda == 0) ++n_accepted;
      }
      flagged[k][i] = static_cast<int>(vo.size()) - n_accepted;
      used[k][i] = n_accepted;

      if (n_accepted > 0) {
        Eigen::MatrixXd jac(n_accepted, 6);
        Eigen::VectorXd innov(n_accepted), qdiag(n_accepted);
        int r = 0;
        for (size_t m = 0; m < vo.size(); ++m) {
          if (lambdas[m] != 0) continue;
          const auto& g = geoms[m];
          jac.row(r) << g.h_x, 0.0, g.h_y, 0.0, g.jac_clock, 0.0;
          innov[r] = vo[m].pseudorange - g.predicted;
          // same numerical floor as the scalar innovation variance
          qdiag[r] = std::max(cfg_.use_adaptive_noise ? channel_q[i][vo[m].sat_id]
                                                      : noise.sigma_z * noise.sigma_z,
                              kInnovVarFloor);
          ++r;
        }
        batch_update(ekf, jac, innov, qdiag);
      }
    }
  }

  // Step 4: map-constraint reweighting.
  if (lane_map != nullptr) {
    for (int k = 0; k < np; ++k) {
      auto& p = particles_[k];
      for (int i = 0; i < n_vehicles_; ++i) {
        const auto& ekf = p.ekfs[i];
        Eigen::Matrix2d sxy;
        sxy << ekf.cov(0, 0), ekf.cov(0, 2), ekf.cov(2, 0), ekf.cov(2, 2);
        const Eigen::Vector2d mean2{ekf.mean[0], ekf.mean[2]};
        // Same sample stream for every particle (common random numbers), so
        // containment differences reflect the hypotheses, not sampling noise.
        RngStream ms =
            RngStream::keyed(seed_, {kTagMap, t, static_cast<std::uint64_t>(i)});
        p.log_weight +=
            std::log(maps::containment_probability(mean2, sxy, *lane_map, cfg_.n_mc, ms));
      }
    }
  }

  // Normalize.
  double max_lw = -std::numeric_limits<double>::infinity();
  for (const auto& p : particles_) max_lw = std::max(max_lw, p.log_weight);
  StepEstimates est;
  est.diverged = !std::isfinite(max_lw);
  if (est.diverged) {
    for (auto& p : particles_) p.weight = 1.0 / np;
  } else {
    double sum = 0.0;
    for (auto& p : particles_) {
      p.weight = std::exp(p.log_weight - max_lw);
      sum += p.weight;
    }
    for (auto& p : particles_) p.weight /= sum;
  }

  // Point estimates from the weighted ensemble (before resampling).
  est.vehicle_mean.assign(n_vehicles_, Vector6d::Zero());
  est.horizontal_cov.assign(n_vehicles_, Eigen::Matrix2d::Zero());
  est.bias_mean = Eigen::VectorXd::Zero(sat_ids_.size());
  est.bias_var = Eigen::VectorXd::Zero(sat_ids_.size());
  est.n_used.assign(n_vehicles_, 0.0);
  est.n_flagged.assign(n_vehicles_, 0.0);
  for (int k = 0; k < np; ++k) {
    const auto& p = particles_[k];
    est.bias_mean += p.weight * p.biases;
    for (int i = 0; i < n_vehicles_; ++i) {
      est.vehicle_mean[i] += p.weight * p.ekfs[i].mean;
      est.n_used[i] += p.weight * used[k][i];
      est.n_flagged[i] += p.weight * flagged[k][i];
    }
  }
  for (int k = 0; k < np; ++k) {
    const auto& p = particles_[k];
    const Eigen::VectorXd db = p.biases - est.bias_mean;
    est.bias_var += p.weight * db.cwiseProduct(db);
    for (int i = 0; i < n_vehicles_; ++i) {
      const auto& ekf = p.ekfs[i];
      Eigen::Matrix2d sxy;
      sxy << ekf.cov(0, 0), ekf.cov(0, 2), ekf.cov(2, 0), ekf.cov(2, 2);
      const Eigen::Vector2d d{ekf.mean[0] - est.vehicle_mean[i][0],
                              ekf.mean[2] - est.vehicle_mean[i][2]};
      est.horizontal_cov[i] += p.weight * (sxy + d * d.transpose());
    }
  }
  last_used_ = est.n_used;
  last_flagged_ = est.n_flagged;
  last_weights_.resize(np);
  for (int k = 0; k < np; ++k) last_weights_[k] = particles_[k].weight;

  // Step 5: resample.
  bool do_resample = !est.diverged;
  if (do_resample && cfg_.ess_threshold > 0.0) {
    double sum_sq = 0.0;
    for (const auto& p : particles_) sum_sq += p.weight * p.weight;
    do_resample = (1.0 / sum_sq) < cfg_.ess_threshold * np;
  }
  if (do_resample) {
    std::vector<double> w(np);
    for (int k = 0; k < np; ++k) w[k] = particles_[k].weight;
    const double u = RngStream::keyed(seed_, {kTagResample, t}).uniform01();
    const std::vector<int> src = systematic_resample(w, u);
    std::vector<Particle> next;
    next.reserve(np);
    for (int k = 0; k < np; ++k) {
      next.push_back(particles_[src[k]]);
      next.back().weight = 1.0 / np;
    }
    particles_ = std::move(next);
  }

  ++step_;
  return est;
}

}  // namespace cmm::rbpf
