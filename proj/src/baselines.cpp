#include "cmm/baselines.hpp"

#include <cmath>
#include <stdexcept>

namespace cmm::baselines {

EgoSolution ego_localize(const std::vector<rbpf::SatelliteObservation>& obs,
                         double altitude, double sigma_z,
                         const Eigen::Vector3d& initial_guess) {
  if (obs.size() < 3)
    throw std::invalid_argument("ego_localize: need at least 3 satellites");

  Eigen::Vector3d x = initial_guess;  // (x, y, b)
  const Eigen::Index n = static_cast<Eigen::Index>(obs.size());
  Eigen::MatrixXd jac(n, 3);
  Eigen::VectorXd res(n);
  bool converged = false;
  for (int iter = 0; iter < 50; ++iter) {
    for (Eigen::Index m = 0; m < n; ++m) {
      const Eigen::Vector3d p{x[0], x[1], altitude};
      const Eigen::Vector3d d = p - obs[m].sat_pos_enu;
      const double range = d.norm();
      res[m] = obs[m].pseudorange - (range + x[2]);
      jac.row(m) << d.x() / range, d.y() / range, 1.0;
    }
    const Eigen::Matrix3d gtg = jac.transpose() * jac;
    Eigen::FullPivLU<Eigen::Matrix3d> lu(gtg);
    if (!lu.isInvertible())
      throw std::domain_error("ego_localize: degenerate satellite geometry");
    const Eigen::Vector3d delta = lu.solve(jac.transpose() * res);
    x += delta;
    if (delta.norm() < 1e-4) {
      converged = true;
      break;
    }
  }
  if (!converged) throw std::runtime_error("ego_localize: did not converge");

  EgoSolution sol;
  sol.position = {x[0], x[1]};
  sol.clock_bias = x[2];
  const Eigen::Matrix3d gtg = jac.transpose() * jac;
  sol.covariance = sigma_z * sigma_z * gtg.inverse();
  for (const auto& ob : obs) sol.used_sats.push_back(ob.sat_id);
  return sol;
}

CmmCorrection static_cmm(const std::vector<Eigen::Vector2d>& positions,
                         const maps::LaneMap& map, double blur_std,
                         const StaticCmmConfig& cfg, RngStream& rng) {
  if (positions.empty())
    throw std::invalid_argument("static_cmm: need at least one vehicle");
  const Eigen::Matrix2d blur_cov =
      blur_std * blur_std * Eigen::Matrix2d::Identity();

  std::vector<Eigen::Vector2d> candidates(cfg.n_candidates);
  std::vector<double> scores(cfg.n_candidates);
  double total = 0.0;
  for (int c = 0; c < cfg.n_candidates; ++c) {
    candidates[c] = {rng.normal(0.0, cfg.prior_std), rng.normal(0.0, cfg.prior_std)};
    double s = 1.0;
    for (const auto& pos : positions) {
      s *= maps::containment_probability(pos + candidates[c], blur_cov, map,
                                         cfg.n_mc, rng);
      if (s == 0.0) break;
    }
    scores[c] = s;
    total += s;
  }

  CmmCorrection out;
  if (total <= 0.0) {
    out.low_confidence = true;
    out.covariance = cfg.prior_std * cfg.prior_std * Eigen::Matrix2d::Identity();
    return out;
  }
  for (int c = 0; c < cfg.n_candidates; ++c)
    out.correction += (scores[c] / total) * candidates[c];
  for (int c = 0; c < cfg.n_candidates; ++c) {
    const Eigen::Vector2d d = candidates[c] - out.correction;
    out.covariance += (scores[c] / total) * d * d.transpose();
  }
  return out;
}

void PositionSmoother::predict(double dt) {
  if (!initialized_) return;
  Eigen::Matrix4d a = Eigen::Matrix4d::Identity();
  a(0, 1) = dt;
  a(2, 3) = dt;
  const double dt2 = dt * dt, dt3 = dt2 * dt, dt4 = dt3 * dt;
  Eigen::Matrix4d q = Eigen::Matrix4d::Zero();
  const auto block = [&](int o, double var) {
    q(o, o) = var * dt4 / 4.0;
    q(o, o + 1) = q(o + 1, o) = var * dt3 / 2.0;
    q(o + 1, o + 1) = var * dt2;
  };
  block(0, sax_ * sax_);
  block(2, say_ * say_);
  mean_ = a * mean_;
  cov_ = a * cov_ * a.transpose() + q;
}

void PositionSmoother::update(const Eigen::Vector2d& pos, const Eigen::Matrix2d& noise) {
  if (!initialized_) {
    mean_ << pos.x(), 0.0, pos.y(), 0.0;
    cov_.setZero();
    cov_(0, 0) = noise(0, 0);
    cov_(2, 2) = noise(1, 1);
    cov_(0, 2) = cov_(2, 0) = noise(0, 1);
    cov_(1, 1) = cov_(3, 3) = 25.0;  // generous initial velocity variance
    initialized_ = true;
    return;
  }
  Eigen::Matrix<double, 2, 4> h = Eigen::Matrix<double, 2, 4>::Zero();
  h(0, 0) = 1.0;
  h(1, 2) = 1.0;
  const Eigen::Matrix2d s = h * cov_ * h.transpose() + noise;
  const Eigen::Matrix<double, 4, 2> gain = cov_ * h.transpose() * s.inverse();
  mean_ += gain * (pos - h * mean_);
  cov_ = (Eigen::Matrix4d::Identity() - gain * h) * cov_;
  cov_ = 0.5 * (cov_ + cov_.transpose()).eval();
}

Eigen::Matrix2d PositionSmoother::position_cov() const {
  Eigen::Matrix2d c;
  c << cov_(0, 0), cov_(0, 2), cov_(2, 0), cov_(2, 2);
  return c;
}

}  // namespace cmm::baselines
