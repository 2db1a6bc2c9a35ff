#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cmm/error_models.hpp"
#include "cmm/rng.hpp"

using namespace cmm;
using namespace cmm::errors;

namespace {

double sample_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

double sample_var(const std::vector<double>& v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / (v.size() - 1);
}

}  // namespace

TEST_CASE("zero magnitude gives zero biases") {
  RngStream rng(1);
  const auto c = init_common_biases(6, 0.0, rng);
  CHECK(c.values.size() == 6);
  CHECK(c.values.norm() == 0.0);
}

TEST_CASE("bias init variance matches the requested magnitude") {
  RngStream rng(2);
  std::vector<double> draws;
  for (int i = 0; i < 20000; ++i) {
    const auto c = init_common_biases(5, 3.0, rng);
    for (int j = 0; j < 5; ++j) draws.push_back(c.values[j]);
  }
  CHECK(sample_var(draws) == doctest::Approx(9.0).epsilon(0.03));
  CHECK(std::abs(sample_mean(draws)) < 0.03);
}

TEST_CASE("invalid init arguments") {
  RngStream rng(3);
  CHECK_THROWS_AS(init_common_biases(0, 1.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(init_common_biases(4, -1.0, rng), std::invalid_argument);
}

TEST_CASE("zero drift leaves biases unchanged") {
  RngStream rng(4);
  auto c = init_common_biases(6, 5.0, rng);
  NoiseConfig cfg;
  cfg.sigma_c = 0.0;
  const auto next = propagate_common_biases(c, cfg, rng);
  CHECK((next.values - c.values).norm() == 0.0);
}

TEST_CASE("gauss-markov increment variance is sigma_c^2 dt^2") {
  NoiseConfig cfg;  // sigma_c = 0.1, delta_t = 0.1 -> increment std 0.01
  RngStream rng(5);
  CommonBiasVector c;
  c.values = Eigen::VectorXd::Zero(1);
  std::vector<double> increments;
  double prev = 0.0;
  for (int i = 0; i < 100000; ++i) {
    c = propagate_common_biases(c, cfg, rng);
    increments.push_back(c.values[0] - prev);
    prev = c.values[0];
  }
  const double expected = cfg.sigma_c * cfg.sigma_c * cfg.delta_t * cfg.delta_t;
  CHECK(sample_var(increments) == doctest::Approx(expected).epsilon(0.05));
  CHECK(std::sqrt(sample_var(increments)) == doctest::Approx(0.01).epsilon(0.03));
}

TEST_CASE("deterministic clock drift when noise is off") {
  NoiseConfig cfg;
  cfg.sigma_b = 0.0;
  cfg.sigma_d = 0.0;
  double b = 0.0, bd = 1.0;
  for (int i = 0; i < 10; ++i) {
    RngStream rng(6);
    std::tie(b, bd) = propagate_clock(b, bd, cfg, rng);
  }
  CHECK(b == doctest::Approx(1.0).epsilon(1e-12));  // 10 steps of 0.1 m
  CHECK(bd == doctest::Approx(1.0));
}

TEST_CASE("clock increment covariance matches the filter process block") {
  NoiseConfig cfg;  // sigma_b = sigma_d = 1, dt = 0.1
  const double dt = cfg.delta_t;
  RngStream rng(7);
  std::vector<double> db, dd;
  for (int i = 0; i < 200000; ++i) {
    const auto [b, d] = propagate_clock(0.0, 0.0, cfg, rng);
    db.push_back(b);
    dd.push_back(d);
  }
  const double sd2 = cfg.sigma_d * cfg.sigma_d, sb2 = cfg.sigma_b * cfg.sigma_b;
  const double var_b = sd2 * dt * dt * dt * dt / 4.0 + sb2 * dt * dt;
  const double var_d = sd2 * dt * dt;
  const double cov_bd = sd2 * dt * dt * dt / 2.0;
  CHECK(sample_var(db) == doctest::Approx(var_b).epsilon(0.05));
  CHECK(sample_var(dd) == doctest::Approx(var_d).epsilon(0.05));
  double acc = 0.0;
  for (size_t i = 0; i < db.size(); ++i) acc += db[i] * dd[i];
  CHECK(acc / db.size() == doctest::Approx(cov_bd).epsilon(0.05));
}

TEST_CASE("clock states stay frozen when disabled") {
  NoiseConfig cfg;
  cfg.sigma_b = 0.0;
  cfg.sigma_d = 0.0;
  RngStream rng(8);
  double b = 0.0, bd = 0.0;
  for (int i = 0; i < 100; ++i) std::tie(b, bd) = propagate_clock(b, bd, cfg, rng);
  CHECK(b == 0.0);
  CHECK(bd == 0.0);
}

TEST_CASE("pseudorange equals geometric range with all errors zero") {
  NoiseConfig cfg;
  cfg.sigma_z = 0.0;
  VehicleTruthState truth;
  truth.x = 10.0;
  truth.y = -5.0;
  truth.altitude = 0.0;
  const Eigen::Vector3d sat{1.2e7, 0.5e7, 2.2e7};
  RngStream rng(9);
  const auto z = generate_pseudorange(truth, sat, 3, 0.0, 0.0, 1.5, 0, cfg, rng);
  const double expected = (Eigen::Vector3d{10.0, -5.0, 0.0} - sat).norm();
  CHECK(z.range_m == doctest::Approx(expected).epsilon(1e-14));
  CHECK(z.sat_id == 3);
  CHECK(z.time_s == 1.5);
}

TEST_CASE("residual mean recovers the common bias") {
  NoiseConfig cfg;  // sigma_z = 1
  VehicleTruthState truth;
  truth.x = 3.0;
  truth.y = 4.0;
  truth.clock_bias = 2.5;
  const Eigen::Vector3d sat{0.9e7, -0.8e7, 2.3e7};
  const double geometric = (Eigen::Vector3d{3.0, 4.0, 0.0} - sat).norm();
  const double common = -4.2;
  RngStream rng(10);
  const int n = 10000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto z = generate_pseudorange(truth, sat, 1, common, 0.0, 0.0, 0, cfg, rng);
    sum += z.range_m - geometric - truth.clock_bias;
  }
  // 3 sigma / sqrt(n) bound on the mean
  CHECK(std::abs(sum / n - common) < 3.0 * cfg.sigma_z / std::sqrt(double(n)));
}

TEST_CASE("residual distribution passes a normality check") {
  NoiseConfig cfg;
  VehicleTruthState truth;
  const Eigen::Vector3d sat{1e7, 1e7, 2e7};
  const double geometric = (Eigen::Vector3d{0, 0, 0} - sat).norm();
  RngStream rng(11);
  const int n = 100000;
  std::vector<double> res;
  for (int i = 0; i < n; ++i) {
    const auto z = generate_pseudorange(truth, sat, 1, 0.0, 0.0, 0.0, 0, cfg, rng);
    res.push_back(z.range_m - geometric);
  }
  const double m = sample_mean(res), v = sample_var(res);
  double skew = 0.0, kurt = 0.0;
  for (double x : res) {
    const double z = (x - m) / std::sqrt(v);
    skew += z * z * z;
    kurt += z * z * z * z;
  }
  skew /= n;
  kurt /= n;
  // 5-sigma bounds: se(skew) = sqrt(6/n), se(kurt) = sqrt(24/n)
  CHECK(std::abs(skew) < 5.0 * std::sqrt(6.0 / n));
  CHECK(std::abs(kurt - 3.0) < 5.0 * std::sqrt(24.0 / n));
}

TEST_CASE("non-common noise uncorrelated across vehicles") {
  NoiseConfig cfg;
  VehicleTruthState truth;
  const Eigen::Vector3d sat{1e7, 1e7, 2e7};
  const double geometric = (Eigen::Vector3d{0, 0, 0} - sat).norm();
  const int n = 10000;
  std::vector<double> r0, r1;
  for (int i = 0; i < n; ++i) {
    // per-entity streams keyed by (step, vehicle id)
    RngStream s0 = RngStream::keyed(99, {static_cast<std::uint64_t>(i), 0});
    RngStream s1 = RngStream::keyed(99, {static_cast<std::uint64_t>(i), 1});
    r0.push_back(generate_pseudorange(truth, sat, 1, 0, 0, 0, 0, cfg, s0).range_m - geometric);
    r1.push_back(generate_pseudorange(truth, sat, 1, 0, 0, 0, 1, cfg, s1).range_m - geometric);
  }
  const double m0 = sample_mean(r0), m1 = sample_mean(r1);
  double cov = 0.0;
  for (int i = 0; i < n; ++i) cov += (r0[i] - m0) * (r1[i] - m1);
  cov /= n - 1;
  const double corr = cov / std::sqrt(sample_var(r0) * sample_var(r1));
  CHECK(std::abs(corr) < 0.05);
}

TEST_CASE("stochastic draws are reproducible under a fixed seed") {
  NoiseConfig cfg;
  const auto draw = [&]() {
    RngStream rng = RngStream::keyed(1234, {7, 8, 9});
    auto c = init_common_biases(6, 5.0, rng);
    c = propagate_common_biases(c, cfg, rng);
    return c;
  };
  const auto a = draw();
  const auto b = draw();
  for (int j = 0; j < 6; ++j) CHECK(a.values[j] == b.values[j]);  // bit identical
}

TEST_CASE("noise config validation") {
  NoiseConfig cfg;
  cfg.sigma_z = -0.1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = NoiseConfig{};
  cfg.delta_t = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
