#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "enkf_lab/kalman.hpp"
#include "enkf_lab/riccati.hpp"
#include "test_support.hpp"

using namespace enkf_lab;
using namespace test_support;

namespace {
const ModelParams kGolden = golden_scalar_model();
}

TEST_CASE("kalman_gain") {
  CHECK(kalman_gain(kGolden, Matrix::Zero(1, 1))(0, 0) == doctest::Approx(0.0));
  CHECK(kalman_gain(kGolden, Matrix::Identity(1, 1))(0, 0) == doctest::Approx(0.5));

  // K(P) B == I - (I + P S)^{-1} via the Woodbury identity.
  RngStream s = RngStream::derive(21, "gain");
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams m = rand_model_rect(s, 3, 2);
    const Matrix p = rand_spd(s, 3);
    const Matrix lhs = kalman_gain(m, p) * m.b;
    const Matrix rhs = Matrix::Identity(3, 3) -
                       (Matrix::Identity(3, 3) + p * m.s.mat()).inverse();
    CHECK(approx_rel(lhs, rhs, 1e-10));
  }
}

TEST_CASE("update_factor") {
  CHECK(approx_rel(update_factor(kGolden, Matrix::Zero(1, 1)), Matrix::Identity(1, 1),
                   1e-14));
  CHECK(update_factor(kGolden, Matrix::Identity(1, 1))(0, 0) == doctest::Approx(0.5));

  RngStream s = RngStream::derive(22, "factor");
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams m = rand_model_rect(s, 3, 3);
    const Matrix p = rand_spd(s, 3);
    const Matrix f = update_factor(m, p);
    // (I + P S)^{-1} equals I - K(P) B.
    CHECK(approx_rel(f, Matrix::Identity(3, 3) - kalman_gain(m, p) * m.b, 1e-10));
    // A^(P) P is symmetric PSD and dominated by P.
    const Matrix fp = sym_part(f * p);
    CHECK(min_eigenvalue(fp) >= -1e-10);
    CHECK(loewner_leq(fp, p, 1e-10));
  }
}

TEST_CASE("update_noise_cov") {
  CHECK(update_noise_cov(kGolden, Matrix::Zero(1, 1))(0, 0) == doctest::Approx(0.0));
  CHECK(update_noise_cov(kGolden, Matrix::Identity(1, 1))(0, 0) == doctest::Approx(0.25));

  // Joseph identity A^(P) P == A^(P) P A^(P)' + R^(P).
  RngStream s = RngStream::derive(23, "joseph");
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams m = rand_model_rect(s, 4, 2);
    const Matrix p = rand_spd(s, 4);
    const Matrix f = update_factor(m, p);
    const Matrix lhs = sym_part(f * p);
    const Matrix rhs = sym_part(f * p * f.transpose()) + update_noise_cov(m, p);
    CHECK(approx_rel(lhs, rhs, 1e-10));
  }
}

TEST_CASE("kf_update") {
  // B = 0: update is the identity.
  const ModelParams free_model =
      make_model(Matrix::Identity(1, 1), Matrix::Zero(1, 1), Matrix::Identity(1, 1),
                 Matrix::Identity(1, 1), Matrix::Identity(1, 1), Vector::Zero(1));
  KalmanState st;
  st.pred_mean = Vector::Constant(1, 0.7);
  st.pred_cov = Matrix::Identity(1, 1) * 1.3;
  const KalmanState upd0 = kf_update(free_model, st, Vector::Constant(1, 5.0));
  CHECK((*upd0.upd_mean)[0] == doctest::Approx(0.7));
  CHECK((*upd0.upd_cov)(0, 0) == doctest::Approx(1.3));

  // Scalar worked example: P=1, prior mean 0, y=2 -> mean 1, covariance 1/2.
  st.pred_mean = Vector::Zero(1);
  st.pred_cov = Matrix::Identity(1, 1);
  const KalmanState upd = kf_update(kGolden, st, Vector::Constant(1, 2.0));
  CHECK((*upd.upd_mean)[0] == doctest::Approx(1.0));
  CHECK((*upd.upd_cov)(0, 0) == doctest::Approx(0.5));

  // Zero innovation leaves the mean untouched.
  const KalmanState noop = kf_update(kGolden, st, kGolden.b * st.pred_mean);
  CHECK((*noop.upd_mean)[0] == doctest::Approx(st.pred_mean[0]));
}

TEST_CASE("kf_predict") {
  KalmanState st;
  st.pred_mean = Vector::Zero(1);
  st.pred_cov = Matrix::Identity(1, 1);
  st.upd_mean = Vector::Constant(1, 1.0);
  st.upd_cov = Matrix::Identity(1, 1) * 0.5;

  const KalmanState next = kf_predict(kGolden, st);
  CHECK(next.step == st.step + 1);
  CHECK(next.pred_mean[0] == doctest::Approx(1.0));
  CHECK(next.pred_cov(0, 0) == doctest::Approx(1.5));

  // A = 0 and P^ = 0 both collapse the prediction to R.
  const ModelParams a0 =
      make_model(Matrix::Zero(1, 1), Matrix::Identity(1, 1), Matrix::Identity(1, 1) * 2.0,
                 Matrix::Identity(1, 1), Matrix::Identity(1, 1), Vector::Zero(1));
  CHECK(kf_predict(a0, st).pred_cov(0, 0) == doctest::Approx(2.0));
  st.upd_cov = Matrix::Zero(1, 1);
  CHECK(kf_predict(kGolden, st).pred_cov(0, 0) == doctest::Approx(1.0));

  KalmanState missing;
  missing.pred_mean = Vector::Zero(1);
  missing.pred_cov = Matrix::Identity(1, 1);
  CHECK_THROWS_AS(kf_predict(kGolden, missing), NumericalError);
}

TEST_CASE("kf_run") {
  // No observations: the initial predicted state only.
  const KalmanTrajectory empty = kf_run(kGolden, {});
  REQUIRE(empty.states.size() == 1);
  CHECK(empty.states[0].pred_mean[0] == doctest::Approx(0.0));
  CHECK(empty.states[0].pred_cov(0, 0) == doctest::Approx(1.0));
  CHECK_FALSE(empty.states[0].upd_mean.has_value());

  // Golden-ratio model: P_n converges to (1+sqrt(5))/2.
  std::vector<Vector> obs(51, Vector::Zero(1));
  const KalmanTrajectory traj = kf_run(kGolden, obs);
  const double phi = 0.5 * (1.0 + std::sqrt(5.0));
  CHECK(std::abs(traj.states.back().pred_cov(0, 0) - phi) < 1e-9);

  // Predicted covariances equal the Riccati orbit of P0, observation-free.
  Matrix p = kGolden.p0.mat();
  for (std::size_t n = 0; n < traj.states.size(); ++n) {
    CHECK(approx_rel(traj.states[n].pred_cov, p, 1e-9));
    p = riccati_map(kGolden, p);
  }

  // Covariances never depend on the observation sequence.
  RngStream s = RngStream::derive(24, "obs");
  std::vector<Vector> obs2;
  for (int i = 0; i < 51; ++i) obs2.push_back(Vector::Constant(1, s.next_normal()));
  std::vector<Vector> obs3 = obs2;
  std::reverse(obs3.begin(), obs3.end());
  const KalmanTrajectory t2 = kf_run(kGolden, obs2);
  const KalmanTrajectory t3 = kf_run(kGolden, obs3);
  for (std::size_t n = 0; n < t2.states.size(); ++n) {
    CHECK((t2.states[n].pred_cov - t3.states[n].pred_cov).norm() == doctest::Approx(0.0));
    CHECK((*t2.states[n].upd_cov - *t3.states[n].upd_cov).norm() == doctest::Approx(0.0));
  }

  // B = 0 reduces to the Lyapunov recursion A P A' + R.
  const ModelParams free_model =
      make_model(Matrix::Identity(2, 2) * 0.8, Matrix::Zero(1, 2),
                 Matrix::Identity(2, 2) * 0.5, Matrix::Identity(1, 1),
                 Matrix::Identity(2, 2), Vector::Zero(2));
  std::vector<Vector> obs4(11, Vector::Zero(1));
  const KalmanTrajectory t4 = kf_run(free_model, obs4);
  Matrix lyap = free_model.p0.mat();
  for (std::size_t n = 0; n < t4.states.size(); ++n) {
    CHECK(approx_rel(t4.states[n].pred_cov, lyap, 1e-10));
    lyap = free_model.a * lyap * free_model.a.transpose() + free_model.r.mat();
  }
}

TEST_CASE("trajectory state invariants") {
  RngStream s = RngStream::derive(27, "traj-inv");
  const ModelParams m = rand_model(s, 2);
  std::vector<Vector> obs;
  for (int i = 0; i < 20; ++i) obs.push_back(s.normal_vector(2));
  const KalmanTrajectory traj = kf_run(m, obs);
  for (std::size_t n = 0; n < traj.states.size(); ++n) {
    const KalmanState& st = traj.states[n];
    if (n >= 1) CHECK(loewner_leq(m.r.mat(), st.pred_cov, 1e-10));
    CHECK(loewner_leq(*st.upd_cov, st.pred_cov, 1e-10));
  }
}

TEST_CASE("square-root formula and gain identity") {
  RngStream s = RngStream::derive(25, "sqrt-formula");
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams m = rand_model_rect(s, 3, 2);
    const Matrix p = rand_spd(s, 3);
    const Matrix p_sqrt = principal_sqrt(p);
    const Matrix core =
        Matrix::Identity(3, 3) + p_sqrt * m.s.mat() * p_sqrt;
    const Matrix rhs = p_sqrt * core.inverse() * p_sqrt;
    CHECK(approx_rel(sym_part(update_factor(m, p) * p), sym_part(rhs), 1e-10));

    // (I - K(P) B)(I + P S) == I
    const Matrix gi = (Matrix::Identity(3, 3) - kalman_gain(m, p) * m.b) *
                      (Matrix::Identity(3, 3) + p * m.s.mat());
    CHECK(approx_rel(gi, Matrix::Identity(3, 3), 1e-10));

    // Sandwich P - P S P <= A^(P) P <= P.
    const Matrix fp = sym_part(update_factor(m, p) * p);
    CHECK(loewner_leq(p - p * m.s.mat() * p, fp, 1e-9));
    CHECK(loewner_leq(fp, p, 1e-9));
  }
}

TEST_CASE("joseph form agrees with the default update") {
  RngStream s = RngStream::derive(26, "joseph-flag");
  const ModelParams m = rand_model(s, 3);
  KalmanState st;
  st.pred_mean = s.normal_vector(3);
  st.pred_cov = rand_spd(s, 3);
  const Vector y = s.normal_vector(3);
  const KalmanState plain = kf_update(m, st, y);
  const KalmanState joseph = kf_update(m, st, y, {.joseph_form = true});
  CHECK(approx_rel(*joseph.upd_cov, *plain.upd_cov, 1e-11));
  CHECK((*joseph.upd_mean - *plain.upd_mean).norm() == doctest::Approx(0.0));
}

TEST_CASE("ill-conditioned innovation covariance is rejected") {
  Matrix b(2, 2);
  b << 1e8, 0, 0, 1;
  const ModelParams m =
      make_model(Matrix::Identity(2, 2), b, Matrix::Identity(2, 2),
                 Matrix::Identity(2, 2), Matrix::Identity(2, 2), Vector::Zero(2));
  CHECK_THROWS_AS(kalman_gain(m, Matrix::Identity(2, 2)), NumericalError);
}
