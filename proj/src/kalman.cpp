#include "enkf_lab/kalman.hpp"

#include <cmath>

#include "enkf_lab/report.hpp"

namespace enkf_lab {

namespace {

// One innovation-covariance factorization shared by gain, update factor and
// update noise within a step.
struct GainFactors {
  Matrix gain;           // K(P)
  Matrix update_factor;  // I - K(P) B
};

GainFactors factorize(const ModelParams& params, const Matrix& p) {
  const Matrix innov_cov = sym_part(params.b * p * params.b.transpose() + params.r0.mat());
  if (spd_condition_estimate(innov_cov) > 1e14)
    throw NumericalError("kalman_gain: innovation covariance condition estimate exceeds 1e14");
  Eigen::LLT<Matrix> llt(innov_cov);
  require(llt.info() == Eigen::Success, "kalman_gain: innovation covariance not PD");
  GainFactors f;
  f.gain = llt.solve(params.b * p.transpose()).transpose();
  f.update_factor = Matrix::Identity(p.rows(), p.cols()) - f.gain * params.b;
  return f;
}

}  // namespace

Matrix kalman_gain(const ModelParams& params, const Matrix& p) {
  return factorize(params, p).gain;
}

Matrix update_factor(const ModelParams& params, const Matrix& p) {
  return factorize(params, p).update_factor;
}

Matrix update_noise_cov(const ModelParams& params, const Matrix& p) {
  const Matrix k = kalman_gain(params, p);
  return sym_part(k * params.r0.mat() * k.transpose());
}

KalmanState kf_update(const ModelParams& params, const KalmanState& state,
                      const Vector& y, const KalmanOptions& opts) {
  require(y.size() == params.obs_dim(), "kf_update: observation dimension mismatch");
  const GainFactors f = factorize(params, state.pred_cov);
  KalmanState out = state;
  out.upd_mean = state.pred_mean + f.gain * (y - params.b * state.pred_mean);
  if (opts.joseph_form) {
    const Matrix noise = f.gain * params.r0.mat() * f.gain.transpose();
    out.upd_cov = sym_part(f.update_factor * state.pred_cov * f.update_factor.transpose() + noise);
  } else {
    out.upd_cov = sym_part(f.update_factor * state.pred_cov);
  }
  return out;
}

KalmanState kf_predict(const ModelParams& params, const KalmanState& state) {
  require(state.upd_mean && state.upd_cov, "kf_predict: state has no updated fields");
  KalmanState out;
  out.step = state.step + 1;
  out.pred_mean = params.a * (*state.upd_mean);
  out.pred_cov = sym_part(params.a * (*state.upd_cov) * params.a.transpose() + params.r.mat());
  return out;
}

KalmanTrajectory kf_run(const ModelParams& params, const std::vector<Vector>& observations,
                        const KalmanOptions& opts) {
  KalmanTrajectory traj;
  KalmanState state;
  state.step = 0;
  state.pred_mean = params.x0_mean;
  state.pred_cov = params.p0.mat();
  if (observations.empty()) {
    traj.states.push_back(state);
    return traj;
  }
  for (std::size_t n = 0; n < observations.size(); ++n) {
    traj.gains.push_back(kalman_gain(params, state.pred_cov));
    state = kf_update(params, state, observations[n], opts);
    traj.states.push_back(state);
    if (n + 1 < observations.size()) state = kf_predict(params, state);
  }
  return traj;
}

void write_trajectory_csv(std::ostream& os, const ModelParams& params,
                          const KalmanTrajectory& traj) {
  const int d = params.dim();
  const int d0 = params.obs_dim();
  CsvWriter csv(os);
  std::vector<std::string> header{"step"};
  for (int i = 0; i < d; ++i) header.push_back("pred_mean_" + std::to_string(i));
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      header.push_back("pred_cov_" + std::to_string(i) + "_" + std::to_string(j));
  for (int i = 0; i < d; ++i) header.push_back("upd_mean_" + std::to_string(i));
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      header.push_back("upd_cov_" + std::to_string(i) + "_" + std::to_string(j));
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d0; ++j)
      header.push_back("gain_" + std::to_string(i) + "_" + std::to_string(j));
  csv.header(header);

  for (std::size_t n = 0; n < traj.states.size(); ++n) {
    const KalmanState& st = traj.states[n];
    std::vector<double> row;
    row.push_back(static_cast<double>(st.step));
    for (int i = 0; i < d; ++i) row.push_back(st.pred_mean[i]);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) row.push_back(st.pred_cov(i, j));
    const bool has_upd = st.upd_mean.has_value();
    for (int i = 0; i < d; ++i)
      row.push_back(has_upd ? (*st.upd_mean)[i] : std::nan(""));
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        row.push_back(has_upd ? (*st.upd_cov)(i, j) : std::nan(""));
    const bool has_gain = n < traj.gains.size();
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d0; ++j)
        row.push_back(has_gain ? traj.gains[n](i, j) : std::nan(""));
    csv.row(row);
  }
}

}  // namespace enkf_lab
