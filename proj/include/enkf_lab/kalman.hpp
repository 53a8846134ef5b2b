#ifndef ENKF_LAB_KALMAN_HPP
#define ENKF_LAB_KALMAN_HPP

#include <optional>
#include <ostream>
#include <vector>

#include "enkf_lab/model.hpp"

namespace enkf_lab {

/// Gain K(P) = P B' (B P B' + R0)^{-1}, via a Cholesky solve of the
/// innovation covariance.  Throws NumericalError when the innovation
/// covariance condition estimate exceeds 1e14.
Matrix kalman_gain(const ModelParams& params, const Matrix& p);

/// Update factor (I + P S)^{-1} == I - K(P) B.
Matrix update_factor(const ModelParams& params, const Matrix& p);

/// Covariance K(P) R0 K(P)' of the update noise; the second term of the
/// Joseph form  update_factor(P) P = A^(P) P A^(P)' + R^(P).
Matrix update_noise_cov(const ModelParams& params, const Matrix& p);

struct KalmanState {
  int step = 0;
  Vector pred_mean;
  Matrix pred_cov;
  std::optional<Vector> upd_mean;
  std::optional<Matrix> upd_cov;
};

struct KalmanOptions {
  /// Compute the updated covariance in Joseph form A^ P A^' + R^ instead of
  /// the default symmetrized A^(P) P.  Both agree to round-off.
  bool joseph_form = false;
};

/// Observation update: mean gains K(P) (y - B x), covariance contracts to
/// update_factor(P) P.
KalmanState kf_update(const ModelParams& params, const KalmanState& state,
                      const Vector& y, const KalmanOptions& opts = {});

/// Time update: x -> A x, P -> A P A' + R.
KalmanState kf_predict(const ModelParams& params, const KalmanState& state);

struct KalmanTrajectory {
  std::vector<KalmanState> states;
  std::vector<Matrix> gains;  // K(P_n), empty slot when no update happened
};

/// Run the filter from (x0_mean, P0) over the given observations.  The
/// covariance sequence is the Riccati orbit of P0 and never depends on y.
KalmanTrajectory kf_run(const ModelParams& params, const std::vector<Vector>& observations,
                        const KalmanOptions& opts = {});

/// CSV export: step, pred_mean[*], pred_cov[*,*] row-major, upd_mean[*],
/// upd_cov[*,*], gain[*,*].
void write_trajectory_csv(std::ostream& os, const ModelParams& params,
                          const KalmanTrajectory& traj);

}  // namespace enkf_lab

#endif
