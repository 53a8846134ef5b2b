#ifndef ENKF_LAB_MODEL_HPP
#define ENKF_LAB_MODEL_HPP

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "enkf_lab/matrix.hpp"
#include "enkf_lab/rng.hpp"

namespace enkf_lab {

/// Linear-Gaussian signal/observation pair
///
///   X_{n+1} = A X_n + W_n,   W_n ~ N(0, R)
///   Y_n     = B X_n + V_n,   V_n ~ N(0, R0)
///   X_0     ~ N(x0_mean, P0)
///
/// with the derived sensor information matrix S = B' R0^{-1} B.
struct ModelParams {
  Matrix a;         // d x d transition
  Matrix b;         // d0 x d observation
  SpdMatrix r;      // process noise, PD
  SpdMatrix r0;     // observation noise, PD
  SpdMatrix p0;     // initial covariance, PD
  Vector x0_mean;   // initial mean
  SpdMatrix s;      // B' R0^{-1} B, PSD

  int dim() const { return static_cast<int>(a.rows()); }
  int obs_dim() const { return static_cast<int>(b.rows()); }
};

/// Build and validate a model: conformal shapes, positive definite noise, S
/// derived from (B, R0).  Throws ConfigError on violations.
ModelParams make_model(const Matrix& a, const Matrix& b, const Matrix& r,
                       const Matrix& r0, const Matrix& p0, const Vector& x0_mean);

/// Re-check an assembled ModelParams, including that the stored S matches a
/// recomputation from (B, R0) to 1e-12.
const ModelParams& validate(const ModelParams& params);

/// Scalar chain A=B=R=R0=P0=1.  Riccati fixed point is the golden ratio.
ModelParams golden_scalar_model();
/// Contractive variant (A = 0.9) satisfying ||S^{1/2} A S^{-1/2}||_2 < 1.
ModelParams contractive_scalar_model(double a = 0.9);

struct PathSample {
  std::vector<Vector> states;        // X_0 .. X_n
  std::vector<Vector> observations;  // Y_0 .. Y_n
  uint64_t seed = 0;
};

/// Simulate one trajectory of length n+1.  Deterministic given
/// (params, n, seed, generator version).
PathSample simulate_path(const ModelParams& params, int n, uint64_t seed);

/// Matrix of `cols` i.i.d. N(0, cov) columns drawn from `stream`.
Matrix sample_gaussian_matrix(int rows, int cols, const SpdMatrix& cov,
                              RngStream& stream);

/// JSON document with row-major fields a, b, r, r0, p0, x0_mean.
nlohmann::json model_to_json(const ModelParams& params);
ModelParams model_from_json(const nlohmann::json& j);

}  // namespace enkf_lab

#endif
