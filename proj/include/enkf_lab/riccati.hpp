#ifndef ENKF_LAB_RICCATI_HPP
#define ENKF_LAB_RICCATI_HPP

#include <nlohmann/json_fwd.hpp>

#include "enkf_lab/model.hpp"

namespace enkf_lab {

/// One-step predictor covariance evolution Phi(P) = A (I + P S)^{-1} P A' + R,
/// symmetrized.  Strictly PD for any PSD input when R > 0.
Matrix riccati_map(const ModelParams& params, const Matrix& p);

/// n-fold composition of riccati_map; n = 0 is the identity.
Matrix riccati_iterate(const ModelParams& params, const Matrix& p, int n);

/// Closed-loop transition A (I + P S)^{-1} at covariance P.
Matrix closed_loop(const ModelParams& params, const Matrix& p);

/// Damped information matrix S (I + P S)^{-1}, computed through the
/// symmetric sandwich S^{1/2} (I + S^{1/2} P S^{1/2})^{-1} S^{1/2}.
Matrix info_map(const ModelParams& params, const Matrix& p);

/// Stationary data for a stabilizable model: the Riccati fixed point, its
/// dual, the closed-loop matrix and its spectral radius, and the limiting
/// Grammian.  Immutable once built; safe for concurrent use.
struct RiccatiContext {
  ModelParams params;
  Matrix fixed_point;        // P_inf, Phi(P_inf) = P_inf
  Matrix fixed_point_dual;   // fixed point with (A, R, S) -> (A', S, R)
  Matrix closed_loop_matrix; // closed_loop(P_inf)
  double rho = 0.0;          // spectral radius of the closed loop, < 1
  Matrix grammian_limit;     // (P_inf + dual^{-1})^{-1}
  Matrix info_at_fp;         // info_map(P_inf)
  int iterations = 0;
};

/// Iterate Phi from P = 0 (monotone increasing) until the residual
/// ||Phi(P) - P||_F drops below tol * (1 + ||P||_F); verifies rho < 1.
/// Throws NumericalError when max_iter is exceeded and ConfigError when the
/// limit is not stabilizing (rho >= 1).
RiccatiContext solve_fixed_point(const ModelParams& params, double tol = 1e-12,
                                 int max_iter = 100000);

/// Directed product of closed-loop matrices along the Riccati orbit of p:
/// closed_loop(P_{n-1}) ... closed_loop(P_1) closed_loop(p); n = 0 gives I.
Matrix closed_loop_product(const ModelParams& params, const Matrix& p, int n);

/// Observability-type Grammian sum_{k<n} (E^k)' info_at_fp E^k over powers E
/// of the closed loop; n >= 1.
Matrix grammian(const RiccatiContext& ctx, int n);

/// Floquet correction I + (P - P_inf) G_n and its inverse via the
/// factorization G_n^{-1} (P + (G_n^{-1} - P_inf))^{-1}; requires S > 0.
Matrix floquet_correction(const RiccatiContext& ctx, const Matrix& p, int n);
Matrix floquet_correction_inverse(const RiccatiContext& ctx, const Matrix& p, int n);

/// closed_loop(P_inf)^n * floquet_correction_inverse(p, n); equals
/// closed_loop_product(p, n) to round-off.
Matrix closed_loop_product_floquet(const RiccatiContext& ctx, const Matrix& p, int n);

/// First/second-order decomposition of the directed product around P:
///   product(Q) - product(P) = first + remainder   (exactly)
/// with first  = -product(P) (Q-P) G_n correction_inv(P)
/// and remainder = product(Q) (Q-P) G_n correction_inv(P) (Q-P) G_n correction_inv(P).
struct ProductExpansion {
  Matrix first;
  Matrix remainder;
};
ProductExpansion product_expansion(const RiccatiContext& ctx, const Matrix& p,
                                   const Matrix& q, int n);

/// Context dump (fixed points, rho, iterations) for experiment manifests.
nlohmann::json riccati_context_to_json(const RiccatiContext& ctx);

}  // namespace enkf_lab

#endif
