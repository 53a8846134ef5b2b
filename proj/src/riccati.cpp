#include "enkf_lab/riccati.hpp"

#include <nlohmann/json.hpp>

namespace enkf_lab {

namespace {

// (I + P S)^{-1} without assuming S invertible.
Matrix damping(const Matrix& p, const Matrix& s) {
  const int d = static_cast<int>(p.rows());
  return Eigen::PartialPivLU<Matrix>(Matrix::Identity(d, d) + p * s)
      .solve(Matrix::Identity(d, d));
}

Matrix riccati_map_general(const Matrix& a, const Matrix& s, const Matrix& r,
                           const Matrix& p) {
  return sym_part(a * damping(p, s) * p * a.transpose() + r);
}

}  // namespace

Matrix riccati_map(const ModelParams& params, const Matrix& p) {
  return riccati_map_general(params.a, params.s.mat(), params.r.mat(), p);
}

Matrix riccati_iterate(const ModelParams& params, const Matrix& p, int n) {
  require(n >= 0, "riccati_iterate: n must be >= 0");
  Matrix out = p;
  for (int k = 0; k < n; ++k) out = riccati_map(params, out);
  return out;
}

Matrix closed_loop(const ModelParams& params, const Matrix& p) {
  return params.a * damping(p, params.s.mat());
}

Matrix info_map(const ModelParams& params, const Matrix& p) {
  const Matrix s_sqrt = principal_sqrt(params.s.mat());
  const int d = params.dim();
  const Matrix core = Matrix::Identity(d, d) + s_sqrt * p * s_sqrt;
  const Matrix inv = Eigen::LLT<Matrix>(sym_part(core)).solve(Matrix::Identity(d, d));
  return sym_part(s_sqrt * inv * s_sqrt);
}

namespace {

Matrix fixed_point_of(const Matrix& a, const Matrix& s, const Matrix& r, double tol,
                      int max_iter, int* iterations) {
  const int d = static_cast<int>(a.rows());
  Matrix p = Matrix::Zero(d, d);
  for (int it = 1; it <= max_iter; ++it) {
    const Matrix next = riccati_map_general(a, s, r, p);
    const double residual = (next - p).norm();
    p = next;
    if (residual <= tol * (1.0 + p.norm())) {
      if (iterations) *iterations = it;
      return p;
    }
  }
  throw NumericalError("solve_fixed_point: no convergence within max_iter");
}

}  // namespace

RiccatiContext solve_fixed_point(const ModelParams& params, double tol, int max_iter) {
  RiccatiContext ctx;
  ctx.params = params;
  ctx.fixed_point = fixed_point_of(params.a, params.s.mat(), params.r.mat(), tol,
                                   max_iter, &ctx.iterations);
  ctx.closed_loop_matrix = closed_loop(params, ctx.fixed_point);
  ctx.rho = spectral_radius(ctx.closed_loop_matrix);
  if (!(ctx.rho < 1.0))
    throw ConfigError("solve_fixed_point: model is not stabilizable (rho = " +
                      std::to_string(ctx.rho) + " >= 1)");
  ctx.fixed_point_dual = fixed_point_of(params.a.transpose(), params.r.mat(),
                                        params.s.mat(), tol, max_iter, nullptr);
  ctx.grammian_limit =
      sym_part(spd_inverse(ctx.fixed_point + spd_inverse(ctx.fixed_point_dual)));
  ctx.info_at_fp = info_map(params, ctx.fixed_point);
  return ctx;
}

Matrix closed_loop_product(const ModelParams& params, const Matrix& p, int n) {
  require(n >= 0, "closed_loop_product: n must be >= 0");
  const int d = params.dim();
  Matrix product = Matrix::Identity(d, d);
  Matrix orbit = p;
  for (int k = 0; k < n; ++k) {
    product = closed_loop(params, orbit) * product;  // left-multiply along the orbit
    if (k + 1 < n) orbit = riccati_map(params, orbit);
  }
  return product;
}

Matrix grammian(const RiccatiContext& ctx, int n) {
  require(n >= 1, "grammian: n must be >= 1");
  const int d = ctx.params.dim();
  Matrix sum = Matrix::Zero(d, d);
  Matrix power = Matrix::Identity(d, d);  // closed_loop^k
  for (int k = 0; k < n; ++k) {
    sum += power.transpose() * ctx.info_at_fp * power;
    if (k + 1 < n) power = ctx.closed_loop_matrix * power;
  }
  return sym_part(sum);
}

Matrix floquet_correction(const RiccatiContext& ctx, const Matrix& p, int n) {
  const int d = ctx.params.dim();
  return Matrix::Identity(d, d) + (p - ctx.fixed_point) * grammian(ctx, n);
}

Matrix floquet_correction_inverse(const RiccatiContext& ctx, const Matrix& p, int n) {
  const Matrix g = grammian(ctx, n);
  Eigen::LLT<Matrix> llt(g);
  if (llt.info() != Eigen::Success)
    throw NumericalError("floquet_correction_inverse: singular Grammian (S must be PD)");
  const Matrix g_inv = sym_part(llt.solve(Matrix::Identity(g.rows(), g.cols())));
  const Matrix shifted = sym_part(p + (g_inv - ctx.fixed_point));
  Eigen::LLT<Matrix> llt2(shifted);
  if (llt2.info() != Eigen::Success)
    throw NumericalError("floquet_correction_inverse: correction is singular");
  return g_inv * llt2.solve(Matrix::Identity(g.rows(), g.cols()));
}

Matrix closed_loop_product_floquet(const RiccatiContext& ctx, const Matrix& p, int n) {
  require(n >= 0, "closed_loop_product_floquet: n must be >= 0");
  const int d = ctx.params.dim();
  if (n == 0) return Matrix::Identity(d, d);
  Matrix power = Matrix::Identity(d, d);
  for (int k = 0; k < n; ++k) power = ctx.closed_loop_matrix * power;
  return power * floquet_correction_inverse(ctx, p, n);
}

ProductExpansion product_expansion(const RiccatiContext& ctx, const Matrix& p,
                                   const Matrix& q, int n) {
  require(n >= 1, "product_expansion: n must be >= 1");
  const Matrix h = q - p;
  const Matrix kernel = grammian(ctx, n) * floquet_correction_inverse(ctx, p, n);
  const Matrix prod_p = closed_loop_product(ctx.params, p, n);
  const Matrix prod_q = closed_loop_product(ctx.params, q, n);
  ProductExpansion out;
  out.first = -prod_p * h * kernel;
  out.remainder = prod_q * h * kernel * h * kernel;
  return out;
}

nlohmann::json riccati_context_to_json(const RiccatiContext& ctx) {
  auto mat = [](const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < m.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  nlohmann::json j;
  j["p_inf"] = mat(ctx.fixed_point);
  j["p_inf_dual"] = mat(ctx.fixed_point_dual);
  j["rho"] = ctx.rho;
  j["iterations"] = ctx.iterations;
  return j;
}

}  // namespace enkf_lab
