#include "enkf_lab/matrix.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>

namespace enkf_lab {

void require(bool cond, const std::string& what) {
  if (!cond) throw NumericalError(what);
}

Matrix sym_part(const Matrix& a) {
  require(a.rows() == a.cols(), "sym_part: matrix must be square");
  return 0.5 * (a + a.transpose());
}

Vector symmetric_eigenvalues(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
  require(es.info() == Eigen::Success, "symmetric eigensolver failed");
  return es.eigenvalues();
}

double min_eigenvalue(const Matrix& s) { return symmetric_eigenvalues(s).minCoeff(); }
double max_eigenvalue(const Matrix& s) { return symmetric_eigenvalues(s).maxCoeff(); }

double pd_tolerance(const Matrix& s) {
  return 1e-10 * (1.0 + max_eigenvalue(s));
}

SpdMatrix SpdMatrix::from(const Matrix& a, Definiteness want) {
  Matrix sym = sym_part(a);
  const Vector eig = symmetric_eigenvalues(sym);
  const double tol = 1e-10 * (1.0 + eig.maxCoeff());
  if (want == Definiteness::PositiveDefinite) {
    if (eig.minCoeff() <= tol)
      throw NumericalError("SpdMatrix: matrix is not positive definite (lambda_min = " +
                           std::to_string(eig.minCoeff()) + ")");
  } else {
    if (eig.minCoeff() < -tol)
      throw NumericalError("SpdMatrix: matrix is not positive semidefinite (lambda_min = " +
                           std::to_string(eig.minCoeff()) + ")");
  }
  SpdMatrix out;
  out.m_ = std::move(sym);
  out.tag_ = want;
  return out;
}

SpdMatrix SpdMatrix::from_sym_unchecked(Matrix a, Definiteness tag) {
  SpdMatrix out;
  out.m_ = std::move(a);
  out.tag_ = tag;
  return out;
}

Matrix principal_sqrt(const Matrix& s) {
  require(s.rows() == s.cols(), "principal_sqrt: matrix must be square");
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym_part(s));
  require(es.info() == Eigen::Success, "principal_sqrt: eigensolver failed");
  Vector eig = es.eigenvalues();
  const double tol = 1e-10 * (1.0 + eig.maxCoeff());
  for (int i = 0; i < eig.size(); ++i) {
    if (eig[i] < -tol)
      throw NumericalError("principal_sqrt: input is not PSD (lambda_min = " +
                           std::to_string(eig[i]) + ")");
    if (eig[i] < 0.0) eig[i] = 0.0;  // round-off drift must not fabricate definiteness
  }
  Matrix root = es.eigenvectors() * eig.cwiseSqrt().asDiagonal() *
                es.eigenvectors().transpose();
  return sym_part(root);
}

bool loewner_leq(const Matrix& s1, const Matrix& s2, double tol) {
  require(s1.rows() == s2.rows() && s1.cols() == s2.cols(),
          "loewner_leq: dimension mismatch");
  return min_eigenvalue(sym_part(s2 - s1)) >= -tol;
}

double spectral_radius(const Matrix& a) {
  require(a.rows() == a.cols(), "spectral_radius: matrix must be square");
  if (a.rows() == 0) return 0.0;
  Eigen::EigenSolver<Matrix> es(a, /*computeEigenvectors=*/false);
  require(es.info() == Eigen::Success, "spectral_radius: eigensolver did not converge");
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double spectral_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  // sqrt(lambda_max(a a')); go through the smaller Gram matrix.
  const Matrix gram = (a.rows() <= a.cols()) ? Matrix(a * a.transpose())
                                             : Matrix(a.transpose() * a);
  return std::sqrt(std::max(0.0, max_eigenvalue(sym_part(gram))));
}

double frobenius_norm(const Matrix& a) { return a.norm(); }

double matrix_norm(const Matrix& a, MatrixNorm kind) {
  return kind == MatrixNorm::Spectral ? spectral_norm(a) : frobenius_norm(a);
}

Matrix woodbury_inverse(const Matrix& m, const Matrix& u, const Matrix& n,
                        const Matrix& v) {
  require(m.rows() == m.cols() && n.rows() == n.cols(), "woodbury: m, n must be square");
  require(u.rows() == m.rows() && v.cols() == m.cols() && u.cols() == n.rows() &&
              v.rows() == n.cols(),
          "woodbury: non-conformal shapes");
  Eigen::PartialPivLU<Matrix> m_lu(m);
  require(std::abs(m_lu.determinant()) > 0.0, "woodbury: singular m");
  Eigen::PartialPivLU<Matrix> n_lu(n);
  require(std::abs(n_lu.determinant()) > 0.0, "woodbury: singular n");
  const Matrix m_inv_u = m_lu.solve(u);
  const Matrix v_m_inv = m_lu.solve(v.transpose()).transpose();
  const Matrix core = n_lu.inverse() + v * m_inv_u;
  return m_lu.inverse() - m_inv_u * Eigen::PartialPivLU<Matrix>(core).solve(v_m_inv);
}

Matrix spd_inverse(const Matrix& s) {
  Eigen::LLT<Matrix> llt(sym_part(s));
  require(llt.info() == Eigen::Success, "spd_inverse: matrix is not positive definite");
  return sym_part(llt.solve(Matrix::Identity(s.rows(), s.cols())));
}

double spd_condition_estimate(const Matrix& s) {
  const Vector eig = symmetric_eigenvalues(sym_part(s));
  const double lo = eig.minCoeff();
  const double hi = eig.maxCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

}  // namespace enkf_lab
