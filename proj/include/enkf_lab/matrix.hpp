#ifndef ENKF_LAB_MATRIX_HPP
#define ENKF_LAB_MATRIX_HPP

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace enkf_lab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Invalid configuration, shapes, or violated model hypotheses.  CLI exit 2.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Numerical breakdown (non-PSD input, ill conditioning, divergence).  CLI exit 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Definiteness { PositiveDefinite, PositiveSemidefinite };

/// Definiteness tolerance used throughout: 1e-10 * (1 + lambda_max(s)).
double pd_tolerance(const Matrix& s);

/// Symmetric part (a + a')/2.  Throws NumericalError on non-square input.
Matrix sym_part(const Matrix& a);

/// Symmetric positive (semi-)definite matrix with certified invariants.
///
/// Construction symmetrizes the entries exactly and verifies the spectrum:
/// eigenvalues below -pd_tolerance are rejected, small negative eigenvalues
/// are accepted (semidefinite tag) or rejected (definite tag).  Values are
/// immutable once built and freely shareable across threads.
class SpdMatrix {
 public:
  SpdMatrix() = default;

  /// Symmetrize, check the spectrum against `want`, and wrap.
  static SpdMatrix from(const Matrix& a,
                        Definiteness want = Definiteness::PositiveSemidefinite);

  /// Wrap an already-symmetrized matrix without a spectral check.  For hot
  /// sampling loops whose output is PSD by construction (outer products).
  static SpdMatrix from_sym_unchecked(Matrix a, Definiteness tag);

  const Matrix& mat() const { return m_; }
  int dim() const { return static_cast<int>(m_.rows()); }
  Definiteness tag() const { return tag_; }
  bool positive_definite() const { return tag_ == Definiteness::PositiveDefinite; }

 private:
  Matrix m_;
  Definiteness tag_ = Definiteness::PositiveSemidefinite;
};

/// Ascending eigenvalues of a symmetric matrix (tridiagonalization + QR).
Vector symmetric_eigenvalues(const Matrix& s);

double min_eigenvalue(const Matrix& s);
double max_eigenvalue(const Matrix& s);

/// Principal symmetric square root of a PSD matrix.  Eigenvalues in
/// [-pd_tolerance, 0) are clamped to zero before the root; anything below
/// that is a NumericalError.
Matrix principal_sqrt(const Matrix& s);

/// Loewner order test: s1 <= s2 iff lambda_min(s2 - s1) >= -tol.
bool loewner_leq(const Matrix& s1, const Matrix& s2, double tol = 0.0);

/// Largest eigenvalue modulus over the (possibly complex) spectrum.
double spectral_radius(const Matrix& a);

double spectral_norm(const Matrix& a);
double frobenius_norm(const Matrix& a);

enum class MatrixNorm { Spectral, Frobenius };
double matrix_norm(const Matrix& a, MatrixNorm kind);

/// (m + u n v)^{-1} through the Sherman-Morrison-Woodbury identity.
/// Requires m, n invertible and conformal shapes.
Matrix woodbury_inverse(const Matrix& m, const Matrix& u, const Matrix& n,
                        const Matrix& v);

/// Inverse of a strictly positive definite matrix via Cholesky solves.
Matrix spd_inverse(const Matrix& s);

/// lambda_max / lambda_min of a symmetric PD matrix; infinity when singular.
double spd_condition_estimate(const Matrix& s);

void require(bool cond, const std::string& what);

}  // namespace enkf_lab

#endif
