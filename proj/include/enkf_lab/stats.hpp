#ifndef ENKF_LAB_STATS_HPP
#define ENKF_LAB_STATS_HPP

#include <string>
#include <vector>

#include "enkf_lab/matrix.hpp"

namespace enkf_lab {

/// Ordinary least squares of log(value) on log(scale) with a 95% slope
/// confidence interval from the residual variance (Student t).
struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
  double ci_half_width = 0.0;  // 95%
  int points = 0;
};
SlopeFit fit_loglog_slope(const std::vector<double>& scales,
                          const std::vector<double>& values);

/// Two-sided 97.5% Student t critical value (95% two-sided interval).
double t_critical_975(int dof);

/// Two-sample Kolmogorov-Smirnov: max CDF distance and the asymptotic
/// p-value with the Stephens small-sample correction.
struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);

/// Standardized law-equality protocol: KS on scalar functionals of the
/// matrix samples at overall level alpha with a Bonferroni split.
/// PD samples use (trace, log-det, lambda_max); general symmetric samples
/// use (trace, frobenius, lambda_max).
struct LawTestResult {
  bool pass = true;
  std::vector<std::string> functional;
  std::vector<KsResult> tests;
};
LawTestResult matrix_law_test(const std::vector<Matrix>& a, const std::vector<Matrix>& b,
                              bool positive_definite, double alpha = 0.01);

/// Streaming mean/variance in deterministic accumulation order.
class RunningMoments {
 public:
  void add(double x);
  long count() const { return n_; }
  double mean() const { return n_ ? mean_ : 0.0; }
  double variance() const;  // unbiased
  double standard_error() const;

 private:
  long n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

/// Entrywise running moments of equally sized matrices.
class MatrixMoments {
 public:
  void add(const Matrix& x);
  long count() const { return n_; }
  Matrix mean() const;
  Matrix variance() const;
  /// Largest entrywise standard error of the mean.
  double max_standard_error() const;

 private:
  long n_ = 0;
  Matrix mean_;
  Matrix m2_;
};

}  // namespace enkf_lab

#endif
