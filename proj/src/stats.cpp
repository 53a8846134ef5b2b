#include "enkf_lab/stats.hpp"

#include <algorithm>
#include <cmath>

namespace enkf_lab {

double t_critical_975(int dof) {
  static const double table[] = {
      12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
      2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
      2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (dof < 1) throw NumericalError("t_critical_975: dof must be >= 1");
  if (dof <= 30) return table[dof - 1];
  if (dof <= 40) return 2.021;
  if (dof <= 60) return 2.000;
  if (dof <= 120) return 1.980;
  return 1.960;
}

SlopeFit fit_loglog_slope(const std::vector<double>& scales,
                          const std::vector<double>& values) {
  if (scales.size() != values.size())
    throw NumericalError("fit_loglog_slope: size mismatch");
  const int k = static_cast<int>(scales.size());
  if (k < 5) throw NumericalError("fit_loglog_slope: need at least 5 points");
  std::vector<double> x(k), y(k);
  for (int i = 0; i < k; ++i) {
    if (!(scales[i] > 0.0) || !(values[i] > 0.0))
      throw NumericalError("fit_loglog_slope: all points must be positive");
    x[i] = std::log(scales[i]);
    y[i] = std::log(values[i]);
  }
  double x_mean = 0.0, y_mean = 0.0;
  for (int i = 0; i < k; ++i) {
    x_mean += x[i];
    y_mean += y[i];
  }
  x_mean /= k;
  y_mean /= k;
  double sxx = 0.0, sxy = 0.0;
  for (int i = 0; i < k; ++i) {
    sxx += (x[i] - x_mean) * (x[i] - x_mean);
    sxy += (x[i] - x_mean) * (y[i] - y_mean);
  }
  if (sxx <= 0.0) throw NumericalError("fit_loglog_slope: degenerate abscissae");

  SlopeFit fit;
  fit.points = k;
  fit.slope = sxy / sxx;
  fit.intercept = y_mean - fit.slope * x_mean;
  double rss = 0.0;
  for (int i = 0; i < k; ++i) {
    const double resid = y[i] - (fit.intercept + fit.slope * x[i]);
    rss += resid * resid;
  }
  fit.slope_se = std::sqrt(rss / (k - 2) / sxx);
  fit.ci_half_width = t_critical_975(k - 2) * fit.slope_se;
  return fit;
}

KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw NumericalError("ks_two_sample: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double xa = a[i];
    const double xb = b[j];
    if (xa <= xb) ++i;
    if (xb <= xa) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }

  KsResult res;
  res.statistic = d;
  const double ne = std::sqrt(na * nb / (na + nb));
  const double lambda = (ne + 0.12 + 0.11 / ne) * d;
  // Asymptotic Kolmogorov tail, alternating series.
  double p = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    p += 2.0 * sign * term;
    sign = -sign;
    if (term < 1e-12) break;
  }
  res.p_value = std::clamp(p, 0.0, 1.0);
  return res;
}

namespace {

double log_det_spd(const Matrix& m) {
  Eigen::LLT<Matrix> llt(sym_part(m));
  if (llt.info() != Eigen::Success)
    throw NumericalError("log_det_spd: matrix is not positive definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

}  // namespace

LawTestResult matrix_law_test(const std::vector<Matrix>& a, const std::vector<Matrix>& b,
                              bool positive_definite, double alpha) {
  LawTestResult out;
  out.functional = positive_definite
                       ? std::vector<std::string>{"trace", "log_det", "lambda_max"}
                       : std::vector<std::string>{"trace", "frobenius", "lambda_max"};
  const double level = alpha / static_cast<double>(out.functional.size());
  for (std::size_t f = 0; f < out.functional.size(); ++f) {
    auto eval = [&](const Matrix& m) {
      switch (f) {
        case 0: return m.trace();
        case 1: return positive_definite ? log_det_spd(m) : m.norm();
        default: return max_eigenvalue(m);
      }
    };
    std::vector<double> fa, fb;
    fa.reserve(a.size());
    fb.reserve(b.size());
    for (const Matrix& m : a) fa.push_back(eval(m));
    for (const Matrix& m : b) fb.push_back(eval(m));
    KsResult ks = ks_two_sample(std::move(fa), std::move(fb));
    if (ks.p_value < level) out.pass = false;
    out.tests.push_back(ks);
  }
  return out;
}

void RunningMoments::add(double x) {
  ++n_;
  const double delta = x - mean_;
  mean_ += delta / n_;
  m2_ += delta * (x - mean_);
}

double RunningMoments::variance() const { return n_ > 1 ? m2_ / (n_ - 1) : 0.0; }

double RunningMoments::standard_error() const {
  return n_ > 0 ? std::sqrt(variance() / n_) : 0.0;
}

void MatrixMoments::add(const Matrix& x) {
  if (n_ == 0) {
    mean_ = Matrix::Zero(x.rows(), x.cols());
    m2_ = Matrix::Zero(x.rows(), x.cols());
  }
  ++n_;
  const Matrix delta = x - mean_;
  mean_ += delta / n_;
  m2_ += delta.cwiseProduct(x - mean_);
}

Matrix MatrixMoments::mean() const { return mean_; }

Matrix MatrixMoments::variance() const {
  if (n_ < 2) return Matrix::Zero(mean_.rows(), mean_.cols());
  return m2_ / (n_ - 1);
}

double MatrixMoments::max_standard_error() const {
  if (n_ < 2) return 0.0;
  return std::sqrt(variance().maxCoeff() / n_);
}

}  // namespace enkf_lab
