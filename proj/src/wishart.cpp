#include "enkf_lab/wishart.hpp"

#include <cmath>

#include "enkf_lab/report.hpp"

namespace enkf_lab {

Matrix gram_fluctuation(const Matrix& z_block) {
  const int n = static_cast<int>(z_block.cols());
  require(n >= 1, "gram_fluctuation: need at least one column");
  const int d = static_cast<int>(z_block.rows());
  const Matrix gram = z_block * z_block.transpose();
  return sym_part((gram - static_cast<double>(n) * Matrix::Identity(d, d)) /
                  std::sqrt(static_cast<double>(n)));
}

namespace {

// Canonical representative z with z z'/N equal to the non-centrality:
// sqrt(N) [q^{1/2} | 0] when N >= d, a rank-truncated eigenfactor otherwise.
Matrix canonical_noncentrality_block(const Matrix& nc_sqrt, int dof) {
  const int d = static_cast<int>(nc_sqrt.rows());
  const double root_n = std::sqrt(static_cast<double>(dof));
  Matrix z = Matrix::Zero(d, dof);
  if (dof >= d) {
    z.leftCols(d) = root_n * nc_sqrt;
    return z;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(nc_sqrt);
  require(es.info() == Eigen::Success, "noncentrality eigensolver failed");
  // Columns sqrt(N * lambda_j) v_j for the largest roots; exact only when the
  // non-centrality has rank <= N.
  int used = 0;
  for (int j = d - 1; j >= 0 && used < dof; --j, ++used) {
    const double root = es.eigenvalues()[j];
    z.col(used) = root_n * root * es.eigenvectors().col(j);
  }
  const Matrix q = nc_sqrt * nc_sqrt;
  if ((z * z.transpose() / dof - q).norm() > 1e-10 * (1.0 + q.norm()))
    throw NumericalError(
        "sample_noncentral_wishart: non-centrality rank exceeds dof (N < d)");
  return z;
}

}  // namespace

namespace detail {

Matrix noncentral_wishart(const Matrix& nc_sqrt, const Matrix& scale_sqrt, int dof,
                          RngStream& stream) {
  const int d = static_cast<int>(nc_sqrt.rows());
  const Matrix z = canonical_noncentrality_block(nc_sqrt, dof);
  const Matrix sum = z + scale_sqrt * stream.normal_matrix(d, dof);
  return sym_part(sum * sum.transpose() / static_cast<double>(dof));
}

Matrix fluctuation_delta(const Matrix& nc_sqrt, const Matrix& scale_sqrt, int dof,
                         RngStream& stream) {
  const int d = static_cast<int>(nc_sqrt.rows());
  const Matrix block = stream.normal_matrix(d, dof);
  const Matrix h = gram_fluctuation(block);
  const Matrix g = block.leftCols(d);
  return sym_part(scale_sqrt * h * scale_sqrt) +
         2.0 * sym_part(scale_sqrt * g * nc_sqrt);
}

}  // namespace detail

SpdMatrix sample_noncentral_wishart(const WishartParams& wp, RngStream& stream) {
  require(wp.dof >= 1, "sample_noncentral_wishart: dof must be >= 1");
  require(wp.scale.dim() == wp.dim && wp.noncentrality_sqrt.dim() == wp.dim,
          "sample_noncentral_wishart: dimension mismatch");
  const Matrix scale_sqrt = principal_sqrt(wp.scale.mat());
  const Matrix sample =
      detail::noncentral_wishart(wp.noncentrality_sqrt.mat(), scale_sqrt, wp.dof, stream);
  const Definiteness tag = (wp.dof >= wp.dim && wp.scale.positive_definite())
                               ? Definiteness::PositiveDefinite
                               : Definiteness::PositiveSemidefinite;
  return SpdMatrix::from_sym_unchecked(sample, tag);
}

FluctuationDraw draw_fluctuation(const WishartParams& wp, RngStream& stream) {
  require(wp.dof >= wp.dim, "draw_fluctuation: dof must be >= dim");
  const int d = wp.dim;
  const int n = wp.dof;
  const Matrix block = stream.normal_matrix(d, n);
  const Matrix scale_sqrt = principal_sqrt(wp.scale.mat());

  FluctuationDraw draw;
  draw.h_matrix = gram_fluctuation(block);
  draw.g_block = block.leftCols(d);
  if (n > d) {
    const Matrix tail_block = block.rightCols(n - d);
    draw.h_tail = gram_fluctuation(tail_block);
  } else {
    draw.h_tail = Matrix::Zero(d, d);
  }
  draw.delta = sym_part(scale_sqrt * draw.h_matrix * scale_sqrt) +
               2.0 * sym_part(scale_sqrt * draw.g_block * wp.noncentrality_sqrt.mat());
  return draw;
}

Matrix fluctuation_second_moment(const WishartParams& wp) {
  const Matrix& r = wp.scale.mat();
  const Matrix q = wp.noncentrality_sqrt.mat() * wp.noncentrality_sqrt.mat();
  return r * r + r.trace() * r + q * r + r * q + r.trace() * q + q.trace() * r;
}

GramSplit gram_fluctuation_split(const Matrix& z_block) {
  const int d = static_cast<int>(z_block.rows());
  const int n = static_cast<int>(z_block.cols());
  require(n > d, "gram_fluctuation_split: need more columns than rows");
  GramSplit split;
  split.tail = gram_fluctuation(z_block.rightCols(n - d));
  const Matrix head = gram_fluctuation(z_block.leftCols(d));
  const double ratio = static_cast<double>(n) / d;
  split.mix = head - split.tail / (std::sqrt(ratio - 1.0) + std::sqrt(ratio));
  return split;
}

InverseMomentBounds inverse_moment_bounds(const WishartParams& wp) {
  require(wp.dof > 2 * wp.dim + 1, "inverse_moment_bounds: need N > 2d + 1");
  require(wp.scale.positive_definite(), "inverse_moment_bounds: scale must be PD");
  const Matrix q = wp.noncentrality_sqrt.mat() * wp.noncentrality_sqrt.mat();
  InverseMomentBounds out;
  out.lower = spd_inverse(q + wp.scale.mat());
  out.upper = spd_inverse(wp.scale.mat()) /
              (1.0 - (2.0 * wp.dim + 1.0) / static_cast<double>(wp.dof));
  return out;
}

Matrix helmert(int n) {
  require(n >= 2, "helmert: need n >= 2");
  Matrix o = Matrix::Zero(n, n);
  o.row(0).setConstant(1.0 / std::sqrt(static_cast<double>(n)));
  for (int i = 2; i <= n; ++i) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(i) * (i - 1));
    for (int j = 1; j < i; ++j) o(i - 1, j - 1) = scale;
    o(i - 1, i - 1) = -(i - 1) * scale;
  }
  return o;
}

Vector column_mean(const Matrix& x) { return x.rowwise().mean(); }

Matrix normalized_sample_cov(const Matrix& x) {
  const int n = static_cast<int>(x.cols()) - 1;
  require(n >= 1, "normalized_sample_cov: need at least two columns");
  const Vector mu = column_mean(x);
  const Matrix centered = x.colwise() - mu;
  return sym_part(centered * centered.transpose() / static_cast<double>(n));
}

void write_draws_csv(std::ostream& os, const std::vector<Matrix>& draws) {
  CsvWriter csv(os);
  if (draws.empty()) return;
  const int rows = static_cast<int>(draws.front().rows());
  const int cols = static_cast<int>(draws.front().cols());
  std::vector<std::string> header{"draw"};
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      header.push_back("m_" + std::to_string(i) + "_" + std::to_string(j));
  csv.header(header);
  for (std::size_t k = 0; k < draws.size(); ++k) {
    require(draws[k].rows() == rows && draws[k].cols() == cols,
            "write_draws_csv: inconsistent draw shapes");
    std::vector<double> row{static_cast<double>(k)};
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) row.push_back(draws[k](i, j));
    csv.row(row);
  }
}

MeanCovDraw sample_mean_cov(const Matrix& x, const SpdMatrix& r, RngStream& stream) {
  const int d = static_cast<int>(x.rows());
  const int n = static_cast<int>(x.cols()) - 1;
  require(n > d, "sample_mean_cov: need N > d");
  require(r.dim() == d, "sample_mean_cov: dimension mismatch");

  // Mean part first: m(x) + R^{1/2} Z0 / sqrt(N+1) with Z0 standard normal.
  const Matrix r_sqrt = principal_sqrt(r.mat());
  MeanCovDraw draw;
  draw.mean = column_mean(x) + r_sqrt * stream.normal_vector(d) /
                                   std::sqrt(static_cast<double>(n + 1));

  // Covariance part: rotate out the mean, then the non-central Wishart with
  // non-centrality q(x rotated) = p(x).
  const Matrix rot = helmert(n + 1).bottomRows(n);
  const Matrix x_rot = x * rot.transpose();
  const Matrix nc = sym_part(x_rot * x_rot.transpose() / static_cast<double>(n));
  WishartParams wp;
  wp.dim = d;
  wp.dof = n;
  wp.scale = r;
  wp.noncentrality_sqrt = SpdMatrix::from_sym_unchecked(principal_sqrt(nc),
                                                        Definiteness::PositiveSemidefinite);
  draw.cov = sample_noncentral_wishart(wp, stream);
  return draw;
}

}  // namespace enkf_lab
