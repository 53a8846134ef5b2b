#ifndef ENKF_LAB_WISHART_HPP
#define ENKF_LAB_WISHART_HPP

#include <ostream>
#include <vector>

#include "enkf_lab/matrix.hpp"
#include "enkf_lab/rng.hpp"

namespace enkf_lab {

/// Parameters of (1/N) Wishart_d(N, N q, R): degrees of freedom N, scale R,
/// and the symmetric square root of the non-centrality covariance q.
struct WishartParams {
  int dim = 0;
  int dof = 0;                   // N >= 1
  SpdMatrix scale;               // R
  SpdMatrix noncentrality_sqrt;  // q^{1/2}
};

/// CLT-normalized fluctuation (Z Z' - N I)/sqrt(N) of a d x N standard block.
Matrix gram_fluctuation(const Matrix& z_block);

/// Draw q(z + Z) = (1/N) sum (z^i + Z^i)(z^i + Z^i)' with Z columns i.i.d.
/// N(0, R) and z the canonical representative sqrt(N) [q^{1/2} | 0].
/// PD with probability 1 iff N >= d and q + R PD; rank <= N when N < d.
SpdMatrix sample_noncentral_wishart(const WishartParams& wp, RngStream& stream);

/// A fluctuation draw split into its independent Gaussian ingredients.
/// delta = R^{1/2} h R^{1/2} + 2 sym(R^{1/2} g q^{1/2}) as assembled, and
/// q + R + delta/sqrt(N) reproduces the non-central Wishart law.
struct FluctuationDraw {
  Matrix h_matrix;  // gram_fluctuation of the underlying block
  Matrix g_block;   // first d columns of the block
  Matrix h_tail;    // fluctuation of columns d+1..N; zero block when N == d
  Matrix delta;
};
FluctuationDraw draw_fluctuation(const WishartParams& wp, RngStream& stream);

/// Closed-form E(delta^2) = R^2 + Tr(R) R + qR + Rq + Tr(R) q + Tr(q) R.
Matrix fluctuation_second_moment(const WishartParams& wp);

/// Exact split h = tail + sqrt(d/N) mix of a block's fluctuation, with the
/// tail built from columns d+1..N and independent of the leading d columns.
/// Requires N > d.
struct GramSplit {
  Matrix tail;
  Matrix mix;
};
GramSplit gram_fluctuation_split(const Matrix& z_block);

/// Loewner sandwich for the inverse mean: (q + R)^{-1} <= E(sample^{-1})
/// <= R^{-1} / (1 - (2d+1)/N).  Requires N > 2d + 1 and R PD.
struct InverseMomentBounds {
  Matrix lower;
  Matrix upper;
};
InverseMomentBounds inverse_moment_bounds(const WishartParams& wp);

/// n x n Helmert matrix: first row 1'/sqrt(n), lower rows an orthonormal
/// basis of the mean-free subspace.  n >= 2.
Matrix helmert(int n);

/// Joint draw of (sample mean, sample covariance) of x + noise for a fixed
/// d x (N+1) block x and noise columns i.i.d. N(0, R), N > d.  The Helmert
/// rotation reduces the covariance part to a non-central Wishart with
/// non-centrality p(x), independent of the Gaussian mean part.
struct MeanCovDraw {
  Vector mean;
  SpdMatrix cov;
};
MeanCovDraw sample_mean_cov(const Matrix& x, const SpdMatrix& r, RngStream& stream);

/// Column-mean and mean-removed normalized sample covariance of a
/// d x (N+1) block: m(x) and p(x) = (x - M(x))(x - M(x))'/N.
Vector column_mean(const Matrix& x);
Matrix normalized_sample_cov(const Matrix& x);

/// Dump equally sized matrix draws as CSV (draw index, entries row-major)
/// for offline distribution checks.
void write_draws_csv(std::ostream& os, const std::vector<Matrix>& draws);

namespace detail {
/// Sampler core taking precomputed square-root factors; used by the hot
/// simulation loops.  Returns the plain symmetric matrix.
Matrix noncentral_wishart(const Matrix& nc_sqrt, const Matrix& scale_sqrt, int dof,
                          RngStream& stream);
/// delta assembled from a freshly drawn standard block, plus the raw pieces.
Matrix fluctuation_delta(const Matrix& nc_sqrt, const Matrix& scale_sqrt, int dof,
                         RngStream& stream);
}  // namespace detail

}  // namespace enkf_lab

#endif
