#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "enkf_lab/ensemble.hpp"
#include "enkf_lab/riccati.hpp"
#include "enkf_lab/stats.hpp"
#include "test_support.hpp"

using namespace enkf_lab;
using namespace test_support;

namespace {
const ModelParams kGolden = golden_scalar_model();
}

TEST_CASE("init_ensemble: determinism and cached statistics") {
  RngStream s1 = RngStream::derive(71, "init");
  RngStream s2 = RngStream::derive(71, "init");
  const Ensemble a = init_ensemble(kGolden, 16, s1);
  const Ensemble b = init_ensemble(kGolden, 16, s2);
  CHECK((a.particles - b.particles).norm() == doctest::Approx(0.0));
  CHECK(a.size() == 16);

  // Cache invariants: recomputation matches, and the 1/N normalization is
  // (1 + 1/N) times the empirical-measure covariance.
  CHECK((a.sample_cov - normalized_sample_cov(a.particles)).norm() < 1e-12);
  const Matrix centered = a.particles.colwise() - a.sample_mean;
  const Matrix emp_cov = centered * centered.transpose() / 17.0;
  CHECK(approx_rel(a.sample_cov, Matrix((1.0 + 1.0 / 16.0) * emp_cov), 1e-12));
}

TEST_CASE("init_ensemble: sample covariance moments match the Wishart law") {
  // p_0 ~ (1/N) Wishart(N, 0, P0): mean P0, entry variance from the closed form.
  const int n = 8;
  RngStream s = RngStream::derive(72, "init-law");
  MatrixMoments mm;
  for (int i = 0; i < 60000; ++i)
    mm.add(init_ensemble(kGolden, n, s).sample_cov);
  CHECK(std::abs(mm.mean()(0, 0) - 1.0) < 4.0 * mm.max_standard_error());
  // Var = E(Delta^2)/N = 2/8 in the scalar unit case.
  CHECK(mm.variance()(0, 0) == doctest::Approx(2.0 / n).epsilon(0.05));
}

TEST_CASE("enkf_update: B = 0 leaves particles in place") {
  const ModelParams free_model =
      make_model(Matrix::Identity(1, 1), Matrix::Zero(1, 1), Matrix::Identity(1, 1),
                 Matrix::Identity(1, 1), Matrix::Identity(1, 1), Vector::Zero(1));
  RngStream s = RngStream::derive(73, "b0");
  const Ensemble ens = init_ensemble(free_model, 8, s);
  const Ensemble upd = enkf_update(free_model, ens, Vector::Constant(1, 3.0), s);
  CHECK((upd.particles - ens.particles).norm() == doctest::Approx(0.0));
  CHECK((upd.sample_cov - ens.sample_cov).norm() == doctest::Approx(0.0));
}

TEST_CASE("enkf_update: blockwise arithmetic equals the per-particle loop") {
  RngStream s = RngStream::derive(74, "block");
  const ModelParams m = rand_model_rect(s, 2, 2, 0.8);
  const Ensemble ens = init_ensemble(m, 12, s);
  const Vector y = s.normal_vector(2);

  RngStream noise_a = RngStream::derive(74, "noise");
  RngStream noise_b = RngStream::derive(74, "noise");
  const Ensemble upd = enkf_update(m, ens, y, noise_a);

  // Per-particle reference path with the same draws.
  const Matrix gain = kalman_gain(m, ens.sample_cov);
  const Matrix noise =
      principal_sqrt(m.r0.mat()) * noise_b.normal_matrix(2, 13);
  Matrix expected(2, 13);
  for (int i = 0; i < 13; ++i)
    expected.col(i) = ens.particles.col(i) +
                      gain * (y - (m.b * ens.particles.col(i) + noise.col(i)));
  CHECK((upd.particles - expected).norm() < 1e-12);

  CHECK_THROWS_AS(enkf_update(m, upd, y, noise_a), NumericalError);
}

TEST_CASE("enkf_predict: A = 0 mutation is pure noise") {
  const ModelParams a0 =
      make_model(Matrix::Zero(1, 1), Matrix::Identity(1, 1), Matrix::Identity(1, 1) * 2.0,
                 Matrix::Identity(1, 1), Matrix::Identity(1, 1), Vector::Zero(1));
  RngStream s = RngStream::derive(75, "a0");
  RunningMoments var;
  for (int rep = 0; rep < 4000; ++rep) {
    Ensemble ens = init_ensemble(a0, 8, s);
    ens = enkf_update(a0, ens, Vector::Zero(1), s);
    ens = enkf_predict(a0, ens, s);
    for (int i = 0; i < 9; ++i) var.add(ens.particles(0, i) * ens.particles(0, i));
  }
  CHECK(std::abs(var.mean() - 2.0) < 4.0 * var.standard_error());

  RngStream s2 = RngStream::derive(76, "flag");
  const Ensemble fresh = init_ensemble(a0, 8, s2);
  CHECK_THROWS_AS(enkf_predict(a0, fresh, s2), NumericalError);
}

TEST_CASE("enkf_update contracts the covariance on average") {
  RngStream s = RngStream::derive(87, "contract");
  RunningMoments gap;
  for (int rep = 0; rep < 20000; ++rep) {
    RngStream stream = RngStream::derive(87, "contract-rep", rep);
    const Ensemble ens = init_ensemble(kGolden, 8, stream);
    const Ensemble upd = enkf_update(kGolden, ens, Vector::Zero(1), stream);
    gap.add(ens.sample_cov(0, 0) - upd.sample_cov(0, 0));
  }
  CHECK(gap.mean() > -3.0 * gap.standard_error());
  CHECK(gap.mean() > 0.0);
}

TEST_CASE("enkf_predict conditional law moments given the updated ensemble") {
  RngStream s = RngStream::derive(88, "cond");
  const ModelParams m = rand_model(s, 2, 0.8);
  // Freeze one realized updated ensemble.
  RngStream fixed = RngStream::derive(88, "cond-fixed");
  Ensemble upd = init_ensemble(m, 16, fixed);
  upd = enkf_update(m, upd, Vector::Zero(2), fixed);
  const Matrix expect_mean =
      sym_part(m.a * upd.sample_cov * m.a.transpose() + m.r.mat());
  WishartParams wp;
  wp.dim = 2;
  wp.dof = 16;
  wp.scale = m.r;
  wp.noncentrality_sqrt = SpdMatrix::from_sym_unchecked(
      principal_sqrt(sym_part(m.a * upd.sample_cov * m.a.transpose())),
      Definiteness::PositiveSemidefinite);
  const Matrix expect_second = fluctuation_second_moment(wp) / 16.0;

  MatrixMoments mm;
  Matrix second = Matrix::Zero(2, 2);
  const int draws = 60000;
  for (int rep = 0; rep < draws; ++rep) {
    RngStream stream = RngStream::derive(88, "cond-rep", rep);
    const Matrix sample = enkf_predict(m, upd, stream).sample_cov;
    mm.add(sample);
    const Matrix dev = sample - expect_mean;
    second += dev * dev;
  }
  second /= draws;
  CHECK((mm.mean() - expect_mean).cwiseAbs().maxCoeff() < 4.0 * mm.max_standard_error());
  // E((p' - (A p^ A' + R))^2) matches the closed-form second moment over N.
  CHECK((second - expect_second).norm() < 0.05 * expect_second.norm());
}

TEST_CASE("perturbation_flow reproduces the exact Kalman cycle") {
  RngStream s = RngStream::derive(77, "flow");
  const ModelParams m = rand_model(s, 3);
  const Vector mean = s.normal_vector(3);
  const Matrix cov = rand_spd(s, 3);
  const Vector y = s.normal_vector(3);

  const CycleFlow flow = perturbation_flow(m, mean, cov, y);
  KalmanState st;
  st.pred_mean = mean;
  st.pred_cov = cov;
  const KalmanState upd = kf_update(m, st, y);
  const KalmanState pred = kf_predict(m, upd);
  CHECK((flow.upd_mean - *upd.upd_mean).norm() < 1e-13);
  CHECK((flow.upd_cov - *upd.upd_cov).norm() < 1e-13);
  CHECK((flow.pred_mean - pred.pred_mean).norm() < 1e-13);
  CHECK((flow.pred_cov - pred.pred_cov).norm() < 1e-13);
}

TEST_CASE("perturbation_step: exact noise bookkeeping") {
  RngStream s = RngStream::derive(78, "pert");
  const ModelParams m = rand_model(s, 2);
  PerturbationState state = init_perturbation(m, 32, s);

  // p_0 == P_0 + Lambda_0 / sqrt(N) with the initial-case fluctuation.
  CHECK(approx_rel(state.cov,
                   Matrix(m.p0.mat() + state.last_lambda / std::sqrt(32.0)), 1e-12));

  for (int n = 0; n < 5; ++n) {
    const Matrix before = state.cov;
    const Vector y = s.normal_vector(2);
    state = perturbation_step(m, state, y, s);
    // p_{n+1} == Phi(p_n) + Lambda/sqrt(N) and Lambda == A delta_hat A' + delta.
    CHECK(approx_rel(state.cov,
                     Matrix(riccati_map(m, before) + state.last_lambda / std::sqrt(32.0)),
                     1e-10));
    CHECK(approx_rel(state.last_lambda,
                     Matrix(sym_part(m.a * state.last_delta_hat * m.a.transpose()) +
                            state.last_delta),
                     1e-12));
    CHECK(min_eigenvalue(state.cov) > 0.0);
    CHECK(min_eigenvalue(*state.upd_cov) > 0.0);
  }
}

TEST_CASE("one-step covariance law equality across the three backends") {
  const ModelParams m = make_model(
      (Matrix(2, 2) << 0.9, 0.2, 0.0, 0.7).finished(), Matrix::Identity(2, 2),
      Matrix::Identity(2, 2), Matrix::Identity(2, 2), Matrix::Identity(2, 2),
      Vector::Zero(2));
  Matrix p(2, 2);
  p << 1.2, 0.3, 0.3, 0.8;
  const int n = 16;
  const int draws = 30000;
  const Vector y = Vector::Zero(2);

  auto one_step_sample = [&](Backend backend, const char* tag) {
    std::vector<Matrix> out;
    out.reserve(draws);
    for (int i = 0; i < draws; ++i) {
      Simulator sim(m, backend, n, RngStream::derive(700, tag, i), p);
      sim.step(y);
      out.push_back(sim.covariance());
    }
    return out;
  };
  const std::vector<Matrix> particle = one_step_sample(Backend::Particle, "eq-part");
  const std::vector<Matrix> pert = one_step_sample(Backend::Perturbation, "eq-pert");
  const std::vector<Matrix> chain = one_step_sample(Backend::WishartChain, "eq-chain");

  CHECK(matrix_law_test(particle, pert, true, 0.005).pass);
  CHECK(matrix_law_test(particle, chain, true, 0.005).pass);
  CHECK(matrix_law_test(pert, chain, true, 0.005).pass);
}

TEST_CASE("covariance_chain_step: conditional mean is the Riccati map") {
  RngStream s = RngStream::derive(79, "chainmean");
  const ModelParams m = rand_model(s, 2);
  const Matrix p = rand_spd(s, 2, 0.4);
  MatrixMoments mm;
  for (int i = 0; i < 60000; ++i)
    mm.add(covariance_chain_step(m, p, 24, s).pred_cov);
  const Matrix expect = riccati_map(m, p);
  CHECK((mm.mean() - expect).cwiseAbs().maxCoeff() < 4.0 * mm.max_standard_error());
}

TEST_CASE("covariance chain with B=0, A=0 is a rescaled chi-square") {
  const ModelParams free_model =
      make_model(Matrix::Zero(1, 1), Matrix::Zero(1, 1), Matrix::Identity(1, 1) * 1.7,
                 Matrix::Identity(1, 1), Matrix::Identity(1, 1), Vector::Zero(1));
  const int n = 12;
  RngStream s = RngStream::derive(80, "chi2chain");
  RunningMoments m1;
  const Matrix p = Matrix::Identity(1, 1) * 0.6;
  for (int i = 0; i < 60000; ++i) {
    const ChainStep cs = covariance_chain_step(free_model, p, n, s);
    // B = 0: the update draw is exactly the input covariance.
    CHECK(cs.upd_cov(0, 0) == doctest::Approx(p(0, 0)));
    m1.add(cs.pred_cov(0, 0));
  }
  CHECK(std::abs(m1.mean() - 1.7) < 3.5 * m1.standard_error());
  CHECK(m1.variance() == doctest::Approx(2.0 * 1.7 * 1.7 / n).epsilon(0.05));
}

TEST_CASE("interpolating formula is exact pathwise") {
  RngStream s = RngStream::derive(81, "interp");
  for (const ModelParams& m : {kGolden, rand_model(s, 2)}) {
    const int n = 10;
    const int ensemble = 24;
    RngStream stream = RngStream::derive(81, "interp-path", m.dim());
    PerturbationState state = init_perturbation(m, ensemble, stream);

    std::vector<Matrix> cov_path{state.cov};          // p_k
    std::vector<Matrix> lambda_path{state.last_lambda};
    std::vector<Matrix> phi_prev{m.p0.mat()};         // Phi(p_{k-1}), P_0 at k=0
    for (int k = 1; k <= n; ++k) {
      const Matrix prev = state.cov;
      state = perturbation_step(m, state, Vector::Zero(m.obs_dim()), stream);
      cov_path.push_back(state.cov);
      lambda_path.push_back(state.last_lambda);
      phi_prev.push_back(riccati_map(m, prev));
    }

    const Matrix p_n_exact = riccati_iterate(m, m.p0.mat(), n);
    Matrix rhs = p_n_exact;
    for (int k = 0; k <= n; ++k) {
      const Matrix left = closed_loop_product(m, cov_path[k], n - k);
      const Matrix right = closed_loop_product(m, phi_prev[k], n - k);
      rhs += (left * lambda_path[k] * right.transpose()) / std::sqrt(double(ensemble));
    }
    CHECK((cov_path[n] - rhs).norm() <= 1e-8 * (1.0 + cov_path[n].norm()));
  }
}

TEST_CASE("second-order decomposition is exact pathwise") {
  RngStream s = RngStream::derive(82, "second");
  const ModelParams m = rand_model(s, 2);
  const RiccatiContext ctx = solve_fixed_point(m);
  const int n = 8;
  const int ensemble = 24;
  RngStream stream = RngStream::derive(82, "second-path");
  PerturbationState state = init_perturbation(m, ensemble, stream);

  std::vector<Matrix> cov_path{state.cov};
  std::vector<Matrix> lambda_path{state.last_lambda};
  std::vector<Matrix> phi_prev{m.p0.mat()};
  for (int k = 1; k <= n; ++k) {
    const Matrix prev = state.cov;
    state = perturbation_step(m, state, Vector::Zero(m.obs_dim()), stream);
    cov_path.push_back(state.cov);
    lambda_path.push_back(state.last_lambda);
    phi_prev.push_back(riccati_map(m, prev));
  }

  const double root_n = std::sqrt(double(ensemble));
  Matrix rhs = riccati_iterate(m, m.p0.mat(), n);
  for (int k = 0; k <= n; ++k) {
    const Matrix base = closed_loop_product(m, phi_prev[k], n - k);
    rhs += (base * lambda_path[k] * base.transpose()) / root_n;
    if (k < n) {
      const Matrix kernel = grammian(ctx, n - k) *
                            floquet_correction_inverse(ctx, phi_prev[k], n - k);
      const Matrix lead = closed_loop_product(m, cov_path[k], n - k);
      rhs -= (lead * lambda_path[k] * kernel * lambda_path[k] * base.transpose()) /
             (root_n * root_n);
    }
  }
  CHECK((cov_path[n] - rhs).norm() <= 1e-8 * (1.0 + cov_path[n].norm()));
}

TEST_CASE("perturbation noise moments are uniform in time") {
  // E(||Lambda_n||^r)^{1/r} stays in a fixed band over the horizon, r in {2,4}.
  const ModelParams m = kGolden;
  const int horizon = 40;
  const int replicas = 2000;
  std::vector<RunningMoments> m2(horizon + 1), m4(horizon + 1);
  for (int rep = 0; rep < replicas; ++rep) {
    RngStream stream = RngStream::derive(86, "lambda-unif", rep);
    PerturbationState st = init_perturbation(m, 16, stream);
    for (int n = 1; n <= horizon; ++n) {
      st = perturbation_step(m, st, Vector::Zero(1), stream);
      const double norm = st.last_lambda.norm();
      m2[n].add(norm * norm);
      m4[n].add(norm * norm * norm * norm);
    }
  }
  const double base2 = std::sqrt(m2[5].mean());
  const double base4 = std::pow(m4[5].mean(), 0.25);
  for (int n = 5; n <= horizon; ++n) {
    const double est2 = std::sqrt(m2[n].mean());
    const double est4 = std::pow(m4[n].mean(), 0.25);
    CHECK(est2 / base2 > 0.6);
    CHECK(est2 / base2 < 1.6);
    CHECK(est4 / base4 > 0.6);
    CHECK(est4 / base4 < 1.6);
  }
}

TEST_CASE("limit noise sampler") {
  // n = 0: law P0^{1/2} H P0^{1/2}, centered, GOE variance structure.
  RngStream s = RngStream::derive(83, "limit");
  const ModelParams m = rand_model(s, 2);
  const LimitNoiseSampler sampler(m, 3);

  MatrixMoments mm0;
  RngStream draw_stream = RngStream::derive(83, "limit-draws");
  for (int i = 0; i < 60000; ++i) mm0.add(sampler.draw_lambda(0, draw_stream));
  CHECK(mm0.mean().cwiseAbs().maxCoeff() < 4.0 * mm0.max_standard_error());
  // Variance equals the closed-form second moment with q=0, R=P0... entrywise.
  WishartParams wp0;
  wp0.dim = 2;
  wp0.dof = 4;
  wp0.scale = m.p0;
  wp0.noncentrality_sqrt = SpdMatrix::from(Matrix::Zero(2, 2));
  const Matrix expect0 = fluctuation_second_moment(wp0);
  // E(Lambda_0^2) is the full second moment; compare diagonal entries, whose
  // variance equals the (i,i) entry of the closed form.
  Matrix second = Matrix::Zero(2, 2);
  RngStream ds2 = RngStream::derive(83, "limit-draws");
  const int draws = 60000;
  for (int i = 0; i < draws; ++i) {
    const Matrix l = sampler.draw_lambda(0, ds2);
    second += l * l;
  }
  second /= draws;
  CHECK((second - expect0).norm() < 0.08 * expect0.norm());
}

TEST_CASE("limit noise: scalar variance via independent-sum formula") {
  // Lambda_n = A^2 Gamma_hat_{n-1} + Gamma_n with independent centered parts,
  // so the scalar variance is the sum of the two closed forms.
  const ModelParams m = kGolden;
  const int n = 3;
  const LimitNoiseSampler sampler(m, n);

  // Build the exact scalar variance from the Riccati orbit.
  Matrix p = m.p0.mat();
  std::vector<double> pred(n + 1), upd(n + 1);
  for (int k = 0; k <= n; ++k) {
    pred[k] = p(0, 0);
    upd[k] = sym_part(update_factor(m, p) * p)(0, 0);
    p = riccati_map(m, p);
  }
  auto delta_var = [](double q, double r) {
    return r * r + r * r + q * r + r * q + r * q + q * r;  // scalar closed form
  };
  const double g_hat_var =
      delta_var(std::pow(update_factor(m, Matrix::Constant(1, 1, pred[n - 1]))(0, 0), 2) *
                    pred[n - 1],
                update_noise_cov(m, Matrix::Constant(1, 1, pred[n - 1]))(0, 0));
  const double g_var = delta_var(upd[n - 1], m.r.mat()(0, 0));
  const double expect = g_hat_var + g_var;  // A = 1

  RngStream ds = RngStream::derive(84, "limit-scalar");
  RunningMoments msq;
  for (int i = 0; i < 120000; ++i) {
    const double l = sampler.draw_lambda(n, ds)(0, 0);
    msq.add(l * l);
  }
  CHECK(std::abs(msq.mean() - expect) < 4.0 * msq.standard_error());
}

TEST_CASE("particle covariance stays positive definite when N+1 > d") {
  RngStream s = RngStream::derive(85, "pd");
  const ModelParams m = rand_model(s, 3);
  Simulator sim(m, Backend::Particle, 3, RngStream::derive(85, "pd-run"));  // N = d
  CHECK(min_eigenvalue(sim.covariance()) > 0.0);
  for (int n = 0; n < 20; ++n) {
    sim.step(Vector::Zero(3));
    CHECK(min_eigenvalue(sim.covariance()) > 0.0);
  }
}

TEST_CASE("simulator gates") {
  CHECK_THROWS_AS(Simulator(make_model(Matrix::Identity(2, 2), Matrix::Identity(2, 2),
                                       Matrix::Identity(2, 2), Matrix::Identity(2, 2),
                                       Matrix::Identity(2, 2), Vector::Zero(2)),
                            Backend::Particle, 1, RngStream::derive(1, "gate")),
                  ConfigError);
  CHECK(backend_from_string("particle") == Backend::Particle);
  CHECK(backend_from_string("perturbation") == Backend::Perturbation);
  CHECK(backend_from_string("wishart-chain") == Backend::WishartChain);
  CHECK_THROWS_AS(backend_from_string("bogus"), ConfigError);
}

TEST_CASE("simulator from fixed covariance starts exactly there") {
  const ModelParams m = golden_scalar_model();
  const Matrix p = Matrix::Constant(1, 1, 2.5);
  for (Backend b : {Backend::Particle, Backend::Perturbation, Backend::WishartChain}) {
    Simulator sim(m, b, 12, RngStream::derive(9, "fixed"), p);
    CHECK((sim.covariance() - p).norm() < 1e-12);
  }

  // Edge case N == d: the deterministic block still hits the target exactly.
  RngStream s = RngStream::derive(9, "fixed-edge");
  const ModelParams m2 = rand_model(s, 2);
  const Matrix p2 = rand_spd(s, 2, 0.3);
  Simulator sim2(m2, Backend::Particle, 2, RngStream::derive(9, "fixed2"), p2);
  CHECK((sim2.covariance() - p2).norm() < 1e-10);
  sim2.step(Vector::Zero(2));
  CHECK(min_eigenvalue(sim2.covariance()) > 0.0);
}
