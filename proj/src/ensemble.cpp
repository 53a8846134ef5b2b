#include "enkf_lab/ensemble.hpp"

#include <cmath>

#include "enkf_lab/riccati.hpp"

namespace enkf_lab {

namespace {

void refresh_stats(Ensemble& ens) {
  ens.sample_mean = column_mean(ens.particles);
  ens.sample_cov = normalized_sample_cov(ens.particles);
}

// Round-off guard for evolving covariances.  Small negative eigenvalues are
// clamped; anything past the tolerance means the ensemble collapsed (N too
// small for the dimension).
Matrix enforce_pd(const Matrix& p, const char* where) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym_part(p));
  require(es.info() == Eigen::Success, "covariance eigensolver failed");
  const double floor = -1e-10 * std::max(1.0, p.trace());
  if (es.eigenvalues().minCoeff() >= 0.0) return sym_part(p);
  if (es.eigenvalues().minCoeff() < floor)
    throw NumericalError(std::string(where) +
                         ": covariance lost positive definiteness (ensemble size too "
                         "small for the dimension; N+1 > d required)");
  Vector clamped = es.eigenvalues().cwiseMax(0.0);
  return sym_part(es.eigenvectors() * clamped.asDiagonal() *
                  es.eigenvectors().transpose());
}

}  // namespace

Ensemble init_ensemble(const ModelParams& params, int ensemble_size, RngStream& stream) {
  require(ensemble_size >= 1, "init_ensemble: ensemble size must be >= 1");
  const int d = params.dim();
  Ensemble ens;
  ens.particles = principal_sqrt(params.p0.mat()) * stream.normal_matrix(d, ensemble_size + 1);
  ens.particles.colwise() += params.x0_mean;
  refresh_stats(ens);
  return ens;
}

Ensemble enkf_update(const ModelParams& params, const Ensemble& ens, const Vector& y,
                     RngStream& stream) {
  require(!ens.updated, "enkf_update: ensemble already updated");
  require(y.size() == params.obs_dim(), "enkf_update: observation dimension mismatch");
  const int count = static_cast<int>(ens.particles.cols());
  const Matrix gain = kalman_gain(params, ens.sample_cov);
  const Matrix noise =
      principal_sqrt(params.r0.mat()) * stream.normal_matrix(params.obs_dim(), count);
  Ensemble out = ens;
  const Matrix innovation =
      (y.replicate(1, count) - (params.b * ens.particles + noise));
  out.particles = ens.particles + gain * innovation;
  out.updated = true;
  refresh_stats(out);
  return out;
}

Ensemble enkf_predict(const ModelParams& params, const Ensemble& ens, RngStream& stream) {
  require(ens.updated, "enkf_predict: ensemble not updated yet");
  const int count = static_cast<int>(ens.particles.cols());
  Ensemble out;
  out.particles = params.a * ens.particles +
                  principal_sqrt(params.r.mat()) * stream.normal_matrix(params.dim(), count);
  out.step = ens.step + 1;
  out.updated = false;
  refresh_stats(out);
  return out;
}

PerturbationState init_perturbation(const ModelParams& params, int ensemble_size,
                                    RngStream& stream) {
  require(ensemble_size >= params.dim(),
          "init_perturbation: ensemble size must be >= dimension");
  const int d = params.dim();
  const int n = ensemble_size;
  const Matrix p0_sqrt = principal_sqrt(params.p0.mat());

  PerturbationState state;
  state.ensemble_size = n;
  state.mean = params.x0_mean +
               p0_sqrt * stream.normal_vector(d) / std::sqrt(static_cast<double>(n + 1));
  const Matrix h = gram_fluctuation(stream.normal_matrix(d, n));
  state.last_delta = sym_part(p0_sqrt * h * p0_sqrt);
  state.last_delta_hat = Matrix::Zero(d, d);
  state.last_lambda = state.last_delta;
  state.cov = enforce_pd(params.p0.mat() + state.last_delta / std::sqrt(static_cast<double>(n)),
                         "init_perturbation");
  return state;
}

CycleFlow perturbation_flow(const ModelParams& params, const Vector& mean,
                            const Matrix& cov, const Vector& y) {
  const Matrix gain = kalman_gain(params, cov);
  CycleFlow flow;
  flow.upd_mean = mean + gain * (y - params.b * mean);
  flow.upd_cov = sym_part(update_factor(params, cov) * cov);
  flow.pred_mean = params.a * flow.upd_mean;
  flow.pred_cov = sym_part(params.a * flow.upd_cov * params.a.transpose() + params.r.mat());
  return flow;
}

PerturbationState perturbation_step(const ModelParams& params,
                                    const PerturbationState& state, const Vector& y,
                                    RngStream& stream) {
  const int d = params.dim();
  const int n = state.ensemble_size;
  const double root_n = std::sqrt(static_cast<double>(n));
  const double root_n1 = std::sqrt(static_cast<double>(n + 1));

  const Matrix gain = kalman_gain(params, state.cov);
  const Matrix factor = update_factor(params, state.cov);

  // Updating transition.
  const Vector obs_noise = stream.normal_vector(params.obs_dim());
  const Vector upd_mean = state.mean + gain * (y - params.b * state.mean) +
                          gain * principal_sqrt(params.r0.mat()) * obs_noise / root_n1;
  const Matrix upd_base = sym_part(factor * state.cov);
  const Matrix upd_noncentral = sym_part(factor * state.cov * factor.transpose());
  const Matrix upd_scale = sym_part(gain * params.r0.mat() * gain.transpose());
  const Matrix delta_hat = detail::fluctuation_delta(
      principal_sqrt(upd_noncentral), principal_sqrt(upd_scale), n, stream);
  const Matrix upd_cov = enforce_pd(upd_base + delta_hat / root_n, "perturbation_step");

  // Prediction transition.
  const Vector mut_noise = stream.normal_vector(d);
  PerturbationState out;
  out.step = state.step + 1;
  out.ensemble_size = n;
  out.mean = params.a * upd_mean + principal_sqrt(params.r.mat()) * mut_noise / root_n1;
  const Matrix pred_base = sym_part(params.a * upd_cov * params.a.transpose() + params.r.mat());
  const Matrix pred_noncentral = sym_part(params.a * upd_cov * params.a.transpose());
  const Matrix delta = detail::fluctuation_delta(principal_sqrt(pred_noncentral),
                                                 principal_sqrt(params.r.mat()), n, stream);
  out.cov = enforce_pd(pred_base + delta / root_n, "perturbation_step");
  out.upd_mean = upd_mean;
  out.upd_cov = upd_cov;
  out.last_delta = delta;
  out.last_delta_hat = delta_hat;
  out.last_lambda = sym_part(params.a * delta_hat * params.a.transpose()) + delta;
  return out;
}

ChainStep covariance_chain_step(const ModelParams& params, const Matrix& p,
                                int ensemble_size, RngStream& stream) {
  require(ensemble_size >= params.dim(),
          "covariance_chain_step: ensemble size must be >= dimension");
  const Matrix gain = kalman_gain(params, p);
  const Matrix factor = update_factor(params, p);
  const Matrix upd_noncentral = sym_part(factor * p * factor.transpose());
  const Matrix upd_scale = sym_part(gain * params.r0.mat() * gain.transpose());

  ChainStep step;
  step.upd_cov = enforce_pd(
      detail::noncentral_wishart(principal_sqrt(upd_noncentral),
                                 principal_sqrt(upd_scale), ensemble_size, stream),
      "covariance_chain_step");
  const Matrix pred_noncentral = sym_part(params.a * step.upd_cov * params.a.transpose());
  step.pred_cov = enforce_pd(
      detail::noncentral_wishart(principal_sqrt(pred_noncentral),
                                 principal_sqrt(params.r.mat()), ensemble_size, stream),
      "covariance_chain_step");
  return step;
}

Backend backend_from_string(const std::string& name) {
  if (name == "particle") return Backend::Particle;
  if (name == "perturbation") return Backend::Perturbation;
  if (name == "wishart-chain") return Backend::WishartChain;
  throw ConfigError("unknown backend '" + name +
                    "' (expected particle | perturbation | wishart-chain)");
}

std::string backend_name(Backend b) {
  switch (b) {
    case Backend::Particle: return "particle";
    case Backend::Perturbation: return "perturbation";
    case Backend::WishartChain: return "wishart-chain";
  }
  return "?";
}

Simulator::Simulator(const ModelParams& params, Backend backend, int ensemble_size,
                     RngStream stream)
    : params_(params), backend_(backend), ensemble_size_(ensemble_size),
      stream_(stream) {
  if (ensemble_size_ + 1 <= params_.dim())
    throw ConfigError("ensemble size violates N+1 > d required");
  switch (backend_) {
    case Backend::Particle:
      ens_ = init_ensemble(params_, ensemble_size_, stream_);
      break;
    case Backend::Perturbation:
      pert_ = init_perturbation(params_, ensemble_size_, stream_);
      break;
    case Backend::WishartChain: {
      const int d = params_.dim();
      chain_cov_ = detail::noncentral_wishart(Matrix::Zero(d, d),
                                              principal_sqrt(params_.p0.mat()),
                                              ensemble_size_, stream_);
      break;
    }
  }
}

Simulator::Simulator(const ModelParams& params, Backend backend, int ensemble_size,
                     RngStream stream, const Matrix& initial_cov)
    : params_(params), backend_(backend), ensemble_size_(ensemble_size),
      stream_(stream) {
  if (ensemble_size_ + 1 <= params_.dim())
    throw ConfigError("ensemble size violates N+1 > d required");
  switch (backend_) {
    case Backend::Particle: {
      Ensemble ens;
      const int n = ensemble_size_;
      const int d = params_.dim();
      Matrix z_block = Matrix::Zero(d, n);
      z_block.leftCols(d) = std::sqrt(static_cast<double>(n)) * principal_sqrt(initial_cov);
      ens.particles = z_block * helmert(n + 1).bottomRows(n);
      ens.sample_mean = column_mean(ens.particles);
      ens.sample_cov = normalized_sample_cov(ens.particles);
      ens_ = std::move(ens);
      break;
    }
    case Backend::Perturbation: {
      PerturbationState st;
      st.ensemble_size = ensemble_size_;
      st.mean = Vector::Zero(params_.dim());
      st.cov = sym_part(initial_cov);
      st.last_delta = Matrix::Zero(params_.dim(), params_.dim());
      st.last_delta_hat = st.last_delta;
      st.last_lambda = st.last_delta;
      pert_ = std::move(st);
      break;
    }
    case Backend::WishartChain:
      chain_cov_ = sym_part(initial_cov);
      break;
  }
}

void Simulator::step(const Vector& y) {
  switch (backend_) {
    case Backend::Particle: {
      Ensemble upd = enkf_update(params_, *ens_, y, stream_);
      upd_mean_ = upd.sample_mean;
      upd_cov_ = upd.sample_cov;
      ens_ = enkf_predict(params_, upd, stream_);
      break;
    }
    case Backend::Perturbation:
      pert_ = perturbation_step(params_, *pert_, y, stream_);
      upd_mean_ = pert_->upd_mean;
      upd_cov_ = pert_->upd_cov;
      break;
    case Backend::WishartChain: {
      ChainStep cs = covariance_chain_step(params_, chain_cov_, ensemble_size_, stream_);
      upd_cov_ = cs.upd_cov;
      chain_cov_ = cs.pred_cov;
      break;
    }
  }
  ++step_;
}

const Matrix& Simulator::covariance() const {
  switch (backend_) {
    case Backend::Particle: return ens_->sample_cov;
    case Backend::Perturbation: return pert_->cov;
    case Backend::WishartChain: return chain_cov_;
  }
  throw NumericalError("unreachable");
}

const Matrix* Simulator::updated_covariance() const {
  return upd_cov_ ? &*upd_cov_ : nullptr;
}

const Vector* Simulator::mean() const {
  switch (backend_) {
    case Backend::Particle: return &ens_->sample_mean;
    case Backend::Perturbation: return &pert_->mean;
    case Backend::WishartChain: return nullptr;
  }
  return nullptr;
}

const Vector* Simulator::updated_mean() const {
  if (backend_ == Backend::WishartChain) return nullptr;
  return upd_mean_ ? &*upd_mean_ : nullptr;
}

const Matrix* Simulator::last_lambda() const {
  if (backend_ == Backend::Perturbation) return &pert_->last_lambda;
  return nullptr;
}

LimitNoiseSampler::LimitNoiseSampler(const ModelParams& params, int horizon)
    : params_(params), horizon_(horizon) {
  require(horizon >= 0, "LimitNoiseSampler: horizon must be >= 0");
  const int d = params.dim();
  r_sqrt_ = principal_sqrt(params.r.mat());
  pred_cov_.resize(horizon + 1);
  upd_cov_.resize(horizon + 1);
  rn_sqrt_.resize(horizon + 1);
  cross_sqrt_.resize(horizon + 1);
  upd_scale_sqrt_.resize(horizon + 1);
  upd_cross_sqrt_.resize(horizon + 1);

  pred_cov_[0] = params.p0.mat();
  for (int n = 0; n <= horizon; ++n) {
    const Matrix& p = pred_cov_[n];
    const Matrix factor = update_factor(params, p);
    const Matrix gain = kalman_gain(params, p);
    upd_cov_[n] = sym_part(factor * p);
    rn_sqrt_[n] = (n == 0) ? principal_sqrt(params.p0.mat()) : r_sqrt_;
    cross_sqrt_[n] = (n == 0)
                         ? Matrix::Zero(d, d)
                         : principal_sqrt(sym_part(params.a * upd_cov_[n - 1] *
                                                   params.a.transpose()));
    upd_scale_sqrt_[n] =
        principal_sqrt(sym_part(gain * params.r0.mat() * gain.transpose()));
    upd_cross_sqrt_[n] = principal_sqrt(sym_part(factor * p * factor.transpose()));
    if (n < horizon)
      pred_cov_[n + 1] =
          sym_part(params.a * upd_cov_[n] * params.a.transpose() + params.r.mat());
  }

  transfer_.resize(horizon + 1);
  for (int k = 0; k <= horizon; ++k)
    transfer_[k] = closed_loop_product(params, pred_cov_[k], horizon - k);
}

namespace {
Matrix goe_draw(int d, RngStream& stream) {
  const Matrix g = stream.normal_matrix(d, d);
  return (g + g.transpose()) / std::sqrt(2.0);
}
}  // namespace

Matrix LimitNoiseSampler::draw_lambda(int n, RngStream& stream) const {
  require(n >= 0 && n <= horizon_, "draw_lambda: step out of range");
  const int d = params_.dim();
  Matrix gamma_hat = Matrix::Zero(d, d);
  if (n >= 1) {
    const Matrix g_hat = stream.normal_matrix(d, d);
    const Matrix h_hat = goe_draw(d, stream);
    const Matrix& scale = upd_scale_sqrt_[n - 1];
    gamma_hat = sym_part(scale * h_hat * scale) +
                2.0 * sym_part(scale * g_hat * upd_cross_sqrt_[n - 1]);
  }
  const Matrix g = stream.normal_matrix(d, d);
  const Matrix h = goe_draw(d, stream);
  const Matrix gamma = sym_part(rn_sqrt_[n] * h * rn_sqrt_[n]) +
                       2.0 * sym_part(r_sqrt_ * g * cross_sqrt_[n]);
  return sym_part(params_.a * gamma_hat * params_.a.transpose()) + gamma;
}

Matrix LimitNoiseSampler::draw_limit_sum(RngStream& stream) const {
  const int d = params_.dim();
  Matrix sum = Matrix::Zero(d, d);
  for (int k = 0; k <= horizon_; ++k) {
    const Matrix lambda = draw_lambda(k, stream);
    sum += transfer_[k] * lambda * transfer_[k].transpose();
  }
  return sym_part(sum);
}

}  // namespace enkf_lab
