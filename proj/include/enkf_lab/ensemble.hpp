#ifndef ENKF_LAB_ENSEMBLE_HPP
#define ENKF_LAB_ENSEMBLE_HPP

#include <optional>
#include <vector>

#include "enkf_lab/kalman.hpp"
#include "enkf_lab/model.hpp"
#include "enkf_lab/wishart.hpp"

namespace enkf_lab {

/// Particle block with cached sample statistics.  sample_cov carries the
/// 1/N normalization, i.e. (1 + 1/N) times the empirical-measure covariance.
struct Ensemble {
  Matrix particles;  // d x (N+1)
  int step = 0;
  bool updated = false;
  Vector sample_mean;
  Matrix sample_cov;

  int size() const { return static_cast<int>(particles.cols()) - 1; }
};

/// N+1 independent draws from N(x0_mean, P0).
Ensemble init_ensemble(const ModelParams& params, int ensemble_size, RngStream& stream);

/// Observation update with perturbed observations: every particle moves by
/// K(p_n) (y - (B xi + v)), the gain computed from the sample covariance.
Ensemble enkf_update(const ModelParams& params, const Ensemble& ens, const Vector& y,
                     RngStream& stream);

/// Mutation step xi -> A xi + w with fresh process noise.
Ensemble enkf_predict(const ModelParams& params, const Ensemble& ens, RngStream& stream);

/// State of the equivalent-in-law perturbation recursion: the pair (mean,
/// cov) evolves as the exact Kalman recursion plus explicitly assembled
/// Wishart-type noise of size 1/sqrt(N).
struct PerturbationState {
  int step = 0;
  int ensemble_size = 0;  // N
  Vector mean;            // m_n
  Matrix cov;             // p_n
  std::optional<Vector> upd_mean;  // of the last cycle
  std::optional<Matrix> upd_cov;
  Matrix last_lambda;     // A delta_hat A' + delta of the last cycle
  Matrix last_delta;
  Matrix last_delta_hat;
};

PerturbationState init_perturbation(const ModelParams& params, int ensemble_size,
                                    RngStream& stream);

/// Deterministic skeleton of one update-predict cycle (the N -> infinity
/// limit): exactly the Kalman/Riccati flow of (mean, cov).
struct CycleFlow {
  Vector upd_mean;
  Matrix upd_cov;
  Vector pred_mean;
  Matrix pred_cov;
};
CycleFlow perturbation_flow(const ModelParams& params, const Vector& mean,
                            const Matrix& cov, const Vector& y);

/// One full update-predict cycle of the perturbation recursion.
PerturbationState perturbation_step(const ModelParams& params,
                                    const PerturbationState& state, const Vector& y,
                                    RngStream& stream);

/// One transition of the covariance Markov chain: an updated covariance
/// drawn from the update Wishart, then a predicted covariance drawn from the
/// prediction Wishart.
struct ChainStep {
  Matrix upd_cov;
  Matrix pred_cov;
};
ChainStep covariance_chain_step(const ModelParams& params, const Matrix& p,
                                int ensemble_size, RngStream& stream);

enum class Backend { Particle, Perturbation, WishartChain };
Backend backend_from_string(const std::string& name);
std::string backend_name(Backend b);

/// One stepping interface over the three equivalent-in-law backends.
class Simulator {
 public:
  Simulator(const ModelParams& params, Backend backend, int ensemble_size,
            RngStream stream);
  /// Start from an explicit initial covariance with zero mean; the particle
  /// backend builds a deterministic block with exactly that sample covariance.
  Simulator(const ModelParams& params, Backend backend, int ensemble_size,
            RngStream stream, const Matrix& initial_cov);

  void step(const Vector& y);

  int step_index() const { return step_; }
  const Matrix& covariance() const;           // p_n
  const Matrix* updated_covariance() const;   // p̂ of the last cycle, if any
  const Vector* mean() const;                 // null for the covariance chain
  const Vector* updated_mean() const;
  const Matrix* last_lambda() const;          // perturbation backend only
  Backend backend() const { return backend_; }

 private:
  ModelParams params_;
  Backend backend_;
  int ensemble_size_;
  RngStream stream_;
  int step_ = 0;

  std::optional<Ensemble> ens_;
  std::optional<PerturbationState> pert_;
  Matrix chain_cov_;
  std::optional<Vector> upd_mean_;
  std::optional<Matrix> upd_cov_;
};

/// Sampler of the weak limit noise: per step n, the limit of the assembled
/// fluctuation around the deterministic Riccati orbit, and the limiting
/// distribution of sqrt(N) (p_n - P_n) as the summed conjugation by directed
/// closed-loop products.  Square-root factors are precomputed once.
class LimitNoiseSampler {
 public:
  LimitNoiseSampler(const ModelParams& params, int horizon);

  Matrix draw_lambda(int n, RngStream& stream) const;
  /// sum_{k<=n} E_{n-k}(P_k) Lambda_k E_{n-k}(P_k)' for n == horizon.
  Matrix draw_limit_sum(RngStream& stream) const;

  const Matrix& predicted_cov(int n) const { return pred_cov_.at(n); }
  const Matrix& updated_cov(int n) const { return upd_cov_.at(n); }

 private:
  ModelParams params_;
  int horizon_;
  Matrix r_sqrt_;
  std::vector<Matrix> pred_cov_;        // P_0 .. P_horizon
  std::vector<Matrix> upd_cov_;         // P^_0 .. P^_horizon
  std::vector<Matrix> rn_sqrt_;         // P0^{1/2} at n=0, R^{1/2} after
  std::vector<Matrix> cross_sqrt_;      // (A P^_{n-1} A')^{1/2}, zero at n=0
  std::vector<Matrix> upd_scale_sqrt_;  // update_noise_cov(P_n)^{1/2}
  std::vector<Matrix> upd_cross_sqrt_;  // (A^(P_n) P_n A^(P_n)')^{1/2}
  std::vector<Matrix> transfer_;        // E_{horizon-k}(P_k)
};

}  // namespace enkf_lab

#endif
