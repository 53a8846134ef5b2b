#include "enkf_lab/harness.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "enkf_lab/riccati.hpp"

namespace enkf_lab {

std::vector<std::pair<int, int>> fixed_chunks(int total, int chunk_size) {
  std::vector<std::pair<int, int>> chunks;
  for (int b = 0; b < total; b += chunk_size)
    chunks.emplace_back(b, std::min(total, b + chunk_size));
  return chunks;
}

void parallel_chunk_run(int total, int jobs,
                        const std::function<void(int, int, int)>& fn, int chunk_size) {
  const auto chunks = fixed_chunks(total, chunk_size);
  jobs = std::max(1, jobs);
  if (jobs == 1 || chunks.size() <= 1) {
    for (std::size_t i = 0; i < chunks.size(); ++i)
      fn(static_cast<int>(i), chunks[i].first, chunks[i].second);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= chunks.size()) break;
      try {
        fn(static_cast<int>(i), chunks[i].first, chunks[i].second);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(chunks.size());
        break;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int k = 1; k < jobs; ++k) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

StudyConfig study_config_from_json(const nlohmann::json& j) {
  if (!j.contains("model")) throw ConfigError("config: missing 'model' object");
  StudyConfig cfg;
  cfg.model = model_from_json(j.at("model"));
  const nlohmann::json study = j.value("study", nlohmann::json::object());
  auto pick = [&](const char* key) -> nlohmann::json {
    if (study.contains(key)) return study.at(key);
    if (j.contains(key)) return j.at(key);
    return nlohmann::json();
  };
  if (auto v = pick("ensemble_sizes"); !v.is_null())
    cfg.ensemble_sizes = v.get<std::vector<int>>();
  if (auto v = pick("horizon"); !v.is_null()) cfg.horizon = v.get<int>();
  if (auto v = pick("replicas"); !v.is_null()) cfg.replicas = v.get<int>();
  if (auto v = pick("seed"); !v.is_null()) cfg.seed = v.get<uint64_t>();
  if (auto v = pick("backend"); !v.is_null())
    cfg.backend = backend_from_string(v.get<std::string>());
  if (auto v = pick("name"); !v.is_null()) cfg.study = v.get<std::string>();
  if (cfg.horizon < 1) throw ConfigError("config: horizon must be >= 1");
  if (cfg.replicas < 100) throw ConfigError("config: replicas must be >= 100");
  if (cfg.ensemble_sizes.empty()) throw ConfigError("config: ensemble_sizes empty");
  for (int n : cfg.ensemble_sizes)
    if (n + 1 <= cfg.model.dim())
      throw ConfigError("config: ensemble size " + std::to_string(n) +
                        " violates N+1 > d required");
  return cfg;
}

bool StudyReport::all_pass() const {
  for (const Verdict& v : verdicts)
    if (!v.pass) return false;
  return true;
}

nlohmann::json StudyReport::to_json() const {
  nlohmann::json j;
  j["study"] = study;
  j["stats"] = stats;
  nlohmann::json vj = nlohmann::json::array();
  for (const Verdict& v : verdicts)
    vj.push_back({{"name", v.name}, {"pass", v.pass}, {"value", v.value},
                  {"detail", v.detail}});
  j["verdicts"] = vj;
  j["all_pass"] = all_pass();
  return j;
}

namespace {

constexpr int kLimitDraws = 100000;

uint64_t derive_seed(uint64_t master, const std::string& purpose, uint64_t index) {
  return RngStream::derive(master, purpose, index).stream_key();
}

int post_transient(int horizon) { return std::min(20, std::max(1, horizon / 2)); }

std::vector<Matrix> predicted_orbit(const ModelParams& model, int horizon) {
  std::vector<Matrix> orbit(horizon + 1);
  orbit[0] = model.p0.mat();
  for (int n = 0; n < horizon; ++n) orbit[n + 1] = riccati_map(model, orbit[n]);
  return orbit;
}

nlohmann::json slope_json(const SlopeFit& fit) {
  return {{"slope", fit.slope},
          {"intercept", fit.intercept},
          {"se", fit.slope_se},
          {"ci95_half_width", fit.ci_half_width},
          {"points", fit.points}};
}

Verdict slope_verdict(const std::string& name, const SlopeFit& fit, double expected,
                      double band) {
  Verdict v;
  v.name = name;
  v.value = fit.slope;
  v.pass = std::abs(fit.slope - expected) <= band;
  v.detail = "slope " + std::to_string(fit.slope) + " expected " +
             std::to_string(expected) + " +/- " + std::to_string(band);
  return v;
}

// Entrywise sums and square sums of a per-step matrix statistic.
struct MatrixTrace {
  std::vector<Matrix> sum;
  std::vector<Matrix> sum_sq;
  long count = 0;

  MatrixTrace() = default;
  MatrixTrace(int steps, int d)
      : sum(steps, Matrix::Zero(d, d)), sum_sq(steps, Matrix::Zero(d, d)) {}
  void add(int n, const Matrix& m) {
    sum[n] += m;
    sum_sq[n] += m.cwiseProduct(m);
  }
  void merge(const MatrixTrace& other) {
    for (std::size_t n = 0; n < sum.size(); ++n) {
      sum[n] += other.sum[n];
      sum_sq[n] += other.sum_sq[n];
    }
    count += other.count;
  }
  Matrix mean(int n) const { return sum[n] / static_cast<double>(count); }
  double max_se(int n) const {
    const double c = static_cast<double>(count);
    const Matrix var = (sum_sq[n] / c - mean(n).cwiseProduct(mean(n))).cwiseMax(0.0);
    return std::sqrt(var.maxCoeff() / c);
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Bias study: P_n - E(p_n) stays PSD within CI and shrinks like 1/N.
// ---------------------------------------------------------------------------

StudyReport bias_study(const StudyConfig& cfg, int jobs) {
  const int d = cfg.model.dim();
  const int horizon = cfg.horizon;
  const auto orbit = predicted_orbit(cfg.model, horizon);
  const Vector y0 = Vector::Zero(cfg.model.obs_dim());
  const int n0 = post_transient(horizon);

  StudyReport report;
  report.study = "bias";
  report.raw_header = {"N", "replica", "window_mean_trace"};
  report.raw_rows.resize(static_cast<std::size_t>(cfg.ensemble_sizes.size()) * cfg.replicas);

  std::vector<double> values, n_scaled;
  bool underbias_ok = true;
  double worst_margin = std::numeric_limits<double>::infinity();
  // R <= E(p_n) <= A S^{-1} A' + R for n >= 1, when S is invertible.
  const bool s_invertible = min_eigenvalue(cfg.model.s.mat()) > 0.0;
  const Matrix mean_cap =
      s_invertible ? Matrix(cfg.model.a * spd_inverse(cfg.model.s.mat()) *
                                cfg.model.a.transpose() +
                            cfg.model.r.mat())
                   : Matrix();
  bool sandwich_ok = true;
  nlohmann::json per_n_stats = nlohmann::json::array();

  for (std::size_t ni = 0; ni < cfg.ensemble_sizes.size(); ++ni) {
    const int N = cfg.ensemble_sizes[ni];
    const std::string purpose = "bias:sim:N=" + std::to_string(N);
    const auto chunks = fixed_chunks(cfg.replicas);
    std::vector<MatrixTrace> partials(chunks.size());
    parallel_chunk_run(cfg.replicas, jobs, [&](int ci, int begin, int end) {
      MatrixTrace trace(horizon + 1, d);
      for (int rep = begin; rep < end; ++rep) {
        Simulator sim(cfg.model, cfg.backend, N,
                      RngStream::derive(cfg.seed, purpose, rep));
        double window_tr = 0.0;
        trace.add(0, sim.covariance());
        for (int n = 1; n <= horizon; ++n) {
          sim.step(y0);
          trace.add(n, sim.covariance());
          if (n >= n0) window_tr += sim.covariance().trace();
        }
        ++trace.count;
        report.raw_rows[ni * cfg.replicas + rep] = {
            static_cast<double>(N), static_cast<double>(rep),
            window_tr / (horizon - n0 + 1)};
      }
      partials[ci] = std::move(trace);
    });
    MatrixTrace total(horizon + 1, d);
    for (const auto& p : partials) total.merge(p);

    Matrix window_bias = Matrix::Zero(d, d);
    nlohmann::json bias_norms = nlohmann::json::array();
    for (int n = 0; n <= horizon; ++n) {
      const Matrix bias = orbit[n] - total.mean(n);
      const double margin =
          min_eigenvalue(sym_part(bias) + 3.0 * total.max_se(n) * Matrix::Identity(d, d));
      worst_margin = std::min(worst_margin, margin);
      if (margin < 0.0) underbias_ok = false;
      if (n >= 1 && s_invertible) {
        const Matrix slack = 3.0 * total.max_se(n) * Matrix::Identity(d, d);
        if (!loewner_leq(cfg.model.r.mat(), total.mean(n) + slack) ||
            !loewner_leq(total.mean(n), mean_cap + slack))
          sandwich_ok = false;
      }
      if (n >= n0) window_bias += bias;
      bias_norms.push_back(bias.norm());
    }
    window_bias /= (horizon - n0 + 1);
    values.push_back(window_bias.norm());
    n_scaled.push_back(N * window_bias.norm());
    per_n_stats.push_back({{"N", N},
                           {"window_bias_norm", window_bias.norm()},
                           {"scaled_window_bias_norm", N * window_bias.norm()},
                           {"bias_norm_by_step", bias_norms}});
  }

  std::vector<double> scales(cfg.ensemble_sizes.begin(), cfg.ensemble_sizes.end());
  const SlopeFit fit = fit_loglog_slope(scales, values);

  Verdict psd;
  psd.name = "under_bias_psd_within_ci";
  psd.pass = underbias_ok;
  psd.value = worst_margin;
  psd.detail = "min eigenvalue of (P_n - mean(p_n) + 3*SE*I) over all (N, n)";
  report.verdicts.push_back(psd);
  report.verdicts.push_back(slope_verdict("bias_rate_slope", fit, -1.0, 0.2));
  if (s_invertible)
    report.verdicts.push_back(Verdict{"mean_cov_sandwich", sandwich_ok, 0.0,
                                      "R <= mean(p_n) <= A S^{-1} A' + R within CI"});

  report.stats["per_N"] = per_n_stats;
  report.stats["slope_fit"] = slope_json(fit);
  report.stats["window_start"] = n0;
  report.stats["scaled_bias_norms"] = n_scaled;
  return report;
}

// ---------------------------------------------------------------------------
// Fluctuation study: sup_n E||p_n - P_n||^r scales like 1/sqrt(N), flat in n.
// ---------------------------------------------------------------------------

namespace {

struct ErrorTrace {
  std::vector<double> sum_1, sum_2, sum_4;
  long count = 0;

  explicit ErrorTrace(int steps = 0) : sum_1(steps, 0.0), sum_2(steps, 0.0), sum_4(steps, 0.0) {}
  void add(int n, double e) {
    sum_1[n] += e;
    sum_2[n] += e * e;
    sum_4[n] += e * e * e * e;
  }
  void merge(const ErrorTrace& other) {
    for (std::size_t n = 0; n < sum_1.size(); ++n) {
      sum_1[n] += other.sum_1[n];
      sum_2[n] += other.sum_2[n];
      sum_4[n] += other.sum_4[n];
    }
    count += other.count;
  }
  double est(int n, int r) const {
    const double c = static_cast<double>(count);
    switch (r) {
      case 1: return sum_1[n] / c;
      case 2: return std::sqrt(sum_2[n] / c);
      default: return std::pow(sum_4[n] / c, 0.25);
    }
  }
};

struct SupSummary {
  double sup_1 = 0.0, sup_2 = 0.0, sup_4 = 0.0;
  double flatness = 1.0;
};

SupSummary summarize(const ErrorTrace& t, int horizon, int n0) {
  SupSummary s;
  for (int n = 0; n <= horizon; ++n) {
    s.sup_1 = std::max(s.sup_1, t.est(n, 1));
    s.sup_2 = std::max(s.sup_2, t.est(n, 2));
    s.sup_4 = std::max(s.sup_4, t.est(n, 4));
  }
  const double base = t.est(n0, 1);
  double tail_sup = 0.0;
  for (int n = n0; n <= horizon; ++n) tail_sup = std::max(tail_sup, t.est(n, 1));
  s.flatness = base > 0.0 ? tail_sup / base : 1.0;
  return s;
}

}  // namespace

StudyReport fluctuation_study(const StudyConfig& cfg, int jobs) {
  const int horizon = cfg.horizon;
  const auto orbit = predicted_orbit(cfg.model, horizon);
  const Vector y0 = Vector::Zero(cfg.model.obs_dim());
  const int n0 = post_transient(horizon);

  StudyReport report;
  report.study = "fluctuation";
  report.raw_header = {"N", "replica", "sup_error"};
  report.raw_rows.resize(static_cast<std::size_t>(cfg.ensemble_sizes.size()) * cfg.replicas);

  std::vector<double> values_1, values_2, values_4;
  bool flat_ok = true;
  bool order_ok = true;
  nlohmann::json per_n_stats = nlohmann::json::array();

  for (std::size_t ni = 0; ni < cfg.ensemble_sizes.size(); ++ni) {
    const int N = cfg.ensemble_sizes[ni];
    const std::string purpose = "fluctuation:sim:N=" + std::to_string(N);
    const auto chunks = fixed_chunks(cfg.replicas);
    std::vector<ErrorTrace> partials(chunks.size());
    parallel_chunk_run(cfg.replicas, jobs, [&](int ci, int begin, int end) {
      ErrorTrace trace(horizon + 1);
      for (int rep = begin; rep < end; ++rep) {
        Simulator sim(cfg.model, cfg.backend, N,
                      RngStream::derive(cfg.seed, purpose, rep));
        double sup_e = (sim.covariance() - orbit[0]).norm();
        trace.add(0, sup_e);
        for (int n = 1; n <= horizon; ++n) {
          sim.step(y0);
          const double e = (sim.covariance() - orbit[n]).norm();
          trace.add(n, e);
          sup_e = std::max(sup_e, e);
        }
        ++trace.count;
        report.raw_rows[ni * cfg.replicas + rep] = {static_cast<double>(N),
                                                    static_cast<double>(rep), sup_e};
      }
      partials[ci] = std::move(trace);
    });
    ErrorTrace total(horizon + 1);
    for (const auto& p : partials) total.merge(p);

    const SupSummary s = summarize(total, horizon, n0);
    values_1.push_back(s.sup_1);
    values_2.push_back(s.sup_2);
    values_4.push_back(s.sup_4);
    if (s.flatness < 0.8 || s.flatness > 1.25) flat_ok = false;
    if (!(s.sup_1 <= s.sup_2 + 1e-15 && s.sup_2 <= s.sup_4 + 1e-15)) order_ok = false;
    per_n_stats.push_back({{"N", N},
                           {"sup_mean_error", s.sup_1},
                           {"sup_l2_error", s.sup_2},
                           {"sup_l4_error", s.sup_4},
                           {"flatness_ratio", s.flatness}});
  }

  std::vector<double> scales(cfg.ensemble_sizes.begin(), cfg.ensemble_sizes.end());
  const SlopeFit fit1 = fit_loglog_slope(scales, values_1);
  const SlopeFit fit2 = fit_loglog_slope(scales, values_2);
  const SlopeFit fit4 = fit_loglog_slope(scales, values_4);

  report.verdicts.push_back(slope_verdict("fluctuation_rate_slope", fit1, -0.5, 0.1));
  Verdict flat{"time_flatness", flat_ok, 0.0,
               "sup_{n in [post-transient, horizon]} / value at post-transient in [0.8, 1.25]"};
  report.verdicts.push_back(flat);
  Verdict order{"moment_ordering", order_ok, 0.0, "L1 <= L2 <= L4 moment estimates"};
  report.verdicts.push_back(order);

  report.stats["per_N"] = per_n_stats;
  report.stats["slope_fit_r1"] = slope_json(fit1);
  report.stats["slope_fit_r2"] = slope_json(fit2);
  report.stats["slope_fit_r4"] = slope_json(fit4);
  return report;
}

// ---------------------------------------------------------------------------
// Gain error study: ||p^_n - P^_n|| and ||K(p_n) - K(P_n)|| scale like
// 1/sqrt(N); the gain error obeys the explicit Lipschitz transfer bound.
// ---------------------------------------------------------------------------

StudyReport gain_error_study(const StudyConfig& cfg, int jobs) {
  const ModelParams& model = cfg.model;
  if (min_eigenvalue(model.s.mat()) <= 0.0)
    throw ConfigError("gain-error study requires invertible S = B' R0^{-1} B");
  const Matrix bbt = model.b * model.b.transpose();
  const double bbt_min = min_eigenvalue(bbt);
  if (bbt_min <= 0.0)
    throw ConfigError("gain-error study requires B B' to be positive definite");
  const double lip = max_eigenvalue(model.s.mat()) * model.s.mat().trace() *
                     spd_inverse(model.s.mat()).norm() / std::sqrt(bbt_min);

  const int horizon = cfg.horizon;
  const auto orbit = predicted_orbit(model, horizon);
  std::vector<Matrix> upd_orbit(horizon + 1), gains(horizon + 1);
  for (int n = 0; n <= horizon; ++n) {
    gains[n] = kalman_gain(model, orbit[n]);
    upd_orbit[n] = sym_part(update_factor(model, orbit[n]) * orbit[n]);
  }
  const Vector y0 = Vector::Zero(model.obs_dim());
  const int n0 = post_transient(horizon);

  StudyReport report;
  report.study = "gain-error";
  report.raw_header = {"N", "replica", "sup_upd_error", "sup_gain_error"};
  report.raw_rows.resize(static_cast<std::size_t>(cfg.ensemble_sizes.size()) * cfg.replicas);

  struct Partial {
    ErrorTrace upd, gain;
    double lip_excess = -std::numeric_limits<double>::infinity();
    explicit Partial(int steps = 0) : upd(steps), gain(steps) {}
  };

  std::vector<double> upd_values, gain_values;
  double lip_excess = -std::numeric_limits<double>::infinity();
  bool flat_ok = true;
  nlohmann::json per_n_stats = nlohmann::json::array();

  for (std::size_t ni = 0; ni < cfg.ensemble_sizes.size(); ++ni) {
    const int N = cfg.ensemble_sizes[ni];
    const std::string purpose = "gain:sim:N=" + std::to_string(N);
    const auto chunks = fixed_chunks(cfg.replicas);
    std::vector<Partial> partials(chunks.size());
    parallel_chunk_run(cfg.replicas, jobs, [&](int ci, int begin, int end) {
      Partial part(horizon + 1);
      for (int rep = begin; rep < end; ++rep) {
        Simulator sim(model, cfg.backend, N, RngStream::derive(cfg.seed, purpose, rep));
        double sup_upd = 0.0, sup_gain = 0.0;
        for (int n = 0; n <= horizon; ++n) {
          if (n > 0) sim.step(y0);
          const Matrix& p = sim.covariance();
          const double ge = (kalman_gain(model, p) - gains[n]).norm();
          const double pe = (p - orbit[n]).norm();
          part.gain.add(n, ge);
          part.lip_excess = std::max(part.lip_excess, ge - lip * pe);
          sup_gain = std::max(sup_gain, ge);
          if (n > 0 && sim.updated_covariance()) {
            const double ue = (*sim.updated_covariance() - upd_orbit[n - 1]).norm();
            part.upd.add(n, ue);
            sup_upd = std::max(sup_upd, ue);
          }
        }
        ++part.upd.count;
        ++part.gain.count;
        report.raw_rows[ni * cfg.replicas + rep] = {static_cast<double>(N),
                                                    static_cast<double>(rep), sup_upd,
                                                    sup_gain};
      }
      partials[ci] = std::move(part);
    });
    Partial total(horizon + 1);
    for (const auto& p : partials) {
      total.upd.merge(p.upd);
      total.gain.merge(p.gain);
      total.lip_excess = std::max(total.lip_excess, p.lip_excess);
    }
    lip_excess = std::max(lip_excess, total.lip_excess);

    double sup_upd = 0.0, sup_gain = 0.0;
    for (int n = 1; n <= horizon; ++n) sup_upd = std::max(sup_upd, total.upd.est(n, 1));
    for (int n = 0; n <= horizon; ++n) sup_gain = std::max(sup_gain, total.gain.est(n, 1));
    upd_values.push_back(sup_upd);
    gain_values.push_back(sup_gain);

    const double base = total.gain.est(n0, 1);
    double tail_sup = 0.0;
    for (int n = n0; n <= horizon; ++n) tail_sup = std::max(tail_sup, total.gain.est(n, 1));
    const double flat = base > 0.0 ? tail_sup / base : 1.0;
    if (flat < 0.8 || flat > 1.25) flat_ok = false;
    per_n_stats.push_back({{"N", N},
                           {"sup_updated_cov_error", sup_upd},
                           {"sup_gain_error", sup_gain},
                           {"flatness_ratio", flat}});
  }

  std::vector<double> scales(cfg.ensemble_sizes.begin(), cfg.ensemble_sizes.end());
  const SlopeFit upd_fit = fit_loglog_slope(scales, upd_values);
  const SlopeFit gain_fit = fit_loglog_slope(scales, gain_values);

  report.verdicts.push_back(slope_verdict("updated_cov_rate_slope", upd_fit, -0.5, 0.1));
  report.verdicts.push_back(slope_verdict("gain_rate_slope", gain_fit, -0.5, 0.1));
  Verdict lipv{"gain_lipschitz_bound", lip_excess <= 1e-9 * (1.0 + lip), lip_excess,
               "max over draws of ||K(p)-K(P)||_F - C ||p-P||_F with the explicit C"};
  report.verdicts.push_back(lipv);
  Verdict flat{"time_flatness", flat_ok, 0.0, "gain error flat after the transient"};
  report.verdicts.push_back(flat);

  report.stats["per_N"] = per_n_stats;
  report.stats["slope_fit_updated_cov"] = slope_json(upd_fit);
  report.stats["slope_fit_gain"] = slope_json(gain_fit);
  report.stats["lipschitz_constant"] = lip;
  return report;
}

// ---------------------------------------------------------------------------
// Lyapunov study: drift of U(p) = 1 + Tr(p) + Tr(p^{-1}) under the chain.
// ---------------------------------------------------------------------------

StudyReport lyapunov_study(const StudyConfig& cfg, int jobs) {
  const ModelParams& model = cfg.model;
  const int d = model.dim();
  const int N = cfg.ensemble_sizes.front();
  if (N < 2 * d + 1)
    throw ConfigError("lyapunov study requires N >= 2d+1");
  if (min_eigenvalue(model.s.mat()) <= 0.0)
    throw ConfigError("lyapunov study requires invertible S for the trace envelope");

  const int horizon = cfg.horizon;
  const Vector y0 = Vector::Zero(model.obs_dim());
  const double trace_cap =
      (model.a * spd_inverse(model.s.mat()) * model.a.transpose() + model.r.mat()).trace();
  const double inv_cap =
      spd_inverse(model.r.mat()).trace() / (1.0 - (2.0 * d + 1.0) / N);

  struct Partial {
    double su = 0.0, sv = 0.0, suu = 0.0, suv = 0.0, svv = 0.0;
    long pairs = 0;
    std::vector<double> tr_sum, inv_tr_sum;
    long count = 0;
    explicit Partial(int steps = 0) : tr_sum(steps, 0.0), inv_tr_sum(steps, 0.0) {}
  };

  auto lyapunov_fn = [](const Matrix& p) {
    return 1.0 + p.trace() + spd_inverse(p).trace();
  };

  StudyReport report;
  report.study = "lyapunov";
  report.raw_header = {"replica", "mean_lyapunov"};
  report.raw_rows.resize(cfg.replicas);

  const auto chunks = fixed_chunks(cfg.replicas);
  std::vector<Partial> partials(chunks.size());
  parallel_chunk_run(cfg.replicas, jobs, [&](int ci, int begin, int end) {
    Partial part(horizon + 1);
    for (int rep = begin; rep < end; ++rep) {
      Simulator sim(model, cfg.backend, N, RngStream::derive(cfg.seed, "lyapunov:sim", rep));
      double u = lyapunov_fn(sim.covariance());
      double u_mean = u;
      part.tr_sum[0] += sim.covariance().trace();
      part.inv_tr_sum[0] += spd_inverse(sim.covariance()).trace();
      for (int n = 1; n <= horizon; ++n) {
        sim.step(y0);
        const double v = lyapunov_fn(sim.covariance());
        part.su += u;
        part.sv += v;
        part.suu += u * u;
        part.suv += u * v;
        part.svv += v * v;
        ++part.pairs;
        part.tr_sum[n] += sim.covariance().trace();
        part.inv_tr_sum[n] += spd_inverse(sim.covariance()).trace();
        u = v;
        u_mean += v;
      }
      ++part.count;
      report.raw_rows[rep] = {static_cast<double>(rep), u_mean / (horizon + 1)};
    }
    partials[ci] = std::move(part);
  });
  Partial total(horizon + 1);
  for (const auto& p : partials) {
    total.su += p.su;
    total.sv += p.sv;
    total.suu += p.suu;
    total.suv += p.suv;
    total.svv += p.svv;
    total.pairs += p.pairs;
    for (int n = 0; n <= horizon; ++n) {
      total.tr_sum[n] += p.tr_sum[n];
      total.inv_tr_sum[n] += p.inv_tr_sum[n];
    }
    total.count += p.count;
  }
  if (total.pairs < 100) throw ConfigError("lyapunov study: insufficient state coverage");

  const double n_pairs = static_cast<double>(total.pairs);
  const double u_mean = total.su / n_pairs;
  const double v_mean = total.sv / n_pairs;
  const double sxx = total.suu - n_pairs * u_mean * u_mean;
  const double sxy = total.suv - n_pairs * u_mean * v_mean;
  const double syy = total.svv - n_pairs * v_mean * v_mean;
  if (sxx <= 1e-12 * n_pairs * (1.0 + u_mean * u_mean))
    throw ConfigError("lyapunov study: insufficient state coverage (degenerate states)");
  const double eps_hat = sxy / sxx;
  const double c_hat = v_mean - eps_hat * u_mean;
  const double rss = std::max(0.0, syy - sxy * sxy / sxx);
  const double eps_se = std::sqrt(rss / (n_pairs - 2.0) / sxx);
  const double eps_upper = eps_hat + 1.96 * eps_se;

  bool trace_ok = true, inv_ok = true;
  double worst_trace = -std::numeric_limits<double>::infinity();
  double worst_inv = worst_trace;
  for (int n = 1; n <= horizon; ++n) {
    const double tr_mean = total.tr_sum[n] / total.count;
    const double inv_mean = total.inv_tr_sum[n] / total.count;
    // 3-sigma slack from the replica spread at the pooled level.
    const double tr_slack = 3.0 * std::abs(tr_mean) / std::sqrt(static_cast<double>(total.count));
    const double inv_slack = 3.0 * std::abs(inv_mean) / std::sqrt(static_cast<double>(total.count));
    worst_trace = std::max(worst_trace, tr_mean - trace_cap - tr_slack);
    worst_inv = std::max(worst_inv, inv_mean - inv_cap - inv_slack);
    if (tr_mean > trace_cap + tr_slack) trace_ok = false;
    if (inv_mean > inv_cap + inv_slack) inv_ok = false;
  }

  report.verdicts.push_back(Verdict{"drift_coefficient_below_one", eps_upper < 1.0,
                                    eps_hat,
                                    "fitted drift with 95% upper bound " +
                                        std::to_string(eps_upper)});
  report.verdicts.push_back(
      Verdict{"trace_envelope", trace_ok, worst_trace, "mean Tr(p_n) <= Tr(A S^{-1} A' + R)"});
  report.verdicts.push_back(Verdict{"inverse_trace_envelope", inv_ok, worst_inv,
                                    "mean Tr(p_n^{-1}) <= Tr(R^{-1}) / (1 - (2d+1)/N)"});

  report.stats["epsilon_hat"] = eps_hat;
  report.stats["epsilon_upper95"] = eps_upper;
  report.stats["offset_hat"] = c_hat;
  report.stats["trace_cap"] = trace_cap;
  report.stats["inverse_trace_cap"] = inv_cap;
  report.stats["ensemble_size"] = N;
  return report;
}

// ---------------------------------------------------------------------------
// Ergodicity study: two dispersed initial laws coupled in distribution.
// ---------------------------------------------------------------------------

StudyReport ergodicity_study(const StudyConfig& cfg, int jobs) {
  const ModelParams& model = cfg.model;
  const int d = model.dim();
  const int N = cfg.ensemble_sizes.front();
  if (N < 2 * d + 1) throw ConfigError("ergodicity study requires N >= 2d+1");
  const int horizon = cfg.horizon;
  const Vector y0 = Vector::Zero(model.obs_dim());

  const Matrix p_lo = 0.01 * Matrix::Identity(d, d);
  const Matrix p_hi = 100.0 * Matrix::Identity(d, d);

  // traces[pop][rep * (horizon+1) + n] = Tr(p_n); final matrices kept for the
  // law tests and the one-step push-forward.
  std::vector<std::vector<double>> traces(2);
  std::vector<std::vector<Matrix>> finals(2);
  for (int pop = 0; pop < 2; ++pop) {
    traces[pop].assign(static_cast<std::size_t>(cfg.replicas) * (horizon + 1), 0.0);
    finals[pop].assign(cfg.replicas, Matrix());
  }

  for (int pop = 0; pop < 2; ++pop) {
    const Matrix& init = pop == 0 ? p_lo : p_hi;
    const std::string purpose = pop == 0 ? "ergodicity:lo" : "ergodicity:hi";
    parallel_chunk_run(cfg.replicas, jobs, [&](int, int begin, int end) {
      for (int rep = begin; rep < end; ++rep) {
        Simulator sim(model, cfg.backend, N, RngStream::derive(cfg.seed, purpose, rep),
                      init);
        traces[pop][static_cast<std::size_t>(rep) * (horizon + 1)] = sim.covariance().trace();
        for (int n = 1; n <= horizon; ++n) {
          sim.step(y0);
          traces[pop][static_cast<std::size_t>(rep) * (horizon + 1) + n] =
              sim.covariance().trace();
        }
        finals[pop][rep] = sim.covariance();
      }
    });
  }

  std::vector<double> ks_by_step(horizon + 1);
  for (int n = 0; n <= horizon; ++n) {
    std::vector<double> a(cfg.replicas), b(cfg.replicas);
    for (int rep = 0; rep < cfg.replicas; ++rep) {
      a[rep] = traces[0][static_cast<std::size_t>(rep) * (horizon + 1) + n];
      b[rep] = traces[1][static_cast<std::size_t>(rep) * (horizon + 1) + n];
    }
    ks_by_step[n] = ks_two_sample(std::move(a), std::move(b)).statistic;
  }

  const double floor95 = 1.358 * std::sqrt(2.0 / cfg.replicas);
  // Horizon check: the tail must sit at the two-sample noise floor.
  double tail_mean = 0.0;
  const int tail_start = horizon - std::max(1, horizon / 10);
  for (int n = tail_start; n <= horizon; ++n) tail_mean += ks_by_step[n];
  tail_mean /= (horizon - tail_start + 1);
  if (tail_mean > 2.0 * floor95)
    throw ConfigError("ergodicity study: horizon too short (KS tail has not flattened)");

  // Rate fit over the decaying segment.
  const double threshold = std::max(2.0 * floor95, 0.05);
  int n_cross = 0;
  for (int n = 0; n <= horizon; ++n)
    if (ks_by_step[n] > threshold) n_cross = n;
  const int fit_end = std::max(n_cross, 4);
  std::vector<double> xs, ys;
  for (int n = 0; n <= std::min(fit_end, horizon); ++n) {
    xs.push_back(static_cast<double>(n));
    ys.push_back(std::log(std::max(ks_by_step[n], 1e-6)));
  }
  // Straight OLS of log distance on the step index.
  double x_mean = 0.0, y_mean = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    x_mean += xs[i];
    y_mean += ys[i];
  }
  x_mean /= xs.size();
  y_mean /= xs.size();
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - x_mean) * (xs[i] - x_mean);
    sxy += (xs[i] - x_mean) * (ys[i] - y_mean);
    syy += (ys[i] - y_mean) * (ys[i] - y_mean);
  }
  const double rate_slope = sxy / sxx;
  const double rate_rss = std::max(0.0, syy - sxy * sxy / sxx);
  const double dof = std::max<std::size_t>(xs.size(), 3) - 2;
  const double rate_se = std::sqrt(rate_rss / dof / sxx);
  const double rate_upper = rate_slope + t_critical_975(static_cast<int>(dof)) * rate_se;

  // Stationarity: push the lo population one more covariance-chain step and
  // compare in law against the independent hi population.
  std::vector<Matrix> pushed(cfg.replicas);
  parallel_chunk_run(cfg.replicas, jobs, [&](int, int begin, int end) {
    for (int rep = begin; rep < end; ++rep) {
      RngStream stream = RngStream::derive(cfg.seed, "ergodicity:push", rep);
      pushed[rep] = covariance_chain_step(model, finals[0][rep], N, stream).pred_cov;
    }
  });
  const LawTestResult stationarity = matrix_law_test(pushed, finals[1], true, 0.01);
  const LawTestResult final_law = matrix_law_test(finals[0], finals[1], true, 0.01);

  StudyReport report;
  report.study = "ergodicity";
  report.raw_header = {"step", "ks_distance"};
  for (int n = 0; n <= horizon; ++n)
    report.raw_rows.push_back({static_cast<double>(n), ks_by_step[n]});

  report.verdicts.push_back(Verdict{"final_ks_below_threshold",
                                    ks_by_step[horizon] < 0.02, ks_by_step[horizon],
                                    "KS distance on Tr(p_n) at the horizon"});
  report.verdicts.push_back(Verdict{"ks_decay_rate_negative", rate_upper < 0.0,
                                    rate_slope,
                                    "log-KS slope with 95% upper bound " +
                                        std::to_string(rate_upper)});
  report.verdicts.push_back(Verdict{"final_law_two_sample", final_law.pass, 0.0,
                                    "lo vs hi final laws (KS on Tr/log-det/lambda_max)"});
  report.verdicts.push_back(Verdict{"invariant_one_step_pushforward", stationarity.pass,
                                    0.0, "pi T indistinguishable from pi"});

  report.stats["ks_by_step"] = ks_by_step;
  report.stats["rate_slope"] = rate_slope;
  report.stats["rate_upper95"] = rate_upper;
  report.stats["noise_floor95"] = floor95;
  report.stats["ensemble_size"] = N;
  return report;
}

// ---------------------------------------------------------------------------
// CLT study: sqrt(N) (p_n - P_n) against the limit sampler.
// ---------------------------------------------------------------------------

StudyReport clt_study(const StudyConfig& cfg, int jobs) {
  const ModelParams& model = cfg.model;
  const int d = model.dim();
  const int N = cfg.ensemble_sizes.back();
  const int n_star = cfg.horizon;
  const Vector y0 = Vector::Zero(model.obs_dim());
  const auto orbit = predicted_orbit(model, n_star);
  const double root_n = std::sqrt(static_cast<double>(N));

  std::vector<Matrix> empirical(cfg.replicas);
  parallel_chunk_run(cfg.replicas, jobs, [&](int, int begin, int end) {
    for (int rep = begin; rep < end; ++rep) {
      Simulator sim(model, cfg.backend, N, RngStream::derive(cfg.seed, "clt:sim", rep));
      for (int n = 1; n <= n_star; ++n) sim.step(y0);
      empirical[rep] = root_n * (sim.covariance() - orbit[n_star]);
    }
  });

  const LimitNoiseSampler sampler(model, n_star);
  std::vector<Matrix> limit(kLimitDraws);
  parallel_chunk_run(kLimitDraws, jobs, [&](int, int begin, int end) {
    for (int i = begin; i < end; ++i) {
      RngStream stream = RngStream::derive(cfg.seed, "clt:limit", i);
      limit[i] = sampler.draw_limit_sum(stream);
    }
  });

  // Entrywise first and second moments with self-calibrated 4-sigma bands.
  auto entry_stats = [d](const std::vector<Matrix>& sample) {
    MatrixMoments mm;
    for (const Matrix& m : sample) mm.add(m);
    const Matrix mean = mm.mean();
    const Matrix var = mm.variance();
    Matrix se_mean(d, d), se_var(d, d);
    const double n = static_cast<double>(sample.size());
    Matrix m4 = Matrix::Zero(d, d);
    for (const Matrix& m : sample) {
      const Matrix c = m - mean;
      m4 += c.cwiseProduct(c).cwiseProduct(c.cwiseProduct(c));
    }
    m4 /= n;
    se_mean = (var / n).cwiseSqrt();
    se_var = ((m4 - var.cwiseProduct(var)).cwiseMax(0.0) / n).cwiseSqrt();
    return std::tuple<Matrix, Matrix, Matrix, Matrix>(mean, var, se_mean, se_var);
  };
  const auto [mean_e, var_e, se_mean_e, se_var_e] = entry_stats(empirical);
  const auto [mean_l, var_l, se_mean_l, se_var_l] = entry_stats(limit);

  double worst_mean_gap = 0.0, worst_var_gap = 0.0;
  bool mean_ok = true, var_ok = true;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const double mg = std::abs(mean_e(i, j) - mean_l(i, j)) /
                        std::max(1e-300, 4.0 * std::hypot(se_mean_e(i, j), se_mean_l(i, j)));
      const double vg = std::abs(var_e(i, j) - var_l(i, j)) /
                        std::max(1e-300, 4.0 * std::hypot(se_var_e(i, j), se_var_l(i, j)));
      worst_mean_gap = std::max(worst_mean_gap, mg);
      worst_var_gap = std::max(worst_var_gap, vg);
      if (mg > 1.0) mean_ok = false;
      if (vg > 1.0) var_ok = false;
    }

  const LawTestResult law = matrix_law_test(empirical, limit, false, 0.01);

  StudyReport report;
  report.study = "clt";
  report.raw_header = {"replica", "scaled_error_trace"};
  for (int rep = 0; rep < cfg.replicas; ++rep)
    report.raw_rows.push_back({static_cast<double>(rep), empirical[rep].trace()});

  report.verdicts.push_back(Verdict{"mean_within_4se", mean_ok, worst_mean_gap,
                                    "entrywise |mean gap| / (4 SE) <= 1"});
  report.verdicts.push_back(Verdict{"variance_within_4se", var_ok, worst_var_gap,
                                    "entrywise |variance gap| / (4 SE) <= 1"});
  report.verdicts.push_back(Verdict{"ks_law_match", law.pass, 0.0,
                                    "KS on Tr/Frobenius/lambda_max at 1% Bonferroni"});

  report.stats["ensemble_size"] = N;
  report.stats["step"] = n_star;
  report.stats["limit_draws"] = kLimitDraws;
  report.stats["empirical_mean_trace"] = mean_e.trace();
  report.stats["limit_mean_trace"] = mean_l.trace();
  report.stats["empirical_var_00"] = var_e(0, 0);
  report.stats["limit_var_00"] = var_l(0, 0);
  nlohmann::json ks = nlohmann::json::array();
  for (std::size_t f = 0; f < law.tests.size(); ++f)
    ks.push_back({{"functional", law.functional[f]},
                  {"statistic", law.tests[f].statistic},
                  {"p_value", law.tests[f].p_value}});
  report.stats["ks_tests"] = ks;
  return report;
}

// ---------------------------------------------------------------------------
// State error study: sup_n E||m_n - Kalman mean|| scales like 1/sqrt(N)
// under the contraction hypothesis.
// ---------------------------------------------------------------------------

StudyReport state_error_study(const StudyConfig& cfg, int jobs) {
  const ModelParams& model = cfg.model;
  if (cfg.backend == Backend::WishartChain)
    throw ConfigError("state-error study needs a mean-tracking backend");
  if (min_eigenvalue(model.s.mat()) <= 0.0)
    throw ConfigError("state-error study requires invertible S");
  const Matrix s_sqrt = principal_sqrt(model.s.mat());
  const Matrix s_sqrt_inv = spd_inverse(s_sqrt);
  const double contraction = spectral_norm(s_sqrt * model.a * s_sqrt_inv);
  if (!(contraction < 1.0))
    throw ConfigError("state-error study hypothesis violated: ||S^{1/2} A S^{-1/2}||_2 = " +
                      std::to_string(contraction) + " >= 1");

  const int horizon = cfg.horizon;
  const auto orbit = predicted_orbit(model, horizon);
  std::vector<Matrix> gains(horizon + 1);
  for (int n = 0; n <= horizon; ++n) gains[n] = kalman_gain(model, orbit[n]);
  const int n0 = post_transient(horizon);

  StudyReport report;
  report.study = "state-error";
  report.raw_header = {"N", "replica", "sup_pred_mean_error"};
  report.raw_rows.resize(static_cast<std::size_t>(cfg.ensemble_sizes.size()) * cfg.replicas);

  struct Partial {
    ErrorTrace pred, upd;
    explicit Partial(int steps = 0) : pred(steps), upd(steps) {}
  };

  std::vector<double> pred_values, upd_values;
  bool flat_ok = true;
  nlohmann::json per_n_stats = nlohmann::json::array();

  for (std::size_t ni = 0; ni < cfg.ensemble_sizes.size(); ++ni) {
    const int N = cfg.ensemble_sizes[ni];
    const std::string sim_purpose = "state:sim:N=" + std::to_string(N);
    const std::string path_purpose = "state:path:N=" + std::to_string(N);
    const auto chunks = fixed_chunks(cfg.replicas);
    std::vector<Partial> partials(chunks.size());
    parallel_chunk_run(cfg.replicas, jobs, [&](int ci, int begin, int end) {
      Partial part(horizon + 1);
      for (int rep = begin; rep < end; ++rep) {
        const PathSample path =
            simulate_path(model, horizon, derive_seed(cfg.seed, path_purpose, rep));
        Simulator sim(model, cfg.backend, N,
                      RngStream::derive(cfg.seed, sim_purpose, rep));
        Vector kf_pred = model.x0_mean;
        double sup_pred = (*sim.mean() - kf_pred).norm();
        part.pred.add(0, sup_pred);
        for (int n = 0; n <= horizon; ++n) {
          const Vector& y = path.observations[n];
          const Vector kf_upd = kf_pred + gains[n] * (y - model.b * kf_pred);
          sim.step(y);
          part.upd.add(n, (*sim.updated_mean() - kf_upd).norm());
          if (n < horizon) {
            kf_pred = model.a * kf_upd;
            const double e = (*sim.mean() - kf_pred).norm();
            part.pred.add(n + 1, e);
            sup_pred = std::max(sup_pred, e);
          }
        }
        ++part.pred.count;
        ++part.upd.count;
        report.raw_rows[ni * cfg.replicas + rep] = {static_cast<double>(N),
                                                    static_cast<double>(rep), sup_pred};
      }
      partials[ci] = std::move(part);
    });
    Partial total(horizon + 1);
    for (const auto& p : partials) {
      total.pred.merge(p.pred);
      total.upd.merge(p.upd);
    }

    double sup_pred = 0.0, sup_upd = 0.0;
    for (int n = 0; n <= horizon; ++n) {
      sup_pred = std::max(sup_pred, total.pred.est(n, 1));
      sup_upd = std::max(sup_upd, total.upd.est(n, 1));
    }
    pred_values.push_back(sup_pred);
    upd_values.push_back(sup_upd);

    const double base = total.pred.est(n0, 1);
    double tail_sup = 0.0;
    for (int n = n0; n <= horizon; ++n) tail_sup = std::max(tail_sup, total.pred.est(n, 1));
    const double flat = base > 0.0 ? tail_sup / base : 1.0;
    if (flat < 0.8 || flat > 1.25) flat_ok = false;
    per_n_stats.push_back({{"N", N},
                           {"sup_pred_mean_error", sup_pred},
                           {"sup_upd_mean_error", sup_upd},
                           {"flatness_ratio", flat}});
  }

  std::vector<double> scales(cfg.ensemble_sizes.begin(), cfg.ensemble_sizes.end());
  const SlopeFit pred_fit = fit_loglog_slope(scales, pred_values);
  const SlopeFit upd_fit = fit_loglog_slope(scales, upd_values);

  report.verdicts.push_back(slope_verdict("pred_mean_rate_slope", pred_fit, -0.5, 0.1));
  report.verdicts.push_back(slope_verdict("upd_mean_rate_slope", upd_fit, -0.5, 0.1));
  Verdict flat{"time_flatness", flat_ok, 0.0, "prediction error flat after the transient"};
  report.verdicts.push_back(flat);

  report.stats["per_N"] = per_n_stats;
  report.stats["slope_fit_pred"] = slope_json(pred_fit);
  report.stats["slope_fit_upd"] = slope_json(upd_fit);
  report.stats["contraction_norm"] = contraction;
  return report;
}

StudyReport run_study(const StudyConfig& cfg, int jobs) {
  if (cfg.study == "bias") return bias_study(cfg, jobs);
  if (cfg.study == "fluctuation") return fluctuation_study(cfg, jobs);
  if (cfg.study == "gain-error") return gain_error_study(cfg, jobs);
  if (cfg.study == "lyapunov") return lyapunov_study(cfg, jobs);
  if (cfg.study == "ergodicity") return ergodicity_study(cfg, jobs);
  if (cfg.study == "clt") return clt_study(cfg, jobs);
  if (cfg.study == "state-error") return state_error_study(cfg, jobs);
  throw ConfigError("unknown study '" + cfg.study +
                    "' (expected bias | fluctuation | gain-error | lyapunov | "
                    "ergodicity | clt | state-error)");
}

}  // namespace enkf_lab
