// Batch driver: model simulation, exact and ensemble filtering, Riccati
// context dumps, and the Monte Carlo study harness.
//
// Exit codes: 0 success, 1 study verdict failure (report still written),
// 2 configuration or hypothesis error, 3 numerical failure.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "enkf_lab/ensemble.hpp"
#include "enkf_lab/harness.hpp"
#include "enkf_lab/kalman.hpp"
#include "enkf_lab/report.hpp"
#include "enkf_lab/riccati.hpp"

namespace fs = std::filesystem;
using namespace enkf_lab;
using nlohmann::json;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = "out";
  uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
};

json load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

uint64_t effective_seed(const GlobalArgs& g, const json& config) {
  if (g.seed_set) return g.seed;
  if (config.contains("seed")) return config.at("seed").get<uint64_t>();
  return 1;
}

json echo_config(const json& config, const json& overrides) {
  json echo = config;
  for (auto it = overrides.begin(); it != overrides.end(); ++it)
    echo[it.key()] = it.value();
  echo["generator"] = kGeneratorVersion;
  echo["tool_version"] = kToolVersion;
  return echo;
}

void finish_run(const GlobalArgs& g, uint64_t seed, const json& echoed,
                std::vector<std::string> outputs, double wall_seconds) {
  fs::create_directories(g.out_dir);
  write_json_file(g.out_dir + "/config.json", echoed);
  outputs.push_back(g.out_dir + "/config.json");
  write_json_file(g.out_dir + "/manifest.json",
                  make_manifest(seed, echoed, outputs, wall_seconds));
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

int cmd_simulate(const GlobalArgs& g, int n) {
  Timer timer;
  const json config = load_config(g.config_path);
  const ModelParams model = model_from_json(config.at("model"));
  const uint64_t seed = effective_seed(g, config);
  const PathSample path = simulate_path(model, n, seed);

  fs::create_directories(g.out_dir);
  const std::string csv_path = g.out_dir + "/states.csv";
  std::ofstream os(csv_path);
  CsvWriter csv(os);
  std::vector<std::string> header{"step"};
  for (int i = 0; i < model.dim(); ++i) header.push_back("x_" + std::to_string(i));
  for (int i = 0; i < model.obs_dim(); ++i) header.push_back("y_" + std::to_string(i));
  csv.header(header);
  for (std::size_t k = 0; k < path.states.size(); ++k) {
    std::vector<double> row{static_cast<double>(k)};
    for (int i = 0; i < model.dim(); ++i) row.push_back(path.states[k][i]);
    for (int i = 0; i < model.obs_dim(); ++i) row.push_back(path.observations[k][i]);
    csv.row(row);
  }
  os.close();

  finish_run(g, seed, echo_config(config, {{"seed", seed}, {"n", n}}), {csv_path},
             timer.seconds());
  return 0;
}

int cmd_kalman(const GlobalArgs& g, int n) {
  Timer timer;
  const json config = load_config(g.config_path);
  const ModelParams model = model_from_json(config.at("model"));
  const uint64_t seed = effective_seed(g, config);
  const PathSample path = simulate_path(model, n, seed);
  const KalmanTrajectory traj = kf_run(model, path.observations);

  fs::create_directories(g.out_dir);
  const std::string csv_path = g.out_dir + "/kalman_trajectory.csv";
  std::ofstream os(csv_path);
  write_trajectory_csv(os, model, traj);
  os.close();

  finish_run(g, seed, echo_config(config, {{"seed", seed}, {"n", n}}), {csv_path},
             timer.seconds());
  return 0;
}

int cmd_enkf(const GlobalArgs& g, int n, std::string backend_str, int ensemble_size) {
  Timer timer;
  const json config = load_config(g.config_path);
  const ModelParams model = model_from_json(config.at("model"));
  const uint64_t seed = effective_seed(g, config);
  if (backend_str.empty()) backend_str = config.value("backend", "particle");
  const Backend backend = backend_from_string(backend_str);
  if (ensemble_size == 0) ensemble_size = config.value("ensemble_size", 32);
  if (ensemble_size + 1 <= model.dim())
    throw ConfigError("ensemble size " + std::to_string(ensemble_size) +
                      ": N+1 > d required");

  const PathSample path = simulate_path(model, n, seed);
  const KalmanTrajectory traj = kf_run(model, path.observations);

  fs::create_directories(g.out_dir);
  const std::string kf_path = g.out_dir + "/kalman_trajectory.csv";
  {
    std::ofstream os(kf_path);
    write_trajectory_csv(os, model, traj);
  }

  // EnKF trajectory side by side with the exact predictor covariance.
  const std::string enkf_path = g.out_dir + "/enkf_trajectory.csv";
  {
    const int d = model.dim();
    std::ofstream os(enkf_path);
    CsvWriter csv(os);
    std::vector<std::string> header{"step", "backend"};
    for (int i = 0; i < d; ++i) header.push_back("m_" + std::to_string(i));
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        header.push_back("p_" + std::to_string(i) + "_" + std::to_string(j));
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        header.push_back("pred_ref_" + std::to_string(i) + "_" + std::to_string(j));
    os << header[0];
    for (std::size_t i = 1; i < header.size(); ++i) os << ',' << header[i];
    os << '\n';

    Simulator sim(model, backend, ensemble_size,
                  RngStream::derive(seed, "enkf-run"));
    Matrix p_ref = model.p0.mat();
    const double backend_tag = static_cast<double>(static_cast<int>(backend));
    for (int k = 0; k <= n; ++k) {
      std::vector<double> row{static_cast<double>(k), backend_tag};
      const Vector* m = sim.mean();
      for (int i = 0; i < d; ++i) row.push_back(m ? (*m)[i] : std::nan(""));
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) row.push_back(sim.covariance()(i, j));
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) row.push_back(p_ref(i, j));
      csv.row(row);
      if (k < n) {
        sim.step(path.observations[k]);
        p_ref = riccati_map(model, p_ref);
      }
    }
  }

  finish_run(g, seed,
             echo_config(config, {{"seed", seed},
                                  {"n", n},
                                  {"backend", backend_name(backend)},
                                  {"ensemble_size", ensemble_size}}),
             {kf_path, enkf_path}, timer.seconds());
  return 0;
}

int cmd_riccati(const GlobalArgs& g) {
  Timer timer;
  const json config = load_config(g.config_path);
  const ModelParams model = model_from_json(config.at("model"));
  const uint64_t seed = effective_seed(g, config);
  const RiccatiContext ctx = solve_fixed_point(model);

  fs::create_directories(g.out_dir);
  const std::string out_path = g.out_dir + "/riccati.json";
  write_json_file(out_path, riccati_context_to_json(ctx));
  finish_run(g, seed, echo_config(config, {{"seed", seed}}), {out_path}, timer.seconds());
  return 0;
}

int cmd_study(const GlobalArgs& g, std::string study_name) {
  Timer timer;
  const json config = load_config(g.config_path);
  json effective = config;
  effective["seed"] = effective_seed(g, config);
  if (!study_name.empty()) {
    if (!effective.contains("study")) effective["study"] = json::object();
    effective["study"]["name"] = study_name;
  }
  StudyConfig cfg = study_config_from_json(effective);
  if (cfg.study.empty())
    throw ConfigError("no study selected: pass --study or set study.name in the config");

  const StudyReport report = run_study(cfg, g.jobs);

  fs::create_directories(g.out_dir);
  const std::string report_path = g.out_dir + "/report.json";
  json rj = report.to_json();
  rj["manifest"] = {{"seed", cfg.seed},
                    {"generator", kGeneratorVersion},
                    {"tool_version", kToolVersion},
                    {"config_hash", config_hash(echo_config(effective, {}))}};
  write_json_file(report_path, rj);

  const std::string raw_path = g.out_dir + "/raw.csv";
  {
    std::ofstream os(raw_path);
    CsvWriter csv(os);
    csv.header(report.raw_header);
    for (const auto& row : report.raw_rows) csv.row(row);
  }

  finish_run(g, cfg.seed, echo_config(effective, {}), {report_path, raw_path},
             timer.seconds());

  for (const Verdict& v : report.verdicts)
    std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << report.study << "/" << v.name
              << " value=" << v.value << "\n";
  return report.all_pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete-generation EnKF laboratory: exact filter, ensemble backends, "
               "Wishart perturbation theory, and Monte Carlo verification studies"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON configuration file")->required();
  auto* seed_opt = app.add_option("--seed", g.seed, "Master seed (overrides config)")
                       ->envname("ENKF_LAB_SEED");
  app.add_option("--out", g.out_dir, "Output directory");
  app.add_option("--jobs", g.jobs, "Worker threads for replica-parallel studies");

  int n_steps = 10;
  std::string backend_str;
  int ensemble_size = 0;
  std::string study_name;

  CLI::App* simulate = app.add_subcommand("simulate", "Sample a signal/observation path");
  simulate->add_option("--n", n_steps, "Number of steps (path has n+1 rows)");
  CLI::App* kalman = app.add_subcommand("kalman", "Run the exact Kalman filter");
  kalman->add_option("--n", n_steps, "Number of steps");
  CLI::App* enkf = app.add_subcommand("enkf", "Run an EnKF backend beside the exact filter");
  enkf->add_option("--n", n_steps, "Number of steps");
  enkf->add_option("--backend", backend_str, "particle | perturbation | wishart-chain");
  enkf->add_option("--ensemble-size", ensemble_size, "Ensemble size N");
  CLI::App* riccati = app.add_subcommand("riccati", "Solve the Riccati fixed point");
  CLI::App* study = app.add_subcommand("study", "Run a Monte Carlo verification study");
  study->add_option("--study", study_name,
                    "bias | fluctuation | gain-error | lyapunov | ergodicity | clt | state-error");

  try {
    app.parse(argc, argv);
    g.seed_set = seed_opt->count() > 0 || std::getenv("ENKF_LAB_SEED") != nullptr;
    if (simulate->parsed()) return cmd_simulate(g, n_steps);
    if (kalman->parsed()) return cmd_kalman(g, n_steps);
    if (enkf->parsed()) return cmd_enkf(g, n_steps, backend_str, ensemble_size);
    if (riccati->parsed()) return cmd_riccati(g);
    if (study->parsed()) return cmd_study(g, study_name);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
