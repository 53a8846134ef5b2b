#ifndef ENKF_LAB_HARNESS_HPP
#define ENKF_LAB_HARNESS_HPP

#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "enkf_lab/ensemble.hpp"
#include "enkf_lab/model.hpp"
#include "enkf_lab/stats.hpp"

namespace enkf_lab {

struct StudyConfig {
  ModelParams model;
  std::vector<int> ensemble_sizes{8, 16, 32, 64, 128, 256, 512};
  int horizon = 100;
  int replicas = 1000;
  uint64_t seed = 1;
  Backend backend = Backend::Particle;
  std::string study;
};

StudyConfig study_config_from_json(const nlohmann::json& j);

struct Verdict {
  std::string name;
  bool pass = false;
  double value = 0.0;
  std::string detail;
};

struct StudyReport {
  std::string study;
  nlohmann::json stats;
  std::vector<Verdict> verdicts;
  std::vector<std::string> raw_header;
  std::vector<std::vector<double>> raw_rows;

  bool all_pass() const;
  nlohmann::json to_json() const;
};

/// Dispatch on cfg.study: bias | fluctuation | gain-error | lyapunov |
/// ergodicity | clt | state-error.
StudyReport run_study(const StudyConfig& cfg, int jobs);

StudyReport bias_study(const StudyConfig& cfg, int jobs);
StudyReport fluctuation_study(const StudyConfig& cfg, int jobs);
StudyReport gain_error_study(const StudyConfig& cfg, int jobs);
StudyReport lyapunov_study(const StudyConfig& cfg, int jobs);
StudyReport ergodicity_study(const StudyConfig& cfg, int jobs);
StudyReport clt_study(const StudyConfig& cfg, int jobs);
StudyReport state_error_study(const StudyConfig& cfg, int jobs);

/// Deterministic chunked parallel map: tasks [0, total) are processed in
/// fixed chunks whose partial results the caller merges in chunk order, so
/// the outcome does not depend on the worker count.
std::vector<std::pair<int, int>> fixed_chunks(int total, int chunk_size = 64);
void parallel_chunk_run(int total, int jobs,
                        const std::function<void(int chunk_index, int begin, int end)>& fn,
                        int chunk_size = 64);

}  // namespace enkf_lab

#endif
