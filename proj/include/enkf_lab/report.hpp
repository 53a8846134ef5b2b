#ifndef ENKF_LAB_REPORT_HPP
#define ENKF_LAB_REPORT_HPP

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <ostream>
#include <string>
#include <vector>

namespace enkf_lab {

inline constexpr const char* kToolVersion = "enkf-lab 1.0.0";

/// Comma-separated output with a header row; numeric cells are written in
/// 17-significant-digit scientific notation so replays are bit-comparable.
class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& os) : os_(os) {}
  void header(const std::vector<std::string>& names);
  void row(const std::vector<double>& values);
  static std::string format(double v);

 private:
  std::ostream& os_;
};

/// 64-bit FNV-1a over the canonical (sorted-key) JSON dump; identifies a
/// configuration in manifests.
uint64_t config_hash(const nlohmann::json& config);

/// Reproducibility manifest: tool + generator versions, master seed, config
/// hash, wall clock, and the files the run produced.
nlohmann::json make_manifest(uint64_t seed, const nlohmann::json& config,
                             const std::vector<std::string>& outputs,
                             double wall_seconds);

void write_text_file(const std::string& path, const std::string& contents);
void write_json_file(const std::string& path, const nlohmann::json& j);

}  // namespace enkf_lab

#endif
