#include "enkf_lab/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>

#include "enkf_lab/matrix.hpp"
#include "enkf_lab/rng.hpp"

namespace enkf_lab {

std::string CsvWriter::format(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.16e", v);
  return buf;
}

void CsvWriter::header(const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) os_ << ',';
    os_ << names[i];
  }
  os_ << '\n';
}

void CsvWriter::row(const std::vector<double>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os_ << ',';
    os_ << format(values[i]);
  }
  os_ << '\n';
}

uint64_t config_hash(const nlohmann::json& config) {
  return fnv1a64(config.dump());  // nlohmann keeps object keys sorted
}

nlohmann::json make_manifest(uint64_t seed, const nlohmann::json& config,
                             const std::vector<std::string>& outputs,
                             double wall_seconds) {
  nlohmann::json m;
  m["tool_version"] = kToolVersion;
  m["generator"] = kGeneratorVersion;
  m["seed"] = seed;
  m["config_hash"] = config_hash(config);
  m["wall_seconds"] = wall_seconds;
  m["outputs"] = outputs;
  return m;
}

void write_text_file(const std::string& path, const std::string& contents) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open for writing: " + path);
  os << contents;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace enkf_lab
