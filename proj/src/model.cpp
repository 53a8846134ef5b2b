#include "enkf_lab/model.hpp"

#include <nlohmann/json.hpp>

namespace enkf_lab {

namespace {

SpdMatrix check_pd(const Matrix& m, const char* name, int want_dim) {
  if (m.rows() != want_dim || m.cols() != want_dim)
    throw ConfigError(std::string(name) + ": expected " + std::to_string(want_dim) +
                      "x" + std::to_string(want_dim) + ", got " +
                      std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  try {
    return SpdMatrix::from(m, Definiteness::PositiveDefinite);
  } catch (const NumericalError& e) {
    throw ConfigError(std::string(name) + ": " + e.what());
  }
}

}  // namespace

ModelParams make_model(const Matrix& a, const Matrix& b, const Matrix& r,
                       const Matrix& r0, const Matrix& p0, const Vector& x0_mean) {
  if (a.rows() == 0 || a.rows() != a.cols())
    throw ConfigError("a: must be square and non-empty");
  const int d = static_cast<int>(a.rows());
  if (b.cols() != d)
    throw ConfigError("b: expected " + std::to_string(b.rows()) + "x" +
                      std::to_string(d) + ", got " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  const int d0 = static_cast<int>(b.rows());
  if (d0 == 0) throw ConfigError("b: must have at least one row");
  if (x0_mean.size() != d)
    throw ConfigError("x0_mean: expected length " + std::to_string(d));

  ModelParams params;
  params.a = a;
  params.b = b;
  params.r = check_pd(r, "r", d);
  params.r0 = check_pd(r0, "r0", d0);
  params.p0 = check_pd(p0, "p0", d);
  params.x0_mean = x0_mean;
  const Matrix r0_inv_b = Eigen::LLT<Matrix>(params.r0.mat()).solve(b);
  params.s = SpdMatrix::from(b.transpose() * r0_inv_b);
  return params;
}

const ModelParams& validate(const ModelParams& params) {
  ModelParams rebuilt = make_model(params.a, params.b, params.r.mat(), params.r0.mat(),
                                   params.p0.mat(), params.x0_mean);
  const double scale = 1.0 + rebuilt.s.mat().norm();
  if ((rebuilt.s.mat() - params.s.mat()).norm() > 1e-12 * scale)
    throw ConfigError("s: stored matrix does not match b' r0^{-1} b");
  return params;
}

namespace {
ModelParams scalar_model(double a) {
  const Matrix one = Matrix::Identity(1, 1);
  return make_model(a * one, one, one, one, one, Vector::Zero(1));
}
}  // namespace

ModelParams golden_scalar_model() { return scalar_model(1.0); }
ModelParams contractive_scalar_model(double a) { return scalar_model(a); }

PathSample simulate_path(const ModelParams& params, int n, uint64_t seed) {
  if (n < 0) throw ConfigError("simulate_path: n must be >= 0");
  RngStream stream = RngStream::derive(seed, "simulate-path");
  const Matrix p0_sqrt = principal_sqrt(params.p0.mat());
  const Matrix r_sqrt = principal_sqrt(params.r.mat());
  const Matrix r0_sqrt = principal_sqrt(params.r0.mat());

  PathSample path;
  path.seed = seed;
  path.states.reserve(n + 1);
  path.observations.reserve(n + 1);

  Vector x = params.x0_mean + p0_sqrt * stream.normal_vector(params.dim());
  path.states.push_back(x);
  for (int k = 0; k <= n; ++k) {
    path.observations.push_back(params.b * x +
                                r0_sqrt * stream.normal_vector(params.obs_dim()));
    if (k < n) {
      x = params.a * x + r_sqrt * stream.normal_vector(params.dim());
      path.states.push_back(x);
    }
  }
  return path;
}

Matrix sample_gaussian_matrix(int rows, int cols, const SpdMatrix& cov,
                              RngStream& stream) {
  require(cov.dim() == rows, "sample_gaussian_matrix: cov dimension must equal rows");
  if (cols == 0) return Matrix(rows, 0);
  return principal_sqrt(cov.mat()) * stream.normal_matrix(rows, cols);
}

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j, const char* name) {
  if (!j.is_array() || j.empty())
    throw ConfigError(std::string(name) + ": expected a non-empty array of rows");
  // Scalars may be written as flat arrays: [x] or [[x]].
  if (!j.front().is_array()) {
    Matrix m(1, static_cast<int>(j.size()));
    for (int k = 0; k < static_cast<int>(j.size()); ++k) m(0, k) = j[k].get<double>();
    return m;
  }
  const int rows = static_cast<int>(j.size());
  const int cols = static_cast<int>(j.front().size());
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    if (!j[i].is_array() || static_cast<int>(j[i].size()) != cols)
      throw ConfigError(std::string(name) + ": ragged row " + std::to_string(i));
    for (int k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

}  // namespace

nlohmann::json model_to_json(const ModelParams& params) {
  nlohmann::json j;
  j["a"] = matrix_to_json(params.a);
  j["b"] = matrix_to_json(params.b);
  j["r"] = matrix_to_json(params.r.mat());
  j["r0"] = matrix_to_json(params.r0.mat());
  j["p0"] = matrix_to_json(params.p0.mat());
  j["x0_mean"] = std::vector<double>(params.x0_mean.data(),
                                     params.x0_mean.data() + params.x0_mean.size());
  return j;
}

ModelParams model_from_json(const nlohmann::json& j) {
  for (const char* field : {"a", "b", "r", "r0", "p0", "x0_mean"})
    if (!j.contains(field))
      throw ConfigError(std::string("model: missing field '") + field + "'");
  const nlohmann::json& jx = j.at("x0_mean");
  if (!jx.is_array()) throw ConfigError("x0_mean: expected an array");
  Vector x0(jx.size());
  for (int i = 0; i < static_cast<int>(jx.size()); ++i) x0[i] = jx[i].get<double>();
  return make_model(matrix_from_json(j.at("a"), "a"), matrix_from_json(j.at("b"), "b"),
                    matrix_from_json(j.at("r"), "r"), matrix_from_json(j.at("r0"), "r0"),
                    matrix_from_json(j.at("p0"), "p0"), x0);
}

}  // namespace enkf_lab
