#ifndef ENKF_LAB_RNG_HPP
#define ENKF_LAB_RNG_HPP

#include <cstdint>
#include <string_view>

#include "enkf_lab/matrix.hpp"

namespace enkf_lab {

/// Generator + transform version recorded in every manifest.  Changing the
/// stream derivation, the block cipher, or the Gaussian transform must bump
/// this tag: acceptance numbers are reproducible only within one version.
inline constexpr const char* kGeneratorVersion = "philox4x32-10/polar-v1";

uint64_t fnv1a64(std::string_view s);
uint64_t mix64(uint64_t z);

/// Counter-based stream (Philox4x32-10 keyed by a 64-bit stream id).
///
/// Distinct (master seed, purpose, index) triples give statistically
/// independent streams with no sequential handoff, so replicas can run in
/// parallel and still reproduce bit-exactly.  A single stream must not be
/// shared across threads.
class RngStream {
 public:
  explicit RngStream(uint64_t stream_key);

  static RngStream derive(uint64_t master_seed, std::string_view purpose,
                          uint64_t index = 0);

  uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double next_double();
  /// Standard normal via the Marsaglia polar method (inverse-free).
  double next_normal();

  Vector normal_vector(int n);
  /// Column-major fill of i.i.d. standard normals.
  Matrix normal_matrix(int rows, int cols);

  uint64_t stream_key() const { return key64_; }

 private:
  void refill();

  uint64_t key64_ = 0;
  uint64_t block_ = 0;
  uint32_t buf_[4] = {0, 0, 0, 0};
  int pos_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace enkf_lab

#endif
