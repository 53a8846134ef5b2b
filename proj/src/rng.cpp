#include "enkf_lab/rng.hpp"

#include <cmath>

namespace enkf_lab {

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

RngStream::RngStream(uint64_t stream_key) : key64_(stream_key) {}

RngStream RngStream::derive(uint64_t master_seed, std::string_view purpose,
                            uint64_t index) {
  uint64_t x = mix64(master_seed ^ 0x9e3779b97f4a7c15ULL);
  x = mix64(x ^ fnv1a64(purpose));
  x = mix64(x + index * 0x9e3779b97f4a7c15ULL);
  return RngStream(x);
}

namespace {

constexpr uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void philox4x32_10(uint32_t c[4], uint32_t k0, uint32_t k1) {
  for (int round = 0; round < 10; ++round) {
    const uint64_t p0 = static_cast<uint64_t>(kPhiloxM0) * c[0];
    const uint64_t p1 = static_cast<uint64_t>(kPhiloxM1) * c[2];
    const uint32_t hi0 = static_cast<uint32_t>(p0 >> 32);
    const uint32_t lo0 = static_cast<uint32_t>(p0);
    const uint32_t hi1 = static_cast<uint32_t>(p1 >> 32);
    const uint32_t lo1 = static_cast<uint32_t>(p1);
    const uint32_t next[4] = {hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0};
    c[0] = next[0];
    c[1] = next[1];
    c[2] = next[2];
    c[3] = next[3];
    k0 += kPhiloxW0;
    k1 += kPhiloxW1;
  }
}

}  // namespace

void RngStream::refill() {
  buf_[0] = static_cast<uint32_t>(block_);
  buf_[1] = static_cast<uint32_t>(block_ >> 32);
  buf_[2] = 0;
  buf_[3] = 0;
  philox4x32_10(buf_, static_cast<uint32_t>(key64_),
                static_cast<uint32_t>(key64_ >> 32));
  ++block_;
  pos_ = 0;
}

uint64_t RngStream::next_u64() {
  if (pos_ > 2) refill();
  const uint64_t lo = buf_[pos_];
  const uint64_t hi = buf_[pos_ + 1];
  pos_ += 2;
  return lo | (hi << 32);
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * next_double() - 1.0;
    v = 2.0 * next_double() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  has_spare_ = true;
  return u * f;
}

Vector RngStream::normal_vector(int n) {
  Vector out(n);
  for (int i = 0; i < n; ++i) out[i] = next_normal();
  return out;
}

Matrix RngStream::normal_matrix(int rows, int cols) {
  Matrix out(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) out(i, j) = next_normal();
  return out;
}

}  // namespace enkf_lab
