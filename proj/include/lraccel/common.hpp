#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lraccel {

// argument or file content violates a documented precondition
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// a numerical routine cannot proceed (singular system, NaN, rank violation)
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

// ---------------------------------------------------------------- rng

// splitmix64, used both as a generator step and to derive substream seeds
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t s = seed;
  std::uint64_t h = splitmix64(s);
  s ^= a * 0x9e3779b97f4a7c15ull;
  h ^= splitmix64(s);
  s ^= b * 0xc2b2ae3d27d4eb4full;
  h ^= splitmix64(s);
  return h;
}

struct Rng {
  std::uint64_t state;
  explicit Rng(std::uint64_t seed) : state(seed) {}
  std::uint64_t next() { return splitmix64(state); }
  // bounded draw via 128-bit multiply-shift; stdlib-independent
  std::uint64_t index(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<__uint128_t>(next()) * n) >> 64);
  }
  double real() {  // [0,1)
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }
  double normal() {  // Box-Muller, deterministic
    double u1 = real(), u2 = real();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
};

// ---------------------------------------------------------------- threading

// worker cap from LRACCEL_THREADS; 0 or unset means auto
inline int worker_count() {
  int n = 0;
  if (const char* env = std::getenv("LRACCEL_THREADS")) n = std::atoi(env);
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return n > 0 ? n : 1;
}

// runs fn(i) for i in [0, n); work is chunked over workers but every
// index is computed exactly once, so writes to disjoint slots per index
// give thread-count-independent results
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn, int workers = 0) {
  if (workers <= 0) workers = worker_count();
  if (workers == 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (workers > n) workers = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::int64_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace lraccel
