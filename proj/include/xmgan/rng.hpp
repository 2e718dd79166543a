#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace xmgan {

// Seeded generator used by every stochastic path. Distributions are written
// out by hand on top of mt19937_64 so a seed reproduces bit-identical streams
// regardless of the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                      // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);  // [lo, hi)
  std::size_t index(std::size_t n);      // uniform in [0, n)
  double normal();                       // standard normal, Box-Muller
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  std::vector<double> normal_vector(std::size_t n);
  // Flat Dirichlet(1, ..., 1): normalised exponentials.
  std::vector<double> simplex(std::size_t k);
  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> choose(std::size_t n, std::size_t k);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Deterministic seed derivation (splitmix64 over the seed and a stream tag).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace xmgan
