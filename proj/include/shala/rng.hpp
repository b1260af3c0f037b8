#pragma once

#include <cstdint>
#include <random>

#include <torch/torch.h>

namespace shala {

/// Seeded random source. Scalar draws come from a 64-bit Mersenne twister,
/// tensor draws from a torch CPU generator seeded from the same value, so a
/// seed fully determines every draw.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t seed() const { return seed_; }

  /// Independent child stream; depends only on (seed, stream).
  Rng split(uint64_t stream) const;

  uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  int64_t uniform_int(int64_t n);
  double normal();

  torch::Tensor normal(torch::IntArrayRef shape, torch::ScalarType dtype = torch::kFloat);
  torch::Tensor uniform(torch::IntArrayRef shape, torch::ScalarType dtype = torch::kFloat);
  torch::Tensor randint(int64_t high, torch::IntArrayRef shape);
  /// Random permutation of [0, n) as int64.
  torch::Tensor permutation(int64_t n);

  at::Generator& generator() { return gen_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  at::Generator gen_;
};

uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace shala
