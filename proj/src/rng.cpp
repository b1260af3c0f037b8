#include "shala/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <cmath>
#include <numbers>

#include "shala/common.hpp"

namespace shala {

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 finalizer over the combined words
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed)
    : seed_(seed), engine_(seed), gen_(at::make_generator<at::CPUGeneratorImpl>(mix_seed(seed, 0xA11CE))) {}

Rng Rng::split(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) {
    throw InvalidArgument("uniform_int: n must be positive");
  }
  // rejection sampling keeps the draw unbiased
  const uint64_t range = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % range;
  uint64_t v = engine_();
  while (v >= limit) {
    v = engine_();
  }
  return static_cast<int64_t>(v % range);
}

double Rng::normal() {
  // Box-Muller; u1 is kept away from zero
  const double u1 = (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

torch::Tensor Rng::normal(torch::IntArrayRef shape, torch::ScalarType dtype) {
  return torch::randn(shape, gen_, torch::TensorOptions().dtype(dtype));
}

torch::Tensor Rng::uniform(torch::IntArrayRef shape, torch::ScalarType dtype) {
  return torch::rand(shape, gen_, torch::TensorOptions().dtype(dtype));
}

torch::Tensor Rng::randint(int64_t high, torch::IntArrayRef shape) {
  return torch::randint(high, shape, gen_, torch::TensorOptions().dtype(torch::kLong));
}

torch::Tensor Rng::permutation(int64_t n) {
  return torch::randperm(n, gen_, torch::TensorOptions().dtype(torch::kLong));
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "silu") return Activation::silu;
  if (name == "identity") return Activation::identity;
  throw InvalidArgument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::silu:
      return "silu";
    case Activation::identity:
      return "identity";
  }
  return "identity";
}

}  // namespace shala
