#pragma once

// Deterministic random streams.
//
// CounterRng is the SplitMix64 generator viewed as a counter-based PRNG: the
// i-th output of stream `key` is mix64(key + (i + 1) * 0x9E3779B97F4A7C15).
// Outputs depend only on (key, i), so streams are reproducible across runs
// and platforms. Normals use the Box-Muller transform.

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace sib {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

/// SplitMix64 finalizer; a bijection on 64-bit integers.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum class Split { Train, Val, Test };

std::string_view to_string(Split split);
Split split_from_string(std::string_view name);

/// Seed of the `task_index`-th episode of `split` in run `run_seed`:
///   mix64(mix64(run_seed ^ salt(split)) + task_index * kGolden).
/// For a fixed (run_seed, split) the map task_index -> seed is a bijection,
/// so a stream never repeats a seed.
std::uint64_t derive_task_seed(std::uint64_t run_seed, Split split, std::uint64_t task_index);

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGolden); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Uniform integer in [0, n), rejection-sampled (unbiased).
  std::uint64_t below(std::uint64_t n);
  /// First k entries of a Fisher-Yates shuffle of 0..n-1.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);
  void shuffle(std::vector<std::size_t>& items);

  /// Independent child stream labelled by `tag`.
  CounterRng fork(std::uint64_t tag) const { return CounterRng(mix64(key_ ^ mix64(tag + kGolden))); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sib
