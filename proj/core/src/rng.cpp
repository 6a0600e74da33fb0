#include "sib/rng.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "sib/error.hpp"

namespace sib {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "unknown";
}

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

std::uint64_t derive_task_seed(std::uint64_t run_seed, Split split, std::uint64_t task_index) {
  constexpr std::uint64_t kSalt[] = {0x7472616996E5A3C1ULL, 0x76616C00D2B74407ULL,
                                     0x74657374A54FF53AULL};
  const std::uint64_t base = mix64(run_seed ^ kSalt[static_cast<int>(split)]);
  return mix64(base + task_index * kGolden);
}

double CounterRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double CounterRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

std::uint64_t CounterRng::below(std::uint64_t n) {
  if (n == 0) throw Error("CounterRng::below: empty range");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = 0;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

std::vector<std::size_t> CounterRng::sample_without_replacement(std::size_t n, std::size_t k) {
  if (k > n) throw Error("sample_without_replacement: k exceeds population size");
  std::vector<std::size_t> items(n);
  for (std::size_t i = 0; i < n; ++i) items[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + below(n - i);
    std::swap(items[i], items[j]);
  }
  items.resize(k);
  return items;
}

void CounterRng::shuffle(std::vector<std::size_t>& items) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = below(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace sib
