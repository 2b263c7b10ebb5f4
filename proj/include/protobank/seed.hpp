#pragma once

#include <cstdint>
#include <string_view>
#include <type_traits>

namespace protobank {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

}  // namespace detail

// Deterministic child seed derived from a parent seed and a tag sequence.
template <class... Tags>
std::uint64_t derive_seed(std::uint64_t seed, const Tags&... tags) {
  std::uint64_t h = detail::splitmix64(seed);
  auto mix = [&h](const auto& tag) {
    if constexpr (std::is_convertible_v<decltype(tag), std::string_view>) {
      h = detail::splitmix64(h ^ detail::hash_string(tag));
    } else {
      h = detail::splitmix64(h ^ static_cast<std::uint64_t>(tag));
    }
  };
  (mix(tags), ...);
  return h;
}

}  // namespace protobank
