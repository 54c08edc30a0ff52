#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace fedcada {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Derives an independent stream seed from the root seed, a purpose tag and
/// any number of integer coordinates (round, client id, ...). The result
/// depends only on its arguments, never on the order streams are created.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::initializer_list<std::uint64_t> coords = {}) {
  std::uint64_t h = detail::splitmix64(root ^ detail::fnv1a(tag));
  for (std::uint64_t c : coords) h = detail::splitmix64(h ^ detail::splitmix64(c));
  return h;
}

inline Rng make_rng(std::uint64_t root, std::string_view tag,
                    std::initializer_list<std::uint64_t> coords = {}) {
  return Rng(derive_seed(root, tag, coords));
}

}  // namespace fedcada
