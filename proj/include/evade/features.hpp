#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "evade/unicode.hpp"

namespace evade {

// Sparse vector with strictly increasing indices.
struct SparseVector {
  std::vector<std::pair<std::uint32_t, double>> entries;

  double norm() const {
    double s = 0.0;
    for (const auto& [i, v] : entries) s += v * v;
    return std::sqrt(s);
  }

  void normalize() {
    const double n = norm();
    if (n == 0.0) return;
    for (auto& e : entries) e.second /= n;
  }

  bool empty() const noexcept { return entries.empty(); }
};

inline double dot(const SparseVector& a, const SparseVector& b) {
  double s = 0.0;
  auto ia = a.entries.begin();
  auto ib = b.entries.begin();
  while (ia != a.entries.end() && ib != b.entries.end()) {
    if (ia->first < ib->first) {
      ++ia;
    } else if (ib->first < ia->first) {
      ++ib;
    } else {
      s += ia->second * ib->second;
      ++ia;
      ++ib;
    }
  }
  return s;
}

inline double dot(const SparseVector& a, const std::vector<double>& dense) {
  double s = 0.0;
  for (const auto& [i, v] : a.entries) s += v * dense[i];
  return s;
}

// Hash of one character n-gram. The order is mixed in so that, e.g., the
// 3-gram "abc" and a 4-gram never share a hash by construction.
inline std::uint64_t ngram_hash(std::u32string_view gram) {
  std::uint64_t h = 0xCBF29CE484222325ull ^ (gram.size() * 0x9E3779B97F4A7C15ull);
  for (char32_t cp : gram) {
    for (int k = 0; k < 4; ++k) {
      h ^= (static_cast<std::uint32_t>(cp) >> (8 * k)) & 0xFFu;
      h *= 0x100000001B3ull;
    }
  }
  return h;
}

// Raw (un-normalized) hashed counts of all character n-grams with the given
// orders. `buckets` must be a power of two.
inline SparseVector hashed_ngram_counts(std::u32string_view cps, const std::vector<int>& orders,
                                        std::uint32_t buckets) {
  std::unordered_map<std::uint32_t, double> acc;
  acc.reserve(cps.size() * orders.size());
  const std::uint32_t mask = buckets - 1;
  for (int n : orders) {
    if (n <= 0 || cps.size() < static_cast<std::size_t>(n)) continue;
    for (std::size_t i = 0; i + n <= cps.size(); ++i) {
      const auto h = ngram_hash(cps.substr(i, static_cast<std::size_t>(n)));
      acc[static_cast<std::uint32_t>(h) & mask] += 1.0;
    }
  }
  SparseVector v;
  v.entries.assign(acc.begin(), acc.end());
  std::sort(v.entries.begin(), v.entries.end());
  return v;
}

inline SparseVector hashed_ngram_counts(std::string_view text, const std::vector<int>& orders, std::uint32_t buckets) {
  const auto cps = unicode::decode(text);
  return hashed_ngram_counts(std::u32string_view(cps), orders, buckets);
}

inline bool is_power_of_two(std::uint64_t x) { return x != 0 && (x & (x - 1)) == 0; }

}  // namespace evade
