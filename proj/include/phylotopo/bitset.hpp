#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "phylotopo/error.hpp"

namespace phylotopo {

/// Fixed-width set of taxon indices. Used for clades and splits.
class Bitset {
 public:
  Bitset() = default;
  explicit Bitset(std::size_t nbits) : nbits_(nbits), words_((nbits + 63) / 64, 0) {}

  static Bitset singleton(std::size_t nbits, std::size_t bit) {
    Bitset b(nbits);
    b.set(bit);
    return b;
  }
  static Bitset full(std::size_t nbits) {
    Bitset b(nbits);
    for (std::size_t i = 0; i < b.words_.size(); ++i) b.words_[i] = ~std::uint64_t{0};
    b.trim();
    return b;
  }

  std::size_t size() const noexcept { return nbits_; }

  void set(std::size_t bit) { words_[bit / 64] |= std::uint64_t{1} << (bit % 64); }
  void reset(std::size_t bit) { words_[bit / 64] &= ~(std::uint64_t{1} << (bit % 64)); }
  bool test(std::size_t bit) const { return (words_[bit / 64] >> (bit % 64)) & 1U; }

  std::size_t count() const noexcept {
    std::size_t c = 0;
    for (auto w : words_) c += static_cast<std::size_t>(std::popcount(w));
    return c;
  }
  bool none() const noexcept {
    for (auto w : words_)
      if (w != 0) return false;
    return true;
  }

  /// Index of the lowest set bit, or size() when empty.
  std::size_t first() const noexcept {
    for (std::size_t i = 0; i < words_.size(); ++i)
      if (words_[i] != 0) return i * 64 + static_cast<std::size_t>(std::countr_zero(words_[i]));
    return nbits_;
  }

  std::vector<std::size_t> members() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < words_.size(); ++i) {
      auto w = words_[i];
      while (w != 0) {
        out.push_back(i * 64 + static_cast<std::size_t>(std::countr_zero(w)));
        w &= w - 1;
      }
    }
    return out;
  }

  bool is_subset_of(const Bitset& o) const {
    for (std::size_t i = 0; i < words_.size(); ++i)
      if ((words_[i] & ~o.words_[i]) != 0) return false;
    return true;
  }
  bool intersects(const Bitset& o) const {
    for (std::size_t i = 0; i < words_.size(); ++i)
      if ((words_[i] & o.words_[i]) != 0) return true;
    return false;
  }

  Bitset& operator|=(const Bitset& o) {
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] |= o.words_[i];
    return *this;
  }
  Bitset& operator&=(const Bitset& o) {
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] &= o.words_[i];
    return *this;
  }
  friend Bitset operator|(Bitset a, const Bitset& b) { return a |= b; }
  friend Bitset operator&(Bitset a, const Bitset& b) { return a &= b; }
  Bitset operator~() const {
    Bitset b = *this;
    for (auto& w : b.words_) w = ~w;
    b.trim();
    return b;
  }

  friend bool operator==(const Bitset& a, const Bitset& b) = default;

  /// Numeric order: compares the sets as big-endian integers.
  friend bool operator<(const Bitset& a, const Bitset& b) {
    if (a.nbits_ != b.nbits_) return a.nbits_ < b.nbits_;
    for (std::size_t i = a.words_.size(); i-- > 0;)
      if (a.words_[i] != b.words_[i]) return a.words_[i] < b.words_[i];
    return false;
  }

  std::size_t hash() const noexcept {
    std::size_t h = std::hash<std::size_t>{}(nbits_);
    for (auto w : words_) h ^= std::hash<std::uint64_t>{}(w) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
  }

  /// Lower-case hex, most significant nibble first, ceil(size/4) digits.
  std::string to_hex() const {
    static constexpr char kDigits[] = "0123456789abcdef";
    const std::size_t ndigits = (nbits_ + 3) / 4;
    std::string s(ndigits, '0');
    for (std::size_t d = 0; d < ndigits; ++d) {
      unsigned nib = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        std::size_t bit = d * 4 + k;
        if (bit < nbits_ && test(bit)) nib |= 1U << k;
      }
      s[ndigits - 1 - d] = kDigits[nib];
    }
    return s;
  }

  static Bitset from_hex(std::string_view hex, std::size_t nbits) {
    Bitset b(nbits);
    const std::size_t n = hex.size();
    for (std::size_t d = 0; d < n; ++d) {
      char c = hex[n - 1 - d];
      unsigned nib;
      if (c >= '0' && c <= '9') nib = static_cast<unsigned>(c - '0');
      else if (c >= 'a' && c <= 'f') nib = static_cast<unsigned>(c - 'a' + 10);
      else if (c >= 'A' && c <= 'F') nib = static_cast<unsigned>(c - 'A' + 10);
      else throw ParseError("invalid hex digit in bitmask", n - 1 - d);
      for (std::size_t k = 0; k < 4; ++k) {
        if (((nib >> k) & 1U) == 0) continue;
        std::size_t bit = d * 4 + k;
        if (bit >= nbits) throw ValidationError("hex bitmask wider than taxon count");
        b.set(bit);
      }
    }
    return b;
  }

 private:
  void trim() {
    if (nbits_ % 64 != 0 && !words_.empty()) words_.back() &= (std::uint64_t{1} << (nbits_ % 64)) - 1;
  }

  std::size_t nbits_ = 0;
  std::vector<std::uint64_t> words_;
};

}  // namespace phylotopo

template <>
struct std::hash<phylotopo::Bitset> {
  std::size_t operator()(const phylotopo::Bitset& b) const noexcept { return b.hash(); }
};
