#pragma once

// Chord-protocol sparsity patterns. Node i links to itself and to
// (i + 2^k) mod N; every factor in a chain shares one such pattern.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfact/error.hpp"

namespace sfact {

enum class PatternMode {
  paper_literal,  // offsets 2^0 .. 2^(K-2): degree K
  full_coverage,  // offsets 2^0 .. 2^(K-1): degree K+1
};

inline std::string to_string(PatternMode mode) {
  return mode == PatternMode::paper_literal ? "paper_literal" : "full_coverage";
}

inline PatternMode pattern_mode_from_string(const std::string& s) {
  if (s == "paper_literal") return PatternMode::paper_literal;
  if (s == "full_coverage") return PatternMode::full_coverage;
  throw ParseError("unknown pattern mode '" + s + "'");
}

/// ceil(log2 n) for n >= 1.
inline std::size_t ceil_log2(std::size_t n) {
  return n <= 1 ? 0 : static_cast<std::size_t>(std::bit_width(n - 1));
}

class SparsityPattern {
 public:
  std::size_t n() const { return n_; }
  std::size_t k_exp() const { return k_exp_; }
  PatternMode mode() const { return mode_; }

  /// Column offsets in slot order: 0 (diagonal) first, then increasing powers of two.
  const std::vector<std::size_t>& offsets() const { return offsets_; }

  /// Stored entries per row. Uniform for every n, since 2^(K-1) < n.
  std::size_t degree() const { return offsets_.size(); }
  std::size_t row_degree(std::size_t i) const { return row_ptr_[i + 1] - row_ptr_[i]; }
  std::size_t nnz() const { return cols_.size(); }

  std::size_t row_begin(std::size_t i) const { return row_ptr_[i]; }
  std::size_t row_end(std::size_t i) const { return row_ptr_[i + 1]; }

  /// Ascending column indices of row i.
  std::span<const std::size_t> row(std::size_t i) const {
    return {cols_.data() + row_ptr_[i], row_ptr_[i + 1] - row_ptr_[i]};
  }
  const std::vector<std::size_t>& row_ptr() const { return row_ptr_; }
  const std::vector<std::size_t>& col_index() const { return cols_; }

  /// Flat index (into the row-major value array) of the entry fed by `slot` in row i.
  std::size_t slot_entry(std::size_t i, std::size_t slot) const {
    return row_ptr_[i] + slot_pos_[i * degree() + slot];
  }
  std::size_t slot_column(std::size_t i, std::size_t slot) const {
    return (i + offsets_[slot]) % n_;
  }

  /// Flat index of (i, j), or npos when (i, j) is not stored.
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t find(std::size_t i, std::size_t j) const {
    auto r = row(i);
    auto it = std::lower_bound(r.begin(), r.end(), j);
    if (it == r.end() || *it != j) return npos;
    return row_ptr_[i] + static_cast<std::size_t>(it - r.begin());
  }

  friend bool operator==(const SparsityPattern& a, const SparsityPattern& b) {
    return a.n_ == b.n_ && a.k_exp_ == b.k_exp_ && a.mode_ == b.mode_ && a.row_ptr_ == b.row_ptr_ &&
           a.cols_ == b.cols_;
  }

  friend SparsityPattern build_pattern(std::size_t n, PatternMode mode);

 private:
  std::size_t n_ = 0;
  std::size_t k_exp_ = 0;
  PatternMode mode_ = PatternMode::full_coverage;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::size_t> cols_;
  std::vector<std::size_t> slot_pos_;
};

using PatternPtr = std::shared_ptr<const SparsityPattern>;

inline SparsityPattern build_pattern(std::size_t n, PatternMode mode = PatternMode::full_coverage) {
  if (n < 2) throw InvalidDimension("build_pattern: n must be >= 2, got " + std::to_string(n));
  SparsityPattern p;
  p.n_ = n;
  p.k_exp_ = ceil_log2(n);
  const std::size_t top = mode == PatternMode::full_coverage ? p.k_exp_ : p.k_exp_ - 1;
  p.mode_ = mode;
  p.offsets_.push_back(0);
  for (std::size_t k = 0; k < top; ++k) {
    const std::size_t off = (std::size_t{1} << k) % n;
    if (std::find(p.offsets_.begin(), p.offsets_.end(), off) == p.offsets_.end()) {
      p.offsets_.push_back(off);
    }
  }
  const std::size_t deg = p.offsets_.size();
  p.row_ptr_.resize(n + 1);
  p.cols_.reserve(n * deg);
  p.slot_pos_.resize(n * deg);
  std::vector<std::size_t> cols(deg);
  for (std::size_t i = 0; i < n; ++i) {
    p.row_ptr_[i] = p.cols_.size();
    for (std::size_t s = 0; s < deg; ++s) cols[s] = (i + p.offsets_[s]) % n;
    std::vector<std::size_t> sorted = cols;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t s = 0; s < deg; ++s) {
      p.slot_pos_[i * deg + s] =
          static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), cols[s]) - sorted.begin());
    }
    p.cols_.insert(p.cols_.end(), sorted.begin(), sorted.end());
  }
  p.row_ptr_[n] = p.cols_.size();
  return p;
}

inline PatternPtr make_pattern(std::size_t n, PatternMode mode = PatternMode::full_coverage) {
  return std::make_shared<const SparsityPattern>(build_pattern(n, mode));
}

/// Fraction of structurally non-zero entries in the hops-fold Boolean power of the pattern.
inline double structural_density(const SparsityPattern& p, std::size_t hops) {
  if (hops < 1) throw InvalidDimension("structural_density: hops must be >= 1");
  const std::size_t n = p.n();
  const std::size_t words = (n + 63) / 64;
  std::vector<std::uint64_t> reach(n * words, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : p.row(i)) reach[i * words + j / 64] |= std::uint64_t{1} << (j % 64);

  std::vector<std::uint64_t> next(n * words);
  for (std::size_t h = 1; h < hops; ++h) {
    // (A^h) row i = OR over k in A row i of (A^(h-1)) row k
    std::fill(next.begin(), next.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t* dst = next.data() + i * words;
      for (std::size_t k : p.row(i)) {
        const std::uint64_t* src = reach.data() + k * words;
        for (std::size_t w = 0; w < words; ++w) dst[w] |= src[w];
      }
    }
    reach.swap(next);
  }
  std::size_t count = 0;
  for (std::uint64_t w : reach) count += static_cast<std::size_t>(std::popcount(w));
  return static_cast<double>(count) / static_cast<double>(n * n);
}

struct NnzAccount {
  std::size_t per_factor = 0;
  std::size_t total = 0;
};

inline NnzAccount nnz_accounting(const SparsityPattern& p, std::size_t m_factors) {
  return {p.nnz(), p.nnz() * m_factors};
}

// JSON layout: {"n", "k_exp", "mode", "rows": [[cols...], ...]}

inline nlohmann::json pattern_to_json(const SparsityPattern& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < p.n(); ++i) {
    auto r = p.row(i);
    rows.push_back(std::vector<std::size_t>(r.begin(), r.end()));
  }
  return {{"n", p.n()}, {"k_exp", p.k_exp()}, {"mode", to_string(p.mode())}, {"rows", std::move(rows)}};
}

/// Rebuilds the pattern from (n, mode) and rejects documents whose rows disagree.
inline SparsityPattern pattern_from_json(const nlohmann::json& j) {
  SparsityPattern p;
  try {
    p = build_pattern(j.at("n").get<std::size_t>(), pattern_mode_from_string(j.at("mode").get<std::string>()));
    if (j.at("k_exp").get<std::size_t>() != p.k_exp()) throw ParseError("pattern JSON: k_exp mismatch");
    const auto& rows = j.at("rows");
    if (rows.size() != p.n()) throw ParseError("pattern JSON: wrong number of rows");
    for (std::size_t i = 0; i < p.n(); ++i) {
      const auto cols = rows[i].get<std::vector<std::size_t>>();
      auto expect = p.row(i);
      if (!std::equal(cols.begin(), cols.end(), expect.begin(), expect.end())) {
        throw ParseError("pattern JSON: row " + std::to_string(i) + " is not Chord-structured");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("pattern JSON: ") + e.what());
  } catch (const InvalidDimension& e) {
    throw ParseError(std::string("pattern JSON: ") + e.what());
  }
  return p;
}

inline void save_pattern(const SparsityPattern& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << pattern_to_json(p).dump() << '\n';
}

inline SparsityPattern load_pattern(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return pattern_from_json(j);
}

}  // namespace sfact
