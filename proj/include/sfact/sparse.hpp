#pragma once

// Chord-sparse square matrices and factor chains.
//
// Canonical product order: Xhat = W(1) * W(2) * ... * W(M). Applying the
// chain to a dense right operand folds right-to-left, W(M) first.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfact/binary_io.hpp"
#include "sfact/chord.hpp"
#include "sfact/dense.hpp"
#include "sfact/error.hpp"

namespace sfact {

/// A square matrix whose stored entries are those of a Chord pattern.
/// `values` follows the pattern's row-major ascending-column order.
class SparseSquareMatrix {
 public:
  SparseSquareMatrix() = default;

  explicit SparseSquareMatrix(PatternPtr pattern)
      : pattern_(std::move(pattern)), values_(pattern_->nnz(), 0.0) {}

  SparseSquareMatrix(PatternPtr pattern, std::vector<double> values)
      : pattern_(std::move(pattern)), values_(std::move(values)) {
    if (values_.size() != pattern_->nnz()) {
      throw DimensionMismatch("SparseSquareMatrix: " + std::to_string(values_.size()) +
                              " values for pattern with " + std::to_string(pattern_->nnz()) + " entries");
    }
  }

  static SparseSquareMatrix identity(PatternPtr pattern) {
    SparseSquareMatrix w(pattern);
    for (std::size_t i = 0; i < pattern->n(); ++i) w.values_[pattern->find(i, i)] = 1.0;
    return w;
  }

  std::size_t n() const { return pattern_->n(); }
  const SparsityPattern& pattern() const { return *pattern_; }
  const PatternPtr& pattern_ptr() const { return pattern_; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  /// Value at (i, j); zero when not stored.
  double at(std::size_t i, std::size_t j) const {
    const auto k = pattern_->find(i, j);
    return k == SparsityPattern::npos ? 0.0 : values_[k];
  }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  DenseMatrix densify() const {
    const auto& p = *pattern_;
    DenseMatrix d(p.n(), p.n());
    for (std::size_t i = 0; i < p.n(); ++i)
      for (std::size_t k = p.row_begin(i); k < p.row_end(i); ++k) d(i, p.col_index()[k]) = values_[k];
    return d;
  }

 private:
  PatternPtr pattern_;
  std::vector<double> values_;
};

/// W * D. Cost O(nnz(W) * D.cols).
inline DenseMatrix spmm_dense(const SparseSquareMatrix& w, const DenseMatrix& d) {
  if (d.rows() != w.n()) {
    throw DimensionMismatch("spmm_dense: operand has " + std::to_string(d.rows()) + " rows, expected " +
                            std::to_string(w.n()));
  }
  const auto& p = w.pattern();
  const auto& cols = p.col_index();
  const auto& vals = w.values();
  DenseMatrix out(d.rows(), d.cols());
  for (std::size_t i = 0; i < p.n(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = p.row_begin(i); k < p.row_end(i); ++k) {
      const double v = vals[k];
      auto drow = d.row(cols[k]);
      for (std::size_t c = 0; c < d.cols(); ++c) orow[c] += v * drow[c];
    }
  }
  return out;
}

/// W^T * D.
inline DenseMatrix spmm_transpose_dense(const SparseSquareMatrix& w, const DenseMatrix& d) {
  if (d.rows() != w.n()) throw DimensionMismatch("spmm_transpose_dense: row count mismatch");
  const auto& p = w.pattern();
  const auto& cols = p.col_index();
  const auto& vals = w.values();
  DenseMatrix out(d.rows(), d.cols());
  for (std::size_t i = 0; i < p.n(); ++i) {
    auto drow = d.row(i);
    for (std::size_t k = p.row_begin(i); k < p.row_end(i); ++k) {
      const double v = vals[k];
      auto orow = out.row(cols[k]);
      for (std::size_t c = 0; c < d.cols(); ++c) orow[c] += v * drow[c];
    }
  }
  return out;
}

/// Entries of A * B^T restricted to the pattern: out[k] = <A row i, B row j> for stored (i, j).
inline std::vector<double> masked_product_transpose(const SparsityPattern& p, const DenseMatrix& a,
                                                    const DenseMatrix& b) {
  if (a.rows() != p.n() || b.rows() != p.n() || a.cols() != b.cols()) {
    throw DimensionMismatch("masked_product_transpose: shape mismatch");
  }
  std::vector<double> out(p.nnz());
  const auto& cols = p.col_index();
  for (std::size_t i = 0; i < p.n(); ++i) {
    auto arow = a.row(i);
    for (std::size_t k = p.row_begin(i); k < p.row_end(i); ++k) {
      auto brow = b.row(cols[k]);
      double acc = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) acc += arow[c] * brow[c];
      out[k] = acc;
    }
  }
  return out;
}

/// Ordered factors W(1..M) sharing one pattern.
class FactorChain {
 public:
  FactorChain() = default;

  explicit FactorChain(std::vector<SparseSquareMatrix> factors) : factors_(std::move(factors)) {
    if (factors_.empty()) throw InvalidDimension("FactorChain: needs at least one factor");
    const auto& first = factors_.front().pattern();
    for (const auto& f : factors_) {
      if (f.pattern_ptr() != factors_.front().pattern_ptr() && !(f.pattern() == first)) {
        throw DimensionMismatch("FactorChain: factors must share one pattern");
      }
    }
  }

  static FactorChain identity(PatternPtr pattern, std::size_t m) {
    if (m < 1) throw InvalidDimension("FactorChain: needs at least one factor");
    return FactorChain(std::vector<SparseSquareMatrix>(m, SparseSquareMatrix::identity(std::move(pattern))));
  }

  std::size_t size() const { return factors_.size(); }
  std::size_t n() const { return factors_.front().n(); }
  const SparsityPattern& pattern() const { return factors_.front().pattern(); }
  const PatternPtr& pattern_ptr() const { return factors_.front().pattern_ptr(); }

  SparseSquareMatrix& operator[](std::size_t m) { return factors_[m]; }
  const SparseSquareMatrix& operator[](std::size_t m) const { return factors_[m]; }
  std::vector<SparseSquareMatrix>& factors() { return factors_; }
  const std::vector<SparseSquareMatrix>& factors() const { return factors_; }

  std::size_t nnz_total() const { return pattern().nnz() * factors_.size(); }

  bool all_finite() const {
    for (const auto& f : factors_) {
      if (!f.all_finite()) return false;
    }
    return true;
  }

 private:
  std::vector<SparseSquareMatrix> factors_;
};

/// W(1) * ... * W(M) * D, folding right-to-left.
inline DenseMatrix chain_apply(const FactorChain& chain, const DenseMatrix& d) {
  DenseMatrix z = spmm_dense(chain[chain.size() - 1], d);
  for (std::size_t m = chain.size() - 1; m-- > 0;) z = spmm_dense(chain[m], z);
  return z;
}

inline DenseMatrix chain_materialize(const FactorChain& chain) {
  return chain_apply(chain, DenseMatrix::identity(chain.n()));
}

/// Row i of the materialized chain, e_i^T W(1) ... W(M), without forming Xhat.
inline std::vector<double> row_of_product(const FactorChain& chain, std::size_t i) {
  const std::size_t n = chain.n();
  if (i >= n) throw InvalidDimension("row_of_product: row " + std::to_string(i) + " out of range");
  const auto& p = chain.pattern();
  const auto& cols = p.col_index();
  std::vector<double> r(n, 0.0);
  std::vector<double> next(n);
  {
    const auto& v = chain[0].values();
    for (std::size_t k = p.row_begin(i); k < p.row_end(i); ++k) r[cols[k]] = v[k];
  }
  for (std::size_t m = 1; m < chain.size(); ++m) {
    std::fill(next.begin(), next.end(), 0.0);
    const auto& v = chain[m].values();
    for (std::size_t row = 0; row < n; ++row) {
      const double coef = r[row];
      if (coef == 0.0) continue;
      for (std::size_t k = p.row_begin(row); k < p.row_end(row); ++k) next[cols[k]] += coef * v[k];
    }
    r.swap(next);
  }
  return r;
}

// Directory layout: manifest.json, pattern.json, factor_<m>.bin (little-endian float64).

inline void save_chain(const FactorChain& chain, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_pattern(chain.pattern(), (dir / "pattern.json").string());
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t m = 0; m < chain.size(); ++m) {
    const std::string name = "factor_" + std::to_string(m) + ".bin";
    io::write_f64(dir / name, chain[m].values());
    files.push_back(name);
  }
  io::write_json(dir / "manifest.json", {{"m", chain.size()},
                                         {"n", chain.n()},
                                         {"mode", to_string(chain.pattern().mode())},
                                         {"order", "left_to_right"},
                                         {"factors", files}});
}

inline FactorChain load_chain(const std::filesystem::path& dir) {
  const auto manifest = io::read_json(dir / "manifest.json");
  auto pattern = std::make_shared<const SparsityPattern>(load_pattern((dir / "pattern.json").string()));
  std::size_t m = 0;
  try {
    m = manifest.at("m").get<std::size_t>();
    if (manifest.at("n").get<std::size_t>() != pattern->n()) throw ParseError("chain manifest: n mismatch");
    if (manifest.at("order").get<std::string>() != "left_to_right") {
      throw ParseError("chain manifest: unsupported order");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("chain manifest: ") + e.what());
  }
  if (m < 1) throw ParseError("chain manifest: m must be >= 1");
  std::vector<SparseSquareMatrix> factors;
  for (std::size_t k = 0; k < m; ++k) {
    factors.emplace_back(pattern, io::read_f64(dir / ("factor_" + std::to_string(k) + ".bin"), pattern->nnz()));
  }
  return FactorChain(std::move(factors));
}

}  // namespace sfact
