#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"
#include "sfact/sparse.hpp"

namespace sfact {
namespace {

SparseSquareMatrix random_sparse(const PatternPtr& p, std::uint64_t seed) {
  Rng rng(seed);
  SparseSquareMatrix w(p);
  for (auto& v : w.values()) v = rng.uniform(-1.0, 1.0);
  return w;
}

FactorChain random_chain(const PatternPtr& p, std::size_t m, std::uint64_t seed) {
  std::vector<SparseSquareMatrix> f;
  for (std::size_t k = 0; k < m; ++k) f.push_back(random_sparse(p, seed + k));
  return FactorChain(std::move(f));
}

double grid_max_diff(const oracle::Grid& g, const DenseMatrix& m) {
  double worst = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) worst = std::max(worst, std::abs(g[i][j] - m(i, j)));
  return worst;
}

TEST(SparseMatrix, DensifyPlacesValuesOnPattern) {
  auto p = make_pattern(8);
  auto w = random_sparse(p, 3);
  const auto d = w.densify();
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      const auto k = p->find(i, j);
      EXPECT_EQ(d(i, j), k == SparsityPattern::npos ? 0.0 : w.values()[k]);
      EXPECT_EQ(w.at(i, j), d(i, j));
    }
}

TEST(SparseMatrix, RejectsWrongValueCount) {
  auto p = make_pattern(8);
  EXPECT_THROW(SparseSquareMatrix(p, std::vector<double>(3, 1.0)), DimensionMismatch);
}

TEST(Spmm, IdentityLeavesOperandUnchanged) {
  auto p = make_pattern(10);
  const auto d = oracle::random_matrix(10, 3, 11);
  EXPECT_EQ(spmm_dense(SparseSquareMatrix::identity(p), d), d);
}

TEST(Spmm, MatchesTripleLoop) {
  auto p = make_pattern(8);
  const auto w = random_sparse(p, 5);
  const auto d = oracle::random_matrix(8, 5, 6);
  const auto expect = oracle::multiply(oracle::to_grid(w.densify()), oracle::to_grid(d));
  EXPECT_LE(grid_max_diff(expect, spmm_dense(w, d)), 1e-12);
}

TEST(Spmm, SingleEntry) {
  auto p = make_pattern(8);
  SparseSquareMatrix w(p);
  w.values()[p->find(0, 1)] = 2.0;
  DenseMatrix ones(8, 1, std::vector<double>(8, 1.0));
  const auto out = spmm_dense(w, ones);
  EXPECT_EQ(out(0, 0), 2.0);
  for (std::size_t i = 1; i < 8; ++i) EXPECT_EQ(out(i, 0), 0.0);
}

TEST(Spmm, TransposeMatchesTripleLoop) {
  auto p = make_pattern(9, PatternMode::paper_literal);
  const auto w = random_sparse(p, 8);
  const auto d = oracle::random_matrix(9, 4, 9);
  const auto expect = oracle::multiply(oracle::to_grid(w.densify().transposed()), oracle::to_grid(d));
  EXPECT_LE(grid_max_diff(expect, spmm_transpose_dense(w, d)), 1e-12);
}

TEST(Spmm, DimensionMismatch) {
  auto p = make_pattern(8);
  EXPECT_THROW(spmm_dense(SparseSquareMatrix::identity(p), DenseMatrix(7, 2)), DimensionMismatch);
  EXPECT_THROW(spmm_transpose_dense(SparseSquareMatrix::identity(p), DenseMatrix(9, 2)), DimensionMismatch);
}

TEST(MaskedProduct, MatchesDenseProductOnPattern) {
  auto p = make_pattern(12);
  const auto a = oracle::random_matrix(12, 7, 1);
  const auto b = oracle::random_matrix(12, 7, 2);
  const auto full = oracle::multiply(oracle::to_grid(a), oracle::to_grid(b.transposed()));
  const auto masked = masked_product_transpose(*p, a, b);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t k = p->row_begin(i); k < p->row_end(i); ++k) {
      EXPECT_NEAR(masked[k], full[i][p->col_index()[k]], 1e-12);
    }
}

TEST(Chain, IdentityFactorsMaterializeToIdentity) {
  auto p = make_pattern(16);
  EXPECT_EQ(chain_materialize(FactorChain::identity(p, 4)), DenseMatrix::identity(16));
}

TEST(Chain, MatchesDenseProductOfFactors) {
  auto p = make_pattern(8);
  const auto chain = random_chain(p, 2, 20);
  const auto expect = oracle::multiply(oracle::to_grid(chain[0].densify()), oracle::to_grid(chain[1].densify()));
  EXPECT_LE(grid_max_diff(expect, chain_materialize(chain)), 1e-12);
}

TEST(Chain, ProductOrderIsLeftToRight) {
  // W1 shifts by one column, W2 scales; W1 * W2 and W2 * W1 differ.
  auto p = make_pattern(8);
  SparseSquareMatrix shift(p), scale(p);
  for (std::size_t i = 0; i < 8; ++i) {
    shift.values()[p->find(i, (i + 1) % 8)] = 1.0;
    scale.values()[p->find(i, i)] = static_cast<double>(i + 1);
  }
  const auto x = chain_materialize(FactorChain({shift, scale}));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(x(i, (i + 1) % 8), static_cast<double>((i + 1) % 8 + 1));
}

TEST(Chain, SingleFactorIsDensified) {
  auto p = make_pattern(8);
  const auto chain = random_chain(p, 1, 4);
  EXPECT_EQ(chain_materialize(chain), chain[0].densify());
}

TEST(Chain, RejectsMixedPatterns) {
  auto a = make_pattern(8);
  auto b = make_pattern(8, PatternMode::paper_literal);
  EXPECT_THROW(FactorChain({SparseSquareMatrix::identity(a), SparseSquareMatrix::identity(b)}), DimensionMismatch);
  EXPECT_THROW(FactorChain(std::vector<SparseSquareMatrix>{}), InvalidDimension);
}

TEST(FroErr, Basics) {
  const auto x = oracle::random_matrix(4, 4, 1);
  EXPECT_EQ(fro_err(x, x), 0.0);
  DenseMatrix zeros(2, 2), ones(2, 2, std::vector<double>(4, 1.0));
  EXPECT_EQ(fro_err(zeros, ones), 2.0);
  EXPECT_THROW(fro_err(zeros, DenseMatrix(2, 3)), DimensionMismatch);
}

TEST(FroErr, MatchesElementwiseSum) {
  const auto a = oracle::random_matrix(16, 16, 2);
  const auto b = oracle::random_matrix(16, 16, 3);
  double acc = 0.0;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) acc += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
  EXPECT_NEAR(fro_err(a, b), std::sqrt(acc), 1e-12);
}

TEST(RowOfProduct, IdentityChainGivesUnitVector) {
  const auto row = row_of_product(FactorChain::identity(make_pattern(16), 4), 3);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(row[j], j == 3 ? 1.0 : 0.0);
}

TEST(RowOfProduct, MatchesMaterializedRows) {
  const auto chain = random_chain(make_pattern(16), 4, 30);
  const auto x = chain_materialize(chain);
  for (std::size_t i = 0; i < 16; ++i) {
    const auto row = row_of_product(chain, i);
    EXPECT_LE(max_abs_diff(row, x.row(i)), 1e-10) << "row " << i;
  }
}

TEST(RowOfProduct, SingleFactorAndRange) {
  const auto chain = random_chain(make_pattern(8), 1, 31);
  const auto d = chain[0].densify();
  EXPECT_EQ(max_abs_diff(row_of_product(chain, 5), d.row(5)), 0.0);
  EXPECT_THROW(row_of_product(chain, 8), InvalidDimension);
}

TEST(ChainIo, RoundTripIsBitExact) {
  const auto chain = random_chain(make_pattern(13, PatternMode::paper_literal), 3, 40);
  const auto dir = std::filesystem::temp_directory_path() / "sfact_chain_io";
  std::filesystem::remove_all(dir);
  save_chain(chain, dir);
  const auto back = load_chain(dir);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back.pattern(), chain.pattern());
  for (std::size_t m = 0; m < 3; ++m) EXPECT_EQ(back[m].values(), chain[m].values());
  const auto manifest = io::read_json(dir / "manifest.json");
  EXPECT_EQ(manifest["order"], "left_to_right");

  std::filesystem::resize_file(dir / "factor_1.bin", 16);
  EXPECT_THROW(load_chain(dir), ParseError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace sfact
