#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "sfact/adam.hpp"
#include "sfact/lowrank.hpp"
#include "sfact/sf_solver.hpp"

namespace sfact {
namespace {

FactorChain random_chain(const PatternPtr& p, std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SparseSquareMatrix> f;
  for (std::size_t k = 0; k < m; ++k) {
    SparseSquareMatrix w(p);
    for (auto& v : w.values()) v = rng.uniform(-1.0, 1.0);
    f.push_back(std::move(w));
  }
  return FactorChain(std::move(f));
}

double loss_oracle(const FactorChain& chain, const DenseMatrix& x) {
  auto prod = oracle::to_grid(chain[0].densify());
  for (std::size_t m = 1; m < chain.size(); ++m) prod = oracle::multiply(prod, oracle::to_grid(chain[m].densify()));
  double acc = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) acc += (prod[i][j] - x(i, j)) * (prod[i][j] - x(i, j));
  return acc;
}

double worst_gradient_error(FactorChain chain, const DenseMatrix& x) {
  const auto lg = loss_and_grad(chain, x);
  EXPECT_NEAR(lg.loss, loss_oracle(chain, x), 1e-9 * std::max(1.0, lg.loss));
  double worst = 0.0;
  for (std::size_t m = 0; m < chain.size(); ++m) {
    auto& vals = chain[m].values();
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const double numeric = oracle::central_difference([&] { return loss_oracle(chain, x); }, vals[k], 1e-5);
      if (std::abs(lg.grads[m][k]) > 1e-8 || std::abs(numeric) > 1e-8) {
        worst = std::max(worst, oracle::relative_error(lg.grads[m][k], numeric));
      }
    }
  }
  return worst;
}

TEST(InitChain, ValueRangeFollowsDegree) {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const auto lit = init_chain(make_pattern(16, PatternMode::paper_literal), 4, seed);
    for (const auto& f : lit.factors())
      for (double v : f.values()) {
        EXPECT_GE(v, 0.25);
        EXPECT_LE(v, 0.26);
      }
    const auto full = init_chain(make_pattern(16, PatternMode::full_coverage), 4, seed);
    for (const auto& f : full.factors())
      for (double v : f.values()) {
        EXPECT_GE(v, 0.2);
        EXPECT_LE(v, 0.21);
      }
  }
}

TEST(InitChain, Deterministic) {
  auto p = make_pattern(32);
  const auto a = init_chain(p, 5, 17);
  const auto b = init_chain(p, 5, 17);
  for (std::size_t m = 0; m < 5; ++m) EXPECT_EQ(a[m].values(), b[m].values());
  EXPECT_NE(init_chain(p, 5, 18)[0].values(), a[0].values());
}

TEST(LossAndGrad, IdentityIsGlobalMinimum) {
  auto p = make_pattern(16);
  const auto lg = loss_and_grad(FactorChain::identity(p, 4), DenseMatrix::identity(16));
  EXPECT_EQ(lg.loss, 0.0);
  for (const auto& g : lg.grads)
    for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(LossAndGrad, MatchesFiniteDifferences) {
  auto p = make_pattern(8);
  const auto x = oracle::random_matrix(8, 8, 77);
  EXPECT_LE(worst_gradient_error(random_chain(p, 3, 5), x), 1e-6);
}

TEST(LossAndGrad, MatchesFiniteDifferencesPaperLiteral) {
  auto p = make_pattern(11, PatternMode::paper_literal);
  const auto x = oracle::random_matrix(11, 11, 78);
  EXPECT_LE(worst_gradient_error(random_chain(p, 4, 6), x), 1e-6);
}

TEST(LossAndGrad, SingleFactorIsMaskedResidual) {
  auto p = make_pattern(8);
  const auto chain = random_chain(p, 1, 9);
  const auto x = oracle::random_matrix(8, 8, 10);
  const auto lg = loss_and_grad(chain, x);
  const auto w = chain[0].densify();
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = p->row_begin(i); k < p->row_end(i); ++k) {
      const std::size_t j = p->col_index()[k];
      EXPECT_EQ(lg.grads[0][k], 2.0 * (w(i, j) - x(i, j)));
    }
}

TEST(LossAndGrad, Errors) {
  auto p = make_pattern(8);
  auto chain = random_chain(p, 2, 1);
  EXPECT_THROW(loss_and_grad(chain, DenseMatrix(8, 7)), DimensionMismatch);
  chain[1].values()[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(loss_and_grad(chain, DenseMatrix(8, 8)), NumericFault);
}

TEST(Adam, MatchesScalarRecurrence) {
  AdamHyper h{0.05, 0.9, 0.999, 1e-8};
  AdamState st(2, h);
  std::vector<double> params{1.0, -2.0};
  double m0 = 0, v0 = 0, p0 = 1.0;
  for (int t = 1; t <= 25; ++t) {
    const double g0 = 2.0 * params[0];  // gradient of x^2
    const double g1 = std::cos(params[1]);
    std::vector<double> grads{g0, g1};
    adam_step(params, grads, st);

    m0 = 0.9 * m0 + 0.1 * g0;
    v0 = 0.999 * v0 + 0.001 * g0 * g0;
    const double mh = m0 / (1.0 - std::pow(0.9, t));
    const double vh = v0 / (1.0 - std::pow(0.999, t));
    p0 -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(params[0], p0, 1e-14);
  }
  EXPECT_EQ(st.t, 25u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamState st(3, AdamHyper{0.01});
  std::vector<double> params{0.0, 0.0, 0.0};
  std::vector<double> grads{3.0, -0.5, 0.0};
  adam_step(params, grads, st);
  // m_hat = g and v_hat = g^2, so each entry moves by lr * g / (|g| + eps).
  EXPECT_NEAR(params[0], -0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
  EXPECT_NEAR(params[1], 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(params[2], 0.0);
  std::vector<double> short_grads{1.0};
  EXPECT_THROW(adam_step(params, short_grads, st), DimensionMismatch);
}

TEST(Fit, RecoversPlantedChain) {
  auto p = make_pattern(16);
  const auto x = chain_materialize(init_chain(p, 4, 7));
  SfConfig cfg;
  cfg.m_factors = 4;
  cfg.seed = 1;
  const auto [chain, report] = fit(x, p, cfg);
  EXPECT_LE(report.final_fro_err / fro_norm(x), 1e-3);
  EXPECT_LE(report.iterations_run, 20000u);
  EXPECT_NEAR(fro_err(chain_materialize(chain), x), report.final_fro_err, 1e-9);
  EXPECT_EQ(report.nnz_total, 320u);
}

TEST(Fit, LossHistoryIsNonIncreasing) {
  auto p = make_pattern(16);
  const auto x = oracle::random_matrix(16, 16, 3);
  SfConfig cfg;
  cfg.max_iters = 500;
  const auto [chain, report] = fit(x, p, cfg);
  ASSERT_EQ(report.loss_history.size(), report.iterations_run);
  for (std::size_t k = 1; k < report.loss_history.size(); ++k) {
    EXPECT_LE(report.loss_history[k], report.loss_history[k - 1]);
  }
  EXPECT_DOUBLE_EQ(report.final_fro_err, std::sqrt(report.loss_history.back()));
}

TEST(Fit, FindsIdentity) {
  auto p = make_pattern(16);
  SfConfig cfg;
  cfg.m_factors = 4;
  cfg.seed = 1;
  cfg.schedule = LrSchedule::cosine;
  cfg.max_iters = 300000;
  cfg.stop_rel_improvement = 0.0;
  const auto [chain, report] = fit(DenseMatrix::identity(16), p, cfg);
  EXPECT_LE(report.final_fro_err, 1e-6);
}

TEST(Fit, BeatsTsvdOnSparseMatrix) {
  const std::size_t n = 64;
  Rng rng(2);
  DenseMatrix x(n, n);
  for (std::size_t k = 0; k < n * 6; ++k) {
    const auto r = rng.below(n);
    x(r, rng.below(n)) = 1.0;
  }
  auto p = make_pattern(n);
  SfConfig cfg;
  cfg.seed = 2;
  const auto [chain, report] = fit(x, p, cfg);
  const std::size_t r = rank_for_budget(n, report.nnz_total);
  EXPECT_GE(tsvd_nnz(n, r), report.nnz_total);
  const double tsvd_err = fro_err(reconstruct(tsvd(x, r)), x);
  EXPECT_LT(report.final_fro_err, tsvd_err);
}

TEST(Fit, Deterministic) {
  auto p = make_pattern(16);
  const auto x = oracle::random_matrix(16, 16, 8);
  SfConfig cfg;
  cfg.max_iters = 300;
  const auto a = fit(x, p, cfg);
  const auto b = fit(x, p, cfg);
  EXPECT_EQ(a.second.loss_history, b.second.loss_history);
  for (std::size_t m = 0; m < a.first.size(); ++m) EXPECT_EQ(a.first[m].values(), b.first[m].values());
}

TEST(Fit, NonFiniteTargetIsNumericFault) {
  auto p = make_pattern(8);
  DenseMatrix x = DenseMatrix::identity(8);
  x(2, 3) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(fit(x, p, SfConfig{}), NumericFault);
}

TEST(Fit, DivergenceCarriesLastValidChain) {
  auto p = make_pattern(8);
  const auto x = oracle::random_matrix(8, 8, 4, -1e150, 1e150);
  SfConfig cfg;
  cfg.learning_rate = 1e100;
  cfg.max_iters = 1000;
  try {
    fit(x, p, cfg);
    FAIL() << "expected a numeric fault";
  } catch (const SfNumericFault& e) {
    ASSERT_TRUE(e.last_valid().has_value());
    EXPECT_TRUE(e.last_valid()->all_finite());
  }
}

TEST(Fit, ShapeErrors) {
  auto p = make_pattern(8);
  EXPECT_THROW(fit(DenseMatrix(9, 9), p, SfConfig{}), DimensionMismatch);
  EXPECT_THROW(fit(DenseMatrix(8, 7), p, SfConfig{}), DimensionMismatch);
}

}  // namespace
}  // namespace sfact
