#pragma once

// Equal-budget comparison of a sparse factorization against truncated SVD,
// plus the synthetic benchmark inputs used by the CLI and the test suites.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "json.hpp"
#include "sfact/chord.hpp"
#include "sfact/dense.hpp"
#include "sfact/error.hpp"
#include "sfact/lowrank.hpp"
#include "sfact/rng.hpp"
#include "sfact/sf_solver.hpp"
#include "sfact/sparse.hpp"

namespace sfact {

struct RunReport {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::size_t nnz_sf = 0;
  std::size_t nnz_tsvd = 0;
  std::size_t rank_r = 0;
  double fro_err_sf = 0.0;
  double fro_err_tsvd = 0.0;
  std::string winner;
  double wall_time_s = 0.0;
};

inline nlohmann::json to_json(const RunReport& r) {
  return {{"command", r.command},       {"config", r.config},
          {"seed", r.seed},             {"nnz_sf", r.nnz_sf},
          {"nnz_tsvd", r.nnz_tsvd},     {"rank_r", r.rank_r},
          {"fro_err_sf", r.fro_err_sf}, {"fro_err_tsvd", r.fro_err_tsvd},
          {"winner", r.winner},         {"wall_time_s", r.wall_time_s}};
}

inline constexpr double kTieTolerance = 1e-9;

/// "sf", "tsvd", or "tie" when the errors agree within kTieTolerance relative.
inline std::string pick_winner(double err_sf, double err_tsvd) {
  const double scale = std::max(std::abs(err_sf), std::abs(err_tsvd));
  if (std::abs(err_sf - err_tsvd) <= kTieTolerance * scale) return "tie";
  return err_sf < err_tsvd ? "sf" : "tsvd";
}

struct Comparison {
  RunReport report;
  FactorChain chain;
  FitReport fit;
  TsvdResult tsvd;
};

/// Fits the chain, then truncated SVD at the smallest rank whose storage is
/// not below the chain's non-zero count.
inline Comparison compare(const DenseMatrix& x, PatternMode mode, const SfConfig& cfg) {
  if (!x.is_square()) throw InvalidInput("compare: matrix must be square");
  const auto start = std::chrono::steady_clock::now();
  const auto pattern = make_pattern(x.rows(), mode);
  auto [chain, fit_report] = fit(x, pattern, cfg);

  Comparison c;
  auto& r = c.report;
  r.command = "compare";
  r.config = to_json(cfg);
  r.config["mode"] = to_string(mode);
  r.config["n"] = x.rows();
  r.config["m_factors"] = chain.size();
  r.seed = cfg.seed;
  r.nnz_sf = chain.nnz_total();
  r.rank_r = rank_for_budget(x.rows(), r.nnz_sf);
  r.nnz_tsvd = tsvd_nnz(x.rows(), r.rank_r);
  c.tsvd = tsvd(x, r.rank_r);
  r.fro_err_sf = fit_report.final_fro_err;
  r.fro_err_tsvd = fro_err(reconstruct(c.tsvd), x);
  r.winner = pick_winner(r.fro_err_sf, r.fro_err_tsvd);
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  c.chain = std::move(chain);
  c.fit = std::move(fit_report);
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic inputs

/// ~N log2 N unit entries at uniformly random positions (collisions merge).
inline DenseMatrix random_sparse_matrix(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  DenseMatrix x(n, n);
  const std::size_t count = n * ceil_log2(n);
  for (std::size_t k = 0; k < count; ++k) {
    const auto r = rng.below(n);
    x(r, rng.below(n)) = 1.0;
  }
  return x;
}

/// U V^T with U, V entries uniform in (-1, 1).
inline DenseMatrix random_low_rank(std::size_t n, std::size_t rank, std::uint64_t seed) {
  Rng rng(seed);
  DenseMatrix u(n, rank), v(rank, n);
  for (auto& e : u.values()) e = rng.uniform(-1.0, 1.0);
  for (auto& e : v.values()) e = rng.uniform(-1.0, 1.0);
  return matmul(u, v);
}

inline DenseMatrix random_dense(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  DenseMatrix x(n, n);
  for (auto& e : x.values()) e = rng.uniform(-1.0, 1.0);
  return x;
}

/// Product of an init_chain-distributed chain: exactly representable by the solver.
inline DenseMatrix planted_chain_matrix(std::size_t n, std::size_t m, PatternMode mode, std::uint64_t seed) {
  return chain_materialize(init_chain(make_pattern(n, mode), m, seed));
}

enum class SyntheticKind { identity, rank1, low_rank, sparse, planted, dense };

inline SyntheticKind synthetic_from_string(const std::string& s) {
  if (s == "identity") return SyntheticKind::identity;
  if (s == "rank1") return SyntheticKind::rank1;
  if (s == "low_rank") return SyntheticKind::low_rank;
  if (s == "sparse") return SyntheticKind::sparse;
  if (s == "planted") return SyntheticKind::planted;
  if (s == "dense") return SyntheticKind::dense;
  throw ParseError("unknown synthetic matrix '" + s + "'");
}

/// low_rank has rank 3; planted uses M = ceil(log2 n) factors in full_coverage mode.
inline DenseMatrix synthetic_matrix(SyntheticKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw InvalidDimension("synthetic_matrix: n must be >= 2");
  switch (kind) {
    case SyntheticKind::identity:
      return DenseMatrix::identity(n);
    case SyntheticKind::rank1:
      return random_low_rank(n, 1, seed);
    case SyntheticKind::low_rank:
      return random_low_rank(n, 3, seed);
    case SyntheticKind::sparse:
      return random_sparse_matrix(n, seed);
    case SyntheticKind::planted:
      return planted_chain_matrix(n, ceil_log2(n), PatternMode::full_coverage, seed);
    case SyntheticKind::dense:
      return random_dense(n, seed);
  }
  throw InvalidInput("synthetic_matrix: unknown kind");
}

}  // namespace sfact
