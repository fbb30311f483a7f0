#pragma once

// Truncated SVD baseline and the equal-budget rank rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfact/binary_io.hpp"
#include "sfact/dense.hpp"
#include "sfact/error.hpp"
#include "sfact/rng.hpp"

namespace sfact {

struct TsvdResult {
  DenseMatrix u;                       // N x r, orthonormal columns
  std::vector<double> singular_values;  // descending
  DenseMatrix v;                       // N x r, orthonormal columns
  std::size_t r = 0;
};

struct TsvdOptions {
  double tol = 1e-12;
  std::size_t max_iters = 3000;
  std::uint64_t seed = 0x5eed;
};

namespace detail {

inline double column_dot(const DenseMatrix& a, std::size_t i, const DenseMatrix& b, std::size_t j) {
  double acc = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) acc += a(r, i) * b(r, j);
  return acc;
}

// In-place Gram-Schmidt with one re-orthogonalization pass. Columns that
// collapse (rank deficiency) are replaced by random vectors and redone.
inline void orthonormalize_columns(DenseMatrix& q, Rng& rng) {
  const std::size_t n = q.rows();
  for (std::size_t j = 0; j < q.cols(); ++j) {
    const double original = std::sqrt(column_dot(q, j, q, j));
    for (int attempt = 0;; ++attempt) {
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i < j; ++i) {
          const double d = column_dot(q, i, q, j);
          for (std::size_t r = 0; r < n; ++r) q(r, j) -= d * q(r, i);
        }
      }
      const double norm = std::sqrt(column_dot(q, j, q, j));
      if (norm > 1e-10 * std::max(original, 1.0) && attempt < 8) {
        for (std::size_t r = 0; r < n; ++r) q(r, j) /= norm;
        break;
      }
      if (attempt >= 8) throw NumericFault("tsvd: failed to orthonormalize basis");
      for (std::size_t r = 0; r < n; ++r) q(r, j) = rng.uniform(-1.0, 1.0);
    }
  }
}

// One-sided (Hestenes) Jacobi: rotates the columns of z until mutually
// orthogonal, accumulating the rotations in `rot` (p x p).
inline void hestenes_jacobi(DenseMatrix& z, DenseMatrix& rot) {
  const std::size_t p = z.cols();
  const std::size_t n = z.rows();
  rot = DenseMatrix::identity(p);
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < p; ++i) {
      for (std::size_t j = i + 1; j < p; ++j) {
        const double alpha = column_dot(z, i, z, i);
        const double beta = column_dot(z, j, z, j);
        const double gamma = column_dot(z, i, z, j);
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t r = 0; r < n; ++r) {
          const double zi = z(r, i);
          const double zj = z(r, j);
          z(r, i) = c * zi - s * zj;
          z(r, j) = s * zi + c * zj;
        }
        for (std::size_t r = 0; r < p; ++r) {
          const double qi = rot(r, i);
          const double qj = rot(r, j);
          rot(r, i) = c * qi - s * qj;
          rot(r, j) = s * qi + c * qj;
        }
      }
    }
    if (!rotated) return;
  }
}

inline DenseMatrix leading_columns(const DenseMatrix& a, std::size_t k) {
  DenseMatrix out(a.rows(), k);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < k; ++c) out(r, c) = a(r, c);
  return out;
}

// ||(I - A A^T) B||_F for orthonormal A, B of equal shape.
inline double subspace_residual(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix proj = matmul(a.transposed(), b);
  DenseMatrix back = matmul(a, proj);
  return fro_err(back, b);
}

}  // namespace detail

/// Top-r singular triplets by two-sided orthogonal (subspace) iteration with
/// Rayleigh-Ritz extraction. Each right singular vector's largest-magnitude
/// entry is made non-negative.
inline TsvdResult tsvd(const DenseMatrix& x, std::size_t r, const TsvdOptions& opts = {}) {
  if (!x.is_square()) throw DimensionMismatch("tsvd: matrix must be square");
  const std::size_t n = x.rows();
  if (r < 1 || r > n) {
    throw InvalidDimension("tsvd: rank " + std::to_string(r) + " outside [1, " + std::to_string(n) + "]");
  }
  if (!x.all_finite()) throw NumericFault("tsvd: input contains non-finite values");

  // Oversampled block: convergence rate sigma_{p+1}/sigma_r rather than sigma_{r+1}/sigma_r.
  const std::size_t p = std::min(n, 2 * r + 8);
  Rng rng(opts.seed);
  DenseMatrix vblock(n, p);
  for (double& v : vblock.values()) v = rng.uniform(-1.0, 1.0);
  detail::orthonormalize_columns(vblock, rng);

  const DenseMatrix xt = x.transposed();
  DenseMatrix u_full, v_full, rot;
  std::vector<double> sigma(p);
  DenseMatrix prev_top;
  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    DenseMatrix q = matmul(x, vblock);
    detail::orthonormalize_columns(q, rng);
    DenseMatrix z = matmul(xt, q);  // z^T = q^T x
    detail::hestenes_jacobi(z, rot);

    // z = V diag(sigma), q^T x = rot diag(sigma) V^T
    std::vector<std::size_t> order(p);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> norms(p);
    for (std::size_t k = 0; k < p; ++k) norms[k] = std::sqrt(detail::column_dot(z, k, z, k));
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return norms[a] > norms[b]; });

    DenseMatrix qrot = matmul(q, rot);
    u_full = DenseMatrix(n, p);
    v_full = DenseMatrix(n, p);
    const double top = norms[order[0]];
    for (std::size_t c = 0; c < p; ++c) {
      const std::size_t k = order[c];
      sigma[c] = norms[k];
      const bool degenerate = norms[k] <= 1e-14 * std::max(top, 1e-300);
      for (std::size_t row = 0; row < n; ++row) {
        u_full(row, c) = qrot(row, k);
        v_full(row, c) = degenerate ? z(row, k) : z(row, k) / norms[k];
      }
    }
    // Null-space directions carry no signal; give them any orthonormal completion.
    detail::orthonormalize_columns(v_full, rng);

    // Directions with (numerically) zero singular value are arbitrary and
    // never settle, so only the signal part of the top-r block is tracked.
    std::size_t r_signal = 0;
    while (r_signal < r && sigma[r_signal] > 1e-13 * std::max(sigma[0], 1e-300)) ++r_signal;
    DenseMatrix top_v = detail::leading_columns(v_full, r_signal);
    const bool converged = p == n || r_signal == 0 ||
                           (prev_top.cols() == r_signal && detail::subspace_residual(prev_top, top_v) <= opts.tol);
    prev_top = std::move(top_v);
    vblock = v_full;
    if (converged) break;
  }

  TsvdResult res;
  res.r = r;
  res.u = detail::leading_columns(u_full, r);
  res.v = detail::leading_columns(v_full, r);
  res.singular_values.assign(sigma.begin(), sigma.begin() + static_cast<std::ptrdiff_t>(r));
  for (std::size_t c = 0; c < r; ++c) {
    std::size_t arg = 0;
    for (std::size_t row = 1; row < n; ++row) {
      if (std::abs(res.v(row, c)) > std::abs(res.v(arg, c))) arg = row;
    }
    if (res.v(arg, c) < 0.0) {
      for (std::size_t row = 0; row < n; ++row) {
        res.v(row, c) = -res.v(row, c);
        res.u(row, c) = -res.u(row, c);
      }
    }
  }
  return res;
}

/// U diag(sigma) V^T.
inline DenseMatrix reconstruct(const TsvdResult& t) {
  const std::size_t n = t.u.rows();
  DenseMatrix us(n, t.r);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < t.r; ++c) us(i, c) = t.u(i, c) * t.singular_values[c];
  return matmul(us, t.v.transposed());
}

/// Stored entries of a rank-r factorization: 2Nr + r.
inline std::size_t tsvd_nnz(std::size_t n, std::size_t r) { return 2 * n * r + r; }

/// Smallest r with r(2n+1) >= budget, capped at n.
inline std::size_t rank_for_budget(std::size_t n, std::size_t nnz_budget) {
  const std::size_t per_rank = 2 * n + 1;
  if (nnz_budget < per_rank) {
    throw InvalidDimension("rank_for_budget: budget " + std::to_string(nnz_budget) +
                           " is below the cost of one rank (" + std::to_string(per_rank) + ")");
  }
  return std::min(n, (nnz_budget + per_rank - 1) / per_rank);
}

// Directory layout: manifest.json + u.bin, s.bin, v.bin (little-endian float64, row-major).

inline void save_tsvd(const TsvdResult& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_f64(dir / "u.bin", t.u.values());
  io::write_f64(dir / "s.bin", t.singular_values);
  io::write_f64(dir / "v.bin", t.v.values());
  io::write_json(dir / "manifest.json", {{"n", t.u.rows()},
                                         {"r", t.r},
                                         {"singular_values", t.singular_values},
                                         {"u", "u.bin"},
                                         {"s", "s.bin"},
                                         {"v", "v.bin"},
                                         {"layout", "row_major"}});
}

inline TsvdResult load_tsvd(const std::filesystem::path& dir) {
  const auto manifest = io::read_json(dir / "manifest.json");
  std::size_t n = 0, r = 0;
  try {
    n = manifest.at("n").get<std::size_t>();
    r = manifest.at("r").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("tsvd manifest: ") + e.what());
  }
  TsvdResult t;
  t.r = r;
  t.u = DenseMatrix(n, r, io::read_f64(dir / "u.bin", n * r));
  t.singular_values = io::read_f64(dir / "s.bin", r);
  t.v = DenseMatrix(n, r, io::read_f64(dir / "v.bin", n * r));
  return t;
}

}  // namespace sfact
