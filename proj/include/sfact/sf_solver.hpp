#pragma once

// Non-parametric sparse factorization: minimize ||X - W(1)...W(M)||_F^2
// over the stored values of every factor.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sfact/adam.hpp"
#include "sfact/chord.hpp"
#include "sfact/dense.hpp"
#include "sfact/rng.hpp"
#include "sfact/sparse.hpp"

namespace sfact {

enum class LrSchedule {
  plateau,  // multiply the step size by plateau_decay whenever progress stalls
  cosine,   // anneal from learning_rate to 0 over max_iters
};

inline std::string to_string(LrSchedule s) { return s == LrSchedule::plateau ? "plateau" : "cosine"; }

inline LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "plateau") return LrSchedule::plateau;
  if (s == "cosine") return LrSchedule::cosine;
  throw ParseError("unknown schedule '" + s + "'");
}

struct SfConfig {
  std::size_t m_factors = 0;  // 0 selects ceil(log2 N)
  std::size_t max_iters = 20000;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
  double stop_rel_improvement = 1e-9;
  std::size_t stop_window = 50;
  LrSchedule schedule = LrSchedule::plateau;
  // Plateau schedule: a stall (relative improvement below stop_rel_improvement
  // over stop_window iterations) decays the step size; the fit stops at the
  // stall that follows the last allowed decay. With the cosine schedule the
  // first stall stops the fit.
  double plateau_decay = 0.5;
  std::size_t max_decays = 20;
};

inline nlohmann::json to_json(const SfConfig& c) {
  return {{"m_factors", c.m_factors},
          {"max_iters", c.max_iters},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"stop_rel_improvement", c.stop_rel_improvement},
          {"stop_window", c.stop_window},
          {"schedule", to_string(c.schedule)},
          {"plateau_decay", c.plateau_decay},
          {"max_decays", c.max_decays}};
}

struct FitReport {
  double final_fro_err = 0.0;
  std::vector<double> loss_history;  // best-so-far squared F-norm per iteration
  std::size_t iterations_run = 0;
  std::size_t nnz_total = 0;
  double wall_time_s = 0.0;
};

inline nlohmann::json to_json(const FitReport& r) {
  return {{"final_fro_err", r.final_fro_err},
          {"loss_history", r.loss_history},
          {"iterations_run", r.iterations_run},
          {"nnz_total", r.nnz_total},
          {"wall_time_s", r.wall_time_s}};
}

/// Raised when the loss or chain turns non-finite; carries the best chain seen before the fault.
class SfNumericFault : public NumericFault {
 public:
  SfNumericFault(const std::string& what, std::optional<FactorChain> last_valid)
      : NumericFault(what), last_valid_(std::move(last_valid)) {}
  const std::optional<FactorChain>& last_valid() const { return last_valid_; }

 private:
  std::optional<FactorChain> last_valid_;
};

/// Every stored value drawn from U[1/d, 1/d + 0.01], d the row degree.
inline FactorChain init_chain(const PatternPtr& pattern, std::size_t m, std::uint64_t seed) {
  if (m < 1) throw InvalidDimension("init_chain: m must be >= 1");
  Rng rng(seed);
  std::vector<SparseSquareMatrix> factors;
  factors.reserve(m);
  for (std::size_t f = 0; f < m; ++f) {
    SparseSquareMatrix w(pattern);
    auto& vals = w.values();
    for (std::size_t i = 0; i < pattern->n(); ++i) {
      const double base = 1.0 / static_cast<double>(pattern->row_degree(i));
      for (std::size_t k = pattern->row_begin(i); k < pattern->row_end(i); ++k) {
        vals[k] = base + 0.01 * rng.uniform01();
      }
    }
    factors.push_back(std::move(w));
  }
  return FactorChain(std::move(factors));
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;  // one array per factor, aligned with its values
};

/// Loss ||X - Xhat||_F^2 and its gradient on every stored value.
///
/// With G = 2 (Xhat - X), the gradient for factor m is the pattern mask of
/// A(m-1)^T G B(m+1)^T, A(m-1) = W(1)..W(m-1), B(m+1) = W(m+1)..W(M).
/// The suffixes B are materialized once; A(m-1)^T G is carried forward as
/// L(m+1) = W(m)^T L(m) starting from L(1) = G, so no dense N^3 product is formed.
inline LossAndGrad loss_and_grad(const FactorChain& chain, const DenseMatrix& x) {
  const std::size_t n = chain.n();
  const std::size_t m_count = chain.size();
  if (x.rows() != n || x.cols() != n) {
    throw DimensionMismatch("loss_and_grad: target is " + std::to_string(x.rows()) + "x" +
                            std::to_string(x.cols()) + ", chain is " + std::to_string(n) + "x" +
                            std::to_string(n));
  }
  if (!chain.all_finite()) throw NumericFault("loss_and_grad: chain contains non-finite values");

  // suffix[m] = W(m) ... W(M-1) (0-based), suffix[M] = identity (implicit)
  std::vector<DenseMatrix> suffix(m_count);
  suffix[m_count - 1] = chain[m_count - 1].densify();
  for (std::size_t m = m_count - 1; m-- > 0;) suffix[m] = spmm_dense(chain[m], suffix[m + 1]);
  const DenseMatrix& xhat = suffix[0];

  LossAndGrad out;
  DenseMatrix left(n, n);
  {
    auto& lv = left.values();
    const auto& hv = xhat.values();
    const auto& xv = x.values();
    double loss = 0.0;
    for (std::size_t k = 0; k < lv.size(); ++k) {
      const double r = hv[k] - xv[k];
      loss += r * r;
      lv[k] = 2.0 * r;
    }
    out.loss = loss;
  }

  const auto& p = chain.pattern();
  out.grads.resize(m_count);
  for (std::size_t m = 0; m < m_count; ++m) {
    if (m + 1 < m_count) {
      out.grads[m] = masked_product_transpose(p, left, suffix[m + 1]);
      left = spmm_transpose_dense(chain[m], left);
    } else {
      auto& g = out.grads[m];
      g.resize(p.nnz());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = p.row_begin(i); k < p.row_end(i); ++k) g[k] = left(i, p.col_index()[k]);
    }
  }
  return out;
}

/// Adam over all stored values; returns the best chain seen.
inline std::pair<FactorChain, FitReport> fit(const DenseMatrix& x, const PatternPtr& pattern,
                                             const SfConfig& cfg) {
  if (!x.is_square() || x.rows() != pattern->n()) {
    throw DimensionMismatch("fit: target must be " + std::to_string(pattern->n()) + "x" +
                            std::to_string(pattern->n()));
  }
  if (cfg.max_iters < 1) throw InvalidDimension("fit: max_iters must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw InvalidDimension("fit: learning_rate must be > 0");
  if (!x.all_finite()) throw NumericFault("fit: target contains non-finite values");

  const auto start = std::chrono::steady_clock::now();
  const std::size_t m = cfg.m_factors == 0 ? pattern->k_exp() : cfg.m_factors;
  FactorChain chain = init_chain(pattern, m, cfg.seed);
  FactorChain best = chain;
  double best_loss = 0.0;

  std::vector<AdamState> states;
  for (std::size_t f = 0; f < m; ++f) states.emplace_back(pattern->nnz(), AdamHyper{cfg.learning_rate});

  FitReport report;
  report.nnz_total = chain.nnz_total();
  std::size_t decays = 0;
  std::size_t window_start = 0;  // history index where the current step size took effect
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    LossAndGrad lg;
    try {
      lg = loss_and_grad(chain, x);
    } catch (const NumericFault& e) {
      throw SfNumericFault(e.what(), it == 0 ? std::nullopt : std::optional<FactorChain>(best));
    }
    if (!std::isfinite(lg.loss)) {
      throw SfNumericFault("fit: loss became non-finite at iteration " + std::to_string(it),
                           it == 0 ? std::nullopt : std::optional<FactorChain>(best));
    }
    report.iterations_run = it + 1;
    if (it == 0 || lg.loss < best_loss) {
      best_loss = lg.loss;
      best = chain;
    }
    report.loss_history.push_back(best_loss);

    if (best_loss == 0.0) break;
    const auto& h = report.loss_history;
    if (h.size() > window_start + cfg.stop_window) {
      const double then = h[h.size() - 1 - cfg.stop_window];
      if ((then - best_loss) / then < cfg.stop_rel_improvement) {
        if (cfg.schedule == LrSchedule::cosine || decays == cfg.max_decays) break;
        ++decays;
        window_start = h.size() - 1;
        for (auto& s : states) s.hyper.lr *= cfg.plateau_decay;
      }
    }
    if (it + 1 == cfg.max_iters) break;
    if (cfg.schedule == LrSchedule::cosine) {
      const double frac = static_cast<double>(it) / static_cast<double>(cfg.max_iters);
      const double lr = cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
      for (auto& st : states) st.hyper.lr = lr;
    }
    for (std::size_t f = 0; f < m; ++f) adam_step(chain[f].values(), lg.grads[f], states[f]);
  }

  report.final_fro_err = std::sqrt(best_loss);
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(best), std::move(report)};
}

}  // namespace sfact
