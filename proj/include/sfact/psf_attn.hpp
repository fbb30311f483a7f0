#pragma once

// Parametric sparse factorization attention.
//
// For every factor m an MLP f_m maps embedding row E_i to the stored values
// of row i of W(m): output slot 0 fills the diagonal, slot s >= 1 fills column
// (i + 2^(s-1)) mod N. A value MLP g gives V = g(E), and the block output is
// E_new = W(1) ... W(M) V (plus V when the residual flag is set). For the
// synthetic tasks E_new is mean-pooled over positions and fed to a linear head.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sfact/adam.hpp"
#include "sfact/binary_io.hpp"
#include "sfact/chord.hpp"
#include "sfact/data.hpp"
#include "sfact/dense.hpp"
#include "sfact/nn.hpp"
#include "sfact/rng.hpp"
#include "sfact/sparse.hpp"

namespace sfact {

struct PsfAttnConfig {
  TaskKind task = TaskKind::temporal_order;
  std::size_t n = 128;
  PatternMode mode = PatternMode::full_coverage;
  std::size_t m_factors = 0;  // 0 selects log2 N
  std::size_t d = 32;
  std::size_t d_v = 0;  // 0 selects d
  std::size_t hidden = 64;
  Activation activation = Activation::tanh;
  bool residual = false;
  bool positional = true;  // learned per-position embedding added to the encoder output
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const PsfAttnConfig& c) {
  return {{"task", to_string(c.task)}, {"n", c.n},
          {"mode", to_string(c.mode)}, {"m_factors", c.m_factors},
          {"d", c.d},                  {"d_v", c.d_v},
          {"hidden", c.hidden},        {"activation", to_string(c.activation)},
          {"residual", c.residual},    {"positional", c.positional},
          {"seed", c.seed}};
}

inline PsfAttnConfig psf_config_from_json(const nlohmann::json& j) {
  PsfAttnConfig c;
  try {
    c.task = task_from_string(j.at("task").get<std::string>());
    c.n = j.at("n").get<std::size_t>();
    c.mode = pattern_mode_from_string(j.at("mode").get<std::string>());
    c.m_factors = j.at("m_factors").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.d_v = j.at("d_v").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.activation = activation_from_string(j.at("activation").get<std::string>());
    c.residual = j.at("residual").get<bool>();
    c.positional = j.at("positional").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  return c;
}

inline std::size_t task_outputs(TaskKind t) { return t == TaskKind::adding ? 1 : kOrderClasses; }

struct PsfAttnModel {
  PsfAttnConfig config;
  PatternPtr pattern;
  std::vector<Mlp> factor_mlps;  // d -> hidden -> degree, one per factor
  Mlp value_mlp;                 // d -> hidden -> d_v
  Mlp lift;                      // adding: (a, b) -> d
  DenseMatrix token_table;       // temporal_order: vocab x d
  DenseMatrix positional;        // n x d
  Mlp head;                      // d_v -> task outputs

  std::size_t n() const { return pattern->n(); }
  std::size_t m() const { return factor_mlps.size(); }
  std::size_t d() const { return config.d; }
  std::size_t d_v() const { return value_mlp.output_width(); }
};

inline PsfAttnModel make_model(PsfAttnConfig cfg) {
  if (cfg.d == 0 || cfg.hidden == 0) throw InvalidDimension("make_model: d and hidden must be >= 1");
  if (cfg.d_v == 0) cfg.d_v = cfg.d;
  PsfAttnModel model;
  model.pattern = make_pattern(cfg.n, cfg.mode);
  if (cfg.m_factors == 0) cfg.m_factors = model.pattern->k_exp();
  model.config = cfg;
  const std::size_t deg = model.pattern->degree();

  // Every block gets its own stream derived from the model seed.
  std::uint64_t stream = cfg.seed * 0x9E3779B97F4A7C15ULL;
  auto next_seed = [&stream]() { return stream += 0xD1B54A32D192ED03ULL; };

  for (std::size_t m = 0; m < cfg.m_factors; ++m) {
    model.factor_mlps.push_back(make_mlp({cfg.d, cfg.hidden, deg}, cfg.activation, next_seed()));
  }
  model.value_mlp = make_mlp({cfg.d, cfg.hidden, cfg.d_v}, cfg.activation, next_seed());
  model.head = make_mlp({cfg.d_v, task_outputs(cfg.task)}, cfg.activation, next_seed());
  if (cfg.task == TaskKind::adding) {
    model.lift = make_mlp({2, cfg.d}, cfg.activation, next_seed());
  } else {
    Rng rng(next_seed());
    model.token_table = DenseMatrix(kOrderVocab, cfg.d);
    for (auto& v : model.token_table.values()) v = rng.uniform(-1.0, 1.0);
  }
  model.positional = DenseMatrix(cfg.n, cfg.d);
  if (cfg.positional) {
    Rng rng(next_seed());
    for (auto& v : model.positional.values()) v = rng.uniform(-1.0, 1.0);
  }
  return model;
}

/// Zeroes every factor MLP's last layer and sets the diagonal-slot bias to
/// one, so each factor (and the chain) is exactly the identity.
inline void set_identity_factors(PsfAttnModel& model) {
  for (auto& f : model.factor_mlps) {
    const std::size_t last = f.layers() - 1;
    f.weight(last).setZero();
    f.bias(last).setZero();
    f.bias(last)(0) = 1.0;
  }
}

// ---------------------------------------------------------------------------
// Parameter blocks: factors..., value, encoder, [positional], head

inline std::vector<std::span<double>> parameter_blocks(PsfAttnModel& model) {
  std::vector<std::span<double>> out;
  for (auto& f : model.factor_mlps) out.emplace_back(f.params);
  out.emplace_back(model.value_mlp.params);
  if (model.config.task == TaskKind::adding) {
    out.emplace_back(model.lift.params);
  } else {
    out.emplace_back(model.token_table.values());
  }
  if (model.config.positional) out.emplace_back(model.positional.values());
  out.emplace_back(model.head.params);
  return out;
}

inline std::vector<AlignedVector> zero_gradients(PsfAttnModel& model) {
  std::vector<AlignedVector> g;
  for (auto block : parameter_blocks(model)) g.emplace_back(block.size(), 0.0);
  return g;
}

// ---------------------------------------------------------------------------
// Encoding

inline void check_length(const PsfAttnModel& model, const Dataset& ds) {
  if (ds.task != model.config.task) throw InvalidInput("dataset task does not match the model");
  if (ds.size() > 0 && ds.n != model.n()) {
    throw LengthMismatch("dataset sequences have length " + std::to_string(ds.n) + ", model expects " +
                         std::to_string(model.n()));
  }
}

struct EncoderTape {
  DenseMatrix features;  // adding: stacked (a, b) rows
  MlpTape lift;
  std::vector<std::size_t> tokens;
};

/// Stacked embeddings (B*N) x d of the selected sequences.
inline DenseMatrix encode_batch(const PsfAttnModel& model, const Dataset& ds, std::span<const std::size_t> idx,
                                EncoderTape* tape = nullptr) {
  const std::size_t n = model.n();
  const std::size_t d = model.d();
  DenseMatrix e;
  if (model.config.task == TaskKind::adding) {
    DenseMatrix feats(idx.size() * n, 2);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& inst = ds.adding[idx[b]];
      if (inst.a.size() != n) throw LengthMismatch("encode: sequence length differs from model");
      for (std::size_t i = 0; i < n; ++i) {
        feats(b * n + i, 0) = inst.a[i];
        feats(b * n + i, 1) = inst.b[i];
      }
    }
    e = mlp_forward(model.lift, feats, tape ? &tape->lift : nullptr);
    if (tape) tape->features = std::move(feats);
  } else {
    e = DenseMatrix(idx.size() * n, d);
    if (tape) tape->tokens.resize(idx.size() * n);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& inst = ds.order[idx[b]];
      if (inst.tokens.size() != n) throw LengthMismatch("encode: sequence length differs from model");
      for (std::size_t i = 0; i < n; ++i) {
        const auto tok = inst.tokens[i];
        auto src = model.token_table.row(tok);
        std::copy(src.begin(), src.end(), e.row(b * n + i).begin());
        if (tape) tape->tokens[b * n + i] = tok;
      }
    }
  }
  if (model.config.positional) {
    for (std::size_t r = 0; r < e.rows(); ++r) {
      auto pos = model.positional.row(r % n);
      auto dst = e.row(r);
      for (std::size_t c = 0; c < d; ++c) dst[c] += pos[c];
    }
  }
  return e;
}

/// Embedding E (N x d) of one sequence.
inline DenseMatrix encode(const PsfAttnModel& model, const Dataset& ds, std::size_t index) {
  check_length(model, ds);
  if (index >= ds.size()) throw InvalidDimension("encode: sequence index out of range");
  const std::size_t idx[] = {index};
  return encode_batch(model, ds, idx);
}

// ---------------------------------------------------------------------------
// Factor construction

/// Places rows [offset, offset + N) of each factor MLP output into a chain.
inline FactorChain chain_from_outputs(const PatternPtr& pattern, std::span<const DenseMatrix> outputs,
                                      std::size_t row_offset) {
  const auto& p = *pattern;
  std::vector<SparseSquareMatrix> factors;
  factors.reserve(outputs.size());
  for (const auto& out : outputs) {
    if (out.cols() != p.degree()) throw DimensionMismatch("factor MLP output width differs from pattern degree");
    SparseSquareMatrix w(pattern);
    auto& vals = w.values();
    for (std::size_t i = 0; i < p.n(); ++i) {
      auto row = out.row(row_offset + i);
      for (std::size_t s = 0; s < p.degree(); ++s) vals[p.slot_entry(i, s)] = row[s];
    }
    factors.push_back(std::move(w));
  }
  return FactorChain(std::move(factors));
}

inline FactorChain build_factors(const DenseMatrix& e, const PsfAttnModel& model) {
  if (e.rows() != model.n()) {
    throw DimensionMismatch("build_factors: embedding has " + std::to_string(e.rows()) + " rows, pattern has " +
                            std::to_string(model.n()));
  }
  std::vector<DenseMatrix> outs;
  for (const auto& f : model.factor_mlps) {
    outs.push_back(mlp_forward(f, e));
    if (!outs.back().all_finite()) throw NumericFault("build_factors: factor MLP produced non-finite values");
  }
  return chain_from_outputs(model.pattern, outs, 0);
}

struct ForwardTrace {
  FactorChain chain;
  DenseMatrix v;
  DenseMatrix e_new;
  std::vector<double> pooled;
  std::vector<double> output;
};

/// Full block on one embedding E: chain, V, E_new, pooled vector and head output.
inline ForwardTrace forward_embedding(const PsfAttnModel& model, const DenseMatrix& e) {
  ForwardTrace t;
  t.chain = build_factors(e, model);
  t.v = mlp_forward(model.value_mlp, e);
  t.e_new = chain_apply(t.chain, t.v);
  if (model.config.residual) {
    for (std::size_t k = 0; k < t.v.size(); ++k) t.e_new.values()[k] += t.v.values()[k];
  }
  DenseMatrix pooled(1, t.e_new.cols());
  for (std::size_t i = 0; i < t.e_new.rows(); ++i)
    for (std::size_t c = 0; c < t.e_new.cols(); ++c) pooled(0, c) += t.e_new(i, c);
  for (auto& v : pooled.values()) v /= static_cast<double>(t.e_new.rows());
  t.pooled.assign(pooled.values().begin(), pooled.values().end());
  const auto out = mlp_forward(model.head, pooled);
  t.output.assign(out.values().begin(), out.values().end());
  return t;
}

inline ForwardTrace forward(const PsfAttnModel& model, const Dataset& ds, std::size_t index) {
  return forward_embedding(model, encode(model, ds, index));
}

/// Row i of W(1)...W(M) for embedding E, via vector-matrix products only.
inline std::vector<double> attention_row(const PsfAttnModel& model, const DenseMatrix& e, std::size_t i) {
  if (i >= model.n()) throw InvalidDimension("attention_row: row " + std::to_string(i) + " out of range");
  return row_of_product(build_factors(e, model), i);
}

// ---------------------------------------------------------------------------
// Batched forward / backward used by training

struct BatchTape {
  std::vector<std::size_t> idx;
  EncoderTape encoder;
  DenseMatrix e;
  std::vector<MlpTape> factor_tapes;
  MlpTape value_tape;
  DenseMatrix v;
  std::vector<FactorChain> chains;             // per sequence
  std::vector<std::vector<DenseMatrix>> zs;    // per sequence: z[0] = chain*V, ..., z[M] = V
  DenseMatrix pooled;
  MlpTape head_tape;
  DenseMatrix output;
};

inline DenseMatrix rows_slice(const DenseMatrix& m, std::size_t begin, std::size_t count) {
  DenseMatrix out(count, m.cols());
  std::copy(m.data() + begin * m.cols(), m.data() + (begin + count) * m.cols(), out.data());
  return out;
}

inline DenseMatrix forward_batch(const PsfAttnModel& model, const Dataset& ds, std::span<const std::size_t> idx,
                                 BatchTape* tape) {
  const std::size_t n = model.n();
  const std::size_t bsz = idx.size();
  DenseMatrix e = encode_batch(model, ds, idx, tape ? &tape->encoder : nullptr);

  std::vector<DenseMatrix> outs;
  if (tape) tape->factor_tapes.resize(model.m());
  for (std::size_t m = 0; m < model.m(); ++m) {
    outs.push_back(mlp_forward(model.factor_mlps[m], e, tape ? &tape->factor_tapes[m] : nullptr));
  }
  DenseMatrix v = mlp_forward(model.value_mlp, e, tape ? &tape->value_tape : nullptr);

  const std::size_t dv = v.cols();
  DenseMatrix pooled(bsz, dv);
  if (tape) {
    tape->chains.clear();
    tape->zs.assign(bsz, {});
  }
  for (std::size_t b = 0; b < bsz; ++b) {
    FactorChain chain = chain_from_outputs(model.pattern, outs, b * n);
    std::vector<DenseMatrix> z(model.m() + 1);
    z[model.m()] = rows_slice(v, b * n, n);
    for (std::size_t m = model.m(); m-- > 0;) z[m] = spmm_dense(chain[m], z[m + 1]);
    auto prow = pooled.row(b);
    for (std::size_t i = 0; i < n; ++i) {
      auto zr = z[0].row(i);
      for (std::size_t c = 0; c < dv; ++c) prow[c] += zr[c];
      if (model.config.residual) {
        auto vr = z[model.m()].row(i);
        for (std::size_t c = 0; c < dv; ++c) prow[c] += vr[c];
      }
    }
    for (auto& x : prow) x /= static_cast<double>(n);
    if (tape) {
      tape->chains.push_back(std::move(chain));
      tape->zs[b] = std::move(z);
    }
  }
  DenseMatrix output = mlp_forward(model.head, pooled, tape ? &tape->head_tape : nullptr);
  if (tape) {
    tape->idx.assign(idx.begin(), idx.end());
    tape->e = std::move(e);
    tape->v = std::move(v);
    tape->pooled = pooled;
    tape->output = output;
  }
  return output;
}

/// Mean squared error (adding) or mean softmax cross-entropy (temporal_order),
/// with the gradient w.r.t. the head outputs.
inline double task_loss(TaskKind task, const DenseMatrix& output, const Dataset& ds,
                        std::span<const std::size_t> idx, DenseMatrix* grad) {
  const double bsz = static_cast<double>(idx.size());
  if (grad) *grad = DenseMatrix(output.rows(), output.cols());
  double loss = 0.0;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (task == TaskKind::adding) {
      const double r = output(b, 0) - ds.adding[idx[b]].y;
      loss += r * r;
      if (grad) (*grad)(b, 0) = 2.0 * r / bsz;
    } else {
      auto row = output.row(b);
      double mx = row[0];
      for (double x : row) mx = std::max(mx, x);
      double z = 0.0;
      for (double x : row) z += std::exp(x - mx);
      const int label = ds.order[idx[b]].label;
      loss += std::log(z) + mx - row[static_cast<std::size_t>(label)];
      if (grad) {
        for (std::size_t c = 0; c < row.size(); ++c) {
          (*grad)(b, c) = (std::exp(row[c] - mx) / z - (static_cast<int>(c) == label ? 1.0 : 0.0)) / bsz;
        }
      }
    }
  }
  return loss / bsz;
}

/// Backpropagates d(loss)/d(output) through the whole block into `grads`
/// (layout of parameter_blocks).
inline void backward_batch(PsfAttnModel& model, const BatchTape& tape, const DenseMatrix& d_output,
                           std::vector<AlignedVector>& grads) {
  const std::size_t n = model.n();
  const std::size_t m_count = model.m();
  const std::size_t bsz = tape.idx.size();
  const std::size_t dv = tape.v.cols();
  const auto& p = *model.pattern;
  const std::size_t value_block = m_count;
  const std::size_t encoder_block = m_count + 1;
  const std::size_t head_block = grads.size() - 1;

  DenseMatrix d_pooled = mlp_backward_accumulate(model.head, tape.head_tape, d_output, grads[head_block]);

  std::vector<DenseMatrix> d_factor_out(m_count, DenseMatrix(bsz * n, p.degree()));
  DenseMatrix d_v(bsz * n, dv);
  for (std::size_t b = 0; b < bsz; ++b) {
    const auto& chain = tape.chains[b];
    const auto& z = tape.zs[b];
    DenseMatrix dz(n, dv);
    auto dp = d_pooled.row(b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dv; ++c) dz(i, c) = dp[c] / static_cast<double>(n);
    if (model.config.residual) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < dv; ++c) d_v(b * n + i, c) += dz(i, c);
    }
    for (std::size_t m = 0; m < m_count; ++m) {
      // z[m] = W(m) z[m+1]
      const auto gw = masked_product_transpose(p, dz, z[m + 1]);
      auto& dfo = d_factor_out[m];
      for (std::size_t i = 0; i < n; ++i) {
        auto row = dfo.row(b * n + i);
        for (std::size_t s = 0; s < p.degree(); ++s) row[s] = gw[p.slot_entry(i, s)];
      }
      dz = spmm_transpose_dense(chain[m], dz);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dv; ++c) d_v(b * n + i, c) += dz(i, c);
  }

  DenseMatrix d_e = mlp_backward_accumulate(model.value_mlp, tape.value_tape, d_v, grads[value_block]);
  for (std::size_t m = 0; m < m_count; ++m) {
    DenseMatrix de_m = mlp_backward_accumulate(model.factor_mlps[m], tape.factor_tapes[m], d_factor_out[m], grads[m]);
    auto& acc = d_e.values();
    const auto& src = de_m.values();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += src[k];
  }

  if (model.config.positional) {
    auto& gpos = grads[encoder_block + 1];
    const std::size_t d = model.d();
    for (std::size_t r = 0; r < d_e.rows(); ++r) {
      auto src = d_e.row(r);
      double* dst = gpos.data() + (r % n) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  }
  if (model.config.task == TaskKind::adding) {
    mlp_backward_accumulate(model.lift, tape.encoder.lift, d_e, grads[encoder_block]);
  } else {
    auto& gtab = grads[encoder_block];
    const std::size_t d = model.d();
    for (std::size_t r = 0; r < d_e.rows(); ++r) {
      auto src = d_e.row(r);
      double* dst = gtab.data() + tape.encoder.tokens[r] * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  }
}

/// Task loss of a batch and its gradient for every parameter block.
inline std::pair<double, std::vector<AlignedVector>> loss_and_gradients(PsfAttnModel& model,
                                                                              const Dataset& ds,
                                                                              std::span<const std::size_t> idx) {
  BatchTape tape;
  const DenseMatrix out = forward_batch(model, ds, idx, &tape);
  DenseMatrix d_out;
  const double loss = task_loss(model.config.task, out, ds, idx, &d_out);
  auto grads = zero_gradients(model);
  backward_batch(model, tape, d_out, grads);
  return {loss, std::move(grads)};
}

// ---------------------------------------------------------------------------
// Evaluation and training

inline constexpr double kAddingTolerance = 0.04;

/// adding: |y - yhat| < 0.04 (strict); temporal_order: argmax matches the label.
inline bool prediction_correct(TaskKind task, std::span<const double> output, const Dataset& ds, std::size_t index) {
  if (task == TaskKind::adding) return std::abs(ds.adding[index].y - output[0]) < kAddingTolerance;
  std::size_t arg = 0;
  for (std::size_t c = 1; c < output.size(); ++c) {
    if (output[c] > output[arg]) arg = c;
  }
  return static_cast<int>(arg) == ds.order[index].label;
}

/// Accuracy of an arbitrary predictor; `predict(index)` returns the head output.
inline double evaluate_predictor(const Dataset& ds,
                                 const std::function<std::vector<double>(std::size_t)>& predict) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto out = predict(i);
    if (prediction_correct(ds.task, out, ds, i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline double evaluate(const PsfAttnModel& model, const Dataset& ds, std::size_t batch_size = 100) {
  check_length(model, ds);
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    const DenseMatrix out = forward_batch(model, ds, idx, nullptr);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (prediction_correct(ds.task, out.row(b), ds, idx[b])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double eval_accuracy = 0.0;
  double wall_time_s = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"train_loss", m.train_loss}, {"eval_accuracy", m.eval_accuracy},
          {"wall_time_s", m.wall_time_s}};
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 40;
  double lr = 1e-3;
  double lr_decay = 1.0;             // step size of epoch e is lr * lr_decay^(e-1)
  std::uint64_t seed = 0;            // drives the per-epoch shuffles
  double stop_at_accuracy = 2.0;     // stop early once eval accuracy reaches this (> 1 disables)
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  PsfAttnModel model;
  std::vector<EpochMetrics> metrics;
};

/// Raised when training produces a non-finite loss or gradient; carries the
/// parameters from before the last applied step.
class PsfNumericFault : public NumericFault {
 public:
  PsfNumericFault(const std::string& what, PsfAttnModel last_good)
      : NumericFault(what), last_good_(std::move(last_good)) {}
  const PsfAttnModel& last_good() const { return last_good_; }

 private:
  PsfAttnModel last_good_;
};

/// Mini-batch Adam on the task loss; evaluates on `eval` after every epoch.
inline TrainResult train(PsfAttnModel model, const Dataset& train_set, const Dataset& eval,
                         const TrainConfig& cfg) {
  check_length(model, train_set);
  check_length(model, eval);
  if (cfg.batch_size == 0) throw InvalidDimension("train: batch_size must be >= 1");
  if (!(cfg.lr > 0.0) || !(cfg.lr_decay > 0.0)) throw InvalidInput("train: lr and lr_decay must be positive");
  if (train_set.size() == 0) throw InvalidInput("train: empty training set");

  const auto start = std::chrono::steady_clock::now();
  std::vector<AdamState> states;
  for (auto block : parameter_blocks(model)) states.emplace_back(block.size(), AdamHyper{cfg.lr});

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  PsfAttnModel last_good = model;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch - 1));
    for (auto& st : states) st.hyper.lr = lr;
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t startb = 0; startb < order.size(); startb += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - startb);
      std::span<const std::size_t> idx(order.data() + startb, count);
      auto [loss, grads] = loss_and_gradients(model, train_set, idx);
      bool finite = std::isfinite(loss);
      for (const auto& g : grads) {
        for (double x : g) finite = finite && std::isfinite(x);
      }
      if (!finite) {
        throw PsfNumericFault("train: non-finite loss in epoch " + std::to_string(epoch), std::move(last_good));
      }
      last_good = model;
      auto blocks = parameter_blocks(model);
      for (std::size_t k = 0; k < blocks.size(); ++k) adam_step(blocks[k], grads[k], states[k]);
      loss_sum += loss;
      ++batches;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(batches);
    em.eval_accuracy = eval.size() > 0 ? evaluate(model, eval) : 0.0;
    em.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.metrics.push_back(em);
    if (cfg.on_epoch) cfg.on_epoch(em);
    if (em.eval_accuracy >= cfg.stop_at_accuracy) break;
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + pattern.json + one float64 blob per block

inline void save_model(const PsfAttnModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_pattern(*model.pattern, (dir / "pattern.json").string());
  nlohmann::json factors = nlohmann::json::array();
  for (std::size_t m = 0; m < model.m(); ++m) {
    factors.push_back(save_mlp(model.factor_mlps[m], dir, "factor_" + std::to_string(m)));
  }
  nlohmann::json manifest = {{"config", to_json(model.config)},
                             {"factor_mlps", factors},
                             {"value_mlp", save_mlp(model.value_mlp, dir, "value")},
                             {"head", save_mlp(model.head, dir, "head")}};
  if (model.config.task == TaskKind::adding) {
    manifest["lift"] = save_mlp(model.lift, dir, "lift");
  } else {
    io::write_f64(dir / "token_table.bin", model.token_table.values());
    manifest["token_table"] = {{"rows", model.token_table.rows()}, {"cols", model.token_table.cols()},
                               {"params", "token_table.bin"}};
  }
  io::write_f64(dir / "positional.bin", model.positional.values());
  manifest["positional"] = {{"rows", model.positional.rows()}, {"cols", model.positional.cols()},
                            {"params", "positional.bin"}};
  io::write_json(dir / "manifest.json", manifest);
}

inline PsfAttnModel load_model(const std::filesystem::path& dir) {
  const auto manifest = io::read_json(dir / "manifest.json");
  PsfAttnModel model;
  try {
    model.config = psf_config_from_json(manifest.at("config"));
    model.pattern = std::make_shared<const SparsityPattern>(load_pattern((dir / "pattern.json").string()));
    if (model.pattern->n() != model.config.n || model.pattern->mode() != model.config.mode) {
      throw ParseError("model checkpoint: pattern does not match config");
    }
    for (const auto& f : manifest.at("factor_mlps")) model.factor_mlps.push_back(load_mlp(f, dir));
    model.value_mlp = load_mlp(manifest.at("value_mlp"), dir);
    model.head = load_mlp(manifest.at("head"), dir);
    if (model.config.task == TaskKind::adding) {
      model.lift = load_mlp(manifest.at("lift"), dir);
    } else {
      const auto& t = manifest.at("token_table");
      const auto rows = t.at("rows").get<std::size_t>();
      const auto cols = t.at("cols").get<std::size_t>();
      model.token_table = DenseMatrix(rows, cols, io::read_f64(dir / t.at("params").get<std::string>(), rows * cols));
    }
    const auto& pos = manifest.at("positional");
    const auto rows = pos.at("rows").get<std::size_t>();
    const auto cols = pos.at("cols").get<std::size_t>();
    model.positional = DenseMatrix(rows, cols, io::read_f64(dir / pos.at("params").get<std::string>(), rows * cols));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model checkpoint: ") + e.what());
  }
  if (model.factor_mlps.size() != model.config.m_factors) throw ParseError("model checkpoint: factor count mismatch");
  for (const auto& f : model.factor_mlps) {
    if (f.output_width() != model.pattern->degree() || f.input_width() != model.config.d) {
      throw ParseError("model checkpoint: factor MLP shape mismatch");
    }
  }
  return model;
}

}  // namespace sfact
