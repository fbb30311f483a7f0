#pragma once

// Dense MLPs with reverse-mode gradients. Parameters live in one flat
// array per network so an AdamState can be attached directly.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "sfact/adam.hpp"
#include "sfact/binary_io.hpp"
#include "sfact/dense.hpp"
#include "sfact/error.hpp"
#include "sfact/rng.hpp"

namespace sfact {

enum class Activation { tanh, relu };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ParseError("unknown activation '" + s + "'");
}

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::RowVectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

inline MatMap as_eigen(DenseMatrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline ConstMatMap as_eigen(const DenseMatrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
}  // namespace detail

/// Fully connected network. Layer l maps widths[l] -> widths[l+1]; the
/// activation is applied after every layer except the last.
struct Mlp {
  std::vector<std::size_t> widths;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;
  AlignedVector params;  // per layer: W (in x out, row-major), then b (out)

  std::size_t layers() const { return widths.size() - 1; }
  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }

  std::size_t weight_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t k = 0; k < l; ++k) off += widths[k] * widths[k + 1] + widths[k + 1];
    return off;
  }
  std::size_t bias_offset(std::size_t l) const { return weight_offset(l) + widths[l] * widths[l + 1]; }

  static std::size_t param_count(const std::vector<std::size_t>& widths) {
    std::size_t n = 0;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) n += widths[k] * widths[k + 1] + widths[k + 1];
    return n;
  }

  detail::ConstMatMap weight(std::size_t l) const {
    return {params.data() + weight_offset(l), static_cast<Eigen::Index>(widths[l]),
            static_cast<Eigen::Index>(widths[l + 1])};
  }
  detail::MatMap weight(std::size_t l) {
    return {params.data() + weight_offset(l), static_cast<Eigen::Index>(widths[l]),
            static_cast<Eigen::Index>(widths[l + 1])};
  }
  detail::ConstVecMap bias(std::size_t l) const {
    return {params.data() + bias_offset(l), static_cast<Eigen::Index>(widths[l + 1])};
  }
  detail::VecMap bias(std::size_t l) {
    return {params.data() + bias_offset(l), static_cast<Eigen::Index>(widths[l + 1])};
  }
};

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
inline Mlp make_mlp(std::vector<std::size_t> widths, Activation act, std::uint64_t seed) {
  if (widths.size() < 2) throw InvalidDimension("make_mlp: need at least input and output widths");
  for (auto w : widths) {
    if (w == 0) throw InvalidDimension("make_mlp: widths must be positive");
  }
  Mlp m;
  m.widths = std::move(widths);
  m.activation = act;
  m.seed = seed;
  m.params.assign(Mlp::param_count(m.widths), 0.0);
  Rng rng(seed);
  for (std::size_t l = 0; l < m.layers(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(m.widths[l] + m.widths[l + 1]));
    auto w = m.weight(l);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
  }
  return m;
}

/// Per-layer inputs recorded by a forward pass; inputs[0] is the batch itself.
struct MlpTape {
  std::vector<DenseMatrix> inputs;
};

inline DenseMatrix mlp_forward(const Mlp& m, const DenseMatrix& batch, MlpTape* tape = nullptr) {
  if (batch.cols() != m.input_width()) {
    throw DimensionMismatch("mlp_forward: batch has " + std::to_string(batch.cols()) + " columns, network expects " +
                            std::to_string(m.input_width()));
  }
  if (tape) tape->inputs.clear();
  DenseMatrix h = batch;
  for (std::size_t l = 0; l < m.layers(); ++l) {
    DenseMatrix out(h.rows(), m.widths[l + 1]);
    auto o = detail::as_eigen(out);
    o.noalias() = detail::as_eigen(h) * m.weight(l);
    o.rowwise() += m.bias(l);
    if (l + 1 < m.layers()) {
      if (m.activation == Activation::tanh) {
        o = o.array().tanh();
      } else {
        o = o.array().max(0.0);
      }
    }
    if (tape) tape->inputs.push_back(std::move(h));
    h = std::move(out);
  }
  return h;
}

struct MlpGrads {
  AlignedVector params;  // same layout as Mlp::params
  DenseMatrix input;
};

/// Reverse pass. Parameter gradients are added into `param_grads`; the
/// gradient w.r.t. the forward input is returned.
inline DenseMatrix mlp_backward_accumulate(const Mlp& m, const MlpTape& tape, const DenseMatrix& upstream,
                                           std::span<double> param_grads) {
  if (tape.inputs.size() != m.layers()) throw DimensionMismatch("mlp_backward: tape does not match network");
  if (upstream.cols() != m.output_width() || upstream.rows() != tape.inputs.front().rows()) {
    throw DimensionMismatch("mlp_backward: upstream gradient shape mismatch");
  }
  if (param_grads.size() != m.params.size()) throw DimensionMismatch("mlp_backward: gradient buffer size");

  DenseMatrix delta = upstream;  // gradient w.r.t. the current layer's pre-activation
  for (std::size_t l = m.layers(); l-- > 0;) {
    const DenseMatrix& in = tape.inputs[l];
    const auto in_e = detail::as_eigen(in);
    const auto d_e = detail::as_eigen(delta);
    detail::MatMap gw(param_grads.data() + m.weight_offset(l), static_cast<Eigen::Index>(m.widths[l]),
                      static_cast<Eigen::Index>(m.widths[l + 1]));
    detail::VecMap gb(param_grads.data() + m.bias_offset(l), static_cast<Eigen::Index>(m.widths[l + 1]));
    gw.noalias() += in_e.transpose() * d_e;
    gb += d_e.colwise().sum();

    DenseMatrix prev(in.rows(), in.cols());
    auto p_e = detail::as_eigen(prev);
    p_e.noalias() = d_e * m.weight(l).transpose();
    if (l > 0) {
      // `in` is the activated output of layer l-1
      if (m.activation == Activation::tanh) {
        p_e.array() *= 1.0 - in_e.array().square();
      } else {
        p_e.array() *= (in_e.array() > 0.0).cast<double>();
      }
    }
    delta = std::move(prev);
  }
  return delta;
}

inline MlpGrads mlp_backward(const Mlp& m, const MlpTape& tape, const DenseMatrix& upstream) {
  MlpGrads g;
  g.params.assign(m.params.size(), 0.0);
  g.input = mlp_backward_accumulate(m, tape, upstream, g.params);
  return g;
}

inline nlohmann::json mlp_manifest(const Mlp& m, const std::string& blob) {
  return {{"widths", m.widths}, {"activation", to_string(m.activation)}, {"seed", m.seed}, {"params", blob}};
}

/// Writes `<name>.bin` under dir and returns its manifest entry.
inline nlohmann::json save_mlp(const Mlp& m, const std::filesystem::path& dir, const std::string& name) {
  const std::string blob = name + ".bin";
  io::write_f64(dir / blob, m.params);
  return mlp_manifest(m, blob);
}

inline Mlp load_mlp(const nlohmann::json& manifest, const std::filesystem::path& dir) {
  Mlp m;
  std::string blob;
  try {
    m.widths = manifest.at("widths").get<std::vector<std::size_t>>();
    m.activation = activation_from_string(manifest.at("activation").get<std::string>());
    m.seed = manifest.at("seed").get<std::uint64_t>();
    blob = manifest.at("params").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("mlp manifest: ") + e.what());
  }
  if (m.widths.size() < 2) throw ParseError("mlp manifest: need at least two widths");
  const auto values = io::read_f64(dir / blob, Mlp::param_count(m.widths));
  m.params.assign(values.begin(), values.end());
  return m;
}

}  // namespace sfact
