#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "convtran/autodiff.hpp"
#include "convtran/encodings_relative.hpp"
#include "convtran/types.hpp"

namespace convtran {

enum class RelativeKind { None, Shaw, Vector, ERPE };

std::string_view to_string(RelativeKind kind);
RelativeKind parse_relative_kind(std::string_view name);

/// e(i, j) = q_i . k_j / sqrt(scale_dim).
template <typename DQ, typename DK>
Matrix<typename DQ::Scalar> scaled_dot_scores(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DK>& k,
                                              Index scale_dim) {
  using Scalar = typename DQ::Scalar;
  if (q.cols() != k.cols())
    throw std::invalid_argument("scaled_dot_scores: inner dimensions " + std::to_string(q.cols()) + " and " +
                                std::to_string(k.cols()) + " differ");
  return (q * k.transpose()) / std::sqrt(static_cast<Scalar>(scale_dim));
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
Matrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& e) {
  using Scalar = typename Derived::Scalar;
  if (e.hasNaN()) throw std::invalid_argument("softmax_rows: NaN input");
  Matrix<Scalar> a(e.rows(), e.cols());
  for (Index i = 0; i < e.rows(); ++i) {
    const Scalar m = e.row(i).maxCoeff();
    a.row(i) = (e.row(i).array() - m).exp().matrix();
    a.row(i) /= a.row(i).sum();
  }
  return a;
}

/// Multi-head self-attention with a fused qkv projection and an optional
/// relative position term.
template <typename Scalar>
struct AttentionLayer {
  Index d_model = 0;
  Index d_z = 0;
  Index heads = 1;
  Index length = 0;
  ad::Tensor<Scalar> w_qkv;  // d_model x 3 d_z, column blocks [Q | K | V]
  ad::Tensor<Scalar> w_out;  // d_z x d_model
  ad::Tensor<Scalar> b_out;  // 1 x d_model
  RelativeKind relative = RelativeKind::None;
  std::optional<RelativeBias<Scalar>> erpe;
  std::optional<ShawBias<Scalar>> shaw;
  std::optional<VectorBias<Scalar>> vec;
  // Mix the eRPE bias into the head's slice of the raw input instead of the
  // value projection (requires d_model == d_z).
  bool erpe_on_inputs = false;

  Index head_dim() const { return d_z / heads; }
  auto w_q() const { return w_qkv.value().middleCols(0, d_z); }
  auto w_k() const { return w_qkv.value().middleCols(d_z, d_z); }
  auto w_v() const { return w_qkv.value().middleCols(2 * d_z, d_z); }
};

struct AttentionOptions {
  RelativeKind relative = RelativeKind::None;
  Index shaw_clip = -1;  // negative: L - 1 (no clipping)
  bool shaw_values = false;
  bool erpe_on_inputs = false;
};

/// Uniform(+-1/sqrt(fan_in)) projections, zero output bias, relative term
/// initialised per its encoding.
template <typename Scalar>
AttentionLayer<Scalar> make_attention_layer(Index d_model, Index d_z, Index heads, Index length,
                                            const AttentionOptions& opts, std::mt19937_64& rng) {
  if (heads < 1 || d_z % heads != 0)
    throw std::invalid_argument("attention: d_z=" + std::to_string(d_z) + " not divisible by heads=" +
                                std::to_string(heads));
  if (opts.erpe_on_inputs && d_model != d_z)
    throw std::invalid_argument("attention: mixing eRPE into raw inputs needs d_model == d_z");
  auto uniform = [&rng](Index r, Index c, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<Scalar> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
    return m;
  };
  AttentionLayer<Scalar> layer;
  layer.d_model = d_model;
  layer.d_z = d_z;
  layer.heads = heads;
  layer.length = length;
  layer.w_qkv = ad::Tensor<Scalar>::parameter(uniform(d_model, 3 * d_z, 1.0 / std::sqrt(double(d_model))));
  layer.w_out = ad::Tensor<Scalar>::parameter(uniform(d_z, d_model, 1.0 / std::sqrt(double(d_z))));
  layer.b_out = ad::Tensor<Scalar>::parameter(Matrix<Scalar>::Zero(1, d_model));
  layer.relative = opts.relative;
  layer.erpe_on_inputs = opts.erpe_on_inputs;
  switch (opts.relative) {
    case RelativeKind::None: break;
    case RelativeKind::ERPE: layer.erpe = erpe_cache_indices(erpe_new<Scalar>(length, heads, rng())); break;
    case RelativeKind::Shaw: {
      const Index clip = opts.shaw_clip < 0 ? length - 1 : opts.shaw_clip;
      layer.shaw = shaw_new<Scalar>(clip, d_z, opts.shaw_values, rng());
      break;
    }
    case RelativeKind::Vector: layer.vec = vector_new<Scalar>(length, d_z, rng()); break;
  }
  return layer;
}

template <typename Scalar>
std::vector<std::pair<std::string, ad::Tensor<Scalar>>> named_parameters(const AttentionLayer<Scalar>& layer) {
  std::vector<std::pair<std::string, ad::Tensor<Scalar>>> out{
      {"w_qkv", layer.w_qkv}, {"w_out", layer.w_out}, {"b_out", layer.b_out}};
  if (layer.erpe)
    for (Index h = 0; h < layer.erpe->heads; ++h)
      out.emplace_back("erpe.head" + std::to_string(h), layer.erpe->weights[static_cast<std::size_t>(h)]);
  if (layer.shaw) {
    out.emplace_back("shaw.keys", layer.shaw->keys_table);
    if (layer.shaw->values_table.defined()) out.emplace_back("shaw.values", layer.shaw->values_table);
  }
  if (layer.vec) out.emplace_back("vector.embeddings", layer.vec->embeddings);
  return out;
}

namespace detail {

template <typename Scalar>
void check_layer_input(const AttentionLayer<Scalar>& layer, Index rows, Index cols) {
  if (cols != layer.d_model)
    throw std::invalid_argument("attention: input has " + std::to_string(cols) + " features, layer expects " +
                                std::to_string(layer.d_model));
  if (layer.relative != RelativeKind::None && rows != layer.length)
    throw std::invalid_argument("attention: input length " + std::to_string(rows) +
                                " does not match relative encoding length " + std::to_string(layer.length));
}

}  // namespace detail

/// Single-sample forward pass (L x d_model -> L x d_model) without recording
/// a graph. Dispatches on the layer's relative encoding.
template <typename Scalar, typename Derived>
Matrix<Scalar> attend(const Eigen::MatrixBase<Derived>& x, const AttentionLayer<Scalar>& layer) {
  detail::check_layer_input(layer, x.rows(), x.cols());
  const Index L = x.rows();
  const Index dh = layer.head_dim();
  const Matrix<Scalar> qkv = x * layer.w_qkv.value();
  Matrix<Scalar> z(L, layer.d_z);
  for (Index h = 0; h < layer.heads; ++h) {
    auto q = qkv.middleCols(h * dh, dh);
    auto k = qkv.middleCols(layer.d_z + h * dh, dh);
    auto v = qkv.middleCols(2 * layer.d_z + h * dh, dh);
    Matrix<Scalar> e;
    if (layer.relative == RelativeKind::Shaw) {
      e = shaw_attention_scores(q, k, layer.shaw->keys_table.value().middleCols(h * dh, dh), layer.shaw->clip,
                                layer.d_z);
    } else {
      e = scaled_dot_scores(q, k, layer.d_z);
      if (layer.relative == RelativeKind::Vector) {
        const Matrix<Scalar> qp = q * layer.vec->embeddings.value().middleCols(h * dh, dh).transpose();
        e += vector_skew(qp) / std::sqrt(static_cast<Scalar>(layer.d_z));
      }
    }
    const Matrix<Scalar> a = softmax_rows(e);
    if (layer.relative == RelativeKind::Shaw && layer.shaw->values_table.defined()) {
      z.middleCols(h * dh, dh) =
          shaw_values_mix(a, v, layer.shaw->values_table.value().middleCols(h * dh, dh), layer.shaw->clip);
    } else {
      z.middleCols(h * dh, dh).noalias() = a * v;
    }
    if (layer.relative == RelativeKind::ERPE) {
      const Matrix<Scalar> bias = erpe_materialize(*layer.erpe, h);
      if (layer.erpe_on_inputs)
        z.middleCols(h * dh, dh).noalias() += bias * x.middleCols(h * dh, dh);
      else
        z.middleCols(h * dh, dh).noalias() += bias * v;
    }
  }
  Matrix<Scalar> out = z * layer.w_out.value();
  out.rowwise() += layer.b_out.value().row(0);
  return out;
}

/// Post-softmax scalar relative bias: out_i = sum_j (A_ij + w_{i-j}) v_j per head.
template <typename Scalar, typename Derived>
Matrix<Scalar> attend_erpe(const Eigen::MatrixBase<Derived>& x, const AttentionLayer<Scalar>& layer) {
  if (layer.relative != RelativeKind::ERPE || !layer.erpe) throw std::invalid_argument("attend_erpe: layer has no eRPE bias");
  if (layer.erpe->heads != layer.heads) throw std::invalid_argument("attend_erpe: bias head count mismatch");
  return attend(x, layer);
}

template <typename Scalar, typename Derived>
Matrix<Scalar> attend_shaw(const Eigen::MatrixBase<Derived>& x, const AttentionLayer<Scalar>& layer) {
  if (layer.relative != RelativeKind::Shaw || !layer.shaw) throw std::invalid_argument("attend_shaw: layer has no Shaw tables");
  return attend(x, layer);
}

template <typename Scalar, typename Derived>
Matrix<Scalar> attend_vector(const Eigen::MatrixBase<Derived>& x, const AttentionLayer<Scalar>& layer) {
  if (layer.relative != RelativeKind::Vector || !layer.vec)
    throw std::invalid_argument("attend_vector: layer has no Vector embeddings");
  return attend(x, layer);
}

/// Differentiable forward over a stack of samples: x is (batch * L) x d_model.
template <typename Scalar>
ad::Tensor<Scalar> attention_forward(const AttentionLayer<Scalar>& layer, const ad::Tensor<Scalar>& x, Index length) {
  if (length < 1 || x.rows() % length != 0) throw std::invalid_argument("attention_forward: bad series length");
  detail::check_layer_input(layer, length, x.cols());
  const Index batch = x.rows() / length;
  const Index dh = layer.head_dim();
  const Scalar inv_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(layer.d_z));

  const auto qkv = ad::matmul(x, layer.w_qkv);
  std::vector<ad::Tensor<Scalar>> rel_bias;
  std::vector<ad::Tensor<Scalar>> key_rel, value_rel, vec_rel;
  IndexMap shaw_idx, vec_idx;
  for (Index h = 0; h < layer.heads; ++h) {
    if (layer.relative == RelativeKind::ERPE) rel_bias.push_back(erpe_bias_tensor(*layer.erpe, h));
    if (layer.relative == RelativeKind::Shaw) {
      key_rel.push_back(ad::transpose(ad::slice(layer.shaw->keys_table, 0, layer.shaw->keys_table.rows(), h * dh, dh)));
      if (layer.shaw->values_table.defined())
        value_rel.push_back(ad::slice(layer.shaw->values_table, 0, layer.shaw->values_table.rows(), h * dh, dh));
    }
    if (layer.relative == RelativeKind::Vector)
      vec_rel.push_back(ad::transpose(ad::slice(layer.vec->embeddings, 0, length, h * dh, dh)));
  }
  if (layer.relative == RelativeKind::Shaw) shaw_idx = shaw_index_map(length, layer.shaw->clip);
  if (layer.relative == RelativeKind::Vector) vec_idx = vector_index_map(length);

  std::vector<ad::Tensor<Scalar>> rows;
  rows.reserve(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    std::vector<ad::Tensor<Scalar>> head_out;
    head_out.reserve(static_cast<std::size_t>(layer.heads));
    for (Index h = 0; h < layer.heads; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      auto q = ad::slice(qkv, b * length, length, h * dh, dh);
      auto k = ad::slice(qkv, b * length, length, layer.d_z + h * dh, dh);
      auto v = ad::slice(qkv, b * length, length, 2 * layer.d_z + h * dh, dh);
      auto e = ad::matmul(q, ad::transpose(k));
      if (layer.relative == RelativeKind::Shaw)
        e = ad::add(e, ad::gather_rowwise(ad::matmul(q, key_rel[hs]), shaw_idx));
      if (layer.relative == RelativeKind::Vector)
        e = ad::add(e, ad::gather_rowwise(ad::matmul(q, vec_rel[hs]), vec_idx));
      auto a = ad::softmax_rows(ad::scale(e, inv_scale));
      auto z = ad::matmul(a, v);
      if (layer.relative == RelativeKind::Shaw && !value_rel.empty())
        z = ad::add(z, ad::matmul(ad::scatter_rowwise(a, shaw_idx, 2 * layer.shaw->clip + 1), value_rel[hs]));
      if (layer.relative == RelativeKind::ERPE) {
        auto mixed = layer.erpe_on_inputs ? ad::slice(x, b * length, length, h * dh, dh) : v;
        z = ad::add(z, ad::matmul(rel_bias[hs], mixed));
      }
      head_out.push_back(std::move(z));
    }
    rows.push_back(ad::concat_cols(head_out));
  }
  auto z = batch == 1 ? rows.front() : ad::concat_rows(rows);
  return ad::add_row(ad::matmul(z, layer.w_out), layer.b_out);
}

}  // namespace convtran
