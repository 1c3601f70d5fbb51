#pragma once

// Relative position biases: the per-head scalar bias with 2L-1 weights
// gathered into an L x L matrix, plus the key/value-table (Shaw) and
// skewed-embedding (Vector) baselines.

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "convtran/autodiff.hpp"
#include "convtran/types.hpp"

namespace convtran {

/// idx(i, j) = i - j + L - 1: the zero-based form of reading weight
/// number i - j + L (one-based) for the pair (i, j).
IndexMap erpe_index_map(Index length);

/// idx(i, j) = clip(i - j, k) + k with clip(x, k) = max(-k, min(k, x)).
IndexMap shaw_index_map(Index length, Index clip);

/// idx(i, j) = (L - 1) - (i - j) for j <= i and -1 above the diagonal:
/// row r of the embedding table carries relative distance (L - 1) - r.
IndexMap vector_index_map(Index length);

inline Index clip_distance(Index distance, Index k) { return std::max(-k, std::min(k, distance)); }

// ---------------------------------------------------------------------------
// eRPE

template <typename Scalar>
struct RelativeBias {
  Index length = 0;
  Index heads = 0;
  std::vector<ad::Tensor<Scalar>> weights;  // per head, 1 x (2L - 1)
  std::shared_ptr<const IndexMap> index_cache;
};

/// Zero-initialised per-head bias; deterministic for any seed.
template <typename Scalar>
RelativeBias<Scalar> erpe_new(Index length, Index heads, std::uint64_t /*seed*/ = 0) {
  if (length < 1) throw std::invalid_argument("erpe_new: length must be at least 1");
  if (heads < 1) throw std::invalid_argument("erpe_new: heads must be at least 1");
  RelativeBias<Scalar> bias;
  bias.length = length;
  bias.heads = heads;
  for (Index h = 0; h < heads; ++h)
    bias.weights.push_back(ad::Tensor<Scalar>::parameter(Matrix<Scalar>::Zero(1, 2 * length - 1)));
  return bias;
}

template <typename Scalar>
RelativeBias<Scalar> erpe_cache_indices(RelativeBias<Scalar> bias) {
  if (!bias.index_cache) bias.index_cache = std::make_shared<const IndexMap>(erpe_index_map(bias.length));
  return bias;
}

template <typename Scalar>
const IndexMap& erpe_indices(const RelativeBias<Scalar>& bias, IndexMap& scratch) {
  if (bias.index_cache) return *bias.index_cache;
  scratch = erpe_index_map(bias.length);
  return scratch;
}

/// B(i, j) = w[i - j + L - 1] for the given head, via the gather index path.
template <typename Scalar>
Matrix<Scalar> erpe_materialize(const RelativeBias<Scalar>& bias, Index head) {
  if (head < 0 || head >= bias.heads)
    throw std::out_of_range("erpe_materialize: head " + std::to_string(head) + " out of range");
  IndexMap scratch;
  const IndexMap& idx = erpe_indices(bias, scratch);
  const auto& w = bias.weights[static_cast<std::size_t>(head)].value();
  Matrix<Scalar> out(idx.rows(), idx.cols());
  for (Index i = 0; i < idx.size(); ++i) out.data()[i] = w(0, idx.data()[i]);
  return out;
}

/// Differentiable L x L bias for one head.
template <typename Scalar>
ad::Tensor<Scalar> erpe_bias_tensor(const RelativeBias<Scalar>& bias, Index head) {
  if (head < 0 || head >= bias.heads) throw std::out_of_range("erpe_bias_tensor: head out of range");
  IndexMap scratch;
  return ad::gather(bias.weights[static_cast<std::size_t>(head)], erpe_indices(bias, scratch));
}

template <typename Scalar>
Index parameter_count(const RelativeBias<Scalar>& bias) {
  Index n = 0;
  for (const auto& w : bias.weights) n += w.size();
  return n;
}

// ---------------------------------------------------------------------------
// Shaw: key (and optionally value) embeddings indexed by clipped distance

template <typename Scalar>
struct ShawBias {
  Index clip = 0;
  ad::Tensor<Scalar> keys_table;    // (2 clip + 1) x d_z
  ad::Tensor<Scalar> values_table;  // (2 clip + 1) x d_z, undefined when the value term is off
};

template <typename Scalar>
ShawBias<Scalar> shaw_new(Index clip, Index d_z, bool with_values, std::uint64_t seed, double init_scale = 0.02) {
  if (clip < 0) throw std::invalid_argument("shaw_new: clip distance must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-init_scale, init_scale);
  auto table = [&] {
    Matrix<Scalar> m(2 * clip + 1, d_z);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
    return ad::Tensor<Scalar>::parameter(std::move(m));
  };
  ShawBias<Scalar> bias;
  bias.clip = clip;
  bias.keys_table = table();
  if (with_values) bias.values_table = table();
  return bias;
}

template <typename Scalar>
Index parameter_count(const ShawBias<Scalar>& bias) {
  return bias.keys_table.size() + (bias.values_table.defined() ? bias.values_table.size() : 0);
}

/// e(i, j) = q_i . (k_j + P^K[clip(i - j)]) / sqrt(scale_dim). The relative
/// term is computed as q P^K^T (L x (2k+1)) and gathered, never as an
/// L x L x d tensor.
template <typename DQ, typename DK, typename DT>
Matrix<typename DQ::Scalar> shaw_attention_scores(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DK>& k,
                                                  const Eigen::MatrixBase<DT>& keys_table, Index clip,
                                                  Index scale_dim) {
  using Scalar = typename DQ::Scalar;
  if (q.cols() != k.cols() || q.rows() != k.rows() || keys_table.cols() != q.cols() ||
      keys_table.rows() != 2 * clip + 1)
    throw std::invalid_argument("shaw_attention_scores: shape mismatch");
  const Index L = q.rows();
  const IndexMap idx = shaw_index_map(L, clip);
  const Matrix<Scalar> qp = q * keys_table.transpose();
  Matrix<Scalar> e = q * k.transpose();
  for (Index i = 0; i < L; ++i)
    for (Index j = 0; j < L; ++j) e(i, j) += qp(i, idx(i, j));
  return e / std::sqrt(static_cast<Scalar>(scale_dim));
}

/// z_i = sum_j alpha(i, j) (v_j + P^V[clip(i - j)]).
template <typename DA, typename DV, typename DT>
Matrix<typename DA::Scalar> shaw_values_mix(const Eigen::MatrixBase<DA>& alpha, const Eigen::MatrixBase<DV>& v,
                                            const Eigen::MatrixBase<DT>& values_table, Index clip) {
  using Scalar = typename DA::Scalar;
  const Index L = alpha.rows();
  if (alpha.cols() != L || v.rows() != L || values_table.cols() != v.cols() ||
      values_table.rows() != 2 * clip + 1)
    throw std::invalid_argument("shaw_values_mix: shape mismatch");
  const IndexMap idx = shaw_index_map(L, clip);
  Matrix<Scalar> weight = Matrix<Scalar>::Zero(L, 2 * clip + 1);
  for (Index i = 0; i < L; ++i)
    for (Index j = 0; j < L; ++j) weight(i, idx(i, j)) += alpha(i, j);
  return alpha * v + weight * values_table;
}

// ---------------------------------------------------------------------------
// Vector: one embedding per relative distance, aligned by skewing

template <typename Scalar>
struct VectorBias {
  ad::Tensor<Scalar> embeddings;  // L x d_z
};

template <typename Scalar>
VectorBias<Scalar> vector_new(Index length, Index d_z, std::uint64_t seed, double init_scale = 0.02) {
  if (length < 1) throw std::invalid_argument("vector_new: length must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-init_scale, init_scale);
  Matrix<Scalar> m(length, d_z);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return {ad::Tensor<Scalar>::parameter(std::move(m))};
}

template <typename Scalar>
Index parameter_count(const VectorBias<Scalar>& bias) {
  return bias.embeddings.size();
}

/// Skews QP = q P^T (L x L, column r = distance (L - 1) - r) so that entry
/// (i, j) holds the term for distance i - j: left-pad one zero column, read
/// the L x (L + 1) buffer as (L + 1) x L, drop the first row. Entries above
/// the diagonal have no embedding and are zeroed.
template <typename Derived>
Matrix<typename Derived::Scalar> vector_skew(const Eigen::MatrixBase<Derived>& qp) {
  using Scalar = typename Derived::Scalar;
  const Index L = qp.rows();
  if (qp.cols() != L) throw std::invalid_argument("vector_skew: expected a square L x L input");
  Matrix<Scalar> padded(L, L + 1);
  padded.col(0).setZero();
  padded.rightCols(L) = qp;
  Eigen::Map<const Matrix<Scalar>> reshaped(padded.data(), L + 1, L);
  Matrix<Scalar> out = reshaped.bottomRows(L);
  out.template triangularView<Eigen::StrictlyUpper>().setZero();
  return out;
}

// ---------------------------------------------------------------------------
// Parameter / memory / compute accounting

enum class EncodingMethod { TAPE, VanillaAPE, Learned, Shaw, Vector, ERPE };

EncodingMethod parse_encoding_method(std::string_view name);
std::string_view to_string(EncodingMethod method);

struct ComplexityOptions {
  Index heads = 1;           // eRPE keeps one weight vector per head
  bool shaw_values = false;  // count the Shaw value table as well as the key table
};

struct ComplexityReport {
  EncodingMethod method{};
  Index length = 0;
  Index d_z = 0;
  long long params = 0;
  long long memory_cells = 0;
  long long mult_adds = 0;
  // memory_cells split into the encoding's own storage and the L x L term
  long long encoding_cells = 0;
  long long pairwise_cells = 0;
};

/// For absolute methods d_z is taken as d_model.
ComplexityReport complexity_report(EncodingMethod method, Index length, Index d_z, const ComplexityOptions& opts = {});

nlohmann::json to_json(const ComplexityReport& report);

}  // namespace convtran
