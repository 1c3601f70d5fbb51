#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "convtran/attention.hpp"
#include "convtran/autodiff.hpp"
#include "convtran/encodings_absolute.hpp"
#include "convtran/types.hpp"

namespace convtran {

enum class AbsoluteEncoding { None, VanillaAPE, Learned, TAPE };
enum class PoolingMode { GapOnly, MaxPlusGap };
enum class Activation { ELU, GELU, None };

std::string_view to_string(AbsoluteEncoding e);
std::string_view to_string(PoolingMode p);
std::string_view to_string(Activation a);
AbsoluteEncoding parse_absolute_encoding(std::string_view name);
PoolingMode parse_pooling_mode(std::string_view name);
Activation parse_activation(std::string_view name);

struct ModelConfig {
  Index d_x = 1;
  Index length = 1;
  Index classes = 2;
  Index temporal_filters = 64;
  Index kernel_len = 8;
  Index d_model = 64;
  Index d_z = 64;
  Index heads = 8;
  Index ffn_ratio = 4;
  Index blocks = 1;
  AbsoluteEncoding abs_encoding = AbsoluteEncoding::TAPE;
  RelativeKind rel_encoding = RelativeKind::ERPE;
  double dropout = 0.1;
  PoolingMode pooling = PoolingMode::GapOnly;
  Activation conv_activation = Activation::ELU;
  bool conv_batch_norm = true;
  bool conv_bias = true;
  Index shaw_clip = -1;  // negative: L - 1
  bool shaw_values = false;
  bool erpe_on_inputs = false;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Parameters of one post-norm transformer block.
template <typename Scalar>
struct TransformerBlock {
  AttentionLayer<Scalar> attention;
  ad::Tensor<Scalar> norm1_gamma, norm1_beta;
  ad::Tensor<Scalar> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  ad::Tensor<Scalar> norm2_gamma, norm2_beta;
};

/// Disjoint temporal/spatial convolution embedding, absolute position
/// injection, transformer block(s) with an optional relative bias, and an
/// ELU -> pooling -> linear classification head.
template <typename Scalar>
class ConvTranNet {
 public:
  using MatrixType = Matrix<Scalar>;
  using Snapshot = std::map<std::string, MatrixType>;

  explicit ConvTranNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// x stacks samples as (batch * L) x d_x; returns (batch * L) x d_model.
  ad::Tensor<Scalar> embed(const ad::Tensor<Scalar>& x, bool training);
  /// x stacks samples as (batch * L) x d_x; returns batch x classes logits.
  ad::Tensor<Scalar> forward(const ad::Tensor<Scalar>& x, bool training);

  /// Single sample d_x x L -> L x d_model, eval mode.
  MatrixType embed(const MatrixType& sample);
  /// Single sample d_x x L -> 1 x classes logits, eval mode.
  RowVector<Scalar> logits(const MatrixType& sample);

  std::vector<std::pair<std::string, ad::Tensor<Scalar>>> named_parameters() const;
  std::vector<ad::Tensor<Scalar>> parameters() const;
  Index count_parameters() const;

  /// Non-trainable state (batch-norm running statistics), by name.
  std::vector<std::pair<std::string, RowVector<Scalar>*>> named_buffers();

  Snapshot snapshot();
  void restore(const Snapshot& snap);

  const std::optional<PositionTable>& position_table() const { return position_; }
  std::vector<TransformerBlock<Scalar>>& blocks() { return blocks_; }
  const std::vector<TransformerBlock<Scalar>>& blocks() const { return blocks_; }

  ad::Tensor<Scalar> temporal_kernel, temporal_bias, temporal_gamma, temporal_beta;
  ad::Tensor<Scalar> spatial_weight, spatial_bias, spatial_gamma, spatial_beta;
  ad::Tensor<Scalar> head_weight, head_bias;

 private:
  ad::Tensor<Scalar> activate(const ad::Tensor<Scalar>& t) const;

  ModelConfig config_;
  std::optional<PositionTable> position_;
  ad::Tensor<Scalar> position_tensor_;
  ad::BatchNormState<Scalar> temporal_bn_, spatial_bn_;
  std::vector<TransformerBlock<Scalar>> blocks_;
  std::mt19937_64 dropout_rng_;
};

/// Stacks d_x x L samples into (batch * L) x d_x rows.
template <typename Scalar>
Matrix<Scalar> stack_samples(const std::vector<const MatrixXd*>& samples);

extern template class ConvTranNet<double>;
extern template class ConvTranNet<float>;

}  // namespace convtran
