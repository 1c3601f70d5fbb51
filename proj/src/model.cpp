#include "convtran/model.hpp"

#include <cmath>
#include <stdexcept>

namespace convtran {

std::string_view to_string(AbsoluteEncoding e) {
  switch (e) {
    case AbsoluteEncoding::None: return "none";
    case AbsoluteEncoding::VanillaAPE: return "vanilla";
    case AbsoluteEncoding::Learned: return "learned";
    case AbsoluteEncoding::TAPE: return "tape";
  }
  return "unknown";
}

std::string_view to_string(PoolingMode p) { return p == PoolingMode::GapOnly ? "gap_only" : "max_plus_gap"; }

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::ELU: return "elu";
    case Activation::GELU: return "gelu";
    case Activation::None: return "none";
  }
  return "unknown";
}

AbsoluteEncoding parse_absolute_encoding(std::string_view name) {
  if (name == "none") return AbsoluteEncoding::None;
  if (name == "vanilla") return AbsoluteEncoding::VanillaAPE;
  if (name == "learned") return AbsoluteEncoding::Learned;
  if (name == "tape") return AbsoluteEncoding::TAPE;
  throw std::invalid_argument("unknown absolute encoding '" + std::string(name) + "' (none|vanilla|learned|tape)");
}

PoolingMode parse_pooling_mode(std::string_view name) {
  if (name == "gap_only") return PoolingMode::GapOnly;
  if (name == "max_plus_gap") return PoolingMode::MaxPlusGap;
  throw std::invalid_argument("unknown pooling mode '" + std::string(name) + "' (gap_only|max_plus_gap)");
}

Activation parse_activation(std::string_view name) {
  if (name == "elu") return Activation::ELU;
  if (name == "gelu") return Activation::GELU;
  if (name == "none") return Activation::None;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "' (elu|gelu|none)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (d_x < 1) fail("d_x must be positive");
  if (length < 1) fail("length must be positive");
  if (classes < 2) fail("need at least two classes");
  if (temporal_filters < 1) fail("temporal_filters must be positive");
  if (kernel_len < 1 || kernel_len > length) fail("kernel_len must lie in [1, length]");
  if (d_model < 1 || d_z < 1) fail("d_model and d_z must be positive");
  if (heads < 1 || d_z % heads != 0)
    fail("d_z=" + std::to_string(d_z) + " is not divisible by heads=" + std::to_string(heads));
  if (ffn_ratio < 1) fail("ffn_ratio must be positive");
  if (blocks < 1) fail("need at least one transformer block");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  if ((abs_encoding == AbsoluteEncoding::VanillaAPE || abs_encoding == AbsoluteEncoding::TAPE) && d_model % 2 != 0)
    fail("sinusoidal position encodings need an even d_model");
  if (erpe_on_inputs && d_model != d_z) fail("erpe_on_inputs needs d_model == d_z");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_x", c.d_x},
          {"length", c.length},
          {"classes", c.classes},
          {"temporal_filters", c.temporal_filters},
          {"kernel_len", c.kernel_len},
          {"d_model", c.d_model},
          {"d_z", c.d_z},
          {"heads", c.heads},
          {"ffn_ratio", c.ffn_ratio},
          {"blocks", c.blocks},
          {"abs_encoding", std::string(to_string(c.abs_encoding))},
          {"rel_encoding", std::string(to_string(c.rel_encoding))},
          {"dropout", c.dropout},
          {"pooling", std::string(to_string(c.pooling))},
          {"conv_activation", std::string(to_string(c.conv_activation))},
          {"conv_batch_norm", c.conv_batch_norm},
          {"conv_bias", c.conv_bias},
          {"shaw_clip", c.shaw_clip},
          {"shaw_values", c.shaw_values},
          {"erpe_on_inputs", c.erpe_on_inputs},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_x = j.at("d_x").get<Index>();
  c.length = j.at("length").get<Index>();
  c.classes = j.at("classes").get<Index>();
  c.temporal_filters = j.at("temporal_filters").get<Index>();
  c.kernel_len = j.at("kernel_len").get<Index>();
  c.d_model = j.at("d_model").get<Index>();
  c.d_z = j.at("d_z").get<Index>();
  c.heads = j.at("heads").get<Index>();
  c.ffn_ratio = j.at("ffn_ratio").get<Index>();
  c.blocks = j.at("blocks").get<Index>();
  c.abs_encoding = parse_absolute_encoding(j.at("abs_encoding").get<std::string>());
  c.rel_encoding = parse_relative_kind(j.at("rel_encoding").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  c.pooling = parse_pooling_mode(j.at("pooling").get<std::string>());
  c.conv_activation = parse_activation(j.at("conv_activation").get<std::string>());
  c.conv_batch_norm = j.at("conv_batch_norm").get<bool>();
  c.conv_bias = j.at("conv_bias").get<bool>();
  c.shaw_clip = j.at("shaw_clip").get<Index>();
  c.shaw_values = j.at("shaw_values").get<bool>();
  c.erpe_on_inputs = j.at("erpe_on_inputs").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

namespace {

template <typename Scalar>
ad::Tensor<Scalar> uniform_param(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return ad::Tensor<Scalar>::parameter(std::move(m));
}

template <typename Scalar>
ad::Tensor<Scalar> constant_param(Index rows, Index cols, Scalar value) {
  return ad::Tensor<Scalar>::parameter(Matrix<Scalar>::Constant(rows, cols, value));
}

}  // namespace

template <typename Scalar>
ConvTranNet<Scalar>::ConvTranNet(ModelConfig config)
    : config_(std::move(config)),
      temporal_bn_(config_.temporal_filters),
      spatial_bn_(config_.d_model),
      dropout_rng_(config_.seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  const auto& c = config_;
  std::mt19937_64 rng(c.seed);

  temporal_kernel = uniform_param<Scalar>(c.temporal_filters, c.kernel_len, 1.0 / std::sqrt(double(c.kernel_len)), rng);
  if (c.conv_bias)
    temporal_bias = uniform_param<Scalar>(1, c.temporal_filters, 1.0 / std::sqrt(double(c.kernel_len)), rng);
  const Index spatial_fan_in = c.d_x * c.temporal_filters;
  spatial_weight = uniform_param<Scalar>(spatial_fan_in, c.d_model, 1.0 / std::sqrt(double(spatial_fan_in)), rng);
  if (c.conv_bias) spatial_bias = uniform_param<Scalar>(1, c.d_model, 1.0 / std::sqrt(double(spatial_fan_in)), rng);
  if (c.conv_batch_norm) {
    temporal_gamma = constant_param<Scalar>(1, c.temporal_filters, Scalar(1));
    temporal_beta = constant_param<Scalar>(1, c.temporal_filters, Scalar(0));
    spatial_gamma = constant_param<Scalar>(1, c.d_model, Scalar(1));
    spatial_beta = constant_param<Scalar>(1, c.d_model, Scalar(0));
  }

  switch (c.abs_encoding) {
    case AbsoluteEncoding::None: break;
    case AbsoluteEncoding::VanillaAPE: position_ = build_vanilla_ape(c.length, c.d_model); break;
    case AbsoluteEncoding::TAPE: position_ = build_tape(c.length, c.d_model); break;
    case AbsoluteEncoding::Learned: position_ = build_learned_ape(c.length, c.d_model, rng()); break;
  }
  if (position_) {
    Matrix<Scalar> values = position_->values.template cast<Scalar>();
    position_tensor_ = ad::Tensor<Scalar>(std::move(values), position_->trainable);
  }

  AttentionOptions attn_opts{c.rel_encoding, c.shaw_clip, c.shaw_values, c.erpe_on_inputs};
  const Index hidden = c.ffn_ratio * c.d_model;
  for (Index b = 0; b < c.blocks; ++b) {
    TransformerBlock<Scalar> block;
    block.attention = make_attention_layer<Scalar>(c.d_model, c.d_z, c.heads, c.length, attn_opts, rng);
    block.norm1_gamma = constant_param<Scalar>(1, c.d_model, Scalar(1));
    block.norm1_beta = constant_param<Scalar>(1, c.d_model, Scalar(0));
    block.ffn_w1 = uniform_param<Scalar>(c.d_model, hidden, 1.0 / std::sqrt(double(c.d_model)), rng);
    block.ffn_b1 = uniform_param<Scalar>(1, hidden, 1.0 / std::sqrt(double(c.d_model)), rng);
    block.ffn_w2 = uniform_param<Scalar>(hidden, c.d_model, 1.0 / std::sqrt(double(hidden)), rng);
    block.ffn_b2 = uniform_param<Scalar>(1, c.d_model, 1.0 / std::sqrt(double(hidden)), rng);
    block.norm2_gamma = constant_param<Scalar>(1, c.d_model, Scalar(1));
    block.norm2_beta = constant_param<Scalar>(1, c.d_model, Scalar(0));
    blocks_.push_back(std::move(block));
  }
  head_weight = uniform_param<Scalar>(c.d_model, c.classes, 1.0 / std::sqrt(double(c.d_model)), rng);
  head_bias = uniform_param<Scalar>(1, c.classes, 1.0 / std::sqrt(double(c.d_model)), rng);
}

template <typename Scalar>
ad::Tensor<Scalar> ConvTranNet<Scalar>::activate(const ad::Tensor<Scalar>& t) const {
  switch (config_.conv_activation) {
    case Activation::ELU: return ad::elu(t);
    case Activation::GELU: return ad::gelu(t);
    case Activation::None: return t;
  }
  return t;
}

template <typename Scalar>
ad::Tensor<Scalar> ConvTranNet<Scalar>::embed(const ad::Tensor<Scalar>& x, bool training) {
  const auto& c = config_;
  if (x.cols() != c.d_x || x.rows() % c.length != 0 || x.rows() == 0)
    throw std::invalid_argument("embed: expected (batch*" + std::to_string(c.length) + ") x " +
                                std::to_string(c.d_x) + " input, got " + std::to_string(x.rows()) + "x" +
                                std::to_string(x.cols()));
  auto h = ad::temporal_conv(x, temporal_kernel, temporal_bias, c.length);
  if (c.conv_batch_norm) h = ad::batch_norm(h, temporal_gamma, temporal_beta, temporal_bn_, training);
  h = activate(h);
  h = ad::matmul(h, spatial_weight);
  if (c.conv_bias) h = ad::add_row(h, spatial_bias);
  if (c.conv_batch_norm) h = ad::batch_norm(h, spatial_gamma, spatial_beta, spatial_bn_, training);
  return activate(h);
}

template <typename Scalar>
ad::Tensor<Scalar> ConvTranNet<Scalar>::forward(const ad::Tensor<Scalar>& x, bool training) {
  const auto& c = config_;
  const Scalar rate = training ? static_cast<Scalar>(c.dropout) : Scalar(0);
  auto check = [](const char* stage, const ad::Tensor<Scalar>& t) {
    if (t.value().hasNaN()) throw std::runtime_error(std::string("forward: NaN produced by the ") + stage + " stage");
  };

  auto h = embed(x, training);
  check("embedding", h);
  if (position_) h = ad::add_tiled(h, position_tensor_);
  check("position encoding", h);
  for (auto& block : blocks_) {
    auto attn = ad::dropout(attention_forward(block.attention, h, c.length), rate, dropout_rng_);
    check("attention", attn);
    h = ad::layer_norm(ad::add(h, attn), block.norm1_gamma, block.norm1_beta);
    auto ffn = ad::add_row(ad::matmul(h, block.ffn_w1), block.ffn_b1);
    ffn = ad::add_row(ad::matmul(ad::gelu(ffn), block.ffn_w2), block.ffn_b2);
    ffn = ad::dropout(ffn, rate, dropout_rng_);
    check("feed-forward", ffn);
    h = ad::layer_norm(ad::add(h, ffn), block.norm2_gamma, block.norm2_beta);
    check("normalization", h);
  }
  h = ad::elu(h);
  auto pooled = ad::pool_rows(h, c.length, ad::PoolMode::Mean);
  if (c.pooling == PoolingMode::MaxPlusGap) pooled = ad::add(pooled, ad::pool_rows(h, c.length, ad::PoolMode::Max));
  auto logits = ad::add_row(ad::matmul(pooled, head_weight), head_bias);
  check("classifier head", logits);
  return logits;
}

template <typename Scalar>
Matrix<Scalar> stack_samples(const std::vector<const MatrixXd*>& samples) {
  if (samples.empty()) throw std::invalid_argument("stack_samples: no samples");
  const Index d_x = samples.front()->rows();
  const Index L = samples.front()->cols();
  Matrix<Scalar> out(static_cast<Index>(samples.size()) * L, d_x);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    if (samples[b]->rows() != d_x || samples[b]->cols() != L)
      throw std::invalid_argument("stack_samples: samples differ in shape");
    out.middleRows(static_cast<Index>(b) * L, L) = samples[b]->transpose().template cast<Scalar>();
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> ConvTranNet<Scalar>::embed(const MatrixType& sample) {
  if (sample.rows() != config_.d_x || sample.cols() != config_.length)
    throw std::invalid_argument("embed: sample must be " + std::to_string(config_.d_x) + " x " +
                                std::to_string(config_.length));
  auto x = ad::Tensor<Scalar>::constant(sample.transpose());
  return embed(x, false).value();
}

template <typename Scalar>
RowVector<Scalar> ConvTranNet<Scalar>::logits(const MatrixType& sample) {
  if (sample.rows() != config_.d_x || sample.cols() != config_.length)
    throw std::invalid_argument("forward: sample must be " + std::to_string(config_.d_x) + " x " +
                                std::to_string(config_.length));
  auto x = ad::Tensor<Scalar>::constant(sample.transpose());
  return forward(x, false).value().row(0);
}

template <typename Scalar>
std::vector<std::pair<std::string, ad::Tensor<Scalar>>> ConvTranNet<Scalar>::named_parameters() const {
  std::vector<std::pair<std::string, ad::Tensor<Scalar>>> out;
  out.emplace_back("conv.temporal.kernel", temporal_kernel);
  if (temporal_bias.defined()) out.emplace_back("conv.temporal.bias", temporal_bias);
  if (temporal_gamma.defined()) {
    out.emplace_back("conv.temporal.bn.gamma", temporal_gamma);
    out.emplace_back("conv.temporal.bn.beta", temporal_beta);
  }
  out.emplace_back("conv.spatial.weight", spatial_weight);
  if (spatial_bias.defined()) out.emplace_back("conv.spatial.bias", spatial_bias);
  if (spatial_gamma.defined()) {
    out.emplace_back("conv.spatial.bn.gamma", spatial_gamma);
    out.emplace_back("conv.spatial.bn.beta", spatial_beta);
  }
  if (position_tensor_.requires_grad()) out.emplace_back("position.table", position_tensor_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    const auto& blk = blocks_[b];
    for (auto& [name, t] : convtran::named_parameters(blk.attention)) out.emplace_back(p + "attn." + name, t);
    out.emplace_back(p + "norm1.gamma", blk.norm1_gamma);
    out.emplace_back(p + "norm1.beta", blk.norm1_beta);
    out.emplace_back(p + "ffn.w1", blk.ffn_w1);
    out.emplace_back(p + "ffn.b1", blk.ffn_b1);
    out.emplace_back(p + "ffn.w2", blk.ffn_w2);
    out.emplace_back(p + "ffn.b2", blk.ffn_b2);
    out.emplace_back(p + "norm2.gamma", blk.norm2_gamma);
    out.emplace_back(p + "norm2.beta", blk.norm2_beta);
  }
  out.emplace_back("head.weight", head_weight);
  out.emplace_back("head.bias", head_bias);
  return out;
}

template <typename Scalar>
std::vector<ad::Tensor<Scalar>> ConvTranNet<Scalar>::parameters() const {
  std::vector<ad::Tensor<Scalar>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <typename Scalar>
Index ConvTranNet<Scalar>::count_parameters() const {
  Index n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

template <typename Scalar>
std::vector<std::pair<std::string, RowVector<Scalar>*>> ConvTranNet<Scalar>::named_buffers() {
  if (!config_.conv_batch_norm) return {};
  return {{"conv.temporal.bn.running_mean", &temporal_bn_.running_mean},
          {"conv.temporal.bn.running_var", &temporal_bn_.running_var},
          {"conv.spatial.bn.running_mean", &spatial_bn_.running_mean},
          {"conv.spatial.bn.running_var", &spatial_bn_.running_var}};
}

template <typename Scalar>
typename ConvTranNet<Scalar>::Snapshot ConvTranNet<Scalar>::snapshot() {
  Snapshot snap;
  for (const auto& [name, t] : named_parameters()) snap.emplace(name, t.value());
  for (const auto& [name, buf] : named_buffers()) snap.emplace(name, *buf);
  return snap;
}

template <typename Scalar>
void ConvTranNet<Scalar>::restore(const Snapshot& snap) {
  auto fetch = [&snap](const std::string& name, Index rows, Index cols) -> const MatrixType& {
    auto it = snap.find(name);
    if (it == snap.end()) throw std::invalid_argument("restore: missing tensor '" + name + "'");
    if (it->second.rows() != rows || it->second.cols() != cols)
      throw std::invalid_argument("restore: tensor '" + name + "' has the wrong shape");
    return it->second;
  };
  for (auto& [name, t] : named_parameters()) {
    auto handle = t;
    handle.value() = fetch(name, t.rows(), t.cols());
  }
  for (auto& [name, buf] : named_buffers()) *buf = fetch(name, 1, buf->size());
}

template class ConvTranNet<double>;
template class ConvTranNet<float>;
template Matrix<double> stack_samples<double>(const std::vector<const MatrixXd*>&);
template Matrix<float> stack_samples<float>(const std::vector<const MatrixXd*>&);

}  // namespace convtran
