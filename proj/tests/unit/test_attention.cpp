#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <new>
#include <numeric>
#include <random>

#include "convtran/attention.hpp"
#include "support/gradcheck.hpp"

#include <malloc.h>

// Linked with --wrap=malloc/free/realloc so Eigen's heap buffers are counted.
namespace {

std::atomic<bool> g_tracking{false};
std::size_t g_live = 0;
std::size_t g_peak = 0;

void track_alloc(void* p) {
  if (!p || !g_tracking) return;
  g_live += malloc_usable_size(p);
  g_peak = std::max(g_peak, g_live);
}

void track_free(void* p) {
  if (!p || !g_tracking) return;
  g_live -= std::min(g_live, malloc_usable_size(p));
}

}  // namespace

extern "C" {
void* __real_malloc(std::size_t);
void __real_free(void*);
void* __real_realloc(void*, std::size_t);

void* __wrap_malloc(std::size_t n) {
  void* p = __real_malloc(n);
  track_alloc(p);
  return p;
}

void __wrap_free(void* p) {
  track_free(p);
  __real_free(p);
}

void* __wrap_realloc(void* old, std::size_t n) {
  track_free(old);
  void* p = __real_realloc(old, n);
  track_alloc(p);
  return p;
}
}

void* operator new(std::size_t n) {
  if (void* p = std::malloc(n)) return p;
  throw std::bad_alloc();
}

void operator delete(void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }

using namespace convtran;
using convtran::testing::random_matrix;

namespace {

AttentionLayer<double> random_layer(Index d_model, Index d_z, Index heads, Index L, RelativeKind kind,
                                    std::uint64_t seed, bool shaw_values = false, Index clip = -1) {
  std::mt19937_64 rng(seed);
  AttentionOptions o;
  o.relative = kind;
  o.shaw_values = shaw_values;
  o.shaw_clip = clip;
  auto layer = make_attention_layer<double>(d_model, d_z, heads, L, o, rng);
  for (auto& [name, t] : named_parameters(layer)) t.value() = random_matrix(t.rows(), t.cols(), rng, 0.5);
  return layer;
}

MatrixXd naive_softmax(const MatrixXd& e) {
  MatrixXd a(e.rows(), e.cols());
  for (Index i = 0; i < e.rows(); ++i) {
    double m = -1e300;
    for (Index j = 0; j < e.cols(); ++j) m = std::max(m, e(i, j));
    double s = 0;
    for (Index j = 0; j < e.cols(); ++j) s += std::exp(e(i, j) - m);
    for (Index j = 0; j < e.cols(); ++j) a(i, j) = std::exp(e(i, j) - m) / s;
  }
  return a;
}

// Scalar loops over heads, pairs and features; relative terms read straight
// from the parameter tables.
MatrixXd naive_attention(const MatrixXd& x, const AttentionLayer<double>& layer) {
  const Index L = x.rows(), dz = layer.d_z, dh = layer.head_dim();
  const MatrixXd wq = layer.w_q(), wk = layer.w_k(), wv = layer.w_v();
  MatrixXd z(L, dz);
  for (Index h = 0; h < layer.heads; ++h) {
    auto proj = [&](const MatrixXd& w, Index i, Index c) {
      double s = 0;
      for (Index m = 0; m < layer.d_model; ++m) s += x(i, m) * w(m, h * dh + c);
      return s;
    };
    MatrixXd q(L, dh), k(L, dh), v(L, dh);
    for (Index i = 0; i < L; ++i)
      for (Index c = 0; c < dh; ++c) q(i, c) = proj(wq, i, c), k(i, c) = proj(wk, i, c), v(i, c) = proj(wv, i, c);
    MatrixXd e(L, L);
    for (Index i = 0; i < L; ++i)
      for (Index j = 0; j < L; ++j) {
        double s = 0;
        for (Index c = 0; c < dh; ++c) {
          double key = k(j, c);
          if (layer.relative == RelativeKind::Shaw) {
            const Index kc = layer.shaw->clip;
            key += layer.shaw->keys_table.value()(std::max(-kc, std::min(kc, i - j)) + kc, h * dh + c);
          }
          s += q(i, c) * key;
          if (layer.relative == RelativeKind::Vector && j <= i)
            s += q(i, c) * layer.vec->embeddings.value()(L - 1 - (i - j), h * dh + c);
        }
        e(i, j) = s / std::sqrt(double(dz));
      }
    const MatrixXd a = naive_softmax(e);
    for (Index i = 0; i < L; ++i)
      for (Index c = 0; c < dh; ++c) {
        double s = 0;
        for (Index j = 0; j < L; ++j) {
          double w = a(i, j);
          if (layer.relative == RelativeKind::ERPE)
            w += layer.erpe->weights[static_cast<std::size_t>(h)].value()(0, i - j + L - 1);
          double val = v(j, c);
          if (layer.relative == RelativeKind::Shaw && layer.shaw->values_table.defined()) {
            const Index kc = layer.shaw->clip;
            s += a(i, j) * layer.shaw->values_table.value()(std::max(-kc, std::min(kc, i - j)) + kc, h * dh + c);
          }
          s += w * val;
        }
        z(i, h * dh + c) = s;
      }
  }
  MatrixXd out = z * layer.w_out.value();
  out.rowwise() += layer.b_out.value().row(0);
  return out;
}

}  // namespace

TEST(ScaledDotScores, TripleLoopOracle) {
  std::mt19937_64 rng(1);
  const MatrixXd q = random_matrix(3, 4, rng), k = random_matrix(3, 4, rng);
  const MatrixXd e = scaled_dot_scores(q, k, 4);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j) {
      double s = 0;
      for (Index c = 0; c < 4; ++c) s += q(i, c) * k(j, c);
      EXPECT_NEAR(e(i, j), s / 2.0, 1e-12);
    }
  EXPECT_TRUE(scaled_dot_scores(MatrixXd::Zero(3, 4), k, 4).isZero());
  MatrixXd one(1, 4);
  one << 1, 2, 0, 0;
  EXPECT_DOUBLE_EQ(scaled_dot_scores(one, one, 16)(0, 0), 5.0 / 4.0);
  EXPECT_THROW(scaled_dot_scores(q, MatrixXd::Zero(3, 5), 4), std::invalid_argument);
}

TEST(SoftmaxRows, UniformStableAndNormalized) {
  const MatrixXd u = softmax_rows(MatrixXd::Constant(2, 5, 3.3));
  EXPECT_TRUE(u.isApprox(MatrixXd::Constant(2, 5, 0.2), 1e-15));
  MatrixXd big(1, 2);
  big << 7.0, 1007.0;
  const MatrixXd s = softmax_rows(big);
  EXPECT_TRUE(s.allFinite());
  EXPECT_NEAR(s(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(s(0, 0), std::exp(-1000.0), 1e-300);
  std::mt19937_64 rng(2);
  const MatrixXd r = softmax_rows(random_matrix(6, 9, rng, 5.0));
  for (Index i = 0; i < 6; ++i) EXPECT_NEAR(r.row(i).sum(), 1.0, 1e-12);
  MatrixXd nan = MatrixXd::Zero(2, 2);
  nan(1, 1) = std::nan("");
  EXPECT_THROW(softmax_rows(nan), std::invalid_argument);
}

TEST(AttentionLayer, RejectsIndivisibleHeads) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(make_attention_layer<double>(8, 10, 3, 4, {}, rng), std::invalid_argument);
}

TEST(AttendErpe, MatchesNaiveMaterialization) {
  const auto layer = random_layer(8, 8, 2, 4, RelativeKind::ERPE, 3);
  std::mt19937_64 rng(4);
  const MatrixXd x = random_matrix(4, 8, rng);
  EXPECT_LT((attend_erpe(x, layer) - naive_attention(x, layer)).norm(), 1e-12);
}

TEST(AttendErpe, ZeroWeightsGiveVanillaAttention) {
  auto layer = random_layer(8, 8, 2, 6, RelativeKind::ERPE, 5);
  for (auto& w : layer.erpe->weights) w.value().setZero();
  auto plain = layer;
  plain.relative = RelativeKind::None;
  std::mt19937_64 rng(6);
  const MatrixXd x = random_matrix(6, 8, rng);
  EXPECT_LT((attend_erpe(x, layer) - attend(x, plain)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((attend(x, plain) - naive_attention(x, plain)).norm(), 1e-12);
}

TEST(AttendErpe, SinglePositionScalesTheValue) {
  auto layer = random_layer(4, 4, 1, 1, RelativeKind::ERPE, 7);
  const double w = layer.erpe->weights[0].value()(0, 0);
  std::mt19937_64 rng(8);
  const MatrixXd x = random_matrix(1, 4, rng);
  const MatrixXd v = x * layer.w_v();
  MatrixXd expected = (1.0 + w) * v * layer.w_out.value();
  expected.rowwise() += layer.b_out.value().row(0);
  EXPECT_LT((attend_erpe(x, layer) - expected).norm(), 1e-12);
}

TEST(AttendErpe, Errors) {
  const auto layer = random_layer(8, 8, 2, 4, RelativeKind::ERPE, 9);
  EXPECT_THROW(attend_erpe(MatrixXd::Zero(5, 8), layer), std::invalid_argument);
  EXPECT_THROW(attend_erpe(MatrixXd::Zero(4, 7), layer), std::invalid_argument);
  const auto plain = random_layer(8, 8, 2, 4, RelativeKind::None, 9);
  EXPECT_THROW(attend_erpe(MatrixXd::Zero(4, 8), plain), std::invalid_argument);
}

TEST(AttendErpe, LiteralReadingMixesRawInputs) {
  std::mt19937_64 rng(10);
  AttentionOptions o;
  o.relative = RelativeKind::ERPE;
  o.erpe_on_inputs = true;
  auto layer = make_attention_layer<double>(4, 4, 1, 3, o, rng);
  layer.erpe->weights[0].value() = random_matrix(1, 5, rng);
  const MatrixXd x = random_matrix(3, 4, rng);
  auto plain = layer;
  plain.relative = RelativeKind::None;
  const MatrixXd b = erpe_materialize(*layer.erpe, 0);
  const MatrixXd expected = attend(x, plain) + b * x * layer.w_out.value();
  EXPECT_LT((attend_erpe(x, layer) - expected).norm(), 1e-12);
}

TEST(AttendShaw, MatchesBruteForce) {
  for (bool values : {false, true}) {
    const auto layer = random_layer(6, 6, 2, 5, RelativeKind::Shaw, 11, values, 2);
    std::mt19937_64 rng(12);
    const MatrixXd x = random_matrix(5, 6, rng);
    EXPECT_LT((attend_shaw(x, layer) - naive_attention(x, layer)).norm(), 1e-12) << values;
  }
}

TEST(AttendVector, MatchesBruteForce) {
  const auto layer = random_layer(6, 6, 2, 5, RelativeKind::Vector, 13);
  std::mt19937_64 rng(14);
  const MatrixXd x = random_matrix(5, 6, rng);
  EXPECT_LT((attend_vector(x, layer) - naive_attention(x, layer)).norm(), 1e-12);
}

TEST(AttendShawVector, ZeroTablesGiveVanillaAttention) {
  std::mt19937_64 rng(15);
  const MatrixXd x = random_matrix(5, 6, rng);
  auto shaw = random_layer(6, 6, 2, 5, RelativeKind::Shaw, 16, true);
  shaw.shaw->keys_table.value().setZero();
  shaw.shaw->values_table.value().setZero();
  auto vec = random_layer(6, 6, 2, 5, RelativeKind::Vector, 16);
  vec.vec->embeddings.value().setZero();
  auto plain = shaw;
  plain.relative = RelativeKind::None;
  EXPECT_LT((attend_shaw(x, shaw) - attend(x, plain)).norm(), 1e-12);
  auto plain_v = vec;
  plain_v.relative = RelativeKind::None;
  EXPECT_LT((attend_vector(x, vec) - attend(x, plain_v)).norm(), 1e-12);
}

namespace {

std::size_t vector_peak_cells(Index L, Index d) {
  const auto layer = random_layer(d, d, 1, L, RelativeKind::Vector, 17);
  std::mt19937_64 rng(18);
  const MatrixXd x = random_matrix(L, d, rng);
  MatrixXd out(L, d);
  g_live = g_peak = 0;
  g_tracking = true;
  out = attend_vector(x, layer);
  g_tracking = false;
  return g_peak / sizeof(double);
}

}  // namespace

TEST(AttendVector, PeakMemoryIsLinearPlusQuadratic) {
  const Index L = 96;
  const std::size_t narrow = vector_peak_cells(L, 16);
  const std::size_t wide = vector_peak_cells(L, 64);
  // A handful of L x L and L x d buffers; an L x L x d tensor would need
  // 147456 cells at d = 16.
  EXPECT_LE(narrow, 8 * static_cast<std::size_t>(L * 16 + L * L)) << narrow;
  EXPECT_LE(wide, 8 * static_cast<std::size_t>(L * 64 + L * L)) << wide;
  // Quadrupling d_z must not quadruple the footprint.
  EXPECT_LT(static_cast<double>(wide) / static_cast<double>(narrow), 2.5) << narrow << " -> " << wide;
}

TEST(Attention, RowsAreStochasticInEveryPath) {
  std::mt19937_64 rng(19);
  const MatrixXd q = random_matrix(7, 4, rng), k = random_matrix(7, 4, rng), p = random_matrix(7, 4, rng);
  const MatrixXd pk = random_matrix(5, 4, rng);
  for (const MatrixXd& e : {scaled_dot_scores(q, k, 8), shaw_attention_scores(q, k, pk, 2, 8),
                            MatrixXd(scaled_dot_scores(q, k, 8) + vector_skew(MatrixXd(q * p.transpose())))}) {
    const MatrixXd a = softmax_rows(e);
    for (Index i = 0; i < a.rows(); ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-9);
  }
}

TEST(Attention, PermutationEquivarianceWithoutEncodingsOnly) {
  const Index L = 7, d = 8;
  std::mt19937_64 rng(20);
  const MatrixXd x = random_matrix(L, d, rng);
  std::vector<int> perm(L);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> P(L);
  for (Index i = 0; i < L; ++i) P.indices()(i) = perm[static_cast<std::size_t>(i)];
  const auto plain = random_layer(d, d, 2, L, RelativeKind::None, 21);
  EXPECT_LT((attend(MatrixXd(P * x), plain) - P * attend(x, plain)).norm(), 1e-12);
  const auto erpe = random_layer(d, d, 2, L, RelativeKind::ERPE, 21);
  EXPECT_GT((attend_erpe(MatrixXd(P * x), erpe) - P * attend_erpe(x, erpe)).norm(), 1e-3);
}

TEST(Attention, BatchedGraphMatchesSingleSampleKernels) {
  for (auto kind : {RelativeKind::None, RelativeKind::ERPE, RelativeKind::Shaw, RelativeKind::Vector}) {
    const auto layer = random_layer(6, 6, 3, 5, kind, 22, true, 3);
    std::mt19937_64 rng(23);
    const MatrixXd x = random_matrix(10, 6, rng);
    const MatrixXd y = attention_forward(layer, ad::Tensor<double>::constant(x), 5).value();
    EXPECT_LT((y.topRows(5) - attend(MatrixXd(x.topRows(5)), layer)).norm(), 1e-12) << to_string(kind);
    EXPECT_LT((y.bottomRows(5) - attend(MatrixXd(x.bottomRows(5)), layer)).norm(), 1e-12) << to_string(kind);
  }
}

TEST(Attention, GradientsOnSmallInstances) {
  for (auto kind : {RelativeKind::None, RelativeKind::ERPE, RelativeKind::Shaw, RelativeKind::Vector}) {
    const auto layer = random_layer(4, 4, 2, 6, kind, 24, true, 2);
    std::mt19937_64 rng(25);
    std::vector<ad::Tensor<double>> inputs{convtran::testing::param(6, 4, rng)};
    for (auto& [name, t] : named_parameters(layer)) inputs.push_back(t);
    auto f = [&](const auto& in) { return attention_forward(layer, in[0], 6); };
    EXPECT_LT(convtran::testing::max_relative_error(f, inputs), 1e-4) << to_string(kind);
  }
}

TEST(Attention, FloatInstantiation) {
  std::mt19937_64 rng(26);
  AttentionOptions o;
  o.relative = RelativeKind::ERPE;
  const auto layer = make_attention_layer<float>(4, 4, 2, 3, o, rng);
  const Matrix<float> y = attend_erpe(Matrix<float>::Ones(3, 4), layer);
  EXPECT_EQ(y.rows(), 3);
  EXPECT_TRUE(y.allFinite());
}
