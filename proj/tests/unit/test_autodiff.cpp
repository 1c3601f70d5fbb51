#include <gtest/gtest.h>

#include "convtran/autodiff.hpp"
#include "convtran/optim.hpp"
#include "support/gradcheck.hpp"
#include "support/gradient_suite.hpp"

using namespace convtran;
using convtran::testing::TensorD;

TEST(Backward, SumGivesOnes) {
  auto x = TensorD::parameter(MatrixXd::Random(3, 4));
  ad::backward(ad::sum(x));
  EXPECT_TRUE(x.grad().isApprox(MatrixXd::Ones(3, 4)));
}

TEST(Backward, HalfSquaredNormGivesInput) {
  auto x = TensorD::parameter(MatrixXd::Random(2, 5));
  ad::backward(ad::scale(ad::sum(ad::mul(x, x)), 0.5));
  EXPECT_LT((x.grad() - x.value()).norm(), 1e-14);
}

TEST(Backward, RejectsNonScalarAndReuse) {
  auto x = TensorD::parameter(MatrixXd::Random(2, 2));
  EXPECT_THROW(ad::backward(ad::scale(x, 2.0)), std::invalid_argument);
  auto loss = ad::sum(ad::mul(x, x));
  ad::backward(loss);
  EXPECT_THROW(ad::backward(loss), std::logic_error);
}

TEST(Backward, AccumulationIsLinear) {
  MatrixXd v = MatrixXd::Random(3, 3);
  auto a = TensorD::parameter(v);
  ad::backward(ad::add(ad::sum(ad::gelu(a)), ad::sum(ad::mul(a, a))));
  const MatrixXd joint = a.grad();
  auto b = TensorD::parameter(v);
  ad::backward(ad::sum(ad::gelu(b)));
  ad::backward(ad::sum(ad::mul(b, b)));
  EXPECT_LT((joint - b.grad()).norm(), 1e-13);
}

TEST(Backward, ConstantsRecordNoGraph) {
  auto c = TensorD::constant(MatrixXd::Ones(2, 2));
  auto y = ad::matmul(c, c);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

class PrimitiveGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  auto cases = convtran::testing::primitive_cases();
  auto& c = cases.at(GetParam());
  EXPECT_LT(convtran::testing::max_relative_error(c.f, c.inputs), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(All, PrimitiveGradient,
                         ::testing::Range<std::size_t>(0, convtran::testing::primitive_cases().size()),
                         [](const auto& info) { return convtran::testing::primitive_cases()[info.param].name; });

TEST(Backward, CompositeConvAttentionCrossEntropy) {
  std::mt19937_64 rng(5);
  AttentionOptions opts;
  opts.relative = RelativeKind::ERPE;
  auto layer = make_attention_layer<double>(6, 6, 2, 6, opts, rng);
  for (auto& [name, t] : named_parameters(layer)) t.value() = convtran::testing::random_matrix(t.rows(), t.cols(), rng, 0.5);
  auto kernel = convtran::testing::param(3, 3, rng);
  auto head = convtran::testing::param(6, 3, rng);
  const MatrixXd x = convtran::testing::random_matrix(12, 2, rng);
  std::vector<TensorD> inputs{kernel, head};
  for (auto& [name, t] : named_parameters(layer)) inputs.push_back(t);
  auto f = [&](const std::vector<TensorD>& in) {
    auto h = ad::temporal_conv(TensorD::constant(x), in[0], TensorD(), 6);
    auto z = attention_forward(layer, h, 6);
    auto logits = ad::matmul(ad::pool_rows(z, 6, ad::PoolMode::Mean), in[1]);
    static const std::vector<int> y{2, 0};
    return ad::cross_entropy(logits, std::span<const int>(y));
  };
  EXPECT_LT(convtran::testing::max_relative_error(f, inputs), 1e-4);
}

TEST(Training, XorPerceptronConverges) {
  std::mt19937_64 rng(3);
  MatrixXd xv(4, 2);
  xv << 0, 0, 0, 1, 1, 0, 1, 1;
  const std::vector<int> y{0, 1, 1, 0};
  auto w1 = convtran::testing::param(2, 8, rng);
  auto b1 = TensorD::parameter(MatrixXd::Zero(1, 8));
  auto w2 = convtran::testing::param(8, 2, rng);
  auto b2 = TensorD::parameter(MatrixXd::Zero(1, 2));
  std::vector<TensorD> params{w1, b1, w2, b2};
  AdamOptions<double> o;
  o.lr = 0.05;
  AdamState<double> state(params, o);
  double loss = 1.0;
  int step = 0;
  for (; step < 2000 && loss >= 0.01; ++step) {
    auto h = ad::gelu(ad::add_row(ad::matmul(TensorD::constant(xv), w1), b1));
    auto l = ad::cross_entropy(ad::add_row(ad::matmul(h, w2), b2), std::span<const int>(y));
    loss = l.item();
    ad::backward(l);
    adam_step(params, state);
  }
  EXPECT_LT(loss, 0.01) << "after " << step << " steps";
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = TensorD::parameter(MatrixXd::Constant(2, 2, 3.0));
  std::vector<TensorD> params{p};
  AdamState<double> state(params);
  p.node()->grad = MatrixXd::Zero(2, 2);
  adam_step(params, state);
  EXPECT_EQ(p.value(), MatrixXd::Constant(2, 2, 3.0));
  EXPECT_FALSE(p.has_grad());
}

TEST(Adam, ConstantGradientMovesMonotonically) {
  auto p = TensorD::parameter(MatrixXd::Constant(1, 1, 0.0));
  std::vector<TensorD> params{p};
  AdamState<double> state(params);
  double prev = 0.0;
  for (int i = 0; i < 200; ++i) {
    p.node()->grad = MatrixXd::Constant(1, 1, 0.5);
    adam_step(params, state);
    EXPECT_LT(p.value()(0, 0), prev);
    prev = p.value()(0, 0);
  }
  // With a constant gradient the bias-corrected step is lr * g / (|g| + eps).
  EXPECT_NEAR(prev, -200 * 1e-3 * 0.5 / (0.5 + 1e-8), 1e-12);
}

TEST(Adam, DeterministicTrajectories) {
  auto run = [] {
    auto p = TensorD::parameter(MatrixXd::Constant(2, 1, 1.0));
    std::vector<TensorD> params{p};
    AdamState<double> state(params);
    for (int i = 0; i < 20; ++i) {
      ad::backward(ad::sum(ad::mul(p, p)));
      adam_step(params, state);
    }
    return MatrixXd(p.value());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, MissingGradientThrows) {
  auto p = TensorD::parameter(MatrixXd::Zero(1, 1));
  std::vector<TensorD> params{p};
  AdamState<double> state(params);
  EXPECT_THROW(adam_step(params, state), std::logic_error);
}

TEST(EarlyStopping, DecreasingLossesNeverStop) {
  EarlyStopper<int> s(3);
  for (int e = 0; e < 50; ++e) EXPECT_EQ(s.update(10.0 - 0.1 * e, e), StopDecision::Continue);
}

TEST(EarlyStopping, FlatLossesStopAtPatiencePlusOne) {
  const int patience = 5;
  EarlyStopper<int> s(patience);
  int epoch = 0;
  StopDecision d = StopDecision::Continue;
  while (d == StopDecision::Continue) d = s.update(1.0, ++epoch);
  EXPECT_EQ(d, StopDecision::Stop);
  EXPECT_EQ(epoch, patience + 1);
}

TEST(EarlyStopping, KeepsEpochOfMinimum) {
  const std::vector<double> losses{0.9, 0.7, 0.8, 0.5, 0.6, 0.55, 0.65};
  EarlyStopper<std::vector<double>> s(3);
  std::vector<double> snapshot;
  for (double l : losses) {
    snapshot.push_back(l);
    if (s.update(l, snapshot) != StopDecision::Continue) break;
  }
  ASSERT_TRUE(s.best_checkpoint().has_value());
  EXPECT_EQ(s.best_epoch(), 4);
  EXPECT_EQ(*s.best_checkpoint(), (std::vector<double>{0.9, 0.7, 0.8, 0.5}));
}

TEST(EarlyStopping, NaNIsDivergence) {
  EarlyStopper<int> s(3);
  EXPECT_EQ(s.update(std::nan(""), 0), StopDecision::Diverged);
}

TEST(GradientChecker, FlagsAWrongBackward) {
  auto wrong_square = [](const std::vector<TensorD>& in) {
    const auto& a = in[0];
    return ad::detail::make_op<double>(a.value().cwiseAbs2(), {a}, [](ad::Node<double>& self) {
      self.parents[0]->accumulate(self.grad.cwiseProduct(self.parents[0]->value));
    });
  };
  std::mt19937_64 rng(1);
  EXPECT_GT(convtran::testing::max_relative_error(wrong_square, {convtran::testing::param(3, 3, rng)}), 0.1);
}
