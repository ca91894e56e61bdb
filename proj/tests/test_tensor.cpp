#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support.hpp"

using namespace sortnet;
using testing_support::max_abs_diff;
using testing_support::max_rel_err;
using testing_support::numeric_gradient;

namespace {

using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

// Analytic gradient of sum(w * op(inputs)) from the tape against central
// differences of the same forward computation.
double op_fd_error(const std::vector<Tensor>& inputs, const Build& build, std::uint64_t seed = 3,
                   double h = 1e-5) {
  Rng rng(seed);
  Tensor weights;
  {
    Tape probe(false);
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(probe.constant(t));
    weights = Tensor::uniform(build(probe, vars).shape(), rng, -1.0, 1.0);
  }
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  tape.backward(weighted_sum(build(tape, leaves), weights));

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const std::vector<double>& flat) {
      Tape t(false);
      std::vector<Var> vars;
      for (std::size_t j = 0; j < inputs.size(); ++j) {
        vars.push_back(t.constant(j == k ? Tensor(inputs[j].shape(), flat) : inputs[j]));
      }
      return weighted_sum(build(t, vars), weights).value()[0];
    };
    const auto numeric = numeric_gradient(f, inputs[k].values(), h);
    worst = std::max(worst, max_rel_err(tape.grad(leaves[k]).data(), numeric));
  }
  return worst;
}

Tensor away_from_zero(Shape s, Rng& rng) {
  Tensor t = Tensor::uniform(std::move(s), rng, 0.1, 1.0);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (rng.uniform() < 0.5) t[i] = -t[i];
  }
  return t;
}

std::vector<double> values_of(Var v) { return v.value().values(); }

}  // namespace

TEST(Tensor, SizeMatchesShapeProduct) {
  const Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW(Tensor({2, 0}), Error);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
}

TEST(Tensor, OpsOnFiniteInputsStayFinite) {
  Rng rng(5);
  Tape tape(false);
  Var a = tape.constant(Tensor::randn({3, 4}, rng));
  Var b = tape.constant(Tensor::randn({3, 4}, rng));
  for (Var v : {ew_add(a, b), ew_mul(a, b), ew_max(a, b), relu(a), ew_square(a), scale(a, -2.0),
                ew_sqrt_shift(relu(a), 1e-4)}) {
    EXPECT_TRUE(v.value().all_finite());
  }
}

TEST(Tape, RecordsInTopologicalOrderAndLeafGradsMatchShape) {
  Rng rng(2);
  Tape tape;
  Var a = tape.leaf(Tensor::randn({2, 3}, rng));
  Var b = tape.leaf(Tensor::randn({2, 3}, rng));
  Var y = sum(ew_mul(relu(ew_add(a, b)), b));
  for (std::size_t id = 0; id < tape.size(); ++id) {
    for (std::size_t in : tape.inputs(id)) EXPECT_LT(in, id);
  }
  tape.backward(y);
  EXPECT_EQ(tape.grad(a).shape(), a.shape());
  EXPECT_EQ(tape.grad(b).shape(), b.shape());
}

TEST(Tape, BackwardNeedsScalarTarget) {
  Tape tape;
  Var a = tape.leaf(Tensor::ones({2}));
  EXPECT_THROW(tape.backward(a), Error);
}

TEST(EwAdd, Examples) {
  Tape tape(false);
  EXPECT_EQ(values_of(ew_add(tape.constant(Tensor::vector({1, 2})), tape.constant(Tensor::vector({3, 4})))),
            (std::vector<double>{4, 6}));
  const Tensor a = Tensor::vector({0.5, -7.25, 3.0});
  EXPECT_EQ(ew_add(tape.constant(a), tape.constant(Tensor::zeros({3}))).value(), a);
}

TEST(EwAdd, GradientIsUpstreamForBothOperands) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({1, 2, 3}));
  Var b = tape.leaf(Tensor::vector({4, 5, 6}));
  const Tensor w = Tensor::vector({0.5, -1.0, 2.0});
  tape.backward(weighted_sum(ew_add(a, b), w));
  EXPECT_EQ(tape.grad(a), w);
  EXPECT_EQ(tape.grad(b), w);

  Tape twice;
  Var x = twice.leaf(Tensor::vector({1, 2, 3}));
  twice.backward(weighted_sum(ew_add(x, x), w));
  EXPECT_EQ(twice.grad(x), Tensor::vector({1.0, -2.0, 4.0}));
}

TEST(EwAdd, MatchesFiniteDifferences) {
  Rng rng(1);
  const double err = op_fd_error({Tensor::randn({2, 3}, rng), Tensor::randn({2, 3}, rng)},
                                 [](Tape&, const std::vector<Var>& v) { return ew_add(v[0], v[1]); });
  EXPECT_LT(err, 1e-8);
}

TEST(EwMul, Examples) {
  Tape tape(false);
  EXPECT_EQ(values_of(ew_mul(tape.constant(Tensor::vector({2, 0})), tape.constant(Tensor::vector({3, 5})))),
            (std::vector<double>{6, 0}));
  const Tensor a = Tensor::vector({1.5, -2.0});
  EXPECT_EQ(ew_mul(tape.constant(a), tape.constant(Tensor::ones({2}))).value(), a);
}

TEST(EwMul, ProductRule) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({2}));
  Var b = tape.leaf(Tensor::vector({3}));
  tape.backward(sum(ew_mul(a, b)));
  EXPECT_EQ(tape.grad(a)[0], 3.0);
  EXPECT_EQ(tape.grad(b)[0], 2.0);
}

TEST(EwMul, MatchesFiniteDifferences) {
  Rng rng(4);
  EXPECT_LT(op_fd_error({Tensor::randn({3, 4}, rng), Tensor::randn({3, 4}, rng)},
                        [](Tape&, const std::vector<Var>& v) { return ew_mul(v[0], v[1]); }),
            1e-8);
}

TEST(EwMax, Examples) {
  Tape tape(false);
  EXPECT_EQ(values_of(ew_max(tape.constant(Tensor::vector({1, 5})), tape.constant(Tensor::vector({3, 2})))),
            (std::vector<double>{3, 5}));
}

TEST(EwMax, TieRoutesGradientToFirstOperand) {
  Tape tape;
  const Tensor v = Tensor::vector({1.0, -2.0, 0.0});
  Var a = tape.leaf(v);
  Var b = tape.leaf(v);
  Var m = ew_max(a, b);
  EXPECT_EQ(m.value(), v);
  tape.backward(sum(m));
  EXPECT_EQ(tape.grad(a), Tensor::ones({3}));
  EXPECT_EQ(tape.grad(b), Tensor::zeros({3}));
}

TEST(EwMax, MatchesFiniteDifferencesAwayFromTies) {
  Rng rng(6);
  Tensor a = Tensor::randn({4, 5}, rng);
  Tensor b = a;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  EXPECT_LT(op_fd_error({a, b}, [](Tape&, const std::vector<Var>& v) { return ew_max(v[0], v[1]); }), 1e-8);
}

TEST(Relu, Examples) {
  Tape tape(false);
  EXPECT_EQ(values_of(relu(tape.constant(Tensor::vector({-1, 0, 2})))), (std::vector<double>{0, 0, 2}));
  Rng rng(8);
  Var a = tape.constant(Tensor::randn({10}, rng));
  EXPECT_EQ(relu(relu(a)).value(), relu(a).value());
  for (double v : relu(a).value().data()) EXPECT_GE(v, 0.0);
}

TEST(Relu, DerivativeAtZeroIsZero) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({0.0}));
  tape.backward(sum(relu(a)));
  EXPECT_EQ(tape.grad(a)[0], 0.0);
}

TEST(Relu, MatchesFiniteDifferencesAwayFromZero) {
  Rng rng(9);
  EXPECT_LT(op_fd_error({away_from_zero({3, 5}, rng)}, [](Tape&, const std::vector<Var>& v) { return relu(v[0]); }),
            1e-8);
}

TEST(SqrtShift, Examples) {
  Tape tape(false);
  EXPECT_DOUBLE_EQ(ew_sqrt_shift(tape.constant(Tensor::vector({0})), 1e-4).value()[0], 0.01);
  EXPECT_NEAR(ew_sqrt_shift(tape.constant(Tensor::vector({4})), 1e-4).value()[0], 2.000025, 1e-6);
  EXPECT_THROW(ew_sqrt_shift(tape.constant(Tensor::vector({-0.5})), 1e-4), Error);
  Rng rng(3);
  for (double v : ew_sqrt_shift(tape.constant(Tensor::uniform({20}, rng, 0.0, 2.0)), 1e-4).value().data()) {
    EXPECT_GE(v, 0.01);
  }
}

TEST(SqrtShift, MatchesFiniteDifferencesAtFour) {
  EXPECT_LT(op_fd_error({Tensor::vector({4})},
                        [](Tape&, const std::vector<Var>& v) { return ew_sqrt_shift(v[0], 1e-4); }),
            1e-6);
}

TEST(SqrtShift, NegativeInputReportsKind) {
  Tape tape(false);
  try {
    ew_sqrt_shift(tape.constant(Tensor::vector({1.0, -1e-3})), 1e-4);
    FAIL() << "expected NegativeInput";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NegativeInput);
  }
}

TEST(Conv2d, Examples) {
  Tape tape(false);
  Var x = tape.constant(Tensor({1, 1, 1, 1}, std::vector<double>{5}));
  Var w = tape.constant(Tensor({1, 1, 1, 1}, std::vector<double>{2}));
  Var b = tape.constant(Tensor::vector({1}));
  EXPECT_EQ(conv2d(x, w, b, 1, 0).value()[0], 11.0);

  Var ones = tape.constant(Tensor::ones({1, 1, 3, 3}));
  Var k = tape.constant(Tensor::ones({1, 1, 3, 3}));
  Var y = conv2d(ones, k, std::nullopt, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 9.0);
}

TEST(Conv2d, AgreesWithDirectLoops) {
  Rng rng(12);
  struct Geometry {
    std::size_t c, o, h, k, stride, pad;
  };
  for (const Geometry g : {Geometry{3, 4, 7, 3, 1, 1}, Geometry{2, 5, 8, 5, 2, 2}, Geometry{1, 2, 6, 2, 1, 0},
                           Geometry{4, 3, 9, 3, 2, 0}, Geometry{3, 3, 5, 1, 1, 0}}) {
    const Tensor x = Tensor::randn({2, g.c, g.h, g.h}, rng);
    const Tensor w = Tensor::randn({g.o, g.c, g.k, g.k}, rng);
    const Tensor b = Tensor::randn({g.o}, rng);
    Tape tape(false);
    const Tensor got = conv2d(tape.constant(x), tape.constant(w), tape.constant(b), g.stride, g.pad).value();
    const Tensor want = testing_support::direct_conv(x, w, &b, g.stride, g.pad);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
  }
}

TEST(Conv2d, AllGradientsMatchFiniteDifferences) {
  Rng rng(13);
  const Tensor x = Tensor::randn({2, 3, 5, 5}, rng);
  const Tensor w = Tensor::randn({4, 3, 3, 3}, rng);
  const Tensor b = Tensor::randn({4}, rng);
  for (std::size_t stride : {1u, 2u}) {
    const double err = op_fd_error({x, w, b}, [stride](Tape&, const std::vector<Var>& v) {
      return conv2d(v[0], v[1], v[2], stride, 1);
    });
    EXPECT_LT(err, 1e-6) << "stride " << stride;
  }
}

TEST(Conv2d, RejectsBadGeometry) {
  Tape tape(false);
  Var x = tape.constant(Tensor::ones({1, 2, 4, 4}));
  EXPECT_THROW(conv2d(x, tape.constant(Tensor::ones({1, 3, 3, 3})), std::nullopt, 1, 0), Error);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor::ones({1, 2, 7, 7})), std::nullopt, 1, 0), Error);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor::ones({1, 2, 3, 3})), std::nullopt, 0, 0), Error);
}

TEST(SoftmaxXent, UniformLogitsGiveLogClassCount) {
  Tape tape(false);
  const std::vector<int> labels{0, 7, 9};
  auto r = softmax_xent(tape.constant(Tensor::zeros({3, 10})), labels);
  EXPECT_NEAR(r.loss.value()[0], std::log(10.0), 1e-15);
  EXPECT_NEAR(r.loss.value()[0], 2.302585, 1e-6);
}

TEST(SoftmaxXent, RejectsLabelsOutOfRange) {
  Tape tape(false);
  const std::vector<int> labels{10};
  try {
    softmax_xent(tape.constant(Tensor::zeros({1, 10})), labels);
    FAIL() << "expected LabelOutOfRange";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::LabelOutOfRange);
  }
}

TEST(SoftmaxXent, MatchesFiniteDifferencesIncludingSaturation) {
  Rng rng(14);
  const std::vector<int> labels{1, 0, 3};
  Tensor logits = Tensor::randn({3, 4}, rng);
  auto build = [&labels](Tape&, const std::vector<Var>& v) { return softmax_xent(v[0], labels).loss; };
  EXPECT_LT(op_fd_error({logits}, build), 1e-8);
  // Confident and correct on every row: the loss is tiny but its gradient
  // must keep relative precision.
  Tensor confident = Tensor::zeros({3, 4});
  confident[0 * 4 + 1] = 30.0;
  confident[1 * 4 + 0] = 28.0;
  confident[2 * 4 + 3] = 33.0;
  Tape tape;
  Var l = tape.leaf(confident);
  tape.backward(softmax_xent(l, labels).loss);
  const double expected = -std::exp(-30.0) * 3.0 / (1.0 + 3.0 * std::exp(-30.0)) / 3.0;
  EXPECT_NEAR(tape.grad(l)[1] / expected, 1.0, 1e-12);
}

TEST(MaxPool, ConstantInputGivesConstant) {
  Tape tape(false);
  Var y = maxpool2d(tape.constant(Tensor({1, 2, 7, 7}, 2.5)), 3, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 3, 3}));
  for (double v : y.value().data()) EXPECT_EQ(v, 2.5);
}

TEST(MaxPool, MatchesFiniteDifferencesOnDistinctValues) {
  Rng rng(15);
  Tensor x({2, 2, 5, 5});
  auto perm = rng.permutation(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1 * static_cast<double>(perm[i]);
  EXPECT_LT(op_fd_error({x}, [](Tape&, const std::vector<Var>& v) { return maxpool2d(v[0], 3, 2); }), 1e-8);
}

TEST(Fc, MatchesFiniteDifferences) {
  Rng rng(16);
  EXPECT_LT(op_fd_error({Tensor::randn({4, 6}, rng), Tensor::randn({3, 6}, rng), Tensor::randn({3}, rng)},
                        [](Tape&, const std::vector<Var>& v) { return fc(v[0], v[1], v[2]); }),
            1e-7);
}

TEST(GlobalAvgPool, AveragesEachPlane) {
  Tape tape(false);
  Tensor x({1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, 10, 10, 10, 14});
  EXPECT_EQ(values_of(global_avg_pool(tape.constant(x))), (std::vector<double>{2.5, 11}));
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStats) {
  Rng rng(17);
  Tensor x = Tensor::randn({4, 2, 3, 3}, rng, 2.0);
  Tape tape;
  BatchNormState state(2);
  Var g = tape.leaf(Tensor::ones({2}));
  Var b = tape.leaf(Tensor::zeros({2}));
  Var y = batchnorm(tape.constant(x), g, b, state, Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0, xm = 0.0, xv = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) {
        mean += y.value()[(n * 2 + c) * 9 + i];
        xm += x[(n * 2 + c) * 9 + i];
      }
    mean /= 36.0;
    xm /= 36.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) {
        var += std::pow(y.value()[(n * 2 + c) * 9 + i] - mean, 2);
        xv += std::pow(x[(n * 2 + c) * 9 + i] - xm, 2);
      }
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var / 36.0, (xv / 36.0) / (xv / 36.0 + 1e-5), 1e-9);
    EXPECT_NEAR(state.running_mean[c], 0.1 * xm, 1e-12);
    EXPECT_NEAR(state.running_var[c], 0.9 + 0.1 * xv / 35.0, 1e-12);
  }
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  BatchNormState state(1);
  state.running_mean[0] = 2.0;
  state.running_var[0] = 4.0 - 1e-5;
  Tape tape(false);
  Var y = batchnorm(tape.constant(Tensor({1, 1, 1, 2}, std::vector<double>{4.0, 0.0})),
                    tape.constant(Tensor::vector({3.0})), tape.constant(Tensor::vector({1.0})), state, Mode::Eval);
  EXPECT_NEAR(y.value()[0], 4.0, 1e-12);
  EXPECT_NEAR(y.value()[1], -2.0, 1e-12);
}

TEST(BatchNorm, TrainModeMatchesFiniteDifferences) {
  Rng rng(18);
  const Tensor x = Tensor::randn({3, 2, 2, 2}, rng);
  const Tensor g = Tensor::uniform({2}, rng, 0.5, 1.5);
  const Tensor b = Tensor::randn({2}, rng);
  auto build = [](Tape&, const std::vector<Var>& v) {
    BatchNormState s(2);
    return batchnorm(v[0], v[1], v[2], s, Mode::Train);
  };
  EXPECT_LT(op_fd_error({x, g, b}, build), 1e-6);
}

TEST(GradCheck, PassesOnFusionSum) {
  Rng rng(19);
  Param f1("f1", Tensor::randn({4, 4}, rng));
  Param f2("f2", Tensor::randn({4, 4}, rng));
  ScalarFn f = [&](Tape& t) { return sum(sort_fuse(t.param(f1), t.param(f2), FusionSpec::sort_branched())); };
  const auto report = grad_check(f, {&f1, &f2}, 1e-5, 1e-5);
  EXPECT_TRUE(report.pass);
  EXPECT_LE(report.max_rel_err, 1e-5);
}

TEST(GradCheck, ConstantFunctionHasZeroGradientAndError) {
  Param p("p", Tensor::vector({1, 2, 3}));
  ScalarFn f = [&](Tape& t) {
    t.param(p);
    return t.constant(Tensor::vector({7.0}));
  };
  const auto report = grad_check(f, {&p});
  EXPECT_EQ(report.max_rel_err, 0.0);
  EXPECT_EQ(p.grad, Tensor::zeros({3}));
}

TEST(GradCheck, SumOfSquares) {
  Rng rng(20);
  Param p("p", Tensor::randn({3, 3}, rng));
  ScalarFn f = [&](Tape& t) { return sum(ew_square(t.param(p))); };
  const auto report = grad_check(f, {&p});
  EXPECT_LT(report.max_rel_err, 1e-9);
  for (std::size_t i = 0; i < p.value.size(); ++i) EXPECT_DOUBLE_EQ(p.grad[i], 2.0 * p.value[i]);
}

TEST(GradCheck, NonFiniteLossIsReported) {
  Param p("p", Tensor::vector({0.0}));
  ScalarFn f = [&](Tape& t) { return scale(sum(t.param(p)), std::numeric_limits<double>::infinity()); };
  EXPECT_THROW(grad_check(f, {&p}), Error);
}
