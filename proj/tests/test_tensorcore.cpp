#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "looc/tensor.hpp"
#include "support.hpp"

using namespace looc;
using looc::testing::max_rel_error;
using looc::testing::random_tensor;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Contracts any output with a fixed random weighting to get a scalar.
Var weighted_sum(Tape& tape, Var out, const Tensor& w) {
    Var s = tape.row_sum(tape.mul(out, tape.constant(w)));
    return tape.row_sum(tape.transpose(s));
}

// Max relative error of every input's gradient against central differences.
double grad_check(const Builder& build, std::vector<Tensor> inputs, RngStream& rng, double h = 1e-5) {
    Tensor w;
    {
        Tape probe;
        std::vector<Var> v;
        for (const auto& t : inputs) v.push_back(probe.constant(t));
        w = random_tensor(probe.value(build(probe, v)).shape(), rng);
    }
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.parameter(t));
    Var loss = weighted_sum(tape, build(tape, vars), w);
    tape.backward(loss);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto f = [&](const Tensor& xi) {
            auto in = inputs;
            in[i] = xi;
            Tape t;
            std::vector<Var> v;
            for (const auto& x : in) v.push_back(t.constant(x));
            return t.value(weighted_sum(t, build(t, v), w)).item();
        };
        worst = std::max(worst, max_rel_error(tape.grad(vars[i]), inputs[i], f, h));
    }
    return worst;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5, 0.0)), DimensionError);
    Tensor t(Shape{2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(MatMul, IdentityTimesIdentity) {
    Tape tape;
    Tensor eye(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
    Var r = tape.matmul(tape.constant(eye), tape.constant(eye));
    EXPECT_EQ(tape.value(r), eye);
}

TEST(MatMul, RowSums) {
    Tape tape;
    Var a = tape.constant(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3, 4}));
    Var b = tape.constant(Tensor(Shape{2, 1}, std::vector<double>{1, 1}));
    EXPECT_EQ(tape.value(tape.matmul(a, b)), Tensor(Shape{2, 1}, std::vector<double>{3, 7}));
}

TEST(MatMul, ShapeMismatchNamesBothShapes) {
    Tape tape;
    Var a = tape.constant(Tensor(Shape{2, 3}));
    Var b = tape.constant(Tensor(Shape{2, 3}));
    try {
        tape.matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
    }
}

TEST(MatMul, GradientMatchesFiniteDifferences) {
    RngStream rng(1);
    Builder f = [](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); };
    EXPECT_LT(grad_check(f, {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{4, 2}, rng)}, rng), 1e-6);
}

TEST(Elementwise, Relu) {
    Tape tape;
    Var x = tape.constant(Tensor(Shape{1, 3}, std::vector<double>{-1, 0, 2}));
    EXPECT_EQ(tape.value(tape.relu(x)), Tensor(Shape{1, 3}, std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, ReluSubgradientAtZeroIsZero) {
    Tape tape;
    Var x = tape.parameter(Tensor(Shape{1, 3}, std::vector<double>{-1, 0, 2}));
    Var s = tape.row_sum(tape.relu(x));
    tape.backward(s);
    EXPECT_EQ(tape.grad(x), Tensor(Shape{1, 3}, std::vector<double>{0, 0, 1}));
}

TEST(Elementwise, AddZeroIsBitExact) {
    RngStream rng(2);
    Tensor x = random_tensor(Shape{3, 5}, rng);
    Tape tape;
    Var r = tape.elementwise(ElementwiseOp::Add, tape.constant(x), tape.constant(Tensor(Shape{3, 5}, 0.0)));
    EXPECT_EQ(tape.value(r), x);
}

TEST(Elementwise, ShapeMismatch) {
    Tape tape;
    EXPECT_THROW(tape.add(tape.constant(Tensor(Shape{2, 3})), tape.constant(Tensor(Shape{3, 2}))), DimensionError);
    EXPECT_THROW(tape.mul(tape.constant(Tensor(Shape{2, 3})), tape.constant(Tensor(Shape{2, 2}))), DimensionError);
}

TEST(Elementwise, MulGradient) {
    RngStream rng(3);
    Builder f = [](Tape& t, const std::vector<Var>& v) { return t.mul(v[0], v[1]); };
    EXPECT_LT(grad_check(f, {random_tensor(Shape{2, 3}, rng), random_tensor(Shape{2, 3}, rng)}, rng), 1e-6);
}

TEST(Elementwise, ScaleMatchesEnumDispatch) {
    RngStream rng(4);
    Tensor x = random_tensor(Shape{2, 2}, rng);
    Tape tape;
    Var a = tape.scale(tape.constant(x), 2.5);
    Var b = tape.elementwise(ElementwiseOp::Scale, tape.constant(x), 2.5);
    EXPECT_EQ(tape.value(a), tape.value(b));
}

TEST(L2Normalize, ThreeFourFive) {
    Tape tape;
    Var r = tape.l2_normalize(tape.constant(Tensor(Shape{1, 2}, std::vector<double>{3, 4})));
    EXPECT_NEAR(tape.value(r)[0], 0.6, 1e-15);
    EXPECT_NEAR(tape.value(r)[1], 0.8, 1e-15);
}

TEST(L2Normalize, UnitRowUnchanged) {
    Tape tape;
    Tensor x(Shape{1, 3}, std::vector<double>{0, 1, 0});
    EXPECT_EQ(tape.value(tape.l2_normalize(tape.constant(x))), x);
}

TEST(L2Normalize, DegenerateRowThrows) {
    Tape tape;
    EXPECT_THROW(tape.l2_normalize(tape.constant(Tensor(Shape{2, 3}, 0.0))), DegenerateError);
}

TEST(L2Normalize, Gradient) {
    RngStream rng(5);
    Builder f = [](Tape& t, const std::vector<Var>& v) { return t.l2_normalize(v[0]); };
    EXPECT_LT(grad_check(f, {random_tensor(Shape{2, 5}, rng)}, rng), 1e-5);
}

TEST(LogSoftmaxNll, SymmetricCase) {
    Tape tape;
    std::vector<std::size_t> t{0};
    Var l = tape.log_softmax_nll(tape.constant(Tensor(Shape{1, 2}, 0.0)), t);
    EXPECT_NEAR(tape.value(l).item(), std::log(2.0), 1e-12);
}

TEST(LogSoftmaxNll, StableForLargeLogits) {
    Tape tape;
    std::vector<std::size_t> t{0};
    Var l = tape.log_softmax_nll(tape.constant(Tensor(Shape{1, 2}, std::vector<double>{1000, 0})), t);
    EXPECT_TRUE(std::isfinite(tape.value(l).item()));
    EXPECT_NEAR(tape.value(l).item(), 0.0, 1e-12);
}

TEST(LogSoftmaxNll, TargetOutOfRange) {
    Tape tape;
    std::vector<std::size_t> t{3};
    EXPECT_THROW(tape.log_softmax_nll(tape.constant(Tensor(Shape{1, 3}, 0.0)), t), IndexError);
}

TEST(LogSoftmaxNll, MatchesExtendedPrecisionOracle) {
    RngStream rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits = random_tensor(Shape{4, 7}, rng, -5, 5);
        std::vector<std::size_t> targets;
        for (int r = 0; r < 4; ++r) targets.push_back(rng.index(7));
        long double want = 0;
        for (std::size_t r = 0; r < 4; ++r) {
            long double denom = 0;
            for (double v : logits.row(r)) denom += std::exp(static_cast<long double>(v));
            want -= std::log(std::exp(static_cast<long double>(logits.at(r, targets[r]))) / denom);
        }
        want /= 4;
        Tape tape;
        EXPECT_NEAR(tape.value(tape.log_softmax_nll(tape.constant(logits), targets)).item(),
                    static_cast<double>(want), 1e-9);
    }
}

TEST(LogSoftmaxNll, Gradient) {
    RngStream rng(7);
    std::vector<std::size_t> targets{1, 0, 4};
    Tensor logits = random_tensor(Shape{3, 5}, rng, -2, 2);
    Tape tape;
    Var x = tape.parameter(logits);
    tape.backward(tape.log_softmax_nll(x, targets));
    auto f = [&](const Tensor& l) {
        Tape t;
        return t.value(t.log_softmax_nll(t.constant(l), targets)).item();
    };
    EXPECT_LT(max_rel_error(tape.grad(x), logits, f), 1e-6);
}

// Every differentiable op on randomized shapes, many seeds.
TEST(Tape, AllOpsPassFiniteDifferencesAcrossSeeds) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        RngStream rng(1000 + seed);
        const std::size_t m = 1 + rng.index(3), k = 1 + rng.index(4), n = 1 + rng.index(3);
        const std::vector<std::pair<const char*, std::pair<Builder, std::vector<Tensor>>>> cases = {
            {"matmul", {[](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); },
                        {random_tensor(Shape{m, k}, rng), random_tensor(Shape{k, n}, rng)}}},
            {"add", {[](Tape& t, const std::vector<Var>& v) { return t.add(v[0], v[1]); },
                     {random_tensor(Shape{m, k}, rng), random_tensor(Shape{m, k}, rng)}}},
            {"mul", {[](Tape& t, const std::vector<Var>& v) { return t.mul(v[0], v[1]); },
                     {random_tensor(Shape{m, k}, rng), random_tensor(Shape{m, k}, rng)}}},
            // Keep inputs away from the kink so differences stay on one side.
            {"relu", {[](Tape& t, const std::vector<Var>& v) { return t.relu(v[0]); },
                      {[&] {
                          Tensor x = random_tensor(Shape{m, k}, rng);
                          for (double& v : x.storage()) v += v >= 0 ? 0.1 : -0.1;
                          return x;
                      }()}}},
            {"scale", {[](Tape& t, const std::vector<Var>& v) { return t.scale(v[0], -1.7); },
                       {random_tensor(Shape{m, k}, rng)}}},
            {"add_bias", {[](Tape& t, const std::vector<Var>& v) { return t.add_bias(v[0], v[1]); },
                          {random_tensor(Shape{m, k}, rng), random_tensor(Shape{k}, rng)}}},
            {"l2_normalize", {[](Tape& t, const std::vector<Var>& v) { return t.l2_normalize(v[0]); },
                              {random_tensor(Shape{m, k + 1}, rng, 0.2, 1.0)}}},
            {"row_sum", {[](Tape& t, const std::vector<Var>& v) { return t.row_sum(v[0]); },
                         {random_tensor(Shape{m, k}, rng)}}},
            {"concat_cols", {[](Tape& t, const std::vector<Var>& v) {
                                 std::vector<Var> parts{v[0], v[1]};
                                 return t.concat_cols(parts);
                             },
                             {random_tensor(Shape{m, k}, rng), random_tensor(Shape{m, n}, rng)}}},
            {"transpose", {[](Tape& t, const std::vector<Var>& v) { return t.transpose(v[0]); },
                           {random_tensor(Shape{m, k}, rng)}}},
        };
        for (const auto& [name, c] : cases) EXPECT_LT(grad_check(c.first, c.second, rng), 1e-4) << name << " seed " << seed;
    }
}

TEST(Tape, BackwardIsLinearInTheLoss) {
    RngStream rng(8);
    Tensor a = random_tensor(Shape{3, 3}, rng), b = random_tensor(Shape{3, 3}, rng);
    auto grad_of = [&](int which) {
        Tape t;
        Var x = t.parameter(a);
        Var l1 = t.row_sum(t.transpose(t.row_sum(t.mul(x, x))));
        Var l2 = t.row_sum(t.transpose(t.row_sum(t.matmul(x, t.constant(b)))));
        Var root = which == 0 ? l1 : which == 1 ? l2 : t.add(l1, l2);
        t.backward(root);
        return t.grad(x);
    };
    Tensor g1 = grad_of(0), g2 = grad_of(1), g12 = grad_of(2);
    for (std::size_t i = 0; i < g12.numel(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-12);
}

TEST(Tape, DetachedAndConstantNodesGetZeroGradient) {
    RngStream rng(9);
    Tape t;
    Var x = t.parameter(random_tensor(Shape{2, 3}, rng));
    Var c = t.constant(random_tensor(Shape{2, 3}, rng));
    Var d = t.detach(x);
    Var root = t.row_sum(t.transpose(t.row_sum(t.mul(t.add(x, c), d))));
    t.backward(root);
    EXPECT_EQ(t.grad(c), Tensor(Shape{2, 3}, 0.0));
    EXPECT_EQ(t.grad(d), Tensor(Shape{2, 3}, 0.0));
    EXPECT_FALSE(t.requires_grad(d));
}

TEST(Tape, BackwardNeedsScalarAndDifferentiableRoot) {
    Tape t;
    Var x = t.parameter(Tensor(Shape{2, 2}, 1.0));
    EXPECT_THROW(t.backward(x), DimensionError);
    Var c = t.row_sum(t.transpose(t.row_sum(t.constant(Tensor(Shape{2, 2}, 1.0)))));
    EXPECT_THROW(t.backward(c), ContractError);
}

TEST(Sgd, PlainStep) {
    Tensor p = Tensor::scalar(1.0);
    std::vector<Tensor*> params{&p};
    std::vector<Tensor> grads{Tensor::scalar(0.5)};
    SgdState s{1.0, 0.0, {}};
    sgd_step(params, grads, s);
    EXPECT_DOUBLE_EQ(p.item(), 0.5);
}

TEST(Sgd, ZeroGradientLeavesParameter) {
    Tensor p = Tensor::scalar(3.0);
    std::vector<Tensor*> params{&p};
    std::vector<Tensor> grads{Tensor::scalar(0.0)};
    SgdState s{0.1, 0.9, {}};
    for (int i = 0; i < 10; ++i) sgd_step(params, grads, s);
    EXPECT_EQ(p.item(), 3.0);
    EXPECT_EQ(s.velocity[0].item(), 0.0);
}

TEST(Sgd, HandUnrolledMomentum) {
    Tensor p = Tensor::scalar(0.0);
    std::vector<Tensor*> params{&p};
    std::vector<Tensor> grads{Tensor::scalar(1.0)};
    SgdState s{0.1, 0.9, {}};
    sgd_step(params, grads, s);
    EXPECT_NEAR(p.item(), -0.1, 1e-15);
    sgd_step(params, grads, s);
    EXPECT_NEAR(s.velocity[0].item(), 1.9, 1e-15);
    EXPECT_NEAR(p.item(), -0.29, 1e-15);
}

TEST(Sgd, NonFiniteGradientDiverges) {
    Tensor p = Tensor::scalar(0.0);
    std::vector<Tensor*> params{&p};
    std::vector<Tensor> grads{Tensor::scalar(std::nan(""))};
    SgdState s;
    EXPECT_THROW(sgd_step(params, grads, s), DivergenceError);
    EXPECT_EQ(p.item(), 0.0);
}

TEST(Sgd, VelocityShapesMatchParams) {
    Tensor a(Shape{2, 3}, 1.0), b(Shape{4}, 1.0);
    std::vector<Tensor*> params{&a, &b};
    std::vector<Tensor> grads{Tensor(Shape{2, 3}, 0.1), Tensor(Shape{4}, 0.1)};
    SgdState s;
    sgd_step(params, grads, s);
    ASSERT_EQ(s.velocity.size(), 2u);
    EXPECT_EQ(s.velocity[0].shape(), a.shape());
    EXPECT_EQ(s.velocity[1].shape(), b.shape());
    std::vector<Tensor> bad{Tensor(Shape{3, 2}, 0.1), Tensor(Shape{4}, 0.1)};
    EXPECT_THROW(sgd_step(params, bad, s), DimensionError);
}
