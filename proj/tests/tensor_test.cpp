#include <gtest/gtest.h>

#include <random>

#include "kha/tensor.hpp"

using namespace kha;

TEST(Shape, NumelAndPrinting) {
    EXPECT_EQ(shape_numel({}), 1u);
    EXPECT_EQ(shape_numel({4}), 4u);
    EXPECT_EQ(shape_numel({3, 5}), 15u);
    EXPECT_EQ(shape_str({3, 5}), "[3x5]");
}

TEST(Tensor, ConstructionAndFill) {
    Tensor<float> t(Shape{2, 3}, 1.5f);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_EQ(t.numel(), 6u);
    for (float v : t.value()) EXPECT_EQ(v, 1.5f);
    EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1.0f}), shape_error);
}

TEST(Tensor, UndefinedHandle) {
    Tensor<double> t;
    EXPECT_FALSE(t.defined());
}

TEST(Tensor, Identity) {
    Tensor<double> i = Tensor<double>::identity(3);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_EQ(i.at(r, c), r == c ? 1.0 : 0.0);
        }
    }
}

TEST(Tensor, RandnReproducible) {
    std::mt19937_64 a(42), b(42);
    Tensor<float> x = Tensor<float>::randn(Shape{4, 4}, a, 0.5f);
    Tensor<float> y = Tensor<float>::randn(Shape{4, 4}, b, 0.5f);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.value()[i], y.value()[i]);
}

TEST(Tensor, GradRequiresOptIn) {
    Tensor<float> t(Shape{2, 2});
    EXPECT_THROW((void)t.grad(), value_error);
    t.set_requires_grad(true);
    EXPECT_EQ(t.grad().size(), 4u);
    for (float g : t.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Tensor, SharedHandleSemantics) {
    Tensor<float> a(Shape{2}, 1.0f);
    Tensor<float> b = a;
    b.value()[0] = 9.0f;
    EXPECT_EQ(a.value()[0], 9.0f);
}

TEST(Tensor, ItemRequiresSingleElement) {
    EXPECT_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
    Tensor<double> t(Shape{2});
    EXPECT_THROW((void)t.item(), shape_error);
}

TEST(Tensor, AllFinite) {
    Tensor<double> t(Shape{2}, 1.0);
    EXPECT_TRUE(t.all_finite());
    t.value()[1] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(t.all_finite());
}

TEST(Tape, BackwardSeedsScalar) {
    Tensor<double> x = Tensor<double>::scalar(3.0);
    x.set_requires_grad(true);
    Tape<double> tape;
    tape.backward(x);
    EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Tape, BackwardRejectsNonScalar) {
    Tensor<double> x(Shape{2}, 1.0);
    x.set_requires_grad(true);
    Tape<double> tape;
    EXPECT_THROW(tape.backward(x), shape_error);
}

TEST(Tape, ReplaysInReverseOrder) {
    // Two nodes write to the same log; reverse replay must see the later
    // node first.
    std::vector<int> log;
    Tape<double> tape;
    tape.record([&log] { log.push_back(1); });
    tape.record([&log] { log.push_back(2); });
    Tensor<double> loss = Tensor<double>::scalar(0.0);
    loss.set_requires_grad(true);
    tape.backward(loss);
    ASSERT_EQ(log.size(), 2u);
    EXPECT_EQ(log[0], 2);
    EXPECT_EQ(log[1], 1);
}

TEST(Tape, GradAccumulatesAcrossBackward) {
    Tensor<double> x = Tensor<double>::scalar(1.0);
    x.set_requires_grad(true);
    Tape<double> tape;
    tape.backward(x);
    tape.backward(x);
    EXPECT_EQ(x.grad()[0], 2.0);
    x.zero_grad();
    EXPECT_EQ(x.grad()[0], 0.0);
}
