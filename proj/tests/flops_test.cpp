#include <gtest/gtest.h>

#include <cstdint>
#include <random>

#include "kha/flops.hpp"

using namespace kha;

TEST(Flops, ReferenceOperatingPoint) {
    FlopsInput in;
    in.L = 2048;
    in.d = 1024;
    in.n = 32;
    FlopsReport r = flops_report(in);
    EXPECT_EQ(u128_str(r.mha), "34359738368");
    EXPECT_EQ(u128_str(r.ffn), "38654705664");
    EXPECT_EQ(u128_str(r.total), "73014444032");
    EXPECT_EQ(u128_str(r.kha), "402653184");
    EXPECT_DOUBLE_EQ(r.kha_over_mha, 0.01171875);
    EXPECT_NEAR(r.kha_over_total, 0.0055147, 1e-6);
}

TEST(Flops, SmallestPoint) {
    FlopsInput in;
    in.L = 1;
    in.d = 1;
    in.n = 1;
    EXPECT_EQ(u128_str(flops_mha(in)), "12");
    EXPECT_EQ(u128_str(flops_ffn(in)), "18");
    EXPECT_EQ(u128_str(flops_report(in).total), "30");
    EXPECT_EQ(u128_str(flops_kha(in)), "6");
}

TEST(Flops, TotalIsComponentSumAcrossSweep) {
    std::mt19937_64 rng(31);
    for (int i = 0; i < 200; ++i) {
        FlopsInput in;
        in.L = 1 + rng() % 65536;
        in.d = 1 + rng() % 8192;
        in.n = 1 + rng() % 128;
        in.d_ff_ratio = 1 + rng() % 8;
        FlopsReport r = flops_report(in);
        EXPECT_EQ(u128_str(r.total), u128_str(r.mha + r.ffn));
        EXPECT_GT(r.kha_over_total, 0.0);
        EXPECT_LT(r.kha_over_total, 1.0);
    }
}

TEST(Flops, MatchesWideIntegerOracle) {
    // Recompute each term with smaller operands where 64-bit arithmetic is
    // still exact, so the formulas are checked independently of the
    // production 128-bit path.
    std::mt19937_64 rng(32);
    for (int i = 0; i < 100; ++i) {
        FlopsInput in;
        in.L = 1 + rng() % 1024;
        in.d = 1 + rng() % 1024;
        in.n = 1 + rng() % 64;
        in.d_ff_ratio = 1 + rng() % 4;
        const std::uint64_t L = in.L, d = in.d;
        EXPECT_EQ(u128_str(flops_mha(in)), u128_str(8 * L * d * d + 4 * L * L * d));
        EXPECT_EQ(u128_str(flops_ffn(in)), u128_str(6 * L * d * in.d_ff_ratio * d));
        EXPECT_EQ(u128_str(flops_kha(in)), u128_str(6 * L * d * d / in.n));
    }
}

TEST(Flops, QuadraticTermScalesAsExpected) {
    // With L fixed, mha(2d) - 8*L*(2d)^2 must equal twice the linear-in-d
    // remainder of mha(d).
    FlopsInput a;
    a.L = 512;
    a.d = 256;
    a.n = 8;
    FlopsInput b = a;
    b.d = 512;
    const unsigned __int128 quad_a = 8 * (unsigned __int128)a.L * a.d * a.d;
    const unsigned __int128 quad_b = 8 * (unsigned __int128)b.L * b.d * b.d;
    EXPECT_EQ(u128_str(quad_b), u128_str(4 * quad_a));
    EXPECT_EQ(u128_str(flops_mha(b) - quad_b), u128_str(2 * (flops_mha(a) - quad_a)));
}

TEST(Flops, KhaShrinksWithHeadCount) {
    FlopsInput in;
    in.L = 128;
    in.d = 64;
    in.n = 1;
    const unsigned __int128 base = flops_kha(in);
    in.n = 2;
    EXPECT_EQ(u128_str(flops_kha(in)), u128_str(base / 2));
    in.n = 64;
    EXPECT_EQ(u128_str(flops_kha(in)), u128_str(base / 64));
}

TEST(Flops, RejectsZeroDimensions) {
    FlopsInput in;
    in.L = 0;
    in.d = 4;
    in.n = 1;
    EXPECT_THROW(in.validate(), config_error);
    in.L = 4;
    in.d = 0;
    EXPECT_THROW(in.validate(), config_error);
    in.d = 4;
    in.n = 0;
    EXPECT_THROW(flops_kha(in), config_error);
    in.n = 1;
    in.d_ff_ratio = 0;
    EXPECT_THROW(flops_ffn(in), config_error);
}

TEST(U128Str, HandlesBoundaries) {
    EXPECT_EQ(u128_str(0), "0");
    EXPECT_EQ(u128_str(1), "1");
    EXPECT_EQ(u128_str(10), "10");
    unsigned __int128 big = 1;
    for (int i = 0; i < 38; ++i) big *= 10;
    EXPECT_EQ(u128_str(big - 1), std::string(38, '9'));
}
