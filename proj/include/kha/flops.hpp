#pragma once

#include <cstdint>
#include <string>

#include "kha/tensor.hpp"

// Per-layer training FLOP counts for a transformer layer of width d over a
// sequence of length L with n heads and d_ff = d_ff_ratio * d:
//   attention      8*L*d^2 + 4*L^2*d
//   feed-forward   6*L*d*d_ff            (18*L*d^2 at the default ratio)
//   knocking       6*L*d^2 / n
// Counts use 128-bit intermediates; realistic L and d overflow 64-bit
// products mid-formula.

namespace kha {

struct FlopsInput {
    std::uint64_t L = 0;
    std::uint64_t d = 0;
    std::uint64_t n = 0;
    std::uint64_t d_ff_ratio = 3;

    void validate() const {
        if (L == 0 || d == 0 || n == 0 || d_ff_ratio == 0) {
            throw config_error("flops: L, d, n, d_ff_ratio must all be positive");
        }
    }
};

struct FlopsReport {
    unsigned __int128 mha = 0;
    unsigned __int128 ffn = 0;
    unsigned __int128 total = 0;
    unsigned __int128 kha = 0;
    double kha_over_total = 0.0;
    double kha_over_mha = 0.0;
};

inline unsigned __int128 flops_mha(const FlopsInput& in) {
    in.validate();
    const unsigned __int128 L = in.L, d = in.d;
    return 8 * L * d * d + 4 * L * L * d;
}

inline unsigned __int128 flops_ffn(const FlopsInput& in) {
    in.validate();
    const unsigned __int128 L = in.L, d = in.d;
    return 6 * L * d * in.d_ff_ratio * d;
}

// 6*L*d^2/n truncates when n does not divide the product; power-of-two n
// and d (the operating points of interest) divide exactly.
inline unsigned __int128 flops_kha(const FlopsInput& in) {
    in.validate();
    const unsigned __int128 L = in.L, d = in.d;
    return 6 * L * d * d / in.n;
}

inline FlopsReport flops_report(const FlopsInput& in) {
    FlopsReport r;
    r.mha = flops_mha(in);
    r.ffn = flops_ffn(in);
    r.total = r.mha + r.ffn;
    r.kha = flops_kha(in);
    r.kha_over_total = static_cast<double>(r.kha) / static_cast<double>(r.total);
    r.kha_over_mha = static_cast<double>(r.kha) / static_cast<double>(r.mha);
    return r;
}

inline std::string u128_str(unsigned __int128 v) {
    if (v == 0) return "0";
    std::string out;
    while (v > 0) {
        out.insert(out.begin(), static_cast<char>('0' + static_cast<int>(v % 10)));
        v /= 10;
    }
    return out;
}

}  // namespace kha
