#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "kha/ops.hpp"
#include "kha/tensor.hpp"

// Knocking-heads projections: transforms shared by every head of a layer,
// applied to per-head Q/K/V slices right after projection. Three kinds:
//   linear  h -> h * T                      (absorbable into W_Q/W_K/W_V)
//   mlp     v -> 2 * (v*W_up (*) sigmoid(v*W_gate)) * W_down
//   gate    v -> 2 * (v (*) sigmoid(v*W_gate))
// (*) is elementwise. No bias terms. Diagonal init (T = I, W_up = W_down = I,
// W_gate = 0) makes every kind an exact identity map, so a fresh knocking
// block never perturbs the baseline model.

namespace kha {

enum class KnockKind { linear, mlp, gate };
enum class KnockInit { diagonal, random_normal };
enum class KnockSite { q, k, v };

inline const char* to_string(KnockKind k) {
    switch (k) {
        case KnockKind::linear: return "linear";
        case KnockKind::mlp: return "mlp";
        case KnockKind::gate: return "gate";
    }
    return "?";
}

struct KhaConfig {
    KnockKind kind = KnockKind::linear;
    // Sites the transform attaches to. mlp/gate default to value-only; putting
    // them on q/k is an explicit opt-in kept for ablation runs.
    bool on_q = false;
    bool on_k = false;
    bool on_v = true;
    KnockInit init = KnockInit::diagonal;
    double random_std = 0.0;  // 0 picks the default 1/sqrt(d_k)

    static KhaConfig linear_qkv() { return {KnockKind::linear, true, true, true}; }
    static KhaConfig linear_v() { return {KnockKind::linear, false, false, true}; }
    static KhaConfig mlp_v() { return {KnockKind::mlp, false, false, true}; }
    static KhaConfig gate_v() { return {KnockKind::gate, false, false, true}; }

    bool on_site(KnockSite s) const {
        return s == KnockSite::q ? on_q : s == KnockSite::k ? on_k : on_v;
    }

    void validate() const {
        if (!on_q && !on_k && !on_v) {
            throw config_error("knocking: no sites configured");
        }
    }

    // mlp/gate share one weight set across their sites, so every configured
    // site must have the same head width.
    std::size_t shared_width(std::size_t d_k, std::size_t d_v) const {
        if ((on_q || on_k) && on_v && d_k != d_v) {
            throw config_error("knocking: " + std::string(to_string(kind)) +
                               " on q/k and v needs d_k == d_v, got " + std::to_string(d_k) +
                               " vs " + std::to_string(d_v));
        }
        return on_v ? d_v : d_k;
    }
};

template <typename T>
struct KhaWeights {
    KhaConfig config;
    // linear kind
    Tensor<T> t_q, t_k, t_v;
    // mlp kind (gate uses w_gate alone)
    Tensor<T> w_up, w_gate, w_down;

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        auto push = [&out](const char* name, const Tensor<T>& t) {
            if (t.defined()) out.emplace_back(name, t);
        };
        push("t_q", t_q);
        push("t_k", t_k);
        push("t_v", t_v);
        push("w_up", w_up);
        push("w_gate", w_gate);
        push("w_down", w_down);
        return out;
    }

    void set_requires_grad(bool on) {
        for (auto& [name, t] : named_params()) t.set_requires_grad(on);
    }
};

template <typename T>
KhaWeights<T> init_knocking(const KhaConfig& cfg, std::size_t d_k, std::size_t d_v,
                            std::uint64_t seed) {
    cfg.validate();
    KhaWeights<T> w;
    w.config = cfg;
    std::mt19937_64 rng(seed);
    const T std_dev = cfg.random_std > 0.0 ? static_cast<T>(cfg.random_std)
                                           : T(1) / std::sqrt(static_cast<T>(d_k));
    auto make = [&](std::size_t dim, bool zero_at_diag_init) {
        if (cfg.init == KnockInit::diagonal) {
            return zero_at_diag_init ? Tensor<T>::zeros(Shape{dim, dim})
                                     : Tensor<T>::identity(dim);
        }
        return Tensor<T>::randn(Shape{dim, dim}, rng, std_dev);
    };
    if (cfg.kind == KnockKind::linear) {
        if (cfg.on_q) w.t_q = make(d_k, false);
        if (cfg.on_k) w.t_k = make(d_k, false);
        if (cfg.on_v) w.t_v = make(d_v, false);
    } else {
        const std::size_t dim = cfg.shared_width(d_k, d_v);
        if (cfg.kind == KnockKind::mlp) {
            w.w_up = make(dim, false);
            w.w_gate = make(dim, true);
            w.w_down = make(dim, false);
        } else {
            w.w_gate = make(dim, true);
        }
    }
    return w;
}

template <typename T>
Tensor<T> kha_linear_apply(Tape<T>* tape, const Tensor<T>& h, const Tensor<T>& t) {
    return matmul(tape, h, t);
}

template <typename T>
Tensor<T> kha_mlp_apply(Tape<T>* tape, const Tensor<T>& v, const Tensor<T>& w_up,
                        const Tensor<T>& w_gate, const Tensor<T>& w_down) {
    Tensor<T> up = matmul(tape, v, w_up);
    Tensor<T> gate = sigmoid(tape, matmul(tape, v, w_gate));
    return scale(tape, matmul(tape, mul(tape, up, gate), w_down), T(2));
}

template <typename T>
Tensor<T> kha_gate_apply(Tape<T>* tape, const Tensor<T>& v, const Tensor<T>& w_gate) {
    Tensor<T> gate = sigmoid(tape, matmul(tape, v, w_gate));
    return scale(tape, mul(tape, v, gate), T(2));
}

// Applies the configured transform to one projected stream. Heads of the
// same layer pass the same KhaWeights here, which is what makes the
// projections shared: their gradients accumulate across all heads.
template <typename T>
Tensor<T> knock_stream(Tape<T>* tape, const Tensor<T>& h, KnockSite site,
                       const KhaWeights<T>& kw) {
    if (!kw.config.on_site(site)) return h;
    switch (kw.config.kind) {
        case KnockKind::linear: {
            const Tensor<T>& t = site == KnockSite::q ? kw.t_q
                                 : site == KnockSite::k ? kw.t_k
                                                        : kw.t_v;
            return kha_linear_apply(tape, h, t);
        }
        case KnockKind::mlp:
            return kha_mlp_apply(tape, h, kw.w_up, kw.w_gate, kw.w_down);
        case KnockKind::gate:
            return kha_gate_apply(tape, h, kw.w_gate);
    }
    throw config_error("knocking: unknown kind");
}

inline std::uint64_t knocking_param_count(const KhaConfig& cfg, std::size_t d_k,
                                          std::size_t d_v) {
    cfg.validate();
    const std::uint64_t kk = static_cast<std::uint64_t>(d_k) * d_k;
    const std::uint64_t vv = static_cast<std::uint64_t>(d_v) * d_v;
    switch (cfg.kind) {
        case KnockKind::linear:
            return (cfg.on_q ? kk : 0) + (cfg.on_k ? kk : 0) + (cfg.on_v ? vv : 0);
        case KnockKind::mlp: {
            const std::uint64_t w = cfg.shared_width(d_k, d_v);
            return 3 * w * w;
        }
        case KnockKind::gate: {
            const std::uint64_t w = cfg.shared_width(d_k, d_v);
            return w * w;
        }
    }
    throw config_error("knocking: unknown kind");
}

}  // namespace kha
