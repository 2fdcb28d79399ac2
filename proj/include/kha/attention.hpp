#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kha/knocking.hpp"
#include "kha/ops.hpp"
#include "kha/tensor.hpp"

// Multi-head attention over a single sequence, with grouped KV heads.
// g == n is plain MHA, g == 1 is MQA, anything between is GQA. Per-head
// pipeline: project, knocking transform, QK RMS norm, rotary embedding,
// scaled dot-product attention, concat, output projection. KV heads are
// shared by query heads only after all per-KV-head transforms, so knocking
// on V touches g streams, not n.

namespace kha {

struct AttentionConfig {
    std::size_t d = 0;    // model width
    std::size_t n = 0;    // query heads
    std::size_t g = 0;    // KV groups
    std::size_t d_k = 0;  // query/key head width
    std::size_t d_v = 0;  // value head width
    bool causal = true;
    bool use_qk_rmsnorm = false;
    bool use_rope = false;
    double rope_base = 10000.0;

    AttentionConfig() = default;

    AttentionConfig(std::size_t d_, std::size_t n_, std::size_t g_)
        : d(d_), n(n_), g(g_) {
        if (n == 0 || d % n != 0) {
            throw config_error("attention: d = " + std::to_string(d) +
                               " not divisible by n = " + std::to_string(n));
        }
        d_k = d_v = d / n;
        validate();
    }

    void validate() const {
        if (d == 0 || n == 0 || d_k == 0 || d_v == 0) {
            throw config_error("attention: zero dimension in config");
        }
        if (g < 1 || g > n || n % g != 0) {
            throw config_error("attention: bad KV group count g = " + std::to_string(g) +
                               " for n = " + std::to_string(n));
        }
        if (rope_base <= 0.0) {
            throw config_error("attention: rope_base must be positive");
        }
    }
};

template <typename T>
struct AttentionWeights {
    Tensor<T> w_q;  // [d, n*d_k]
    Tensor<T> w_k;  // [d, g*d_k]
    Tensor<T> w_v;  // [d, g*d_v]
    Tensor<T> w_o;  // [n*d_v, d]
    // RMS gains shared by all heads of the layer; defined only when
    // cfg.use_qk_rmsnorm is set.
    Tensor<T> q_gain;  // [d_k]
    Tensor<T> k_gain;  // [d_k]

    static AttentionWeights random(const AttentionConfig& cfg, std::mt19937_64& rng) {
        cfg.validate();
        AttentionWeights w;
        const T proj_std = T(1) / std::sqrt(static_cast<T>(cfg.d));
        w.w_q = Tensor<T>::randn(Shape{cfg.d, cfg.n * cfg.d_k}, rng, proj_std);
        w.w_k = Tensor<T>::randn(Shape{cfg.d, cfg.g * cfg.d_k}, rng, proj_std);
        w.w_v = Tensor<T>::randn(Shape{cfg.d, cfg.g * cfg.d_v}, rng, proj_std);
        w.w_o = Tensor<T>::randn(Shape{cfg.n * cfg.d_v, cfg.d}, rng,
                                 T(1) / std::sqrt(static_cast<T>(cfg.n * cfg.d_v)));
        if (cfg.use_qk_rmsnorm) {
            w.q_gain = Tensor<T>::ones(Shape{cfg.d_k});
            w.k_gain = Tensor<T>::ones(Shape{cfg.d_k});
        }
        return w;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out = {
            {"w_q", w_q}, {"w_k", w_k}, {"w_v", w_v}, {"w_o", w_o}};
        if (q_gain.defined()) out.emplace_back("q_gain", q_gain);
        if (k_gain.defined()) out.emplace_back("k_gain", k_gain);
        return out;
    }

    void set_requires_grad(bool on) {
        for (auto& [name, t] : named_params()) t.set_requires_grad(on);
    }

    void check_shapes(const AttentionConfig& cfg) const {
        auto expect = [](const Tensor<T>& t, const Shape& s, const char* name) {
            if (!t.defined() || t.shape() != s) {
                throw shape_error(std::string("attention: ") + name + " has shape " +
                                  (t.defined() ? shape_str(t.shape()) : "(undefined)") +
                                  ", expected " + shape_str(s));
            }
        };
        expect(w_q, Shape{cfg.d, cfg.n * cfg.d_k}, "w_q");
        expect(w_k, Shape{cfg.d, cfg.g * cfg.d_k}, "w_k");
        expect(w_v, Shape{cfg.d, cfg.g * cfg.d_v}, "w_v");
        expect(w_o, Shape{cfg.n * cfg.d_v, cfg.d}, "w_o");
        if (cfg.use_qk_rmsnorm) {
            expect(q_gain, Shape{cfg.d_k}, "q_gain");
            expect(k_gain, Shape{cfg.d_k}, "k_gain");
        }
    }
};

template <typename T>
struct ProjectedQKV {
    std::vector<Tensor<T>> q;  // n tensors [L, d_k]
    std::vector<Tensor<T>> k;  // g tensors [L, d_k]
    std::vector<Tensor<T>> v;  // g tensors [L, d_v]
};

template <typename T>
ProjectedQKV<T> project_qkv(Tape<T>* tape, const Tensor<T>& x, const AttentionWeights<T>& w,
                            const AttentionConfig& cfg) {
    cfg.validate();
    w.check_shapes(cfg);
    if (x.rank() != 2 || x.cols() != cfg.d) {
        throw shape_error("attention: input " +
                          (x.defined() ? shape_str(x.shape()) : std::string("(undefined)")) +
                          " does not match model width " + std::to_string(cfg.d));
    }
    Tensor<T> q_all = matmul(tape, x, w.w_q);
    Tensor<T> k_all = matmul(tape, x, w.w_k);
    Tensor<T> v_all = matmul(tape, x, w.w_v);
    ProjectedQKV<T> out;
    out.q.reserve(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        out.q.push_back(slice_cols(tape, q_all, i * cfg.d_k, cfg.d_k));
    }
    out.k.reserve(cfg.g);
    out.v.reserve(cfg.g);
    for (std::size_t j = 0; j < cfg.g; ++j) {
        out.k.push_back(slice_cols(tape, k_all, j * cfg.d_k, cfg.d_k));
        out.v.push_back(slice_cols(tape, v_all, j * cfg.d_v, cfg.d_v));
    }
    return out;
}

template <typename T>
Tensor<T> qk_rmsnorm(Tape<T>* tape, const Tensor<T>& h, const Tensor<T>& gain) {
    return rms_norm_rows(tape, h, gain, T(1e-6));
}

template <typename T>
Tensor<T> sdpa(Tape<T>* tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
               bool causal) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw shape_error("sdpa: expected rank-2 q/k/v");
    }
    if (q.rows() == 0) {
        throw shape_error("sdpa: empty sequence");
    }
    if (q.cols() != k.cols() || k.rows() != v.rows()) {
        throw shape_error("sdpa: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                          ", v " + shape_str(v.shape()) + " disagree");
    }
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(q.cols()));
    Tensor<T> scores = scale(tape, matmul_nt(tape, q, k), inv_sqrt_dk);
    std::optional<CausalMask> mask;
    if (causal) mask = CausalMask{0};
    Tensor<T> probs = softmax_rows(tape, scores, mask);
    return matmul(tape, probs, v);
}

// Full layer forward. kha == nullptr runs the plain baseline; the knocking
// transform slots in between projection and QK norm.
template <typename T>
Tensor<T> attention_forward(Tape<T>* tape, const Tensor<T>& x, const AttentionWeights<T>& w,
                            const AttentionConfig& cfg, const KhaWeights<T>* kha = nullptr) {
    ProjectedQKV<T> p = project_qkv(tape, x, w, cfg);
    const std::size_t heads_per_group = cfg.n / cfg.g;
    for (std::size_t i = 0; i < cfg.n; ++i) {
        if (kha) p.q[i] = knock_stream(tape, p.q[i], KnockSite::q, *kha);
        if (cfg.use_qk_rmsnorm) p.q[i] = qk_rmsnorm(tape, p.q[i], w.q_gain);
        if (cfg.use_rope) p.q[i] = rope_rows(tape, p.q[i], static_cast<T>(cfg.rope_base));
    }
    for (std::size_t j = 0; j < cfg.g; ++j) {
        if (kha) {
            p.k[j] = knock_stream(tape, p.k[j], KnockSite::k, *kha);
            p.v[j] = knock_stream(tape, p.v[j], KnockSite::v, *kha);
        }
        if (cfg.use_qk_rmsnorm) p.k[j] = qk_rmsnorm(tape, p.k[j], w.k_gain);
        if (cfg.use_rope) p.k[j] = rope_rows(tape, p.k[j], static_cast<T>(cfg.rope_base));
    }
    std::vector<Tensor<T>> heads;
    heads.reserve(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        const std::size_t j = i / heads_per_group;
        heads.push_back(sdpa(tape, p.q[i], p.k[j], p.v[j], cfg.causal));
    }
    return matmul(tape, concat_cols(tape, heads), w.w_o);
}

// Folds linear knocking matrices into the projection weights so inference
// can drop the extra matmuls: each head slice of W_Q/W_K/W_V is
// right-multiplied by the shared T. Only the linear kind folds; mlp and
// gate are nonlinear in the projected stream.
template <typename T>
AttentionWeights<T> absorb_linear(const AttentionWeights<T>& w, const AttentionConfig& cfg,
                                  const KhaWeights<T>& kha) {
    cfg.validate();
    w.check_shapes(cfg);
    if (kha.config.kind != KnockKind::linear) {
        throw config_error(std::string("absorb: kind=") + to_string(kha.config.kind) +
                           " cannot be absorbed into projection weights");
    }
    auto fold = [](const Tensor<T>& wm, const Tensor<T>& t, std::size_t heads,
                   std::size_t hd) {
        Tensor<T> out(wm.shape());
        const std::size_t rows = wm.rows(), cols = wm.cols();
        // out[:, h*hd : (h+1)*hd] = wm[:, h*hd : (h+1)*hd] * t for each head h
        for (std::size_t r = 0; r < rows; ++r) {
            const T* src = wm.value().data() + r * cols;
            T* dst = out.value().data() + r * cols;
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t c = 0; c < hd; ++c) {
                    T acc = 0;
                    for (std::size_t k2 = 0; k2 < hd; ++k2) {
                        acc += src[h * hd + k2] * t.value()[k2 * hd + c];
                    }
                    dst[h * hd + c] = acc;
                }
            }
        }
        return out;
    };
    AttentionWeights<T> out = w;
    if (kha.config.on_q) out.w_q = fold(w.w_q, kha.t_q, cfg.n, cfg.d_k);
    if (kha.config.on_k) out.w_k = fold(w.w_k, kha.t_k, cfg.g, cfg.d_k);
    if (kha.config.on_v) out.w_v = fold(w.w_v, kha.t_v, cfg.g, cfg.d_v);
    return out;
}

}  // namespace kha
