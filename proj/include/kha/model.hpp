#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kha/attention.hpp"
#include "kha/knocking.hpp"
#include "kha/ops.hpp"
#include "kha/tensor.hpp"

// Decoder-only byte-level language model: embedding, pre-norm blocks of
// attention + gated FFN (d_ff = 3d by default), final norm, untied output
// head. Small on purpose; every step of the forward pass goes through the
// differentiable op set so the tape can replay it backwards.

namespace kha {

struct ModelConfig {
    std::size_t layers = 2;
    AttentionConfig attn;
    bool use_kha = false;
    KhaConfig kha;
    std::size_t d_ff = 0;  // 0 means 3*d
    std::size_t vocab = 256;

    std::size_t ffn_width() const { return d_ff == 0 ? 3 * attn.d : d_ff; }

    void validate() const {
        if (layers < 1) {
            throw config_error("model: layers must be >= 1");
        }
        if (vocab < 2) {
            throw config_error("model: vocab must be >= 2");
        }
        attn.validate();
        if (use_kha) {
            kha.validate();
            if (kha.kind != KnockKind::linear) {
                kha.shared_width(attn.d_k, attn.d_v);
            }
        }
    }
};

template <typename T>
struct LayerWeights {
    Tensor<T> attn_norm;  // [d]
    AttentionWeights<T> attn;
    KhaWeights<T> kha;  // tensors undefined when the model has no knocking
    Tensor<T> ffn_norm;           // [d]
    Tensor<T> w_ffn_up;           // [d, d_ff]
    Tensor<T> w_ffn_gate;         // [d, d_ff]
    Tensor<T> w_ffn_down;         // [d_ff, d]
};

template <typename T>
struct Model {
    ModelConfig cfg;
    Tensor<T> embedding;  // [vocab, d]
    std::vector<LayerWeights<T>> layers;
    Tensor<T> final_norm;  // [d]
    Tensor<T> lm_head;     // [d, vocab]

    // Base weights draw from one stream seeded by `seed`, knocking weights
    // from a separate per-layer stream. Two models built with the same seed
    // but different knocking configs therefore share identical base weights,
    // which is what makes baseline-vs-knocking comparisons meaningful.
    static Model init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        std::mt19937_64 rng(seed);
        const std::size_t d = cfg.attn.d, d_ff = cfg.ffn_width();
        m.embedding = Tensor<T>::randn(Shape{cfg.vocab, d}, rng, T(0.02));
        m.layers.reserve(cfg.layers);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            LayerWeights<T> lw;
            lw.attn_norm = Tensor<T>::ones(Shape{d});
            lw.attn = AttentionWeights<T>::random(cfg.attn, rng);
            lw.ffn_norm = Tensor<T>::ones(Shape{d});
            const T up_std = T(1) / std::sqrt(static_cast<T>(d));
            const T down_std = T(1) / std::sqrt(static_cast<T>(d_ff));
            lw.w_ffn_up = Tensor<T>::randn(Shape{d, d_ff}, rng, up_std);
            lw.w_ffn_gate = Tensor<T>::randn(Shape{d, d_ff}, rng, up_std);
            lw.w_ffn_down = Tensor<T>::randn(Shape{d_ff, d}, rng, down_std);
            if (cfg.use_kha) {
                const std::uint64_t knock_seed = (seed ^ 0xA24BAED4963EE407ull) + l;
                lw.kha = init_knocking<T>(cfg.kha, cfg.attn.d_k, cfg.attn.d_v, knock_seed);
            }
            m.layers.push_back(std::move(lw));
        }
        m.final_norm = Tensor<T>::ones(Shape{d});
        m.lm_head = Tensor<T>::randn(Shape{d, cfg.vocab}, rng,
                                     T(1) / std::sqrt(static_cast<T>(d)));
        return m;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("embedding", embedding);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            out.emplace_back(p + "attn_norm", layers[l].attn_norm);
            for (auto& [name, t] : layers[l].attn.named_params()) {
                out.emplace_back(p + "attn." + name, t);
            }
            for (auto& [name, t] : layers[l].kha.named_params()) {
                out.emplace_back(p + "kha." + name, t);
            }
            out.emplace_back(p + "ffn_norm", layers[l].ffn_norm);
            out.emplace_back(p + "ffn.w_up", layers[l].w_ffn_up);
            out.emplace_back(p + "ffn.w_gate", layers[l].w_ffn_gate);
            out.emplace_back(p + "ffn.w_down", layers[l].w_ffn_down);
        }
        out.emplace_back("final_norm", final_norm);
        out.emplace_back("lm_head", lm_head);
        return out;
    }

    void set_requires_grad(bool on) {
        for (auto& [name, t] : named_params()) t.set_requires_grad(on);
    }

    std::uint64_t param_count() const {
        std::uint64_t total = 0;
        for (const auto& [name, t] : named_params()) total += t.numel();
        return total;
    }

    // Logits [L, vocab] for one token window.
    Tensor<T> forward(Tape<T>* tape, const std::vector<std::int32_t>& tokens) const {
        if (tokens.empty()) {
            throw value_error("model: empty token window");
        }
        Tensor<T> h = embedding_rows(tape, embedding, tokens);
        for (const auto& lw : layers) {
            Tensor<T> a_in = rms_norm_rows(tape, h, lw.attn_norm, T(1e-6));
            const KhaWeights<T>* kw = cfg.use_kha ? &lw.kha : nullptr;
            Tensor<T> a_out = attention_forward(tape, a_in, lw.attn, cfg.attn, kw);
            h = add(tape, h, a_out);
            Tensor<T> f_in = rms_norm_rows(tape, h, lw.ffn_norm, T(1e-6));
            Tensor<T> up = matmul(tape, f_in, lw.w_ffn_up);
            Tensor<T> gate_pre = matmul(tape, f_in, lw.w_ffn_gate);
            Tensor<T> gate = mul(tape, gate_pre, sigmoid(tape, gate_pre));
            Tensor<T> f_out = matmul(tape, mul(tape, up, gate), lw.w_ffn_down);
            h = add(tape, h, f_out);
        }
        h = rms_norm_rows(tape, h, final_norm, T(1e-6));
        return matmul(tape, h, lm_head);
    }

    // Mean next-token cross entropy (nats) over a window of seq_len+1
    // tokens: positions [0, L) predict positions [1, L].
    Tensor<T> window_loss(Tape<T>* tape, const std::vector<std::int32_t>& window) const {
        if (window.size() < 2) {
            throw value_error("model: loss window needs at least 2 tokens");
        }
        std::vector<std::int32_t> inputs(window.begin(), window.end() - 1);
        std::vector<std::int32_t> targets(window.begin() + 1, window.end());
        Tensor<T> logits = forward(tape, inputs);
        return cross_entropy_rows(tape, logits, targets);
    }
};

}  // namespace kha
