#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kha/model.hpp"
#include "kha/tensor.hpp"

// Training harness. Everything here is deterministic for a fixed seed when
// KHA_THREADS=1: batch order, initialization, and the optimizer trajectory
// replay bitwise.

namespace kha {

enum class ElemType { f32, f64 };
enum class DecayMode { decoupled, coupled };

struct TrainConfig {
    double lr_peak = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    double warmup_frac = 0.05;
    double final_lr_frac = 0.10;
    double adam_eps = 1e-8;
    DecayMode decay_mode = DecayMode::decoupled;
    std::size_t steps = 200;
    std::size_t batch_tokens = 256;
    std::size_t seq_len = 128;
    std::uint64_t seed = 1;
    ElemType elem_type = ElemType::f32;

    void validate() const {
        if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) {
            throw config_error("train: warmup_frac must be in (0, 1)");
        }
        if (grad_clip <= 0.0) {
            throw config_error("train: grad_clip must be positive");
        }
        if (lr_peak <= 0.0) {
            throw config_error("train: lr_peak must be positive");
        }
        if (seq_len < 1) {
            throw config_error("train: seq_len must be >= 1");
        }
        if (batch_tokens < seq_len) {
            throw config_error("train: batch_tokens must be >= seq_len");
        }
    }
};

// Linear warmup from 0 over floor(warmup_frac*steps) steps, then cosine
// decay so the last step lands exactly on final_lr_frac*lr_peak.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.steps == 0 || step >= cfg.steps) {
        throw value_error("lr_at: step " + std::to_string(step) + " out of range");
    }
    const std::size_t warm = static_cast<std::size_t>(cfg.warmup_frac *
                                                      static_cast<double>(cfg.steps));
    if (warm > 0 && step < warm) {
        return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(warm);
    }
    const double lr_final = cfg.final_lr_frac * cfg.lr_peak;
    if (cfg.steps - 1 <= warm) {
        return cfg.lr_peak;
    }
    const double p = static_cast<double>(step - warm) / static_cast<double>(cfg.steps - 1 - warm);
    return lr_final + (cfg.lr_peak - lr_final) * 0.5 * (1.0 + std::cos(p * 3.14159265358979323846));
}

// Scales every gradient by max_norm/norm when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm. Throws on non-finite gradients,
// naming the offending tensor.
template <typename T>
double grad_clip_global(std::vector<std::pair<std::string, Tensor<T>>>& params,
                        double max_norm) {
    double sq = 0.0;
    for (auto& [name, t] : params) {
        for (T g : t.grad()) {
            const double gd = static_cast<double>(g);
            if (!std::isfinite(gd)) {
                throw numeric_error("grad_clip: non-finite gradient in " + name);
            }
            sq += gd * gd;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& [name, t] : params) {
            for (T& g : t.grad()) g *= s;
        }
    }
    return norm;
}

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::uint64_t t = 0;

    static AdamState init(const std::vector<std::pair<std::string, Tensor<T>>>& params) {
        AdamState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& [name, p] : params) {
            s.m.emplace_back(p.numel(), T(0));
            s.v.emplace_back(p.numel(), T(0));
        }
        return s;
    }
};

// One bias-corrected Adam update. Decoupled mode shrinks the parameter by
// lr*wd before the moment update is applied; coupled mode folds wd*param
// into the gradient instead.
template <typename T>
void adamw_step(std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState<T>& state,
                double lr, const TrainConfig& cfg) {
    if (state.m.size() != params.size()) {
        throw shape_error("adamw: state tracks " + std::to_string(state.m.size()) +
                          " tensors, got " + std::to_string(params.size()));
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T eps = static_cast<T>(cfg.adam_eps);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, p] = params[pi];
        std::span<T> value = p.value();
        std::span<const T> grad = std::as_const(p).grad();
        std::vector<T>& m = state.m[pi];
        std::vector<T>& v = state.v[pi];
        if (m.size() != value.size()) {
            throw shape_error("adamw: moment size mismatch for " + name);
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            T g = grad[i];
            if (!std::isfinite(static_cast<double>(g))) {
                throw numeric_error("adamw: non-finite gradient in " + name);
            }
            if (cfg.decay_mode == DecayMode::coupled) {
                g += static_cast<T>(cfg.weight_decay) * value[i];
            } else {
                value[i] -= static_cast<T>(lr * cfg.weight_decay) * value[i];
            }
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            const double mhat = static_cast<double>(m[i]) / bc1;
            const double vhat = static_cast<double>(v[i]) / bc2;
            value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + static_cast<double>(eps)));
        }
    }
}

// ----------------------------- data -----------------------------

inline std::vector<std::int32_t> tokenize_bytes(const std::string& text) {
    std::vector<std::int32_t> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c));
    return out;
}

// Deals non-overlapping windows of (seq_len + 1) tokens in an order shuffled
// per epoch. Window w covers tokens [w*(seq_len+1), (w+1)*(seq_len+1)).
class WindowSampler {
  public:
    WindowSampler(const std::vector<std::int32_t>& tokens, std::size_t seq_len,
                  std::uint64_t seed)
        : tokens_(tokens), width_(seq_len + 1), seed_(seed) {
        n_windows_ = tokens.size() / width_;
        if (n_windows_ == 0) {
            throw config_error("sampler: corpus has " + std::to_string(tokens.size()) +
                               " tokens, needs at least " + std::to_string(width_));
        }
        reshuffle();
    }

    std::vector<std::int32_t> next() {
        if (cursor_ == order_.size()) {
            epoch_ += 1;
            reshuffle();
        }
        const std::size_t w = order_[cursor_++];
        const auto beg = tokens_.begin() + static_cast<std::ptrdiff_t>(w * width_);
        return std::vector<std::int32_t>(beg, beg + static_cast<std::ptrdiff_t>(width_));
    }

    std::size_t window_count() const { return n_windows_; }

  private:
    void reshuffle() {
        order_.resize(n_windows_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::mt19937_64 rng((seed_ ^ 0xD1B54A32D192ED03ull) + epoch_);
        for (std::size_t i = n_windows_; i > 1; --i) {
            const std::size_t j = rng() % i;
            std::swap(order_[i - 1], order_[j]);
        }
        cursor_ = 0;
    }

    const std::vector<std::int32_t>& tokens_;
    std::size_t width_;
    std::uint64_t seed_;
    std::size_t n_windows_ = 0;
    std::size_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

// ----------------------------- run records -----------------------------

struct SpikeReport {
    std::size_t spike_count = 0;
    double spike_max = 0.0;
};

// Spike at step t iff loss_t exceeds the previous steps' EMA by more than
// threshold nats. The EMA is seeded with loss_0, so step 0 never spikes.
inline SpikeReport spike_metrics(const std::vector<double>& losses, double ema_decay = 0.99,
                                 double threshold = 0.1) {
    if (losses.empty()) {
        throw value_error("spike_metrics: empty loss series");
    }
    SpikeReport r;
    double ema = losses[0];
    for (std::size_t t = 1; t < losses.size(); ++t) {
        const double excess = losses[t] - ema;
        if (excess > threshold) {
            r.spike_count += 1;
            r.spike_max = std::max(r.spike_max, excess);
        }
        ema = ema_decay * ema + (1.0 - ema_decay) * losses[t];
    }
    return r;
}

struct RunRecord {
    std::vector<double> losses;      // nats/token, one per step
    std::vector<double> lrs;         // schedule value per step
    std::vector<double> grad_norms;  // pre-clip global norm per step
    std::size_t spike_count = 0;
    double spike_max = 0.0;
    double initial_loss = 0.0;
    double final_loss = 0.0;  // mean over the last 5% of steps (min 1)
    double elapsed_s = 0.0;
    std::uint64_t seed = 0;
};

inline void finalize_record(RunRecord& r) {
    if (r.losses.empty()) return;
    r.initial_loss = r.losses.front();
    const std::size_t tail = std::max<std::size_t>(1, r.losses.size() / 20);
    double s = 0.0;
    for (std::size_t i = r.losses.size() - tail; i < r.losses.size(); ++i) s += r.losses[i];
    r.final_loss = s / static_cast<double>(tail);
    const SpikeReport sp = spike_metrics(r.losses);
    r.spike_count = sp.spike_count;
    r.spike_max = sp.spike_max;
}

struct CompareReport {
    double final_a = 0.0;
    double final_b = 0.0;
    double delta_final = 0.0;  // b - a; negative favors b
    std::ptrdiff_t delta_spikes = 0;
    std::vector<double> loss_diff;  // per-step b - a
};

inline CompareReport compare_runs(const RunRecord& a, const RunRecord& b) {
    if (a.losses.size() != b.losses.size()) {
        throw value_error("compare: step counts differ: " + std::to_string(a.losses.size()) +
                          " vs " + std::to_string(b.losses.size()));
    }
    CompareReport r;
    r.final_a = a.final_loss;
    r.final_b = b.final_loss;
    r.delta_final = b.final_loss - a.final_loss;
    r.delta_spikes = static_cast<std::ptrdiff_t>(b.spike_count) -
                     static_cast<std::ptrdiff_t>(a.spike_count);
    r.loss_diff.reserve(a.losses.size());
    for (std::size_t i = 0; i < a.losses.size(); ++i) {
        r.loss_diff.push_back(b.losses[i] - a.losses[i]);
    }
    return r;
}

// ----------------------------- training loop -----------------------------

template <typename T>
RunRecord train_run(const ModelConfig& mcfg, const TrainConfig& tcfg,
                    const std::vector<std::int32_t>& corpus_tokens,
                    Model<T>* out_model = nullptr) {
    mcfg.validate();
    tcfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.seed = tcfg.seed;
    Model<T> model = Model<T>::init(mcfg, tcfg.seed);
    model.set_requires_grad(true);
    if (tcfg.steps > 0) {
        auto params = model.named_params();
        AdamState<T> state = AdamState<T>::init(params);
        WindowSampler sampler(corpus_tokens, tcfg.seq_len, tcfg.seed);
        const std::size_t windows_per_step = std::max<std::size_t>(1, tcfg.batch_tokens / tcfg.seq_len);
        double last_finite = 0.0;
        for (std::size_t step = 0; step < tcfg.steps; ++step) {
            for (auto& [name, p] : params) p.zero_grad();
            Tape<T> tape;
            std::vector<Tensor<T>> window_losses;
            window_losses.reserve(windows_per_step);
            for (std::size_t w = 0; w < windows_per_step; ++w) {
                window_losses.push_back(model.window_loss(&tape, sampler.next()));
            }
            Tensor<T> loss = window_losses[0];
            for (std::size_t w = 1; w < windows_per_step; ++w) {
                loss = add(&tape, loss, window_losses[w]);
            }
            loss = scale(&tape, loss, T(1) / static_cast<T>(windows_per_step));
            const double loss_val = static_cast<double>(loss.item());
            if (!std::isfinite(loss_val)) {
                throw numeric_error("train: non-finite loss at step " + std::to_string(step) +
                                    " (last finite " + std::to_string(last_finite) + ")");
            }
            last_finite = loss_val;
            tape.backward(loss);
            const double gnorm = grad_clip_global(params, tcfg.grad_clip);
            const double lr = lr_at(step, tcfg);
            adamw_step(params, state, lr, tcfg);
            rec.losses.push_back(loss_val);
            rec.lrs.push_back(lr);
            rec.grad_norms.push_back(gnorm);
        }
    }
    finalize_record(rec);
    rec.elapsed_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (out_model) *out_model = std::move(model);
    return rec;
}

}  // namespace kha
