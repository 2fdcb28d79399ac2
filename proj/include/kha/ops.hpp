#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "kha/gemm.hpp"
#include "kha/tensor.hpp"

// Differentiable ops. Every op takes the tape first; pass nullptr for a
// plain forward pass with no recording. An op records a backward closure
// only when the tape is present and some input tracks gradients.
// No broadcasting beyond scalar operands: binary tensor ops require equal
// shapes and throw shape_error otherwise.

namespace kha {

namespace detail {

template <typename T>
inline bool wants_grad(Tape<T>* tape, const Tensor<T>& a) {
    return tape != nullptr && a.requires_grad();
}

template <typename T>
inline bool wants_grad(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

template <typename T>
inline void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw shape_error(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    }
}

template <typename T>
inline void require_rank2(const char* op, const Tensor<T>& a) {
    if (a.rank() != 2) {
        throw shape_error(std::string(op) + ": expected rank-2 tensor, got " +
                          shape_str(a.shape()));
    }
}

template <typename T>
inline T stable_sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// ----------------------------- matmul -----------------------------

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank2("matmul", a);
    detail::require_rank2("matmul", b);
    if (a.cols() != b.rows()) {
        throw shape_error("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    Tensor<T> out(Shape{m, p});
    detail::gemm_nn(a.value().data(), b.value().data(), out.value().data(), m, k, p, false);
    if (detail::wants_grad(tape, a, b)) {
        out.set_requires_grad(true);
        auto ad = a.data(), bd = b.data(), od = out.data();
        tape->record([ad, bd, od, m, k, p] {
            const T* dc = od->grad.data();
            // dA += dC * B^T, dB += A^T * dC
            if (ad->requires_grad) {
                detail::gemm_nt(dc, bd->value.data(), ad->grad.data(), m, p, k, true);
            }
            if (bd->requires_grad) {
                detail::gemm_tn(ad->value.data(), dc, bd->grad.data(), k, m, p, true);
            }
        });
    }
    return out;
}

// A[m x k] * B[p x k]^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank2("matmul_nt", a);
    detail::require_rank2("matmul_nt", b);
    if (a.cols() != b.cols()) {
        throw shape_error("matmul_nt: trailing dimensions disagree: " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
    Tensor<T> out(Shape{m, p});
    detail::gemm_nt(a.value().data(), b.value().data(), out.value().data(), m, k, p, false);
    if (detail::wants_grad(tape, a, b)) {
        out.set_requires_grad(true);
        auto ad = a.data(), bd = b.data(), od = out.data();
        tape->record([ad, bd, od, m, k, p] {
            const T* dc = od->grad.data();
            // dA += dC * B, dB += dC^T * A
            if (ad->requires_grad) {
                detail::gemm_nn(dc, bd->value.data(), ad->grad.data(), m, p, k, true);
            }
            if (bd->requires_grad) {
                detail::gemm_tn(dc, ad->value.data(), bd->grad.data(), p, m, k, true);
            }
        });
    }
    return out;
}

// ----------------------------- elementwise -----------------------------

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a, b);
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + b.value()[i];
    if (detail::wants_grad(tape, a, b)) {
        out.set_requires_grad(true);
        auto ad = a.data(), bd = b.data(), od = out.data();
        tape->record([ad, bd, od, n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (ad->requires_grad) ad->grad[i] += od->grad[i];
                if (bd->requires_grad) bd->grad[i] += od->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a, b);
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] - b.value()[i];
    if (detail::wants_grad(tape, a, b)) {
        out.set_requires_grad(true);
        auto ad = a.data(), bd = b.data(), od = out.data();
        tape->record([ad, bd, od, n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (ad->requires_grad) ad->grad[i] += od->grad[i];
                if (bd->requires_grad) bd->grad[i] -= od->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a, b);
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * b.value()[i];
    if (detail::wants_grad(tape, a, b)) {
        out.set_requires_grad(true);
        auto ad = a.data(), bd = b.data(), od = out.data();
        tape->record([ad, bd, od, n] {
            for (std::size_t i = 0; i < n; ++i) {
                if (ad->requires_grad) ad->grad[i] += od->grad[i] * bd->value[i];
                if (bd->requires_grad) bd->grad[i] += od->grad[i] * ad->value[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * s;
    if (detail::wants_grad(tape, a)) {
        out.set_requires_grad(true);
        auto ad = a.data(), od = out.data();
        tape->record([ad, od, n, s] {
            for (std::size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * s;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = detail::stable_sigmoid(a.value()[i]);
    if (detail::wants_grad(tape, a)) {
        out.set_requires_grad(true);
        auto ad = a.data(), od = out.data();
        tape->record([ad, od, n] {
            for (std::size_t i = 0; i < n; ++i) {
                const T y = od->value[i];
                ad->grad[i] += od->grad[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// ----------------------------- softmax -----------------------------

// Position (i, j) is allowed iff j <= i + offset; offset 0 is standard
// causal masking. A negative offset can mask whole rows, which is an error.
struct CausalMask {
    std::ptrdiff_t offset = 0;
};

template <typename T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& a,
                       std::optional<CausalMask> mask = std::nullopt) {
    detail::require_rank2("softmax_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    Tensor<T> out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t allowed = n;
        if (mask) {
            const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(i) + mask->offset;
            allowed = hi < 0 ? 0
                             : std::min<std::size_t>(n, static_cast<std::size_t>(hi) + 1);
        }
        if (allowed == 0) {
            throw value_error("softmax_rows: row " + std::to_string(i) +
                              " has no unmasked columns");
        }
        const T* row = a.value().data() + i * n;
        T* orow = out.value().data() + i * n;
        T mx = row[0];
        for (std::size_t j = 1; j < allowed; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::size_t j = 0; j < allowed; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < allowed; ++j) orow[j] *= inv;
        for (std::size_t j = allowed; j < n; ++j) orow[j] = T(0);
    }
    if (detail::wants_grad(tape, a)) {
        out.set_requires_grad(true);
        auto ad = a.data(), od = out.data();
        tape->record([ad, od, m, n] {
            // dx_j = y_j * (dy_j - sum_k dy_k y_k); masked positions have y = 0.
            for (std::size_t i = 0; i < m; ++i) {
                const T* y = od->value.data() + i * n;
                const T* dy = od->grad.data() + i * n;
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                T* dx = ad->grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

// ----------------------------- slicing -----------------------------

template <typename T>
Tensor<T> slice_cols(Tape<T>* tape, const Tensor<T>& a, std::size_t col0, std::size_t ncols) {
    detail::require_rank2("slice_cols", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (col0 + ncols > n) {
        throw shape_error("slice_cols: [" + std::to_string(col0) + ", " +
                          std::to_string(col0 + ncols) + ") out of range for " +
                          shape_str(a.shape()));
    }
    Tensor<T> out(Shape{m, ncols});
    for (std::size_t i = 0; i < m; ++i) {
        const T* src = a.value().data() + i * n + col0;
        std::copy(src, src + ncols, out.value().data() + i * ncols);
    }
    if (detail::wants_grad(tape, a)) {
        out.set_requires_grad(true);
        auto ad = a.data(), od = out.data();
        tape->record([ad, od, m, n, col0, ncols] {
            for (std::size_t i = 0; i < m; ++i) {
                const T* dy = od->grad.data() + i * ncols;
                T* dx = ad->grad.data() + i * n + col0;
                for (std::size_t j = 0; j < ncols; ++j) dx[j] += dy[j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
        throw shape_error("concat_cols: no tensors given");
    }
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank2("concat_cols", p);
        if (p.rows() != m) {
            throw shape_error("concat_cols: row counts disagree: " + shape_str(parts[0].shape()) +
                              " vs " + shape_str(p.shape()));
        }
        total += p.cols();
    }
    Tensor<T> out(Shape{m, total});
    std::size_t off = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        const std::size_t c = p.cols();
        for (std::size_t i = 0; i < m; ++i) {
            std::copy(p.value().data() + i * c, p.value().data() + (i + 1) * c,
                      out.value().data() + i * total + off);
        }
        off += c;
        any_grad = any_grad || p.requires_grad();
    }
    if (tape && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorData<T>>> pds;
        pds.reserve(parts.size());
        for (const auto& p : parts) pds.push_back(p.data());
        auto od = out.data();
        tape->record([pds, od, m, total] {
            std::size_t off2 = 0;
            for (const auto& pd : pds) {
                const std::size_t c = pd->shape[1];
                if (pd->requires_grad) {
                    for (std::size_t i = 0; i < m; ++i) {
                        const T* dy = od->grad.data() + i * total + off2;
                        T* dx = pd->grad.data() + i * c;
                        for (std::size_t j = 0; j < c; ++j) dx[j] += dy[j];
                    }
                }
                off2 += c;
            }
        });
    }
    return out;
}

// ----------------------------- gathers -----------------------------

template <typename T>
Tensor<T> embedding_rows(Tape<T>* tape, const Tensor<T>& table,
                         const std::vector<std::int32_t>& ids) {
    detail::require_rank2("embedding_rows", table);
    const std::size_t v = table.rows(), d = table.cols(), L = ids.size();
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw value_error("embedding_rows: id " + std::to_string(id) +
                              " out of range for table " + shape_str(table.shape()));
        }
    }
    Tensor<T> out(Shape{L, d});
    for (std::size_t i = 0; i < L; ++i) {
        const T* src = table.value().data() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(src, src + d, out.value().data() + i * d);
    }
    if (detail::wants_grad(tape, table)) {
        out.set_requires_grad(true);
        auto td = table.data(), od = out.data();
        tape->record([td, od, ids, d, L] {
            for (std::size_t i = 0; i < L; ++i) {
                const T* dy = od->grad.data() + i * d;
                T* dst = td->grad.data() + static_cast<std::size_t>(ids[i]) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += dy[j];
            }
        });
    }
    return out;
}

// ----------------------------- row normalization -----------------------------

// y[i,:] = x[i,:] / sqrt(mean(x[i,:]^2) + eps), optionally scaled by a
// per-column gain. gain may be an undefined tensor (no gain).
template <typename T>
Tensor<T> rms_norm_rows(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& gain,
                        T eps = T(1e-6)) {
    detail::require_rank2("rms_norm_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (gain.defined() && (gain.rank() != 1 || gain.shape()[0] != n)) {
        throw shape_error("rms_norm_rows: gain " + shape_str(gain.shape()) +
                          " does not match row width " + std::to_string(n));
    }
    Tensor<T> out(Shape{m, n});
    std::vector<T> inv(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = a.value().data() + i * n;
        T ss = 0;
        for (std::size_t j = 0; j < n; ++j) ss += row[j] * row[j];
        inv[i] = T(1) / std::sqrt(ss / T(n) + eps);
        T* orow = out.value().data() + i * n;
        if (gain.defined()) {
            const T* g = gain.value().data();
            for (std::size_t j = 0; j < n; ++j) orow[j] = row[j] * inv[i] * g[j];
        } else {
            for (std::size_t j = 0; j < n; ++j) orow[j] = row[j] * inv[i];
        }
    }
    const bool track =
        tape && (a.requires_grad() || (gain.defined() && gain.requires_grad()));
    if (track) {
        out.set_requires_grad(true);
        auto ad = a.data(), od = out.data();
        auto gd = gain.defined() ? gain.data() : nullptr;
        tape->record([ad, od, gd, inv = std::move(inv), m, n] {
            for (std::size_t i = 0; i < m; ++i) {
                const T* x = ad->value.data() + i * n;
                const T* dy = od->grad.data() + i * n;
                const T r = inv[i];
                // s = sum_j dy_j g_j x_j drives the mean-square path.
                T s = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    const T g = gd ? gd->value[j] : T(1);
                    s += dy[j] * g * x[j];
                }
                if (ad->requires_grad) {
                    T* dx = ad->grad.data() + i * n;
                    const T coeff = r * r * r * s / T(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const T g = gd ? gd->value[j] : T(1);
                        dx[j] += dy[j] * g * r - coeff * x[j];
                    }
                }
                if (gd && gd->requires_grad) {
                    for (std::size_t j = 0; j < n; ++j) {
                        gd->grad[j] += dy[j] * x[j] * r;
                    }
                }
            }
        });
    }
    return out;
}

// ----------------------------- rotary embedding -----------------------------

// Rotates adjacent column pairs (2p, 2p+1) of row t by angle
// t * base^(-2p/n). Row index is the position; requires an even width.
template <typename T>
Tensor<T> rope_rows(Tape<T>* tape, const Tensor<T>& a, T base) {
    detail::require_rank2("rope_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (n % 2 != 0) {
        throw shape_error("rope_rows: width of " + shape_str(a.shape()) + " is not even");
    }
    const std::size_t half = n / 2;
    std::vector<T> cs(m * half), sn(m * half);
    for (std::size_t p = 0; p < half; ++p) {
        const T theta = std::pow(base, -T(2 * p) / T(n));
        for (std::size_t t = 0; t < m; ++t) {
            const T ang = T(t) * theta;
            cs[t * half + p] = std::cos(ang);
            sn[t * half + p] = std::sin(ang);
        }
    }
    Tensor<T> out(Shape{m, n});
    for (std::size_t t = 0; t < m; ++t) {
        const T* row = a.value().data() + t * n;
        T* orow = out.value().data() + t * n;
        for (std::size_t p = 0; p < half; ++p) {
            const T c = cs[t * half + p], s = sn[t * half + p];
            const T x = row[2 * p], y = row[2 * p + 1];
            orow[2 * p] = x * c - y * s;
            orow[2 * p + 1] = x * s + y * c;
        }
    }
    if (detail::wants_grad(tape, a)) {
        out.set_requires_grad(true);
        auto ad = a.data(), od = out.data();
        tape->record([ad, od, cs = std::move(cs), sn = std::move(sn), m, n, half] {
            // Backward is the inverse rotation applied to the output grads.
            for (std::size_t t = 0; t < m; ++t) {
                const T* dy = od->grad.data() + t * n;
                T* dx = ad->grad.data() + t * n;
                for (std::size_t p = 0; p < half; ++p) {
                    const T c = cs[t * half + p], s = sn[t * half + p];
                    const T gx = dy[2 * p], gy = dy[2 * p + 1];
                    dx[2 * p] += gx * c + gy * s;
                    dx[2 * p + 1] += -gx * s + gy * c;
                }
            }
        });
    }
    return out;
}

// ----------------------------- reductions -----------------------------

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a) {
    T total = 0;
    for (T v : a.value()) total += v;
    Tensor<T> out = Tensor<T>::scalar(total);
    if (detail::wants_grad(tape, a)) {
        out.set_requires_grad(true);
        auto ad = a.data(), od = out.data();
        tape->record([ad, od] {
            const T g = od->grad[0];
            for (T& dv : ad->grad) dv += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& a) {
    if (a.numel() == 0) {
        throw shape_error("mean: empty tensor");
    }
    const T invn = T(1) / T(a.numel());
    T total = 0;
    for (T v : a.value()) total += v;
    Tensor<T> out = Tensor<T>::scalar(total * invn);
    if (detail::wants_grad(tape, a)) {
        out.set_requires_grad(true);
        auto ad = a.data(), od = out.data();
        tape->record([ad, od, invn] {
            const T g = od->grad[0] * invn;
            for (T& dv : ad->grad) dv += g;
        });
    }
    return out;
}

// ----------------------------- cross entropy -----------------------------

// Mean next-token cross entropy in nats over rows of logits, fused with
// log-softmax for stability.
template <typename T>
Tensor<T> cross_entropy_rows(Tape<T>* tape, const Tensor<T>& logits,
                             const std::vector<std::int32_t>& targets) {
    detail::require_rank2("cross_entropy_rows", logits);
    const std::size_t m = logits.rows(), v = logits.cols();
    if (targets.size() != m) {
        throw shape_error("cross_entropy_rows: " + std::to_string(targets.size()) +
                          " targets for logits " + shape_str(logits.shape()));
    }
    for (std::int32_t t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw value_error("cross_entropy_rows: target " + std::to_string(t) +
                              " out of range for vocab " + std::to_string(v));
        }
    }
    T total = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = logits.value().data() + i * v;
        T mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        T se = 0;
        for (std::size_t j = 0; j < v; ++j) se += std::exp(row[j] - mx);
        total += mx + std::log(se) - row[static_cast<std::size_t>(targets[i])];
    }
    Tensor<T> out = Tensor<T>::scalar(total / T(m));
    if (detail::wants_grad(tape, logits)) {
        out.set_requires_grad(true);
        auto ld = logits.data(), od = out.data();
        tape->record([ld, od, targets, m, v] {
            const T g = od->grad[0] / T(m);
            for (std::size_t i = 0; i < m; ++i) {
                const T* row = ld->value.data() + i * v;
                T* drow = ld->grad.data() + i * v;
                T mx = row[0];
                for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                T se = 0;
                for (std::size_t j = 0; j < v; ++j) se += std::exp(row[j] - mx);
                const T inv = T(1) / se;
                for (std::size_t j = 0; j < v; ++j) {
                    T p = std::exp(row[j] - mx) * inv;
                    if (j == static_cast<std::size_t>(targets[i])) p -= T(1);
                    drow[j] += g * p;
                }
            }
        });
    }
    return out;
}

}  // namespace kha
