#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kha {

// ----------------------------- errors -----------------------------
class error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Dimension/shape preconditions (messages name the offending shapes).
class shape_error : public error {
  public:
    using error::error;
};

// Invalid values or unsupported variants (e.g. absorbing an MLP projection).
class value_error : public error {
  public:
    using error::error;
};

// Non-finite results, NaN losses, failed numerical verification.
class numeric_error : public error {
  public:
    using error::error;
};

// Bad config files, unknown keys, malformed checkpoints.
class config_error : public error {
  public:
    using error::error;
};

// ----------------------------- shape -----------------------------
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// ----------------------------- tensor -----------------------------
// Dense row-major storage, no strides/views. Rank 0 is a scalar (1 element).
// grad is allocated iff requires_grad and always matches value's length.
template <typename T>
struct TensorData {
    static_assert(std::is_floating_point_v<T>, "element type must be f32 or f64");
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
};

// Handle with shared ownership: copies alias the same storage, so a tensor
// recorded on a tape stays alive until the tape is cleared.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) {
        d_ = std::make_shared<TensorData<T>>();
        d_->shape = std::move(shape);
        d_->value.assign(shape_numel(d_->shape), fill);
    }

    Tensor(Shape shape, std::vector<T> values) {
        if (shape_numel(shape) != values.size()) {
            throw shape_error("tensor: " + shape_str(shape) + " holds " +
                              std::to_string(shape_numel(shape)) + " elements, got " +
                              std::to_string(values.size()));
        }
        d_ = std::make_shared<TensorData<T>>();
        d_->shape = std::move(shape);
        d_->value = std::move(values);
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }

    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

    static Tensor identity(std::size_t k) {
        Tensor t(Shape{k, k});
        for (std::size_t i = 0; i < k; ++i) t.d_->value[i * k + i] = T(1);
        return t;
    }

    static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev) {
        Tensor t(std::move(shape));
        std::normal_distribution<T> dist(T(0), stddev);
        for (T& v : t.d_->value) v = dist(rng);
        return t;
    }

    bool defined() const { return d_ != nullptr; }

    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t numel() const { return d_->value.size(); }

    std::size_t rows() const {
        require_rank2("rows");
        return d_->shape[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return d_->shape[1];
    }

    std::span<T> value() { return d_->value; }
    std::span<const T> value() const { return d_->value; }

    bool requires_grad() const { return d_ && d_->requires_grad; }

    Tensor& set_requires_grad(bool on) {
        d_->requires_grad = on;
        if (on) {
            d_->grad.assign(d_->value.size(), T(0));
        } else {
            d_->grad.clear();
        }
        return *this;
    }

    std::span<T> grad() {
        require_grad_buffer();
        return d_->grad;
    }
    std::span<const T> grad() const {
        require_grad_buffer();
        return d_->grad;
    }

    void zero_grad() {
        if (d_ && d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    T& at(std::size_t i, std::size_t j) {
        require_rank2("at");
        return d_->value[i * d_->shape[1] + j];
    }
    T at(std::size_t i, std::size_t j) const {
        require_rank2("at");
        return d_->value[i * d_->shape[1] + j];
    }

    T item() const {
        if (numel() != 1) {
            throw shape_error("item: tensor " + shape_str(d_->shape) + " is not a scalar");
        }
        return d_->value[0];
    }

    bool all_finite() const {
        for (T v : d_->value) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    // Identity of the underlying storage; used for head-sharing assertions.
    std::shared_ptr<TensorData<T>> data() const { return d_; }

  private:
    void require_rank2(const char* who) const {
        if (d_->shape.size() != 2) {
            throw shape_error(std::string(who) + ": tensor " + shape_str(d_->shape) +
                              " is not rank 2");
        }
    }
    void require_grad_buffer() const {
        if (!d_ || !d_->requires_grad) {
            throw value_error("grad: tensor does not track gradients");
        }
    }

    std::shared_ptr<TensorData<T>> d_;
};

// ----------------------------- tape -----------------------------
// Ordered record of backward closures for executed differentiable ops.
// backward() replays them in exact reverse execution order and accumulates
// (+=) into every reachable grad buffer; it does not clear the tape, and
// calling it twice without zeroing grads accumulates twice.
template <typename T>
class Tape {
  public:
    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) {
            throw shape_error("backward: loss " + shape_str(loss.shape()) + " is not a scalar");
        }
        if (loss.requires_grad()) {
            loss.data()->grad[0] += T(1);
        }
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            nodes_[i]();
        }
    }

  private:
    std::vector<std::function<void()>> nodes_;
};

}  // namespace kha
