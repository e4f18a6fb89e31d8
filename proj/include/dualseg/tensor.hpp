#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "dualseg/common.hpp"

namespace dualseg {

// Dense row-major tensor with optional gradient buffer. Copying a Tensor
// copies a handle: data is shared, which is what the tape needs to
// accumulate gradients into leaves. Values are immutable after an op
// produces them; only grad buffers are written during backward.
//
// T is float for training and double for finite-difference checks.
template <typename T>
class Tensor {
    struct Storage {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;  // empty until ensure_grad()
        bool requires_grad = false;
    };

  public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : s_(std::make_shared<Storage>()) {
        for (int64_t d : shape)
            if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        s_->shape = std::move(shape);
        s_->data.assign(static_cast<size_t>(dualseg::numel(s_->shape)), T(0));
        s_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        for (auto& v : t.s_->data) v = value;
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        if (static_cast<int64_t>(values.size()) != t.numel())
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(t.shape()));
        t.s_->data = std::move(values);
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int64_t numel() const { return static_cast<int64_t>(s_->data.size()); }
    int64_t dim(size_t i) const { return s_->shape[i]; }
    size_t rank() const { return s_->shape.size(); }

    T* data() { return s_->data.data(); }
    const T* data() const { return s_->data.data(); }
    T item() const {
        if (numel() != 1) throw ValueError("item() on non-scalar tensor of shape " + shape_str(shape()));
        return s_->data[0];
    }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool v) { s_->requires_grad = v; }

    bool has_grad() const { return !s_->grad.empty(); }
    void ensure_grad() {
        if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    }
    void zero_grad() {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }
    T* grad() {
        ensure_grad();
        return s_->grad.data();
    }
    const std::vector<T>& grad_vec() const { return s_->grad; }

    // Deep copy of the values; grad is not copied.
    Tensor clone() const {
        Tensor t(s_->shape, s_->requires_grad);
        t.s_->data = s_->data;
        return t;
    }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    // Identity of the underlying buffer; used as a map key by the trainer.
    const void* storage_id() const { return s_.get(); }

  private:
    std::shared_ptr<Storage> s_;
};

// Reverse-mode tape. Ops append one node per recorded operation; recording
// order is a topological order by construction, and backward() replays the
// nodes in exact reverse. A tape is consumed by backward(); rebuilding it
// every step is the intended lifecycle.
template <typename T>
class Tape {
  public:
    explicit Tape(bool enabled = true) : enabled_(enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool enabled() const { return enabled_; }
    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void record(const char* op, std::function<void()> backward_fn) {
        if (!enabled_) return;
        nodes_.push_back(Node{op, std::move(backward_fn)});
    }

    void backward(Tensor<T> loss) {
        if (consumed_) throw ValueError("backward called on a consumed graph");
        if (loss.numel() != 1)
            throw ValueError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        consumed_ = true;
        loss.ensure_grad();
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();
    }

  private:
    struct Node {
        const char* op;
        std::function<void()> backward_fn;
    };
    std::vector<Node> nodes_;
    bool enabled_ = true;
    bool consumed_ = false;
};

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
    const T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(static_cast<double>(p[i])))
            throw NumericsError(std::string(op) + " produced a non-finite value");
    }
#else
    (void)t;
    (void)op;
#endif
}

}  // namespace detail

}  // namespace dualseg
