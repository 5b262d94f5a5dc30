#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fimp/errors.hpp"
#include "fimp/rng.hpp"

namespace fimp {

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor. Copies are shallow: they share the value and
// gradient buffers, which is what lets backward closures accumulate into
// gradients visible to the caller. Values are treated as immutable once an
// op has consumed them; parameters are mutated only between tapes.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : p_(std::make_shared<Payload>()) {
        p_->shape = std::move(shape);
        p_->data.assign(count(p_->shape), T(0));
    }

    Tensor(std::vector<std::size_t> shape, std::vector<T> values) : p_(std::make_shared<Payload>()) {
        if (count(shape) != values.size())
            throw ShapeError("tensor init: shape " + shape_str(shape) + " wants " +
                             std::to_string(count(shape)) + " values, got " + std::to_string(values.size()));
        p_->shape = std::move(shape);
        p_->data = std::move(values);
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, T value) {
        Tensor t(std::move(shape));
        for (auto& x : t.data()) x = value;
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1, 1}, {value}); }

    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(shape));
        for (auto& x : t.data()) x = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(p_); }

    const std::vector<std::size_t>& shape() const { return p_->shape; }
    std::size_t rank() const { return p_->shape.size(); }
    std::size_t size() const { return p_->data.size(); }

    // 2D accessors; rank-1 tensors are treated as a single row.
    std::size_t rows() const { return rank() == 1 ? 1 : p_->shape[0]; }
    std::size_t cols() const { return rank() == 1 ? p_->shape[0] : p_->shape[rank() - 1]; }

    std::vector<T>& data() { return p_->data; }
    const std::vector<T>& data() const { return p_->data; }

    T& at(std::size_t r, std::size_t c) { return p_->data[r * cols() + c]; }
    T at(std::size_t r, std::size_t c) const { return p_->data[r * cols() + c]; }
    T& at(std::size_t i) { return p_->data[i]; }
    T at(std::size_t i) const { return p_->data[i]; }

    T item() const {
        if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
        return p_->data[0];
    }

    bool requires_grad() const { return p_ && p_->requires_grad; }

    void set_requires_grad(bool on) {
        p_->requires_grad = on;
        if (on && p_->grad.size() != p_->data.size()) p_->grad.assign(p_->data.size(), T(0));
    }

    std::vector<T>& grad() { return p_->grad; }
    const std::vector<T>& grad() const { return p_->grad; }

    void zero_grad() {
        if (p_) std::fill(p_->grad.begin(), p_->grad.end(), T(0));
    }

    // Identity of the underlying buffer; used to detect aliasing (e.g. self-attention).
    const void* buffer_id() const { return p_ ? static_cast<const void*>(p_->data.data()) : nullptr; }

    Tensor clone() const {
        Tensor t;
        t.p_ = std::make_shared<Payload>(*p_);
        return t;
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }

private:
    struct Payload {
        std::vector<std::size_t> shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Payload> p_;
};

// Reverse-mode tape. Ops append one closure per recorded operation; creation
// order is a topological order of the forward graph, so backward() just runs
// the closures in reverse. Confined to one thread; cleared per optimizer step.
template <class T>
class Tape {
public:
    void record(std::function<void()> back) { nodes_.push_back(std::move(back)); }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    void backward(Tensor<T>& loss) {
        if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad()) return;  // nothing recorded depends on parameters
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    static Tape*& current() {
        thread_local Tape* t = nullptr;
        return t;
    }

private:
    std::vector<std::function<void()>> nodes_;
};

// RAII guard making a tape the recording target for the current thread.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current()) { Tape<T>::current() = &tape; }
    ~TapeScope() { Tape<T>::current() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace fimp
