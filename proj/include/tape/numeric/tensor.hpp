// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor with optional gradient buffer and a tape-free
// reverse-mode autograd graph. A BasicTensor is a cheap handle: copies share
// storage, clone() makes a deep copy.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tape {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class BasicTensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    // Reads self.grad and accumulates into inputs that require grad.
    std::function<void(TensorImpl<T>& self)> backward;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty == absent
    bool requires_grad = false;
    std::shared_ptr<Node<T>> node;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

/// Whether newly created results record autograd history on this thread.
bool grad_enabled();

/// Disables graph recording for the lifetime of the guard (thread-local).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;
    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor scalar(T value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::int64_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::int64_t numel() const;

    std::span<T> data();
    std::span<const T> data() const;
    T item() const;
    T at(std::int64_t flat_index) const { return data()[static_cast<std::size_t>(flat_index)]; }

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const T> grad() const;
    std::span<T> mutable_grad();
    void zero_grad();
    void clear_grad();

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across calls.
    void backward();

    /// Deep copy of values; no graph, no grad.
    BasicTensor clone() const;
    /// Shares values with this tensor but is cut from the graph.
    BasicTensor detach() const;

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data().begin(), data().end());
        return BasicTensor<U>(shape(), std::move(out), requires_grad());
    }

    detail::TensorImpl<T>* impl() const { return impl_.get(); }
    const std::shared_ptr<detail::TensorImpl<T>>& impl_ptr() const { return impl_; }
    static BasicTensor from_impl(std::shared_ptr<detail::TensorImpl<T>> impl);

private:
    std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

/// Builds an op result. A graph node is attached only when recording is on
/// and at least one input requires grad.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data,
                           std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                           std::function<void(TensorImpl<T>&)> backward);

template <typename T>
inline bool wants_grad(const std::shared_ptr<TensorImpl<T>>& p) {
    return p && p->requires_grad;
}

}  // namespace detail

}  // namespace tape
