// SPDX-License-Identifier: Apache-2.0

#include "tape/numeric/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "tape/numeric/errors.hpp"

namespace tape {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw ShapeError("shape " + shape_str(shape) + " has a non-positive dimension");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {
thread_local bool t_grad_enabled = true;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
    const auto n = shape_numel(shape);
    if (static_cast<std::size_t>(n) != data.size()) {
        throw ShapeError("tensor data has " + std::to_string(data.size()) + " values but shape " +
                         shape_str(shape) + " needs " + std::to_string(n));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
    return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_impl(std::shared_ptr<detail::TensorImpl<T>> impl) {
    BasicTensor t;
    t.impl_ = std::move(impl);
    return t;
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
    if (!impl_) throw ShapeError("use of an undefined tensor");
    return impl_->shape;
}

template <typename T>
std::int64_t BasicTensor<T>::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

template <typename T>
std::int64_t BasicTensor<T>::numel() const {
    return static_cast<std::int64_t>(impl_ ? impl_->data.size() : 0);
}

template <typename T>
std::span<T> BasicTensor<T>::data() {
    if (!impl_) throw ShapeError("use of an undefined tensor");
    return impl_->data;
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
    if (!impl_) throw ShapeError("use of an undefined tensor");
    return impl_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
    return impl_ && impl_->requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool value) {
    if (!impl_) throw ShapeError("use of an undefined tensor");
    impl_->requires_grad = value;
    if (!value) impl_->grad.clear();
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
    return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
    if (!has_grad()) throw NumericError("tensor " + shape_str(shape()) + " has no gradient");
    return impl_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
    if (!impl_) throw ShapeError("use of an undefined tensor");
    return impl_->ensure_grad();
}

template <typename T>
void BasicTensor<T>::zero_grad() {
    if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
void BasicTensor<T>::clear_grad() {
    if (impl_) impl_->grad.clear();
}

template <typename T>
void BasicTensor<T>::backward() {
    if (numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
    if (!impl_->requires_grad) throw NumericError("backward() on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<detail::TensorImpl<T>*> order;
    std::unordered_set<detail::TensorImpl<T>*> seen;
    std::vector<std::pair<detail::TensorImpl<T>*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        const auto* n = node->node.get();
        if (n && next < n->inputs.size()) {
            auto* child = n->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    impl_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* t = *it;
        if (t->node && !t->grad.empty()) t->node->backward(*t);
    }
    for (auto* t : order) t->node.reset();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
    return BasicTensor(shape(), std::vector<T>(data().begin(), data().end()), false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    auto impl = std::make_shared<detail::TensorImpl<T>>();
    impl->shape = shape();
    impl->data = impl_->data;
    return from_impl(std::move(impl));
}

namespace detail {

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                           std::function<void(TensorImpl<T>&)> backward) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    const bool any = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const auto& p) {
                         return p && p->requires_grad;
                     });
    if (any) {
        impl->requires_grad = true;
        impl->node = std::make_shared<Node<T>>();
        impl->node->inputs = std::move(inputs);
        impl->node->backward = std::move(backward);
    }
    return BasicTensor<T>::from_impl(std::move(impl));
}

template BasicTensor<float> make_result(Shape, std::vector<float>, std::vector<std::shared_ptr<TensorImpl<float>>>,
                                        std::function<void(TensorImpl<float>&)>);
template BasicTensor<double> make_result(Shape, std::vector<double>,
                                         std::vector<std::shared_ptr<TensorImpl<double>>>,
                                         std::function<void(TensorImpl<double>&)>);

}  // namespace detail

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace tape
