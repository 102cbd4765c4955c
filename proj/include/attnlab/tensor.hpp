#pragma once

// Dense n-dimensional tensor with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared TensorImplT. Operations (ops.hpp)
// record a GradNode on their output while grad mode is on; backward() walks
// the recorded graph once in reverse topological order and accumulates
// gradients into every participating tensor. Scalar type is a template
// parameter: float for experiments, double for gradient verification.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "attnlab/common.hpp"
#include "attnlab/rng.hpp"

namespace attnlab {

template <typename T>
struct TensorImplT;

template <typename T>
struct GradNode {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImplT<T>>> parents;
    // Reads the output's grad, accumulates into the parents' grads. Cleared
    // after it runs; a second backward over the same graph is an error.
    std::function<void()> backward;
};

template <typename T>
struct TensorImplT {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<GradNode<T>> node;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }

    bool tracks_grad() const { return requires_grad || node != nullptr; }
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

// Grad mode is thread-local so independent model instances can run on
// separate threads.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
public:
    using Impl = TensorImplT<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor ones(std::vector<int> shape, bool requires_grad = false) {
        return full(std::move(shape), T(1), requires_grad);
    }

    static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
        auto impl = make_impl(std::move(shape));
        std::fill(impl->data.begin(), impl->data.end(), value);
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                            bool requires_grad = false) {
        check_shape(shape_numel(shape) == static_cast<int64_t>(data.size()),
                    "tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
        auto impl = make_impl(std::move(shape));
        impl->data = std::move(data);
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return full({1}, value, requires_grad);
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, T stdev = T(1),
                        bool requires_grad = false) {
        auto impl = make_impl(std::move(shape));
        for (auto& v : impl->data) v = static_cast<T>(rng.normal()) * stdev;
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    static Tensor uniform(std::vector<int> shape, Rng& rng, T lo, T hi,
                          bool requires_grad = false) {
        auto impl = make_impl(std::move(shape));
        for (auto& v : impl->data)
            v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return impl_->numel(); }

    T* data() { return impl_->data.data(); }
    const T* data() const { return impl_->data.data(); }
    std::vector<T>& vec() { return impl_->data; }
    const std::vector<T>& vec() const { return impl_->data; }

    T item() const {
        check_shape(numel() == 1, "item() requires a single-element tensor");
        return impl_->data[0];
    }

    // Row-major indexing.
    T& at(std::initializer_list<int> idx) { return impl_->data[flat_index(idx)]; }
    T at(std::initializer_list<int> idx) const { return impl_->data[flat_index(idx)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }
    bool tracks_grad() const { return impl_ && impl_->tracks_grad(); }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<T>& grad() const {
        check_shape(has_grad(), "tensor has no gradient (run backward first)");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    // Deep copy of the data; the copy is a detached leaf.
    Tensor clone() const {
        auto impl = make_impl(impl_->shape);
        impl->data = impl_->data;
        impl->requires_grad = impl_->requires_grad;
        return Tensor(impl);
    }

    std::shared_ptr<Impl> impl() const { return impl_; }

private:
    static std::shared_ptr<Impl> make_impl(std::vector<int> shape) {
        for (int d : shape)
            check_shape(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
        auto impl = std::make_shared<Impl>();
        impl->data.resize(static_cast<size_t>(shape_numel(shape)));
        impl->shape = std::move(shape);
        return impl;
    }

    size_t flat_index(std::initializer_list<int> idx) const {
        check_shape(idx.size() == impl_->shape.size(), "index rank mismatch");
        size_t flat = 0;
        size_t d = 0;
        for (int i : idx) {
            flat = flat * static_cast<size_t>(impl_->shape[d]) + static_cast<size_t>(i);
            ++d;
        }
        return flat;
    }

    std::shared_ptr<Impl> impl_;
};

template <typename T>
void attach_node(Tensor<T>& out, const char* op,
                 std::vector<std::shared_ptr<TensorImplT<T>>> parents,
                 std::function<void()> backward) {
    auto node = std::make_shared<GradNode<T>>();
    node->op = op;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
}

template <typename T>
bool any_tracks_grad(std::initializer_list<const Tensor<T>*> ts) {
    if (!grad_mode()) return false;
    for (const auto* t : ts)
        if (t->tracks_grad()) return true;
    return false;
}

// Reverse-mode differentiation from a scalar root. Visits each recorded node
// exactly once; node closures are released as they run, so a second call on
// the same graph raises.
template <typename T>
void backward(const Tensor<T>& root) {
    check_shape(root.numel() == 1, "backward requires a scalar root, got shape " +
                                       shape_str(root.shape()));
    auto root_impl = root.impl();
    if (root_impl->node && !root_impl->node->backward)
        throw std::runtime_error("backward already ran on this graph; rebuild it first");

    // Post-order DFS over impls that carry nodes.
    std::vector<TensorImplT<T>*> order;
    std::unordered_set<TensorImplT<T>*> seen;
    struct Frame {
        TensorImplT<T>* impl;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    if (root_impl->node) {
        stack.push_back({root_impl.get(), 0});
        seen.insert(root_impl.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        auto& parents = f.impl->node->parents;
        if (f.next_parent < parents.size()) {
            TensorImplT<T>* p = parents[f.next_parent++].get();
            if (p->node && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.impl);
            stack.pop_back();
        }
    }

    root_impl->ensure_grad();
    root_impl->grad[0] = T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        GradNode<T>* node = (*it)->node.get();
        if (!node->backward)
            throw std::runtime_error("backward already ran on part of this graph");
        node->backward();
        node->backward = nullptr;
    }
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.vec())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
    if (!all_finite(t)) throw NumericError("non-finite values in " + what);
}

}  // namespace attnlab
