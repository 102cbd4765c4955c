#pragma once

// Central-difference gradient checking. The loss builder is called many
// times, so it must be a pure function of the parameters it closes over
// (batch-norm running buffers are fine: train-mode output depends only on
// batch statistics, so buffer drift across calls does not change the loss).

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "attnlab/tensor.hpp"

namespace attnlab {

template <typename T>
struct GradCheckResult {
    T max_rel_error = T(0);
    T analytic_at_worst = T(0);
    T numeric_at_worst = T(0);
    std::string worst;  // "name[i]" of the worst-matching element

    bool ok(T tol) const { return max_rel_error < tol; }
};

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

// Compares analytic gradients of a scalar loss against central differences
// over every element of every listed parameter.
template <typename T>
GradCheckResult<T> gradcheck(const std::function<Tensor<T>()>& loss_fn,
                             const std::vector<NamedParam<T>>& params, T step = T(1e-5)) {
    std::vector<Tensor<T>> handles;  // non-const views of the shared impls
    handles.reserve(params.size());
    for (const auto& p : params) handles.push_back(p.tensor);

    for (auto& h : handles) h.zero_grad();
    auto loss = loss_fn();
    check_shape(loss.numel() == 1, "gradcheck: loss must be scalar");
    backward(loss);

    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (const auto& h : handles)
        analytic.push_back(h.has_grad() ? h.impl()->grad : std::vector<T>(h.numel(), T(0)));

    GradCheckResult<T> result;
    NoGradGuard no_grad;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        T* data = handles[pi].data();
        const int64_t n = handles[pi].numel();
        for (int64_t i = 0; i < n; ++i) {
            const T saved = data[i];
            data[i] = saved + step;
            const T up = loss_fn().item();
            data[i] = saved - step;
            const T down = loss_fn().item();
            data[i] = saved;
            const T numeric = (up - down) / (T(2) * step);
            const T a = analytic[pi][static_cast<size_t>(i)];
            const T denom = std::max({std::abs(a), std::abs(numeric), static_cast<T>(1e-8)});
            const T rel = std::abs(a - numeric) / denom;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.analytic_at_worst = a;
                result.numeric_at_worst = numeric;
                result.worst = params[pi].name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return result;
}

}  // namespace attnlab
