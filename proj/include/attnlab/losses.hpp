#pragma once

// Training losses. Both are custom ops with hand-derived gradients; the
// finite-difference suite checks them like any other op.

#include <limits>
#include <vector>

#include "attnlab/tensor.hpp"

namespace attnlab {

namespace detail {

template <typename T>
T softplus(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// Cross-entropy against smoothed targets: 1-eps on the true class, eps/(N-1)
// on every other; mean over the batch.
template <typename T>
Tensor<T> cross_entropy_ls(const Tensor<T>& logits, const std::vector<int>& labels, T eps) {
    check_shape(logits.ndim() == 2, "cross_entropy_ls expects [B x N] logits");
    const int batch = logits.dim(0), classes = logits.dim(1);
    check_shape(static_cast<int>(labels.size()) == batch,
                "cross_entropy_ls: label count mismatch");
    check_shape(classes >= 2, "cross_entropy_ls needs at least 2 classes");
    check_shape(eps >= T(0) && eps < T(1), "cross_entropy_ls: eps must be in [0,1)");
    for (int l : labels)
        check_shape(l >= 0 && l < classes,
                    "cross_entropy_ls: label " + std::to_string(l) + " outside [0," +
                        std::to_string(classes) + ")");

    const T off_weight = eps / static_cast<T>(classes - 1);
    const T on_weight = T(1) - eps;
    const T* xd = logits.data();
    T total = T(0);
    for (int i = 0; i < batch; ++i) {
        const T* row = xd + static_cast<size_t>(i) * classes;
        T mx = row[0];
        for (int j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (int j = 0; j < classes; ++j) denom += std::exp(row[j] - mx);
        const T lse = mx + std::log(denom);
        T loss_i = T(0);
        for (int j = 0; j < classes; ++j) {
            const T target = j == labels[static_cast<size_t>(i)] ? on_weight : off_weight;
            loss_i -= target * (row[j] - lse);
        }
        total += loss_i;
    }
    auto out = Tensor<T>::scalar(total / static_cast<T>(batch));

    if (any_tracks_grad<T>({&logits})) {
        auto xi = logits.impl(), oi = out.impl();
        auto labels_copy = std::make_shared<std::vector<int>>(labels);
        attach_node(out, "cross_entropy_ls", {xi},
                    [xi, oi, labels_copy, batch, classes, on_weight, off_weight]() {
                        xi->ensure_grad();
                        const T g = oi->grad[0] / static_cast<T>(batch);
                        for (int i = 0; i < batch; ++i) {
                            const T* row = xi->data.data() + static_cast<size_t>(i) * classes;
                            T mx = row[0];
                            for (int j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
                            T denom = T(0);
                            for (int j = 0; j < classes; ++j) denom += std::exp(row[j] - mx);
                            for (int j = 0; j < classes; ++j) {
                                const T p = std::exp(row[j] - mx) / denom;
                                const T target = j == (*labels_copy)[static_cast<size_t>(i)]
                                                     ? on_weight
                                                     : off_weight;
                                xi->grad[static_cast<size_t>(i) * classes + j] +=
                                    g * (p - target);
                            }
                        }
                    });
    }
    return out;
}

// Circle loss over within-batch pairs. For anchor i with positive
// similarities s_p and negative similarities s_n:
//   alpha_p = max(0, 1+m-s_p),  alpha_n = max(0, s_n+m)
//   delta_p = 1-m,              delta_n = m
//   L_i = softplus( LSE_n(gamma*alpha_n*(s_n-delta_n))
//                 + LSE_p(-gamma*alpha_p*(s_p-delta_p)) )
// mean over anchors that have at least one positive and one negative. The
// gradient differentiates through alpha (it is a function of s, not a
// detached constant), so finite differences of this exact forward agree.
template <typename T>
Tensor<T> circle_loss(const Tensor<T>& features, const std::vector<int>& labels, T gamma, T m) {
    check_shape(features.ndim() == 2, "circle_loss expects [B x D] features");
    const int batch = features.dim(0);
    check_shape(static_cast<int>(labels.size()) == batch, "circle_loss: label count mismatch");
    check_shape(gamma > T(0), "circle_loss: gamma must be positive");
    check_shape(m > T(0) && m < T(1), "circle_loss: m must be in (0,1)");

    struct AnchorSums {
        T lse_n, lse_p;  // the two log-sum-exp terms
        bool valid;
    };
    const int d = features.dim(1);
    const T* fd = features.data();

    // Full similarity matrix S = F F^T.
    auto sim = std::make_shared<std::vector<T>>(static_cast<size_t>(batch) * batch, T(0));
    for (int i = 0; i < batch; ++i)
        for (int j = 0; j < batch; ++j) {
            T acc = T(0);
            const T* a = fd + static_cast<size_t>(i) * d;
            const T* b = fd + static_cast<size_t>(j) * d;
            for (int k = 0; k < d; ++k) acc += a[k] * b[k];
            (*sim)[static_cast<size_t>(i) * batch + j] = acc;
        }

    const T delta_p = T(1) - m, delta_n = m;
    auto anchor_of = [&](int i) {
        AnchorSums s{T(0), T(0), false};
        T max_n = -std::numeric_limits<T>::infinity();
        T max_p = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < batch; ++j) {
            if (j == i) continue;
            const T sv = (*sim)[static_cast<size_t>(i) * batch + j];
            if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
                const T alpha = std::max(T(0), T(1) + m - sv);
                max_p = std::max(max_p, -gamma * alpha * (sv - delta_p));
            } else {
                const T alpha = std::max(T(0), sv + m);
                max_n = std::max(max_n, gamma * alpha * (sv - delta_n));
            }
        }
        if (!std::isfinite(static_cast<double>(max_n)) ||
            !std::isfinite(static_cast<double>(max_p)))
            return s;  // lacks a positive or a negative
        T sum_n = T(0), sum_p = T(0);
        for (int j = 0; j < batch; ++j) {
            if (j == i) continue;
            const T sv = (*sim)[static_cast<size_t>(i) * batch + j];
            if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
                const T alpha = std::max(T(0), T(1) + m - sv);
                sum_p += std::exp(-gamma * alpha * (sv - delta_p) - max_p);
            } else {
                const T alpha = std::max(T(0), sv + m);
                sum_n += std::exp(gamma * alpha * (sv - delta_n) - max_n);
            }
        }
        s.lse_n = max_n + std::log(sum_n);
        s.lse_p = max_p + std::log(sum_p);
        s.valid = true;
        return s;
    };

    int valid = 0;
    T total = T(0);
    for (int i = 0; i < batch; ++i) {
        const auto s = anchor_of(i);
        if (!s.valid) continue;
        ++valid;
        total += detail::softplus(s.lse_n + s.lse_p);
    }
    check_shape(valid > 0, "circle_loss: batch has no anchor with both a positive and a "
                           "negative pair");
    auto out = Tensor<T>::scalar(total / static_cast<T>(valid));

    if (any_tracks_grad<T>({&features})) {
        auto fi = features.impl(), oi = out.impl();
        auto labels_copy = std::make_shared<std::vector<int>>(labels);
        attach_node(
            out, "circle_loss", {fi},
            [fi, oi, labels_copy, sim, batch, d, gamma, m, delta_p, delta_n, valid]() {
                const auto& labs = *labels_copy;
                // dL/dS, then dL/dF = (dS + dS^T) F.
                std::vector<T> dsim(static_cast<size_t>(batch) * batch, T(0));
                const T gout = oi->grad[0] / static_cast<T>(valid);
                for (int i = 0; i < batch; ++i) {
                    // Recompute the two LSEs for anchor i.
                    T max_n = -std::numeric_limits<T>::infinity();
                    T max_p = -std::numeric_limits<T>::infinity();
                    for (int j = 0; j < batch; ++j) {
                        if (j == i) continue;
                        const T sv = (*sim)[static_cast<size_t>(i) * batch + j];
                        if (labs[static_cast<size_t>(j)] == labs[static_cast<size_t>(i)]) {
                            const T alpha = std::max(T(0), T(1) + m - sv);
                            max_p = std::max(max_p, -gamma * alpha * (sv - delta_p));
                        } else {
                            const T alpha = std::max(T(0), sv + m);
                            max_n = std::max(max_n, gamma * alpha * (sv - delta_n));
                        }
                    }
                    if (!std::isfinite(static_cast<double>(max_n)) ||
                        !std::isfinite(static_cast<double>(max_p)))
                        continue;
                    T sum_n = T(0), sum_p = T(0);
                    for (int j = 0; j < batch; ++j) {
                        if (j == i) continue;
                        const T sv = (*sim)[static_cast<size_t>(i) * batch + j];
                        if (labs[static_cast<size_t>(j)] == labs[static_cast<size_t>(i)]) {
                            const T alpha = std::max(T(0), T(1) + m - sv);
                            sum_p += std::exp(-gamma * alpha * (sv - delta_p) - max_p);
                        } else {
                            const T alpha = std::max(T(0), sv + m);
                            sum_n += std::exp(gamma * alpha * (sv - delta_n) - max_n);
                        }
                    }
                    const T lse_n = max_n + std::log(sum_n);
                    const T lse_p = max_p + std::log(sum_p);
                    const T sig = detail::sigmoid_scalar(lse_n + lse_p);
                    for (int j = 0; j < batch; ++j) {
                        if (j == i) continue;
                        const T sv = (*sim)[static_cast<size_t>(i) * batch + j];
                        T contrib;
                        if (labs[static_cast<size_t>(j)] == labs[static_cast<size_t>(i)]) {
                            const T alpha = std::max(T(0), T(1) + m - sv);
                            const T w =
                                std::exp(-gamma * alpha * (sv - delta_p) - max_p) / sum_p;
                            const T dalpha = (T(1) + m - sv) > T(0) ? T(-1) : T(0);
                            contrib = w * (-gamma) * (dalpha * (sv - delta_p) + alpha);
                        } else {
                            const T alpha = std::max(T(0), sv + m);
                            const T w =
                                std::exp(gamma * alpha * (sv - delta_n) - max_n) / sum_n;
                            const T dalpha = (sv + m) > T(0) ? T(1) : T(0);
                            contrib = w * gamma * (dalpha * (sv - delta_n) + alpha);
                        }
                        dsim[static_cast<size_t>(i) * batch + j] += gout * sig * contrib;
                    }
                }
                fi->ensure_grad();
                for (int i = 0; i < batch; ++i)
                    for (int j = 0; j < batch; ++j) {
                        const T dv = dsim[static_cast<size_t>(i) * batch + j] +
                                     dsim[static_cast<size_t>(j) * batch + i];
                        if (dv == T(0)) continue;
                        const T* fj = fi->data.data() + static_cast<size_t>(j) * d;
                        T* gi = fi->grad.data() + static_cast<size_t>(i) * d;
                        for (int k = 0; k < d; ++k) gi[k] += dv * fj[k];
                    }
            });
    }
    return out;
}

// Scalar reference evaluation of the circle-loss formula from a precomputed
// similarity matrix; the oracle the tensor implementation is checked against.
template <typename T>
T circle_loss_oracle(const std::vector<T>& sim, const std::vector<int>& labels, T gamma, T m) {
    const int batch = static_cast<int>(labels.size());
    const T delta_p = T(1) - m, delta_n = m;
    int valid = 0;
    T total = T(0);
    for (int i = 0; i < batch; ++i) {
        std::vector<T> terms_n, terms_p;
        for (int j = 0; j < batch; ++j) {
            if (j == i) continue;
            const T sv = sim[static_cast<size_t>(i) * batch + j];
            if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
                const T alpha = std::max(T(0), T(1) + m - sv);
                terms_p.push_back(-gamma * alpha * (sv - delta_p));
            } else {
                const T alpha = std::max(T(0), sv + m);
                terms_n.push_back(gamma * alpha * (sv - delta_n));
            }
        }
        if (terms_n.empty() || terms_p.empty()) continue;
        auto lse = [](const std::vector<T>& v) {
            T mx = v[0];
            for (T x : v) mx = std::max(mx, x);
            T s = T(0);
            for (T x : v) s += std::exp(x - mx);
            return mx + std::log(s);
        };
        total += detail::softplus(lse(terms_n) + lse(terms_p));
        ++valid;
    }
    if (valid == 0) throw ShapeError("circle_loss_oracle: no valid anchors");
    return total / static_cast<T>(valid);
}

}  // namespace attnlab
