#pragma once

// Forward operators with recorded backward passes. Convolution runs as
// im2col + matmul; the inner matmul kernels live in detail::. Everything is
// plain single-threaded loops unless intra_op_threads() is raised, in which
// case batch-parallel sections split work so that each output element is
// still produced by exactly one serial loop (bitwise-deterministic for any
// thread count).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>
#include <vector>

#include "attnlab/tensor.hpp"

namespace attnlab {

inline int& intra_op_threads() {
    static int threads = 1;
    return threads;
}

namespace detail {

template <typename Fn>
void parallel_for(int n, Fn&& fn) {
    int threads = std::min(intra_op_threads(), n);
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            int i;
            while ((i = next.fetch_add(1)) < n) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

// C[M x N] += A[M x K] * B[K x N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M x N] += A[M x K] * B^T, B stored [N x K]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[M x N] += A^T * B, A stored [K x M], B stored [K x N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const T* arow = a + static_cast<size_t>(p) * m;
        const T* brow = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

struct ConvDims {
    int batch, in_c, in_h, in_w;
    int out_c, kernel, stride, pad;
    int out_h, out_w;
    int cols_rows() const { return in_c * kernel * kernel; }
    int cols_cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* x, const ConvDims& d, T* cols) {
    const int k = d.kernel;
    for (int c = 0; c < d.in_c; ++c) {
        const T* plane = x + static_cast<size_t>(c) * d.in_h * d.in_w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                T* row = cols + (static_cast<size_t>(c) * k * k + static_cast<size_t>(ki) * k + kj) *
                                    d.cols_cols();
                for (int ho = 0; ho < d.out_h; ++ho) {
                    const int h = ho * d.stride - d.pad + ki;
                    T* out = row + static_cast<size_t>(ho) * d.out_w;
                    if (h < 0 || h >= d.in_h) {
                        std::fill(out, out + d.out_w, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<size_t>(h) * d.in_w;
                    for (int wo = 0; wo < d.out_w; ++wo) {
                        const int w = wo * d.stride - d.pad + kj;
                        out[wo] = (w >= 0 && w < d.in_w) ? src[w] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* cols, const ConvDims& d, T* x) {
    const int k = d.kernel;
    for (int c = 0; c < d.in_c; ++c) {
        T* plane = x + static_cast<size_t>(c) * d.in_h * d.in_w;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const T* row = cols + (static_cast<size_t>(c) * k * k +
                                       static_cast<size_t>(ki) * k + kj) *
                                          d.cols_cols();
                for (int ho = 0; ho < d.out_h; ++ho) {
                    const int h = ho * d.stride - d.pad + ki;
                    if (h < 0 || h >= d.in_h) continue;
                    T* dst = plane + static_cast<size_t>(h) * d.in_w;
                    const T* src = row + static_cast<size_t>(ho) * d.out_w;
                    for (int wo = 0; wo < d.out_w; ++wo) {
                        const int w = wo * d.stride - d.pad + kj;
                        if (w >= 0 && w < d.in_w) dst[w] += src[wo];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

namespace detail {

// Shapes must be equal, or b a per-channel [B,C,1,1] gate over a [B,C,H,W].
template <typename T>
bool is_channel_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
    return a.ndim() == 4 && b.ndim() == 4 && b.dim(2) == 1 && b.dim(3) == 1 &&
           (a.dim(2) != 1 || a.dim(3) != 1) && a.dim(0) == b.dim(0) && a.dim(1) == b.dim(1);
}

template <typename T>
void check_elementwise(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() == b.shape() || is_channel_broadcast(a, b)) return;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_elementwise(a, b, "add");
    auto out = Tensor<T>::zeros(a.shape());
    const T* ad = a.data();
    const T* bd = b.data();
    T* od = out.data();
    const int64_t n = a.numel();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i];
    } else {
        const int64_t spatial = static_cast<int64_t>(a.dim(2)) * a.dim(3);
        const int64_t channels = b.numel();
        for (int64_t c = 0; c < channels; ++c) {
            const T bv = bd[c];
            for (int64_t s = 0; s < spatial; ++s) od[c * spatial + s] = ad[c * spatial + s] + bv;
        }
    }
    if (any_tracks_grad<T>({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        attach_node(out, "add", {ai, bi}, [ai, bi, oi]() {
            const auto& g = oi->grad;
            if (ai->tracks_grad()) {
                ai->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
            }
            if (bi->tracks_grad()) {
                bi->ensure_grad();
                if (bi->data.size() == g.size()) {
                    for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
                } else {
                    const size_t spatial = g.size() / bi->data.size();
                    for (size_t c = 0; c < bi->data.size(); ++c) {
                        T acc = T(0);
                        for (size_t s = 0; s < spatial; ++s) acc += g[c * spatial + s];
                        bi->grad[c] += acc;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_elementwise(a, b, "mul");
    auto out = Tensor<T>::zeros(a.shape());
    const T* ad = a.data();
    const T* bd = b.data();
    T* od = out.data();
    const int64_t n = a.numel();
    const bool same = a.shape() == b.shape();
    if (same) {
        for (int64_t i = 0; i < n; ++i) od[i] = ad[i] * bd[i];
    } else {
        const int64_t spatial = static_cast<int64_t>(a.dim(2)) * a.dim(3);
        for (int64_t c = 0; c < b.numel(); ++c) {
            const T bv = bd[c];
            for (int64_t s = 0; s < spatial; ++s) od[c * spatial + s] = ad[c * spatial + s] * bv;
        }
    }
    if (any_tracks_grad<T>({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        attach_node(out, "mul", {ai, bi}, [ai, bi, oi, same]() {
            const auto& g = oi->grad;
            if (same) {
                if (ai->tracks_grad()) {
                    ai->ensure_grad();
                    for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->data[i];
                }
                if (bi->tracks_grad()) {
                    bi->ensure_grad();
                    for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->data[i];
                }
            } else {
                const size_t spatial = g.size() / bi->data.size();
                if (ai->tracks_grad()) {
                    ai->ensure_grad();
                    for (size_t c = 0; c < bi->data.size(); ++c)
                        for (size_t s = 0; s < spatial; ++s)
                            ai->grad[c * spatial + s] += g[c * spatial + s] * bi->data[c];
                }
                if (bi->tracks_grad()) {
                    bi->ensure_grad();
                    for (size_t c = 0; c < bi->data.size(); ++c) {
                        T acc = T(0);
                        for (size_t s = 0; s < spatial; ++s)
                            acc += g[c * spatial + s] * ai->data[c * spatial + s];
                        bi->grad[c] += acc;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    auto out = Tensor<T>::zeros(a.shape());
    const T* ad = a.data();
    T* od = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) od[i] = ad[i] * factor;
    if (any_tracks_grad<T>({&a})) {
        auto ai = a.impl(), oi = out.impl();
        attach_node(out, "scale", {ai}, [ai, oi, factor]() {
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * factor;
        });
    }
    return out;
}

// ---- matrix products -------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check_shape(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                "matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<T>::zeros({m, n});
    detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
    if (any_tracks_grad<T>({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        attach_node(out, "matmul", {ai, bi}, [ai, bi, oi, m, k, n]() {
            if (ai->tracks_grad()) {
                ai->ensure_grad();
                detail::gemm_nt(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
            }
            if (bi->tracks_grad()) {
                bi->ensure_grad();
                detail::gemm_tn(ai->data.data(), oi->grad.data(), bi->grad.data(), k, m, n);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    check_shape(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                "bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
    const int batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    auto out = Tensor<T>::zeros({batch, m, n});
    {
        const T* ad = a.data();
        const T* bd = b.data();
        T* od = out.data();
        detail::parallel_for(batch, [&](int i) {
            detail::gemm_nn(ad + static_cast<size_t>(i) * m * k, bd + static_cast<size_t>(i) * k * n,
                            od + static_cast<size_t>(i) * m * n, m, k, n);
        });
    }
    if (any_tracks_grad<T>({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        attach_node(out, "bmm", {ai, bi}, [ai, bi, oi, batch, m, k, n]() {
            for (int i = 0; i < batch; ++i) {
                const size_t ao = static_cast<size_t>(i) * m * k;
                const size_t bo = static_cast<size_t>(i) * k * n;
                const size_t go = static_cast<size_t>(i) * m * n;
                if (ai->tracks_grad()) {
                    ai->ensure_grad();
                    detail::gemm_nt(oi->grad.data() + go, bi->data.data() + bo,
                                    ai->grad.data() + ao, m, n, k);
                }
                if (bi->tracks_grad()) {
                    bi->ensure_grad();
                    detail::gemm_tn(ai->data.data() + ao, oi->grad.data() + go,
                                    bi->grad.data() + bo, k, m, n);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    check_shape(x.ndim() == 2 && w.ndim() == 2 && b.ndim() == 1 && x.dim(1) == w.dim(0) &&
                    w.dim(1) == b.dim(0),
                "linear: incompatible shapes " + shape_str(x.shape()) + ", " +
                    shape_str(w.shape()) + ", " + shape_str(b.shape()));
    const int batch = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
    auto out = Tensor<T>::zeros({batch, out_dim});
    detail::gemm_nn(x.data(), w.data(), out.data(), batch, in, out_dim);
    {
        T* od = out.data();
        const T* bd = b.data();
        for (int i = 0; i < batch; ++i)
            for (int j = 0; j < out_dim; ++j) od[static_cast<size_t>(i) * out_dim + j] += bd[j];
    }
    if (any_tracks_grad<T>({&x, &w, &b})) {
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
        attach_node(out, "linear", {xi, wi, bi}, [xi, wi, bi, oi, batch, in, out_dim]() {
            if (xi->tracks_grad()) {
                xi->ensure_grad();
                detail::gemm_nt(oi->grad.data(), wi->data.data(), xi->grad.data(), batch,
                                out_dim, in);
            }
            if (wi->tracks_grad()) {
                wi->ensure_grad();
                detail::gemm_tn(xi->data.data(), oi->grad.data(), wi->grad.data(), in, batch,
                                out_dim);
            }
            if (bi->tracks_grad()) {
                bi->ensure_grad();
                for (int i = 0; i < batch; ++i)
                    for (int j = 0; j < out_dim; ++j)
                        bi->grad[static_cast<size_t>(j)] +=
                            oi->grad[static_cast<size_t>(i) * out_dim + j];
            }
        });
    }
    return out;
}

// ---- convolution and pooling ----------------------------------------------

// floor_output selects the framework convention of flooring a fractional
// output size (needed by the standard ResNet shape walk on even inputs); the
// default demands an integral size and errors otherwise.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                 bool floor_output = false) {
    check_shape(x.ndim() == 4 && w.ndim() == 4, "conv2d expects 4-d input and weight");
    check_shape(w.dim(2) == w.dim(3), "conv2d: kernel must be square");
    const int k = w.dim(2);
    check_shape(k == 1 || k == 3 || k == 7, "conv2d: kernel size must be 1, 3 or 7");
    check_shape(x.dim(1) == w.dim(1), "conv2d: channel mismatch " + shape_str(x.shape()) +
                                          " vs " + shape_str(w.shape()));
    check_shape(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    detail::ConvDims d;
    d.batch = x.dim(0);
    d.in_c = x.dim(1);
    d.in_h = x.dim(2);
    d.in_w = x.dim(3);
    d.out_c = w.dim(0);
    d.kernel = k;
    d.stride = stride;
    d.pad = pad;
    const int hn = d.in_h + 2 * pad - k;
    const int wn = d.in_w + 2 * pad - k;
    check_shape(hn >= 0 && wn >= 0 &&
                    (floor_output || (hn % stride == 0 && wn % stride == 0)),
                "conv2d: non-integral output size for input " + shape_str(x.shape()) +
                    ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                    ", pad " + std::to_string(pad));
    d.out_h = hn / stride + 1;
    d.out_w = wn / stride + 1;

    auto out = Tensor<T>::zeros({d.batch, d.out_c, d.out_h, d.out_w});
    {
        const T* xd = x.data();
        const T* wd = w.data();
        T* od = out.data();
        const size_t x_stride = static_cast<size_t>(d.in_c) * d.in_h * d.in_w;
        const size_t o_stride = static_cast<size_t>(d.out_c) * d.out_h * d.out_w;
        detail::parallel_for(d.batch, [&](int b) {
            std::vector<T> cols(static_cast<size_t>(d.cols_rows()) * d.cols_cols());
            detail::im2col(xd + b * x_stride, d, cols.data());
            detail::gemm_nn(wd, cols.data(), od + b * o_stride, d.out_c, d.cols_rows(),
                            d.cols_cols());
        });
    }
    if (any_tracks_grad<T>({&x, &w})) {
        auto xi = x.impl(), wi = w.impl(), oi = out.impl();
        attach_node(out, "conv2d", {xi, wi}, [xi, wi, oi, d]() {
            const size_t x_stride = static_cast<size_t>(d.in_c) * d.in_h * d.in_w;
            const size_t o_stride = static_cast<size_t>(d.out_c) * d.out_h * d.out_w;
            std::vector<T> cols(static_cast<size_t>(d.cols_rows()) * d.cols_cols());
            std::vector<T> dcols(cols.size());
            if (xi->tracks_grad()) xi->ensure_grad();
            if (wi->tracks_grad()) wi->ensure_grad();
            for (int b = 0; b < d.batch; ++b) {
                const T* g = oi->grad.data() + b * o_stride;
                if (wi->tracks_grad()) {
                    detail::im2col(xi->data.data() + b * x_stride, d, cols.data());
                    detail::gemm_nt(g, cols.data(), wi->grad.data(), d.out_c, d.cols_cols(),
                                    d.cols_rows());
                }
                if (xi->tracks_grad()) {
                    std::fill(dcols.begin(), dcols.end(), T(0));
                    detail::gemm_tn(wi->data.data(), g, dcols.data(), d.cols_rows(), d.out_c,
                                    d.cols_cols());
                    detail::col2im_acc(dcols.data(), d, xi->grad.data() + b * x_stride);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int pad,
                    bool floor_output = false) {
    check_shape(x.ndim() == 4, "maxpool2d expects 4-d input");
    const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int hn = h + 2 * pad - k;
    const int wn = w + 2 * pad - k;
    check_shape(hn >= 0 && wn >= 0 &&
                    (floor_output || (hn % stride == 0 && wn % stride == 0)),
                "maxpool2d: non-integral output size");
    const int out_h = hn / stride + 1;
    const int out_w = wn / stride + 1;
    auto out = Tensor<T>::zeros({batch, channels, out_h, out_w});
    auto argmax = std::make_shared<std::vector<int64_t>>(out.numel());
    {
        const T* xd = x.data();
        T* od = out.data();
        int64_t* am = argmax->data();
        size_t o = 0;
        for (int b = 0; b < batch; ++b) {
            for (int c = 0; c < channels; ++c) {
                const T* plane = xd + (static_cast<size_t>(b) * channels + c) * h * w;
                const int64_t plane_off = (static_cast<int64_t>(b) * channels + c) * h * w;
                for (int ho = 0; ho < out_h; ++ho) {
                    for (int wo = 0; wo < out_w; ++wo, ++o) {
                        T best = -std::numeric_limits<T>::infinity();
                        int64_t best_idx = -1;
                        for (int ki = 0; ki < k; ++ki) {
                            const int hi = ho * stride - pad + ki;
                            if (hi < 0 || hi >= h) continue;
                            for (int kj = 0; kj < k; ++kj) {
                                const int wi = wo * stride - pad + kj;
                                if (wi < 0 || wi >= w) continue;
                                const T v = plane[static_cast<size_t>(hi) * w + wi];
                                if (v > best) {
                                    best = v;
                                    best_idx = plane_off + static_cast<int64_t>(hi) * w + wi;
                                }
                            }
                        }
                        od[o] = best;
                        am[o] = best_idx;
                    }
                }
            }
        }
    }
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "maxpool2d", {xi}, [xi, oi, argmax]() {
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                const int64_t idx = (*argmax)[i];
                if (idx >= 0) xi->grad[static_cast<size_t>(idx)] += oi->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    check_shape(x.ndim() == 4, "global_avg_pool expects 4-d input");
    const int batch = x.dim(0), channels = x.dim(1);
    const int64_t spatial = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    auto out = Tensor<T>::zeros({batch, channels, 1, 1});
    {
        const T* xd = x.data();
        T* od = out.data();
        for (int64_t bc = 0; bc < static_cast<int64_t>(batch) * channels; ++bc) {
            T acc = T(0);
            for (int64_t s = 0; s < spatial; ++s) acc += xd[bc * spatial + s];
            od[bc] = acc / static_cast<T>(spatial);
        }
    }
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "global_avg_pool", {xi}, [xi, oi, spatial]() {
            xi->ensure_grad();
            const T inv = T(1) / static_cast<T>(spatial);
            for (size_t bc = 0; bc < oi->grad.size(); ++bc) {
                const T g = oi->grad[bc] * inv;
                for (int64_t s = 0; s < spatial; ++s)
                    xi->grad[bc * static_cast<size_t>(spatial) + static_cast<size_t>(s)] += g;
            }
        });
    }
    return out;
}

// ---- activations -----------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    auto out = Tensor<T>::zeros(x.shape());
    const T* xd = x.data();
    T* od = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "relu", {xi}, [xi, oi]() {
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i)
                if (xi->data[i] > T(0)) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    auto out = Tensor<T>::zeros(x.shape());
    const T* xd = x.data();
    T* od = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T v = xd[i];
        if (v >= T(0)) {
            od[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            od[i] = e / (T(1) + e);
        }
    }
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "sigmoid", {xi}, [xi, oi]() {
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                const T s = oi->data[i];
                xi->grad[i] += oi->grad[i] * s * (T(1) - s);
            }
        });
    }
    return out;
}

// Max-shifted softmax along `axis`; rows sum to one.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    check_shape(axis >= 0 && axis < x.ndim(), "softmax: axis out of range");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    const int64_t n = x.dim(axis);

    auto out = Tensor<T>::zeros(x.shape());
    {
        const T* xd = x.data();
        T* od = out.data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * n * inner + in;
                T mx = xd[base];
                for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xd[base + i * inner]);
                T denom = T(0);
                for (int64_t i = 0; i < n; ++i) {
                    const T e = std::exp(xd[base + i * inner] - mx);
                    od[base + i * inner] = e;
                    denom += e;
                }
                const T inv = T(1) / denom;
                for (int64_t i = 0; i < n; ++i) od[base + i * inner] *= inv;
            }
        }
    }
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "softmax", {xi}, [xi, oi, outer, inner, n]() {
            xi->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * n * inner + in;
                    T dot = T(0);
                    for (int64_t i = 0; i < n; ++i)
                        dot += oi->grad[base + i * inner] * oi->data[base + i * inner];
                    for (int64_t i = 0; i < n; ++i)
                        xi->grad[base + i * inner] +=
                            oi->data[base + i * inner] * (oi->grad[base + i * inner] - dot);
                }
            }
        });
    }
    return out;
}

// ---- shape ------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
    check_shape(shape_numel(new_shape) == x.numel(),
                "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    auto out = Tensor<T>::from_data(std::move(new_shape), x.vec());
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "reshape", {xi}, [xi, oi]() {
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

// Swaps the last two axes of a 2-d or 3-d tensor.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    check_shape(x.ndim() == 2 || x.ndim() == 3, "transpose_last2 expects 2-d or 3-d input");
    const int batch = x.ndim() == 3 ? x.dim(0) : 1;
    const int m = x.dim(x.ndim() - 2);
    const int n = x.dim(x.ndim() - 1);
    std::vector<int> out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    auto out = Tensor<T>::zeros(out_shape);
    {
        const T* xd = x.data();
        T* od = out.data();
        for (int b = 0; b < batch; ++b) {
            const size_t off = static_cast<size_t>(b) * m * n;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    od[off + static_cast<size_t>(j) * m + i] = xd[off + static_cast<size_t>(i) * n + j];
        }
    }
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "transpose_last2", {xi}, [xi, oi, batch, m, n]() {
            xi->ensure_grad();
            for (int b = 0; b < batch; ++b) {
                const size_t off = static_cast<size_t>(b) * m * n;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        xi->grad[off + static_cast<size_t>(i) * n + j] +=
                            oi->grad[off + static_cast<size_t>(j) * m + i];
            }
        });
    }
    return out;
}

// ---- reductions -------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.vec()) acc += v;
    auto out = Tensor<T>::scalar(acc);
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "sum", {xi}, [xi, oi]() {
            xi->ensure_grad();
            const T g = oi->grad[0];
            for (auto& v : xi->grad) v += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.vec()) acc += v;
    const T inv = T(1) / static_cast<T>(x.numel());
    auto out = Tensor<T>::scalar(acc * inv);
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "mean", {xi}, [xi, oi, inv]() {
            xi->ensure_grad();
            const T g = oi->grad[0] * inv;
            for (auto& v : xi->grad) v += g;
        });
    }
    return out;
}

// Row-wise L2 normalization of a [N x D] matrix. The norm carries a small
// epsilon inside the square root; the backward is exact for that forward.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    check_shape(x.ndim() == 2, "l2_normalize_rows expects 2-d input");
    const int rows = x.dim(0), cols = x.dim(1);
    const T eps2 = static_cast<T>(1e-24);
    auto out = Tensor<T>::zeros(x.shape());
    auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    {
        const T* xd = x.data();
        T* od = out.data();
        for (int r = 0; r < rows; ++r) {
            const T* row = xd + static_cast<size_t>(r) * cols;
            T sq = eps2;
            for (int c = 0; c < cols; ++c) sq += row[c] * row[c];
            const T norm = std::sqrt(sq);
            (*norms)[static_cast<size_t>(r)] = norm;
            const T inv = T(1) / norm;
            for (int c = 0; c < cols; ++c) od[static_cast<size_t>(r) * cols + c] = row[c] * inv;
        }
    }
    if (any_tracks_grad<T>({&x})) {
        auto xi = x.impl(), oi = out.impl();
        attach_node(out, "l2_normalize_rows", {xi}, [xi, oi, norms, rows, cols]() {
            xi->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const size_t off = static_cast<size_t>(r) * cols;
                T dot = T(0);
                for (int c = 0; c < cols; ++c) dot += oi->grad[off + c] * oi->data[off + c];
                const T inv = T(1) / (*norms)[static_cast<size_t>(r)];
                for (int c = 0; c < cols; ++c)
                    xi->grad[off + c] += (oi->grad[off + c] - oi->data[off + c] * dot) * inv;
            }
        });
    }
    return out;
}

// ---- batch normalization ----------------------------------------------------

// Works on [B,C,H,W] or [B,C]. In train mode normalizes by batch statistics
// and updates the running buffers in place (momentum convention: new = (1-m)
// * old + m * batch); eval mode uses the running buffers. Running variance is
// stored unbiased.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                    T momentum = T(0.1), T eps = T(1e-5)) {
    check_shape(x.ndim() == 4 || x.ndim() == 2, "batchnorm expects 2-d or 4-d input");
    const int batch = x.dim(0);
    const int channels = x.dim(1);
    const int64_t spatial = x.ndim() == 4 ? static_cast<int64_t>(x.dim(2)) * x.dim(3) : 1;
    check_shape(gamma.numel() == channels && beta.numel() == channels &&
                    running_mean.numel() == channels && running_var.numel() == channels,
                "batchnorm: parameter size mismatch for " + std::to_string(channels) +
                    " channels");
    const int64_t n = static_cast<int64_t>(batch) * spatial;
    if (training)
        check_shape(n >= 2, "batchnorm: train mode needs at least 2 values per channel");

    auto mean_v = std::make_shared<std::vector<T>>(static_cast<size_t>(channels));
    auto inv_std_v = std::make_shared<std::vector<T>>(static_cast<size_t>(channels));
    const T* xd = x.data();
    auto idx = [channels, spatial](int b, int c, int64_t s) {
        return (static_cast<size_t>(b) * channels + static_cast<size_t>(c)) *
                   static_cast<size_t>(spatial) +
               static_cast<size_t>(s);
    };
    if (training) {
        for (int c = 0; c < channels; ++c) {
            T acc = T(0);
            for (int b = 0; b < batch; ++b)
                for (int64_t s = 0; s < spatial; ++s) acc += xd[idx(b, c, s)];
            const T mu = acc / static_cast<T>(n);
            T var = T(0);
            for (int b = 0; b < batch; ++b)
                for (int64_t s = 0; s < spatial; ++s) {
                    const T d = xd[idx(b, c, s)] - mu;
                    var += d * d;
                }
            var /= static_cast<T>(n);
            (*mean_v)[static_cast<size_t>(c)] = mu;
            (*inv_std_v)[static_cast<size_t>(c)] = T(1) / std::sqrt(var + eps);
            running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mu;
            const T unbiased = var * static_cast<T>(n) / static_cast<T>(n - 1);
            running_var.data()[c] =
                (T(1) - momentum) * running_var.data()[c] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < channels; ++c) {
            (*mean_v)[static_cast<size_t>(c)] = running_mean.data()[c];
            (*inv_std_v)[static_cast<size_t>(c)] = T(1) / std::sqrt(running_var.data()[c] + eps);
        }
    }

    auto out = Tensor<T>::zeros(x.shape());
    {
        T* od = out.data();
        const T* gd = gamma.data();
        const T* bd = beta.data();
        for (int b = 0; b < batch; ++b)
            for (int c = 0; c < channels; ++c) {
                const T mu = (*mean_v)[static_cast<size_t>(c)];
                const T is = (*inv_std_v)[static_cast<size_t>(c)];
                const T g = gd[c], be = bd[c];
                for (int64_t s = 0; s < spatial; ++s) {
                    const size_t i = idx(b, c, s);
                    od[i] = (xd[i] - mu) * is * g + be;
                }
            }
    }
    if (any_tracks_grad<T>({&x, &gamma, &beta})) {
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        attach_node(out, "batchnorm", {xi, gi, bi},
                    [xi, gi, bi, oi, mean_v, inv_std_v, training, batch, channels, spatial, n,
                     idx]() {
                        // Per channel: dbeta = sum g, dgamma = sum g*xhat; in train
                        // mode dx couples through the batch statistics.
                        for (int c = 0; c < channels; ++c) {
                            const T mu = (*mean_v)[static_cast<size_t>(c)];
                            const T is = (*inv_std_v)[static_cast<size_t>(c)];
                            T sum_g = T(0), sum_gx = T(0);
                            for (int b = 0; b < batch; ++b)
                                for (int64_t s = 0; s < spatial; ++s) {
                                    const size_t i = idx(b, c, s);
                                    const T xhat = (xi->data[i] - mu) * is;
                                    sum_g += oi->grad[i];
                                    sum_gx += oi->grad[i] * xhat;
                                }
                            if (gi->tracks_grad()) {
                                gi->ensure_grad();
                                gi->grad[static_cast<size_t>(c)] += sum_gx;
                            }
                            if (bi->tracks_grad()) {
                                bi->ensure_grad();
                                bi->grad[static_cast<size_t>(c)] += sum_g;
                            }
                            if (!xi->tracks_grad()) continue;
                            xi->ensure_grad();
                            const T gam = gi->data[static_cast<size_t>(c)];
                            if (training) {
                                const T inv_n = T(1) / static_cast<T>(n);
                                for (int b = 0; b < batch; ++b)
                                    for (int64_t s = 0; s < spatial; ++s) {
                                        const size_t i = idx(b, c, s);
                                        const T xhat = (xi->data[i] - mu) * is;
                                        xi->grad[i] += gam * is * inv_n *
                                                       (static_cast<T>(n) * oi->grad[i] - sum_g -
                                                        xhat * sum_gx);
                                    }
                            } else {
                                for (int b = 0; b < batch; ++b)
                                    for (int64_t s = 0; s < spatial; ++s) {
                                        const size_t i = idx(b, c, s);
                                        xi->grad[i] += gam * is * oi->grad[i];
                                    }
                            }
                        }
                    });
    }
    return out;
}

}  // namespace attnlab
