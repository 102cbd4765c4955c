// Op-level correctness: analytic gradients against central differences, and
// forward passes against independent scalar re-implementations.

#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "attnlab/gradcheck.hpp"
#include "attnlab/ops.hpp"

using namespace attnlab;

namespace {

using D = double;
using TD = Tensor<D>;
using LossFn = std::function<TD()>;

// Reduce any tensor to a scalar with uneven weights so every element of the
// output influences the loss differently (sum_all alone hides sign errors
// that cancel across elements).
TD weighted_sum(const TD& x) {
    std::vector<D> w(static_cast<size_t>(x.numel()));
    for (size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<D>(i % 7);
    auto weights = TD::from_data(x.shape(), w);
    return sum_all(mul(x, weights));
}

constexpr D kTol = 1e-6;  // double precision, tiny shapes: expect ~1e-9

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        Rng rng(seed);
        auto a = TD::randn({3, 4}, rng, 1.0, true);
        auto b = TD::randn({3, 4}, rng, 1.0, true);
        std::vector<NamedParam<D>> params{{"a", a}, {"b", b}};

        LossFn add_fn = [&] { return weighted_sum(add(a, b)); };
        CHECK(gradcheck<D>(add_fn, params).ok(kTol));
        LossFn mul_fn = [&] { return weighted_sum(mul(a, b)); };
        CHECK(gradcheck<D>(mul_fn, params).ok(kTol));
        LossFn relu_fn = [&] { return weighted_sum(relu(a)); };
        CHECK(gradcheck<D>(relu_fn, {{"a", a}}).ok(kTol));
        LossFn sig_fn = [&] { return weighted_sum(sigmoid(a)); };
        CHECK(gradcheck<D>(sig_fn, {{"a", a}}).ok(kTol));
        LossFn scale_fn = [&] { return weighted_sum(scale(a, D(2.5))); };
        CHECK(gradcheck<D>(scale_fn, {{"a", a}}).ok(kTol));
        LossFn mean_fn = [&] { return mean_all(mul(a, a)); };
        CHECK(gradcheck<D>(mean_fn, {{"a", a}}).ok(kTol));
    }
}

TEST_CASE("matmul family gradients cover non-square shapes") {
    // m != k != n so that transposition mistakes change shapes or values
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        Rng rng(seed);
        auto a = TD::randn({2, 5}, rng, 1.0, true);
        auto b = TD::randn({5, 3}, rng, 1.0, true);
        LossFn mm = [&] { return weighted_sum(matmul(a, b)); };
        CHECK(gradcheck<D>(mm, {{"a", a}, {"b", b}}).ok(kTol));

        auto ab = TD::randn({2, 3, 5}, rng, 1.0, true);
        auto bb = TD::randn({2, 5, 4}, rng, 1.0, true);
        LossFn bm = [&] { return weighted_sum(bmm(ab, bb)); };
        CHECK(gradcheck<D>(bm, {{"a", ab}, {"b", bb}}).ok(kTol));

        auto x = TD::randn({4, 5}, rng, 1.0, true);
        auto w = TD::randn({5, 3}, rng, 1.0, true);
        auto bias = TD::randn({3}, rng, 1.0, true);
        LossFn lin = [&] { return weighted_sum(linear(x, w, bias)); };
        CHECK(gradcheck<D>(lin, {{"x", x}, {"w", w}, {"bias", bias}}).ok(kTol));
    }
}

TEST_CASE("shape-moving op gradients") {
    Rng rng(11);
    auto a = TD::randn({2, 3, 4}, rng, 1.0, true);
    LossFn tr = [&] { return weighted_sum(transpose_last2(a)); };
    CHECK(gradcheck<D>(tr, {{"a", a}}).ok(kTol));
    LossFn rs = [&] { return weighted_sum(reshape(a, {6, 4})); };
    CHECK(gradcheck<D>(rs, {{"a", a}}).ok(kTol));

    auto x = TD::randn({2, 3, 2, 2}, rng, 1.0, true);
    LossFn gap = [&] { return weighted_sum(global_avg_pool(x)); };
    CHECK(gradcheck<D>(gap, {{"x", x}}).ok(kTol));
}

TEST_CASE("softmax gradient and row normalization") {
    Rng rng(5);
    auto x = TD::randn({2, 3, 4}, rng, 2.0, true);
    LossFn fn = [&] { return weighted_sum(softmax(x, 2)); };
    CHECK(gradcheck<D>(fn, {{"x", x}}).ok(kTol));

    NoGradGuard ng;
    auto s = softmax(x, 2);
    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 3; ++i) {
            D row = 0;
            for (int j = 0; j < 4; ++j) row += s.data()[(b * 3 + i) * 4 + j];
            CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
        }
}

TEST_CASE("l2_normalize_rows gradient and unit norms") {
    Rng rng(6);
    auto x = TD::randn({3, 5}, rng, 1.0, true);
    LossFn fn = [&] { return weighted_sum(l2_normalize_rows(x)); };
    CHECK(gradcheck<D>(fn, {{"x", x}}).ok(kTol));

    NoGradGuard ng;
    auto y = l2_normalize_rows(x);
    for (int i = 0; i < 3; ++i) {
        D n = 0;
        for (int j = 0; j < 5; ++j) n += y.data()[i * 5 + j] * y.data()[i * 5 + j];
        CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-10));
    }
}

// Six explicit loops; no im2col, no gemm. The implementation must match this.
static std::vector<D> conv2d_naive(const std::vector<D>& x, const std::vector<D>& w, int b,
                                   int in_c, int in_h, int in_w, int out_c, int k, int stride,
                                   int pad, int out_h, int out_w) {
    std::vector<D> y(static_cast<size_t>(b) * out_c * out_h * out_w, 0.0);
    for (int n = 0; n < b; ++n)
        for (int oc = 0; oc < out_c; ++oc)
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox) {
                    D acc = 0;
                    for (int ic = 0; ic < in_c; ++ic)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= in_h || ix < 0 || ix >= in_w) continue;
                                acc += x[((static_cast<size_t>(n) * in_c + ic) * in_h + iy) *
                                             in_w +
                                         ix] *
                                       w[((static_cast<size_t>(oc) * in_c + ic) * k + ky) * k +
                                         kx];
                            }
                    y[((static_cast<size_t>(n) * out_c + oc) * out_h + oy) * out_w + ox] = acc;
                }
    return y;
}

TEST_CASE("conv2d forward matches the naive six-loop form") {
    struct Case {
        int b, in_c, in_h, in_w, out_c, k, stride, pad;
    };
    for (const Case& c : {Case{2, 3, 7, 5, 4, 3, 1, 1}, Case{1, 2, 8, 6, 3, 3, 2, 1},
                          Case{2, 4, 5, 5, 2, 1, 1, 0}, Case{1, 3, 9, 9, 2, 7, 2, 3}}) {
        Rng rng(static_cast<uint64_t>(c.k * 100 + c.stride));
        auto x = TD::randn({c.b, c.in_c, c.in_h, c.in_w}, rng);
        auto w = TD::randn({c.out_c, c.in_c, c.k, c.k}, rng);
        auto y = conv2d(x, w, c.stride, c.pad, true);
        const int out_h = (c.in_h + 2 * c.pad - c.k) / c.stride + 1;
        const int out_w = (c.in_w + 2 * c.pad - c.k) / c.stride + 1;
        REQUIRE(y.dim(2) == out_h);
        REQUIRE(y.dim(3) == out_w);
        const auto ref = conv2d_naive(
            std::vector<D>(x.data(), x.data() + x.numel()),
            std::vector<D>(w.data(), w.data() + w.numel()), c.b, c.in_c, c.in_h, c.in_w,
            c.out_c, c.k, c.stride, c.pad, out_h, out_w);
        for (int64_t i = 0; i < y.numel(); ++i)
            CHECK(y.data()[i] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-10));
    }
}

TEST_CASE("conv2d gradients (stride, padding, kernel sizes)") {
    for (uint64_t seed = 1; seed <= 2; ++seed) {
        Rng rng(seed);
        auto x = TD::randn({2, 3, 5, 4}, rng, 1.0, true);
        auto w = TD::randn({4, 3, 3, 3}, rng, 0.5, true);
        LossFn fn = [&] { return weighted_sum(conv2d(x, w, 2, 1, true)); };
        CHECK(gradcheck<D>(fn, {{"x", x}, {"w", w}}).ok(kTol));

        auto w1 = TD::randn({2, 3, 1, 1}, rng, 0.5, true);
        LossFn fn1 = [&] { return weighted_sum(conv2d(x, w1, 1, 0)); };
        CHECK(gradcheck<D>(fn1, {{"x", x}, {"w", w1}}).ok(kTol));
    }
}

TEST_CASE("conv2d output size convention") {
    Rng rng(3);
    auto x = TD::randn({1, 1, 6, 6}, rng);
    auto w = TD::randn({1, 1, 3, 3}, rng);
    // (6 + 2 - 3) / 2 is fractional: floor mode shrinks, strict mode throws
    auto y = conv2d(x, w, 2, 1, true);
    CHECK(y.dim(2) == 3);
    CHECK_THROWS_AS(conv2d(x, w, 2, 1, false), ShapeError);
}

TEST_CASE("maxpool2d forward and gradient") {
    Rng rng(9);
    auto x = TD::randn({2, 2, 6, 6}, rng, 1.0, true);
    {
        NoGradGuard ng;
        auto y = maxpool2d(x, 3, 2, 1, true);
        CHECK(y.dim(2) == 3);
        CHECK(y.dim(3) == 3);
        // window (0,0) covers input rows/cols {-1,0,1}; padding never wins
        D best = -1e30;
        for (int iy = 0; iy <= 1; ++iy)
            for (int ix = 0; ix <= 1; ++ix) best = std::max(best, x.data()[iy * 6 + ix]);
        CHECK(y.data()[0] == doctest::Approx(best));
    }
    LossFn fn = [&] { return weighted_sum(maxpool2d(x, 3, 2, 1, true)); };
    CHECK(gradcheck<D>(fn, {{"x", x}}).ok(kTol));
}

TEST_CASE("batchnorm training statistics and running buffers") {
    Rng rng(4);
    auto x = TD::randn({4, 3, 2, 2}, rng, 2.0);
    auto gamma = TD::ones({3});
    auto beta = TD::zeros({3});
    auto rm = TD::zeros({3});
    auto rv = TD::ones({3});
    auto y = batchnorm(x, gamma, beta, rm, rv, true);

    // normalized output: per-channel mean 0, biased variance 1
    const int64_t per_c = 4 * 2 * 2;
    for (int c = 0; c < 3; ++c) {
        D mean = 0, var = 0, batch_mean = 0;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 4; ++i) {
                mean += y.data()[(n * 3 + c) * 4 + i];
                batch_mean += x.data()[(n * 3 + c) * 4 + i];
            }
        mean /= static_cast<D>(per_c);
        batch_mean /= static_cast<D>(per_c);
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 4; ++i) {
                const D d = y.data()[(n * 3 + c) * 4 + i] - mean;
                var += d * d;
            }
        var /= static_cast<D>(per_c);
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-8));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps in the denominator
        // running update: new = 0.9 * old + 0.1 * batch stat
        CHECK(rm.data()[c] == doctest::Approx(0.1 * batch_mean).epsilon(1e-8));
    }

    // eval mode must use the running buffers, not batch statistics
    auto rm2 = TD::zeros({3});
    auto rv2 = TD::ones({3});
    auto ye = batchnorm(x, gamma, beta, rm2, rv2, false);
    for (int64_t i = 0; i < ye.numel(); ++i)
        CHECK(ye.data()[i] ==
              doctest::Approx(x.data()[i] / std::sqrt(1.0 + 1e-5)).epsilon(1e-10));
    CHECK(rm2.data()[0] == 0.0);  // eval never touches the buffers
}

TEST_CASE("batchnorm gradients (4-d and 2-d)") {
    Rng rng(8);
    auto x4 = TD::randn({3, 2, 2, 2}, rng, 1.5, true);
    auto g4 = TD::randn({2}, rng, 0.3, true);
    auto b4 = TD::randn({2}, rng, 0.3, true);
    auto rm = TD::zeros({2});
    auto rv = TD::ones({2});
    LossFn fn4 = [&] { return weighted_sum(batchnorm(x4, g4, b4, rm, rv, true)); };
    CHECK(gradcheck<D>(fn4, {{"x", x4}, {"gamma", g4}, {"beta", b4}}).ok(kTol));

    auto x2 = TD::randn({5, 3}, rng, 1.5, true);
    auto g2 = TD::randn({3}, rng, 0.3, true);
    auto b2 = TD::randn({3}, rng, 0.3, true);
    auto rm2 = TD::zeros({3});
    auto rv2 = TD::ones({3});
    LossFn fn2 = [&] { return weighted_sum(batchnorm(x2, g2, b2, rm2, rv2, true)); };
    CHECK(gradcheck<D>(fn2, {{"x", x2}, {"gamma", g2}, {"beta", b2}}).ok(kTol));

    // eval-mode gradient flows through the affine transform only
    LossFn fne = [&] { return weighted_sum(batchnorm(x4, g4, b4, rm, rv, false)); };
    CHECK(gradcheck<D>(fne, {{"x", x4}, {"gamma", g4}, {"beta", b4}}).ok(kTol));
}

TEST_CASE("backward accumulates through shared subexpressions") {
    Rng rng(12);
    auto a = TD::randn({2, 2}, rng, 1.0, true);
    // a appears twice: d/da (a*a + a) = 2a + 1
    auto loss = sum_all(add(mul(a, a), a));
    backward(loss);
    REQUIRE(a.has_grad());
    for (int64_t i = 0; i < a.numel(); ++i)
        CHECK(a.impl()->grad[static_cast<size_t>(i)] ==
              doctest::Approx(2.0 * a.data()[i] + 1.0).epsilon(1e-12));
}

TEST_CASE("NoGradGuard suppresses tape recording") {
    Rng rng(13);
    auto a = TD::randn({2, 2}, rng, 1.0, true);
    NoGradGuard ng;
    auto y = mul(a, a);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors are reported, not silently broadcast") {
    Rng rng(14);
    auto a = TD::randn({2, 3}, rng);
    auto b = TD::randn({3, 2}, rng);
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    auto x = TD::randn({1, 2, 4, 4}, rng);
    auto w = TD::randn({1, 3, 3, 3}, rng);
    CHECK_THROWS_AS(conv2d(x, w, 1, 1), ShapeError);
}
