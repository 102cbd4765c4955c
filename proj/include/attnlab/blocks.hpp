#pragma once

// Attention blocks and the bottleneck residual block.
//
// All four attention kinds preserve the input shape exactly. SE and HAC share
// one gate kernel (ChannelGate): squeeze by global average pooling, bottleneck
// MLP, sigmoid; they differ only in placement (SE gates the residual branch
// inside a bottleneck, HAC gates the tensor between blocks). NL mixes spatial
// positions with softmax attention and starts as an exact identity via a
// zero-initialized output projection. CNL pools first and runs the attention
// over reduced channel embeddings, ending in a per-channel sigmoid gate.

#include <optional>
#include <string>
#include <vector>

#include "attnlab/layers.hpp"

namespace attnlab {

enum class AttentionKind { SE, HAC, NL, CNL };

inline const char* kind_name(AttentionKind k) {
    switch (k) {
        case AttentionKind::SE: return "se";
        case AttentionKind::HAC: return "hac";
        case AttentionKind::NL: return "nl";
        case AttentionKind::CNL: return "cnl";
    }
    return "?";
}

struct AttentionSpec {
    AttentionKind kind = AttentionKind::CNL;
    int r = 16;                     // channel reduction ratio (SE/HAC/CNL)
    int inner_num = 1, inner_den = 2;  // NL inner-channel fraction C_i = C*num/den
    bool scale_similarity = false;  // divide attention scores by sqrt(d)

    void validate(int channels) const {
        check_shape(r >= 1, "attention spec: r must be positive");
        if (kind == AttentionKind::NL) {
            check_shape(inner_num >= 1 && inner_den >= 1, "attention spec: bad inner ratio");
            check_shape((channels * inner_num) % inner_den == 0,
                        "attention spec: " + std::to_string(channels) + " * " +
                            std::to_string(inner_num) + "/" + std::to_string(inner_den) +
                            " inner channels not integral");
        } else {
            check_shape(channels % r == 0, "attention spec: channels " +
                                               std::to_string(channels) +
                                               " not divisible by r=" + std::to_string(r));
        }
    }

    int inner_channels(int channels) const {
        return kind == AttentionKind::NL ? channels * inner_num / inner_den : channels / r;
    }
};

// ---- channel gate (SE and HAC) ----------------------------------------------

template <typename T>
class ChannelGate {
public:
    ChannelGate() = default;

    ChannelGate(const std::string& name, int channels, int r, uint64_t seed)
        : channels_(channels),
          reduce_(name + ".reduce", channels, channels / r, seed, true,
                  std::sqrt(T(2) / static_cast<T>(channels))),
          // Small random weights + zero bias: the initial gate sits near 0.5.
          expand_(name + ".expand", channels / r, channels, seed, true, T(0.01)) {}

    // [B,C,H,W] -> per-channel gate in (0,1), shaped [B,C,1,1].
    Tensor<T> gate(const Tensor<T>& x) const {
        const int b = x.dim(0);
        auto squeezed = reshape(global_avg_pool(x), {b, channels_});
        auto hidden = relu(reduce_.forward(squeezed));
        auto g = sigmoid(expand_.forward(hidden));
        return reshape(g, {b, channels_, 1, 1});
    }

    Tensor<T> forward(const Tensor<T>& x) const { return mul(x, gate(x)); }

    void collect_params(std::vector<NamedTensor<T>>& out) const {
        reduce_.collect_params(out);
        expand_.collect_params(out);
    }

    LinearLayer<T>& reduce() { return reduce_; }
    LinearLayer<T>& expand() { return expand_; }
    int channels() const { return channels_; }

private:
    int channels_ = 0;
    LinearLayer<T> reduce_, expand_;
};

// ---- non-local block ---------------------------------------------------------

template <typename T>
class NlBlock {
public:
    NlBlock() = default;

    NlBlock(const std::string& name, int channels, const AttentionSpec& spec, uint64_t seed)
        : channels_(channels),
          inner_(spec.inner_channels(channels)),
          scale_(spec.scale_similarity),
          theta_(name + ".theta", channels, inner_, 1, 1, 0, seed),
          phi_(name + ".phi", channels, inner_, 1, 1, 0, seed),
          g_(name + ".g", channels, inner_, 1, 1, 0, seed),
          z_(name + ".z", inner_, channels, 1, 1, 0, seed, /*zero_init=*/true) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
        const int hw = h * w;
        // [B,Ci,H,W] -> [B,HW,Ci]
        auto q = transpose_last2(reshape(theta_.forward(x), {b, inner_, hw}));
        auto k = reshape(phi_.forward(x), {b, inner_, hw});  // kept as [B,Ci,HW]
        auto v = transpose_last2(reshape(g_.forward(x), {b, inner_, hw}));
        auto scores = bmm(q, k);  // [B,HW,HW]
        if (scale_) scores = scale(scores, T(1) / std::sqrt(static_cast<T>(inner_)));
        auto f = softmax(scores, 2);
        auto y = bmm(f, v);  // [B,HW,Ci]
        auto y4 = reshape(transpose_last2(y), {b, inner_, h, w});
        return add(x, z_.forward(y4));
    }

    void collect_params(std::vector<NamedTensor<T>>& out) const {
        theta_.collect_params(out);
        phi_.collect_params(out);
        g_.collect_params(out);
        z_.collect_params(out);
    }

    int channels() const { return channels_; }
    int inner() const { return inner_; }
    Conv2dLayer<T>& z() { return z_; }

private:
    int channels_ = 0, inner_ = 0;
    bool scale_ = false;
    Conv2dLayer<T> theta_, phi_, g_, z_;
};

// ---- channel-wise non-local block -------------------------------------------

template <typename T>
class CnlBlock {
public:
    CnlBlock() = default;

    CnlBlock(const std::string& name, int channels, const AttentionSpec& spec, uint64_t seed)
        : channels_(channels),
          inner_(channels / spec.r),
          scale_(spec.scale_similarity),
          wq_(name + ".wq", channels, inner_, seed, false,
              std::sqrt(T(1) / static_cast<T>(channels))),
          wk_(name + ".wk", channels, inner_, seed, false,
              std::sqrt(T(1) / static_cast<T>(channels))),
          wv_(name + ".wv", channels, inner_, seed, false,
              std::sqrt(T(1) / static_cast<T>(channels))),
          // Small random + zero bias, same contract as the SE/HAC gate.
          wo_(name + ".wo", inner_, channels, seed, true, T(0.01)) {}

    // Pool first, then attention over channel embeddings of size C/r.
    Tensor<T> gate(const Tensor<T>& x) const {
        const int b = x.dim(0);
        auto pooled = reshape(global_avg_pool(x), {b, channels_});
        auto q = wq_.forward(pooled);  // [B, C/r]
        auto k = wk_.forward(pooled);
        auto v = wv_.forward(pooled);
        // Outer-product similarity per element: [B, C/r, C/r].
        auto scores = bmm(reshape(q, {b, inner_, 1}), reshape(k, {b, 1, inner_}));
        if (scale_) scores = scale(scores, T(1) / std::sqrt(static_cast<T>(inner_)));
        auto f = softmax(scores, 2);
        auto y = reshape(bmm(f, reshape(v, {b, inner_, 1})), {b, inner_});
        auto g = sigmoid(wo_.forward(y));
        return reshape(g, {b, channels_, 1, 1});
    }

    Tensor<T> forward(const Tensor<T>& x) const { return mul(x, gate(x)); }

    void collect_params(std::vector<NamedTensor<T>>& out) const {
        wq_.collect_params(out);
        wk_.collect_params(out);
        wv_.collect_params(out);
        wo_.collect_params(out);
    }

    int channels() const { return channels_; }
    int inner() const { return inner_; }
    LinearLayer<T>& wo() { return wo_; }

private:
    int channels_ = 0, inner_ = 0;
    bool scale_ = false;
    LinearLayer<T> wq_, wk_, wv_, wo_;
};

// ---- free-standing forwards (the op-level interface) -------------------------

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const ChannelGate<T>& gate) {
    return gate.forward(x);
}

template <typename T>
Tensor<T> hac_forward(const Tensor<T>& x, const ChannelGate<T>& gate) {
    return gate.forward(x);
}

template <typename T>
Tensor<T> nl_forward(const Tensor<T>& x, const NlBlock<T>& block) {
    return block.forward(x);
}

template <typename T>
Tensor<T> cnl_forward(const Tensor<T>& x, const CnlBlock<T>& block) {
    return block.forward(x);
}

// ---- bottleneck residual block -----------------------------------------------

// 1x1 reduce -> 3x3 (carries the stride) -> 1x1 expand x4, BN after each conv,
// optional 1x1 downsample on the skip, optional SE gate on the branch before
// the addition.
template <typename T>
class Bottleneck {
public:
    Bottleneck() = default;

    Bottleneck(const std::string& name, int in_c, int mid_c, int stride, uint64_t seed)
        : in_c_(in_c),
          out_c_(mid_c * 4),
          stride_(stride),
          conv1_(name + ".conv1", in_c, mid_c, 1, 1, 0, seed),
          bn1_(name + ".bn1", mid_c),
          conv2_(name + ".conv2", mid_c, mid_c, 3, stride, 1, seed),
          bn2_(name + ".bn2", mid_c),
          conv3_(name + ".conv3", mid_c, mid_c * 4, 1, 1, 0, seed),
          bn3_(name + ".bn3", mid_c * 4) {
        if (stride != 1 || in_c != out_c_) {
            down_conv_ = Conv2dLayer<T>(name + ".down", in_c, out_c_, 1, stride, 0, seed);
            down_bn_ = BatchNormLayer<T>(name + ".down_bn", out_c_);
            has_down_ = true;
        }
    }

    void attach_se(const std::string& name, const AttentionSpec& spec, uint64_t seed) {
        spec.validate(out_c_);
        se_.emplace(name, out_c_, spec.r, seed);
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        auto branch = relu(bn1_.forward(conv1_.forward(x), training));
        branch = relu(bn2_.forward(conv2_.forward(branch), training));
        branch = bn3_.forward(conv3_.forward(branch), training);
        if (se_) branch = se_->forward(branch);
        auto skip = has_down_ ? down_bn_.forward(down_conv_.forward(x), training) : x;
        return relu(add(skip, branch));
    }

    void collect_params(std::vector<NamedTensor<T>>& out) const {
        conv1_.collect_params(out);
        bn1_.collect_params(out);
        conv2_.collect_params(out);
        bn2_.collect_params(out);
        conv3_.collect_params(out);
        bn3_.collect_params(out);
        if (has_down_) {
            down_conv_.collect_params(out);
            down_bn_.collect_params(out);
        }
        if (se_) se_->collect_params(out);
    }

    void collect_buffers(std::vector<NamedTensor<T>>& out) const {
        bn1_.collect_buffers(out);
        bn2_.collect_buffers(out);
        bn3_.collect_buffers(out);
        if (has_down_) down_bn_.collect_buffers(out);
    }

    int in_channels() const { return in_c_; }
    int out_channels() const { return out_c_; }
    int stride() const { return stride_; }
    bool has_se() const { return se_.has_value(); }
    ChannelGate<T>& se() { return *se_; }
    bool has_down() const { return has_down_; }

private:
    int in_c_ = 0, out_c_ = 0, stride_ = 1;
    Conv2dLayer<T> conv1_;
    BatchNormLayer<T> bn1_;
    Conv2dLayer<T> conv2_;
    BatchNormLayer<T> bn2_;
    Conv2dLayer<T> conv3_;
    BatchNormLayer<T> bn3_;
    bool has_down_ = false;
    Conv2dLayer<T> down_conv_;
    BatchNormLayer<T> down_bn_;
    std::optional<ChannelGate<T>> se_;
};

}  // namespace attnlab
