#pragma once

// Parameter-owning layer wrappers over the ops. Every layer is constructed
// with a unique name; its initial weights are drawn from an Rng substream
// derived from (seed, name), so adding or removing one layer never shifts
// the draws any other layer sees.

#include <string>
#include <utility>
#include <vector>

#include "attnlab/ops.hpp"
#include "attnlab/rng.hpp"
#include "attnlab/tensor.hpp"

namespace attnlab {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
class Conv2dLayer {
public:
    Conv2dLayer() = default;

    // He-style fan-out initialization; zero_init makes the layer start as a
    // zero map (used by the non-local output projection).
    Conv2dLayer(std::string name, int in_c, int out_c, int k, int stride, int pad,
                uint64_t seed, bool zero_init = false)
        : name_(std::move(name)), stride_(stride), pad_(pad) {
        if (zero_init) {
            weight_ = Tensor<T>::zeros({out_c, in_c, k, k}, true);
        } else {
            Rng rng(Rng::mix(seed, name_));
            const T stdev = std::sqrt(T(2) / static_cast<T>(out_c * k * k));
            weight_ = Tensor<T>::randn({out_c, in_c, k, k}, rng, stdev, true);
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        // Floor-mode output size: the standard ResNet shape walk needs it on
        // even input sizes.
        return conv2d(x, weight_, stride_, pad_, /*floor_output=*/true);
    }

    void collect_params(std::vector<NamedTensor<T>>& out) const {
        out.push_back({name_ + ".weight", weight_});
    }

    const std::string& name() const { return name_; }
    const Tensor<T>& weight() const { return weight_; }
    Tensor<T>& weight() { return weight_; }
    int stride() const { return stride_; }
    int pad() const { return pad_; }

private:
    std::string name_;
    Tensor<T> weight_;
    int stride_ = 1;
    int pad_ = 0;
};

template <typename T>
class LinearLayer {
public:
    LinearLayer() = default;

    // weight_std == 0 zero-initializes the weights. with_bias adds a
    // zero-initialized learnable bias.
    LinearLayer(std::string name, int in_dim, int out_dim, uint64_t seed, bool with_bias,
                T weight_std)
        : name_(std::move(name)) {
        if (weight_std == T(0)) {
            weight_ = Tensor<T>::zeros({in_dim, out_dim}, true);
        } else {
            Rng rng(Rng::mix(seed, name_));
            weight_ = Tensor<T>::randn({in_dim, out_dim}, rng, weight_std, true);
        }
        if (with_bias) bias_ = Tensor<T>::zeros({out_dim}, true);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return bias_.defined() ? linear(x, weight_, bias_) : matmul(x, weight_);
    }

    void collect_params(std::vector<NamedTensor<T>>& out) const {
        out.push_back({name_ + ".weight", weight_});
        if (bias_.defined()) out.push_back({name_ + ".bias", bias_});
    }

    const std::string& name() const { return name_; }
    const Tensor<T>& weight() const { return weight_; }
    Tensor<T>& weight() { return weight_; }
    bool has_bias() const { return bias_.defined(); }
    const Tensor<T>& bias() const { return bias_; }
    Tensor<T>& bias() { return bias_; }

private:
    std::string name_;
    Tensor<T> weight_;
    Tensor<T> bias_;
};

template <typename T>
class BatchNormLayer {
public:
    BatchNormLayer() = default;

    explicit BatchNormLayer(std::string name, int channels)
        : name_(std::move(name)),
          gamma_(Tensor<T>::ones({channels}, true)),
          beta_(Tensor<T>::zeros({channels}, true)),
          running_mean_(Tensor<T>::zeros({channels})),
          running_var_(Tensor<T>::ones({channels})) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        return batchnorm(x, gamma_, beta_, running_mean_, running_var_, training);
    }

    void collect_params(std::vector<NamedTensor<T>>& out) const {
        out.push_back({name_ + ".gamma", gamma_});
        out.push_back({name_ + ".beta", beta_});
    }

    void collect_buffers(std::vector<NamedTensor<T>>& out) const {
        out.push_back({name_ + ".running_mean", running_mean_});
        out.push_back({name_ + ".running_var", running_var_});
    }

    const std::string& name() const { return name_; }
    Tensor<T>& gamma() { return gamma_; }
    Tensor<T>& beta() { return beta_; }
    Tensor<T>& running_mean() { return running_mean_; }
    Tensor<T>& running_var() { return running_var_; }

private:
    std::string name_;
    Tensor<T> gamma_, beta_;
    Tensor<T> running_mean_, running_var_;
};

}  // namespace attnlab
