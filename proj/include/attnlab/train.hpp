#pragma once

// Optimizer, schedule, identity-balanced sampling, the training loop, and
// the two-step transfer fine-tune.

#include <string>
#include <vector>

#include "attnlab/augment.hpp"
#include "attnlab/backbone.hpp"
#include "attnlab/data.hpp"
#include "attnlab/losses.hpp"

namespace attnlab {

enum class LossKind { CE_LS, Circle };

inline const char* loss_name(LossKind k) { return k == LossKind::CE_LS ? "ce" : "circle"; }

struct TrainConfig {
    LossKind loss = LossKind::CE_LS;
    float label_smoothing = 0.1f;
    float circle_gamma = 128.0f;  // circle loss scale
    float circle_m = 0.25f;       // circle loss margin
    float circle_weight = 1.0f;   // weight of the circle term next to the id loss

    int epochs = 10;
    int warmup_epochs = 10;  // linear warmup; clipped to `epochs`
    float base_lr = 0.01f;
    std::vector<int> decay_epochs;  // lr x0.1 at each; empty = {50%, 75%} of epochs
    float momentum = 0.9f;
    float weight_decay = 5e-4f;

    int p_ids = 8;     // identities per batch
    int k_per_id = 4;  // instances per identity
    int batches_per_epoch = 0;  // 0: cover the train split once per epoch

    AugmentConfig augment;
    uint64_t seed = 7;
    bool classifier_only = false;  // step 1 of the transfer procedure
};

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
};

// Momentum SGD with L2 weight decay folded into the gradient.
template <typename T>
class SgdMomentum {
public:
    SgdMomentum(std::vector<NamedTensor<T>> params, T momentum, T weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        velocity_.reserve(params_.size());
        for (const auto& p : params_)
            velocity_.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
    }

    void step(T lr) {
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& t = params_[i].tensor;
            if (!t.has_grad()) continue;
            const auto& g = t.impl()->grad;
            auto& v = velocity_[i];
            T* w = t.data();
            for (size_t j = 0; j < v.size(); ++j) {
                v[j] = momentum_ * v[j] + g[j] + weight_decay_ * w[j];
                w[j] -= lr * v[j];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    std::vector<NamedTensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    T momentum_, weight_decay_;
};

// Learning rate at a 0-based epoch: linear warmup, then step decay.
double lr_at_epoch(const TrainConfig& cfg, int epoch);

// P x K batches over the train split: each batch holds k_per_id images for
// each of p_ids identities. Deterministic per (seed, epoch).
struct PkBatch {
    std::vector<int> indices;  // into dataset entries
    std::vector<int> labels;   // class indices, aligned
};
std::vector<PkBatch> sample_epoch(const Dataset& ds, const TrainConfig& cfg, int epoch);

// Maps the train split's person ids onto class indices 0..n-1 (ascending id
// order).
std::vector<int> train_class_of_id(const Dataset& ds);

TrainLog train(Model& model, const Dataset& ds, const TrainConfig& cfg);

// Step 1 re-initializes the classifier for the target id count and trains
// it alone (backbone in eval mode, bit-untouched); step 2 trains everything.
TrainLog finetune_two_step(Model& model, const Dataset& target, const TrainConfig& step1,
                           const TrainConfig& step2);

}  // namespace attnlab
