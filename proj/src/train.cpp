#include "attnlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace attnlab {

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    const int warmup = std::min(cfg.warmup_epochs, cfg.epochs);
    double lr = static_cast<double>(cfg.base_lr);
    if (warmup > 0 && epoch < warmup) return lr * (epoch + 1) / warmup;
    std::vector<int> decay = cfg.decay_epochs;
    if (decay.empty()) decay = {cfg.epochs / 2, cfg.epochs * 3 / 4};
    for (int d : decay)
        if (epoch >= d) lr *= 0.1;
    return lr;
}

std::vector<int> train_class_of_id(const Dataset& ds) {
    auto ids = ds.ids_of(Split::Train);
    check_data(!ids.empty(), "dataset has no train split");
    std::vector<int> class_of(static_cast<size_t>(ids.back()) + 1, -1);
    for (size_t i = 0; i < ids.size(); ++i)
        class_of[static_cast<size_t>(ids[i])] = static_cast<int>(i);
    return class_of;
}

std::vector<PkBatch> sample_epoch(const Dataset& ds, const TrainConfig& cfg, int epoch) {
    check_shape(cfg.p_ids >= 2 && cfg.k_per_id >= 1, "sampler: need p_ids >= 2, k_per_id >= 1");
    // Images per identity in the train split.
    std::map<int, std::vector<int>> by_id;
    for (size_t i = 0; i < ds.entries.size(); ++i) {
        const auto& e = ds.entries[i];
        if (e.split == Split::Train && e.id >= 0)
            by_id[e.id].push_back(static_cast<int>(i));
    }
    check_data(static_cast<int>(by_id.size()) >= cfg.p_ids,
               "sampler: train split has fewer identities than p_ids");
    const auto class_of = train_class_of_id(ds);

    Rng rng(Rng::mix(cfg.seed, "sampler.e" + std::to_string(epoch)));
    std::vector<int> id_order;
    id_order.reserve(by_id.size());
    for (const auto& [id, idxs] : by_id) id_order.push_back(id);
    // Fisher-Yates with our deterministic source.
    for (size_t i = id_order.size(); i > 1; --i)
        std::swap(id_order[i - 1],
                  id_order[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

    int total_train = 0;
    for (const auto& [id, idxs] : by_id) total_train += static_cast<int>(idxs.size());
    const int batch_size = cfg.p_ids * cfg.k_per_id;
    int n_batches = cfg.batches_per_epoch > 0
                        ? cfg.batches_per_epoch
                        : std::max(1, total_train / batch_size);

    std::vector<PkBatch> batches;
    size_t id_cursor = 0;
    for (int b = 0; b < n_batches; ++b) {
        PkBatch batch;
        for (int p = 0; p < cfg.p_ids; ++p) {
            if (id_cursor >= id_order.size()) id_cursor = 0;
            const int id = id_order[id_cursor++];
            const auto& pool = by_id[id];
            for (int k = 0; k < cfg.k_per_id; ++k) {
                const int pick = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
                batch.indices.push_back(pool[static_cast<size_t>(pick)]);
                batch.labels.push_back(class_of[static_cast<size_t>(id)]);
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

namespace {

Tensor<float> make_augmented_batch(const Dataset& ds, const PkBatch& batch,
                                   const AugmentConfig& aug, Rng& rng) {
    const auto& first = ds.images[static_cast<size_t>(batch.indices[0])];
    auto out = Tensor<float>::zeros(
        {static_cast<int>(batch.indices.size()), 3, first.h, first.w});
    const size_t stride = static_cast<size_t>(3) * first.h * first.w;
    for (size_t i = 0; i < batch.indices.size(); ++i) {
        const auto img = augment(ds.images[static_cast<size_t>(batch.indices[i])], aug, rng);
        fill_image(out.data() + i * stride, img, 0.5f, 0.5f);
    }
    return out;
}

}  // namespace

TrainLog train(Model& model, const Dataset& ds, const TrainConfig& cfg) {
    const auto train_ids = ds.ids_of(Split::Train);
    check_data(static_cast<int>(train_ids.size()) == model.config().num_classes,
               "classifier width " + std::to_string(model.config().num_classes) +
                   " does not match " + std::to_string(train_ids.size()) +
                   " train identities");

    SgdMomentum<float> opt(cfg.classifier_only ? model.classifier_parameters()
                                               : model.parameters(),
                           cfg.momentum, cfg.weight_decay);
    model.set_training(!cfg.classifier_only);

    TrainLog log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg, epoch);
        Rng aug_rng(Rng::mix(cfg.seed, "augment.e" + std::to_string(epoch)));
        const auto batches = sample_epoch(ds, cfg, epoch);
        double loss_sum = 0.0;
        for (const auto& batch : batches) {
            auto input = make_augmented_batch(ds, batch, cfg.augment, aug_rng);
            Tensor<float> loss;
            if (cfg.classifier_only) {
                // Features frozen: compute them outside the graph so only the
                // classifier receives gradients (and BN buffers stay put).
                Tensor<float> embedding;
                {
                    NoGradGuard no_grad;
                    embedding = model.forward_head(input).embedding;
                }
                loss = cross_entropy_ls(model.logits_from(embedding), batch.labels,
                                        cfg.label_smoothing);
            } else {
                auto head = model.forward_head(input);
                auto logits = model.logits_from(head.embedding);
                loss = cross_entropy_ls(logits, batch.labels, cfg.label_smoothing);
                if (cfg.loss == LossKind::Circle) {
                    // Pairwise loss on the pre-neck features, id loss on the
                    // post-neck logits: the neck BN decouples the two
                    // objectives (metric losses degrade when trained through
                    // the neck's batch statistics).
                    auto normed = l2_normalize_rows(head.pooled);
                    auto circle = circle_loss(normed, batch.labels, cfg.circle_gamma,
                                              cfg.circle_m);
                    loss = add(loss, scale(circle, cfg.circle_weight));
                }
            }
            check_finite(loss, "training loss");
            loss_sum += loss.item();
            opt.zero_grad();
            backward(loss);
            opt.step(static_cast<float>(lr));
        }
        log.epochs.push_back({epoch, loss_sum / static_cast<double>(batches.size()), lr});
    }
    model.set_training(false);
    return log;
}

TrainLog finetune_two_step(Model& model, const Dataset& target, const TrainConfig& step1,
                           const TrainConfig& step2) {
    const auto target_ids = target.ids_of(Split::Train);
    check_data(!target_ids.empty(), "transfer target has no train split");
    model.reinit_classifier(static_cast<int>(target_ids.size()),
                            Rng::mix(step1.seed, "transfer.classifier"));

    TrainConfig head_cfg = step1;
    head_cfg.classifier_only = true;
    head_cfg.loss = LossKind::CE_LS;  // the circle term has no classifier dependence
    TrainLog log = train(model, target, head_cfg);

    TrainConfig full_cfg = step2;
    full_cfg.classifier_only = false;
    TrainLog log2 = train(model, target, full_cfg);
    log.epochs.insert(log.epochs.end(), log2.epochs.begin(), log2.epochs.end());
    return log;
}

}  // namespace attnlab
