#pragma once

// ResNet-50-style backbone with enumerable attention insertion positions.
//
// Position 1 sits after the stem; positions 2..P follow each residual block
// in order (P = 1 + sum of stage depths; 17 under the default depths). A
// block inserted "at position p" transforms the tensor flowing out of that
// site before the next block consumes it. SE is the exception: it is rewired
// into the preceding residual block, gating the branch before the skip
// addition (at position 1, where no residual block precedes, the SE gate is
// applied to the stem tensor itself, like HAC).

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "attnlab/blocks.hpp"

namespace attnlab {

struct BackboneConfig {
    std::array<int, 4> stage_depths{3, 4, 6, 3};
    int base_width = 64;
    int width_divisor = 1;  // desk-scale narrowing; divides every channel count
    int last_stride = 1;    // final stage stride (strong-baseline default 1)
    int input_h = 256, input_w = 128;
    int num_classes = 751;

    void validate() const {
        for (int d : stage_depths)
            check_shape(d >= 1, "backbone config: stage depths must be positive");
        check_shape(width_divisor >= 1 && base_width % width_divisor == 0,
                    "backbone config: width_divisor must divide base_width");
        check_shape(last_stride == 1 || last_stride == 2,
                    "backbone config: last_stride must be 1 or 2");
        check_shape(input_h >= 32 && input_w >= 16, "backbone config: input too small");
        check_shape(num_classes >= 1, "backbone config: num_classes must be positive");
    }

    int total_blocks() const {
        int n = 0;
        for (int d : stage_depths) n += d;
        return n;
    }
    int num_positions() const { return 1 + total_blocks(); }

    int stem_channels() const { return base_width / width_divisor; }
    int stage_mid(int s) const { return (base_width << s) / width_divisor; }
    int stage_out(int s) const { return stage_mid(s) * 4; }
    int final_dim() const { return stage_out(3); }
    int stage_stride(int s) const { return s == 0 ? 1 : (s == 3 ? last_stride : 2); }

    // Positions right after the last block of each stage ({4,8,14,17} under
    // the default depths).
    std::vector<int> stage_end_positions() const {
        std::vector<int> out;
        int pos = 1;
        for (int d : stage_depths) {
            pos += d;
            out.push_back(pos);
        }
        return out;
    }

    // Narrow widths, small images, synthetic-set class count; all 17
    // positions preserved.
    static BackboneConfig desk_preset() {
        BackboneConfig cfg;
        cfg.width_divisor = 8;
        cfg.input_h = 64;
        cfg.input_w = 32;
        cfg.num_classes = 50;
        return cfg;
    }
};

inline BackboneConfig resnet101_config(const BackboneConfig& base) {
    BackboneConfig cfg = base;
    cfg.stage_depths = {3, 4, 23, 3};
    return cfg;
}

struct PositionInfo {
    int position;
    int channels;
    int h, w;
};

namespace detail {
inline int floor_conv_out(int size, int k, int stride, int pad) {
    return (size + 2 * pad - k) / stride + 1;
}
}  // namespace detail

// Tensor shape entering an attention block at each insertion site.
inline std::vector<PositionInfo> enumerate_positions(const BackboneConfig& cfg) {
    cfg.validate();
    std::vector<PositionInfo> out;
    int h = detail::floor_conv_out(cfg.input_h, 7, 2, 3);
    int w = detail::floor_conv_out(cfg.input_w, 7, 2, 3);
    h = detail::floor_conv_out(h, 3, 2, 1);
    w = detail::floor_conv_out(w, 3, 2, 1);
    out.push_back({1, cfg.stem_channels(), h, w});
    int pos = 2;
    for (int s = 0; s < 4; ++s) {
        for (int b = 0; b < cfg.stage_depths[static_cast<size_t>(s)]; ++b, ++pos) {
            if (b == 0 && cfg.stage_stride(s) == 2) {
                h = detail::floor_conv_out(h, 3, 2, 1);
                w = detail::floor_conv_out(w, 3, 2, 1);
            }
            out.push_back({pos, cfg.stage_out(s), h, w});
        }
    }
    return out;
}

// ---- insertion plans ---------------------------------------------------------

struct InsertionPlan {
    std::map<int, AttentionSpec> entries;

    bool empty() const { return entries.empty(); }

    void validate(const BackboneConfig& cfg) const {
        const int max_pos = cfg.num_positions();
        for (const auto& [pos, spec] : entries) {
            check_shape(pos >= 1 && pos <= max_pos,
                        "plan position " + std::to_string(pos) + " outside 1.." +
                            std::to_string(max_pos));
            (void)spec;
        }
    }

    // Canonical text form: segments `kind@p1,p2,...` joined by '+', segments
    // ordered by smallest position, positions ascending. Empty plan: "none".
    std::string str() const {
        if (entries.empty()) return "none";
        std::vector<std::pair<AttentionKind, std::vector<int>>> groups;
        for (const auto& [pos, spec] : entries) {
            bool found = false;
            for (auto& g : groups)
                if (g.first == spec.kind) {
                    g.second.push_back(pos);
                    found = true;
                }
            if (!found) groups.push_back({spec.kind, {pos}});
        }
        std::string out;
        for (size_t i = 0; i < groups.size(); ++i) {
            if (i) out += "+";
            out += kind_name(groups[i].first);
            out += "@";
            for (size_t j = 0; j < groups[i].second.size(); ++j) {
                if (j) out += ",";
                out += std::to_string(groups[i].second[j]);
            }
        }
        return out;
    }

    // Parses the grammar above; `base` supplies the hyperparameters (r, inner
    // ratio, scaling flag) shared by every entry.
    static InsertionPlan parse(const std::string& text, const AttentionSpec& base = {}) {
        InsertionPlan plan;
        if (text.empty() || text == "none") return plan;
        size_t start = 0;
        while (start <= text.size()) {
            size_t end = text.find('+', start);
            if (end == std::string::npos) end = text.size();
            const std::string seg = text.substr(start, end - start);
            const size_t at = seg.find('@');
            check_shape(at != std::string::npos && at > 0 && at + 1 < seg.size(),
                        "bad plan segment '" + seg + "' (expected kind@p1,p2,...)");
            const std::string kind_str = seg.substr(0, at);
            AttentionSpec spec = base;
            if (kind_str == "se") {
                spec.kind = AttentionKind::SE;
            } else if (kind_str == "hac") {
                spec.kind = AttentionKind::HAC;
            } else if (kind_str == "nl") {
                spec.kind = AttentionKind::NL;
            } else if (kind_str == "cnl") {
                spec.kind = AttentionKind::CNL;
            } else {
                throw ShapeError("unknown attention kind '" + kind_str +
                                 "' (expected se|hac|nl|cnl)");
            }
            size_t p = at + 1;
            while (p < seg.size()) {
                size_t comma = seg.find(',', p);
                if (comma == std::string::npos) comma = seg.size();
                const std::string num = seg.substr(p, comma - p);
                int pos = 0;
                try {
                    size_t used = 0;
                    pos = std::stoi(num, &used);
                    check_shape(used == num.size(), "");
                } catch (const std::exception&) {
                    throw ShapeError("bad position '" + num + "' in plan segment '" + seg + "'");
                }
                check_shape(pos >= 1, "plan position must be >= 1 (position 0, the raw input, "
                                      "is not a valid site)");
                check_shape(plan.entries.find(pos) == plan.entries.end(),
                            "duplicate plan position " + std::to_string(pos));
                plan.entries.emplace(pos, spec);
                p = comma + 1;
            }
            start = end + 1;
        }
        return plan;
    }
};

// ---- model -------------------------------------------------------------------

template <typename T>
class ModelT {
public:
    struct Head {
        Tensor<T> pooled;     // pre-BNNeck pooled features [B x D]
        Tensor<T> embedding;  // post-BNNeck retrieval features [B x D]
    };

    ModelT() = default;

    ModelT(const BackboneConfig& cfg, const InsertionPlan& plan, uint64_t seed)
        : cfg_(cfg), plan_(plan), seed_(seed) {
        cfg_.validate();
        plan_.validate(cfg_);
        positions_ = enumerate_positions(cfg_);

        stem_conv_ = Conv2dLayer<T>("stem.conv", 3, cfg_.stem_channels(), 7, 2, 3, seed);
        stem_bn_ = BatchNormLayer<T>("stem.bn", cfg_.stem_channels());

        int in_c = cfg_.stem_channels();
        for (int s = 0; s < 4; ++s) {
            for (int b = 0; b < cfg_.stage_depths[static_cast<size_t>(s)]; ++b) {
                const int stride = b == 0 ? cfg_.stage_stride(s) : 1;
                const std::string name =
                    "s" + std::to_string(s) + ".b" + std::to_string(b);
                blocks_.emplace_back(name, in_c, cfg_.stage_mid(s), stride, seed);
                in_c = cfg_.stage_out(s);
            }
        }

        for (const auto& [pos, spec] : plan_.entries) {
            const int channels = positions_[static_cast<size_t>(pos - 1)].channels;
            const std::string name = "attn" + std::to_string(pos);
            if (spec.kind == AttentionKind::SE && pos >= 2) {
                blocks_[static_cast<size_t>(pos - 2)].attach_se(name + ".se", spec, seed);
                continue;
            }
            spec.validate(channels);
            AttnInstance inst;
            inst.kind = spec.kind;
            switch (spec.kind) {
                case AttentionKind::SE:
                    inst.gate.emplace(name + ".se", channels, spec.r, seed);
                    break;
                case AttentionKind::HAC:
                    inst.gate.emplace(name + ".hac", channels, spec.r, seed);
                    break;
                case AttentionKind::NL:
                    inst.nl.emplace(name + ".nl", channels, spec, seed);
                    break;
                case AttentionKind::CNL:
                    inst.cnl.emplace(name + ".cnl", channels, spec, seed);
                    break;
            }
            attn_.emplace(pos, std::move(inst));
        }

        neck_bn_ = BatchNormLayer<T>("neck.bn", cfg_.final_dim());
        classifier_ = LinearLayer<T>("classifier", cfg_.final_dim(), cfg_.num_classes, seed,
                                     /*with_bias=*/false, T(0.01));
    }

    Head forward_head(const Tensor<T>& batch) {
        check_shape(batch.ndim() == 4 && batch.dim(1) == 3 && batch.dim(2) == cfg_.input_h &&
                        batch.dim(3) == cfg_.input_w,
                    "model expects input [B x 3 x " + std::to_string(cfg_.input_h) + " x " +
                        std::to_string(cfg_.input_w) + "], got " + shape_str(batch.shape()));
        auto x = relu(stem_bn_.forward(stem_conv_.forward(batch), training_));
        x = maxpool2d(x, 3, 2, 1, /*floor_output=*/true);
        x = apply_attention(1, x);
        int pos = 2;
        for (auto& block : blocks_) {
            x = block.forward(x, training_);
            x = apply_attention(pos, x);
            ++pos;
        }
        const int b = x.dim(0);
        Head head;
        head.pooled = reshape(global_avg_pool(x), {b, cfg_.final_dim()});
        head.embedding = neck_bn_.forward(head.pooled, training_);
        return head;
    }

    Tensor<T> forward_features(const Tensor<T>& batch) { return forward_head(batch).embedding; }

    Tensor<T> logits_from(const Tensor<T>& embedding) const {
        return classifier_.forward(embedding);
    }

    Tensor<T> forward_logits(const Tensor<T>& batch) {
        return logits_from(forward_features(batch));
    }

    void set_training(bool v) { training_ = v; }
    bool training() const { return training_; }

    std::vector<NamedTensor<T>> parameters() const {
        std::vector<NamedTensor<T>> out;
        stem_conv_.collect_params(out);
        stem_bn_.collect_params(out);
        for (const auto& b : blocks_) b.collect_params(out);
        for (const auto& [pos, inst] : attn_) inst.collect_params(out);
        neck_bn_.collect_params(out);
        classifier_.collect_params(out);
        return out;
    }

    std::vector<NamedTensor<T>> buffers() const {
        std::vector<NamedTensor<T>> out;
        stem_bn_.collect_buffers(out);
        for (const auto& b : blocks_) b.collect_buffers(out);
        neck_bn_.collect_buffers(out);
        return out;
    }

    std::vector<NamedTensor<T>> classifier_parameters() const {
        std::vector<NamedTensor<T>> out;
        classifier_.collect_params(out);
        return out;
    }

    // Fresh classifier for a new class count (transfer step 0).
    void reinit_classifier(int num_classes, uint64_t seed) {
        cfg_.num_classes = num_classes;
        classifier_ =
            LinearLayer<T>("classifier", cfg_.final_dim(), num_classes, seed, false, T(0.01));
    }

    const BackboneConfig& config() const { return cfg_; }
    const InsertionPlan& plan() const { return plan_; }
    uint64_t seed() const { return seed_; }
    const std::vector<PositionInfo>& positions() const { return positions_; }
    std::vector<Bottleneck<T>>& blocks() { return blocks_; }
    BatchNormLayer<T>& neck_bn() { return neck_bn_; }

    // Direct access to a between-block attention instance, for tests that
    // force gate parameters.
    struct AttnInstance {
        AttentionKind kind = AttentionKind::HAC;
        std::optional<ChannelGate<T>> gate;  // SE at position 1, and HAC
        std::optional<NlBlock<T>> nl;
        std::optional<CnlBlock<T>> cnl;

        Tensor<T> apply(const Tensor<T>& x) const {
            if (gate) return gate->forward(x);
            if (nl) return nl->forward(x);
            return cnl->forward(x);
        }
        void collect_params(std::vector<NamedTensor<T>>& out) const {
            if (gate) gate->collect_params(out);
            if (nl) nl->collect_params(out);
            if (cnl) cnl->collect_params(out);
        }
    };

    AttnInstance* attention_at(int pos) {
        auto it = attn_.find(pos);
        return it == attn_.end() ? nullptr : &it->second;
    }

private:
    Tensor<T> apply_attention(int pos, const Tensor<T>& x) {
        auto it = attn_.find(pos);
        if (it == attn_.end()) return x;
        const auto& info = positions_[static_cast<size_t>(pos - 1)];
        check_shape(x.dim(1) == info.channels && x.dim(2) == info.h && x.dim(3) == info.w,
                    "position " + std::to_string(pos) + " shape drifted from enumeration: " +
                        shape_str(x.shape()));
        return it->second.apply(x);
    }

    BackboneConfig cfg_;
    InsertionPlan plan_;
    uint64_t seed_ = 0;
    bool training_ = false;
    std::vector<PositionInfo> positions_;
    Conv2dLayer<T> stem_conv_;
    BatchNormLayer<T> stem_bn_;
    std::vector<Bottleneck<T>> blocks_;
    std::map<int, AttnInstance> attn_;
    BatchNormLayer<T> neck_bn_;
    LinearLayer<T> classifier_;
};

template <typename T>
ModelT<T> build_model(const BackboneConfig& cfg, const InsertionPlan& plan, uint64_t seed) {
    return ModelT<T>(cfg, plan, seed);
}

template <typename T>
ModelT<T> build_resnet101_reference(const BackboneConfig& cfg, uint64_t seed) {
    return ModelT<T>(resnet101_config(cfg), InsertionPlan{}, seed);
}

using Model = ModelT<float>;

}  // namespace attnlab
