#include "attnlab/cost.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

namespace attnlab {

namespace {

int64_t conv_macs(int out_c, int in_c, int k, int out_h, int out_w) {
    return static_cast<int64_t>(out_c) * in_c * k * k * out_h * out_w;
}

int64_t conv_params(int out_c, int in_c, int k) {
    return static_cast<int64_t>(out_c) * in_c * k * k;
}

}  // namespace

LayerCost count_block_cost(const AttentionSpec& spec, int channels, int h, int w) {
    spec.validate(channels);
    LayerCost cost;
    const int64_t c = channels;
    const int64_t hw = static_cast<int64_t>(h) * w;
    switch (spec.kind) {
        case AttentionKind::SE:
        case AttentionKind::HAC: {
            const int64_t inner = c / spec.r;
            cost.name = spec.kind == AttentionKind::SE ? "se" : "hac";
            cost.macs = 2 * c * inner;  // two bottleneck maps
            cost.params = c * inner + inner + inner * c + c;  // weights + biases
            break;
        }
        case AttentionKind::CNL: {
            const int64_t inner = c / spec.r;
            cost.name = "cnl";
            // Three projections, the (C/r)^2 similarity, the aggregation,
            // and the output gate.
            cost.macs = 3 * c * inner + 2 * inner * inner + inner * c;
            cost.params = 3 * c * inner + inner * c + c;
            break;
        }
        case AttentionKind::NL: {
            const int64_t inner = spec.inner_channels(channels);
            cost.name = "nl";
            // theta/phi/g 1x1 convs, the (HW)^2 similarity and aggregation,
            // and the z projection.
            cost.macs = 3 * inner * c * hw + 2 * hw * hw * inner + c * inner * hw;
            cost.params = 4 * conv_params(static_cast<int>(inner), channels, 1);
            break;
        }
    }
    return cost;
}

CostReport count_macs(const BackboneConfig& cfg, const InsertionPlan& plan) {
    cfg.validate();
    plan.validate(cfg);
    CostReport report;
    report.config_id = plan.str();
    const auto positions = enumerate_positions(cfg);

    // Stem: 7x7/2 conv at half resolution, then the pool.
    {
        const int h1 = detail::floor_conv_out(cfg.input_h, 7, 2, 3);
        const int w1 = detail::floor_conv_out(cfg.input_w, 7, 2, 3);
        LayerCost stem{"stem", conv_macs(cfg.stem_channels(), 3, 7, h1, w1),
                       conv_params(cfg.stem_channels(), 3, 7) + 2 * cfg.stem_channels()};
        report.per_layer.push_back(stem);
        report.elementwise += static_cast<int64_t>(cfg.stem_channels()) * h1 * w1 * 3;
    }

    int in_c = cfg.stem_channels();
    size_t pos_idx = 1;  // positions[0] is the stem site
    for (int s = 0; s < 4; ++s) {
        const int mid = cfg.stage_mid(s);
        const int out_c = cfg.stage_out(s);
        for (int b = 0; b < cfg.stage_depths[static_cast<size_t>(s)]; ++b, ++pos_idx) {
            const auto& site = positions[pos_idx];  // shape after this block
            const int h = site.h, w = site.w;
            // conv1 runs at the block's input resolution (stride lives on
            // conv2); for a stride-2 block that is twice the output size.
            const bool strided = b == 0 && cfg.stage_stride(s) == 2;
            const int in_h = strided ? positions[pos_idx - 1].h : h;
            const int in_w = strided ? positions[pos_idx - 1].w : w;
            LayerCost block{"s" + std::to_string(s) + ".b" + std::to_string(b), 0, 0};
            block.macs += conv_macs(mid, in_c, 1, in_h, in_w);
            block.macs += conv_macs(mid, mid, 3, h, w);
            block.macs += conv_macs(out_c, mid, 1, h, w);
            block.params += conv_params(mid, in_c, 1) + conv_params(mid, mid, 3) +
                            conv_params(out_c, mid, 1) + 2 * (mid + mid + out_c);
            if (b == 0 && (cfg.stage_stride(s) == 2 || in_c != out_c)) {
                block.macs += conv_macs(out_c, in_c, 1, h, w);
                block.params += conv_params(out_c, in_c, 1) + 2 * out_c;
            }
            report.per_layer.push_back(block);
            report.elementwise += static_cast<int64_t>(out_c) * h * w * 4;
            in_c = out_c;
        }
    }

    for (const auto& [pos, spec] : plan.entries) {
        const auto& site = positions[static_cast<size_t>(pos - 1)];
        LayerCost block = count_block_cost(spec, site.channels, site.h, site.w);
        block.name = "attn" + std::to_string(pos) + "." + block.name;
        report.per_layer.push_back(block);
        // GAP adds and the gating multiply (channel-wise kinds), or the
        // residual add (NL).
        report.elementwise += 2 * static_cast<int64_t>(site.channels) * site.h * site.w;
    }

    {
        LayerCost neck{"neck.bn", 0, 2 * cfg.final_dim()};
        report.per_layer.push_back(neck);
        report.elementwise += cfg.final_dim();
        LayerCost cls{"classifier",
                      static_cast<int64_t>(cfg.final_dim()) * cfg.num_classes,
                      static_cast<int64_t>(cfg.final_dim()) * cfg.num_classes};
        report.per_layer.push_back(cls);
    }

    for (const auto& layer : report.per_layer) {
        report.total_macs += layer.macs;
        report.total_params += layer.params;
    }
    return report;
}

std::string machine_descriptor() {
    std::string model = "unknown-cpu";
    std::ifstream cpuinfo("/proc/cpuinfo");
    std::string line;
    while (std::getline(cpuinfo, line)) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                model = line.substr(colon + 1);
                while (!model.empty() && model.front() == ' ') model.erase(model.begin());
            }
            break;
        }
    }
    return model + " / " + std::to_string(std::thread::hardware_concurrency()) +
           " hw threads / intra-op " + std::to_string(intra_op_threads());
}

CostReport benchmark_latency(Model& model, int batch_size, int warmup, int iters,
                             uint64_t seed) {
    check_shape(iters >= 1, "benchmark_latency: iters must be >= 1");
    check_shape(batch_size >= 1, "benchmark_latency: batch size must be >= 1");
    CostReport report = count_macs(model.config(), model.plan());
    model.set_training(false);
    NoGradGuard no_grad;

    Rng rng(Rng::mix(seed, "bench.input"));
    auto batch = Tensor<float>::randn({batch_size, 3, model.config().input_h,
                                       model.config().input_w},
                                      rng);
    for (int i = 0; i < warmup; ++i) model.forward_features(batch);

    std::vector<double> ms(static_cast<size_t>(iters));
    for (int i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        auto features = model.forward_features(batch);
        const auto t1 = std::chrono::steady_clock::now();
        check_finite(features, "benchmark forward output");
        ms[static_cast<size_t>(i)] =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    double mean = 0.0;
    for (double v : ms) mean += v;
    mean /= static_cast<double>(iters);
    double var = 0.0;
    for (double v : ms) var += (v - mean) * (v - mean);
    var /= static_cast<double>(iters);

    report.measured = true;
    report.ms_per_batch = mean;
    report.ms_std = std::sqrt(var);
    report.batches_per_second = 1000.0 / mean;
    report.batch_size = batch_size;
    report.warmup = warmup;
    report.iters = iters;
    report.machine = machine_descriptor();
    return report;
}

ParetoSplit pareto_filter(const std::vector<ParetoPoint>& trials, const ParetoPoint& ref_fast,
                          const ParetoPoint& ref_deep) {
    ParetoSplit split;
    for (const auto& t : trials) {
        const bool dominated_by_deep = t.speed < ref_deep.speed && t.map < ref_deep.map;
        const bool below_fast = t.map < ref_fast.map;
        if (dominated_by_deep || below_fast) {
            split.rejected.push_back(t);
        } else {
            split.kept.push_back(t);
        }
    }
    return split;
}

}  // namespace attnlab
