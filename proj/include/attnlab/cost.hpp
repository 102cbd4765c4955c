#pragma once

// Analytic MAC/parameter accounting and the wall-clock latency harness.
//
// MACs are counted per image for the multiply-accumulate core of conv,
// linear, and attention matmuls; BN, activations, pooling adds, and gating
// multiplies are tallied separately as elementwise ops. Measured latency is
// host-specific and used only for ordering and overhead ratios.

#include <cstdint>
#include <string>
#include <vector>

#include "attnlab/backbone.hpp"

namespace attnlab {

struct LayerCost {
    std::string name;
    int64_t macs = 0;    // per image
    int64_t params = 0;  // learnable scalars
};

struct CostReport {
    std::string config_id;  // plan string or reference tag
    int64_t total_macs = 0;
    int64_t total_params = 0;
    int64_t elementwise = 0;  // per-image elementwise op count, reported separately
    std::vector<LayerCost> per_layer;

    // Measured latency (optional).
    bool measured = false;
    double ms_per_batch = 0.0;
    double ms_std = 0.0;
    double batches_per_second = 0.0;
    int batch_size = 0;
    int warmup = 0, iters = 0;
    std::string machine;

    // Ordering proxy available with or without measurement: measured
    // batches/sec when present, otherwise an analytic scale of 1e9/MACs.
    double speed() const {
        return measured ? batches_per_second : 1e9 / static_cast<double>(total_macs);
    }
};

// Cost of one attention block on a tensor of the given shape.
LayerCost count_block_cost(const AttentionSpec& spec, int channels, int h, int w);

// Analytic walk over the architecture; per-layer rows for the stem, each
// residual block, each attention instance, the neck, and the classifier.
CostReport count_macs(const BackboneConfig& cfg, const InsertionPlan& plan);

// Hardware/software descriptor recorded in latency reports.
std::string machine_descriptor();

// Timed forward passes on random data (eval mode, no gradients). Fills the
// measured fields of count_macs(cfg, plan).
CostReport benchmark_latency(Model& model, int batch_size, int warmup, int iters,
                             uint64_t seed);

// ---- Pareto exclusion ---------------------------------------------------------

struct ParetoPoint {
    std::string id;
    double map = 0.0;    // accuracy
    double speed = 0.0;  // batches/sec or analytic proxy; higher is faster
};

struct ParetoSplit {
    std::vector<ParetoPoint> kept, rejected;
};

// Rejects a trial iff it is slower AND less accurate than the deep
// reference, or less accurate than the fast reference.
ParetoSplit pareto_filter(const std::vector<ParetoPoint>& trials, const ParetoPoint& ref_fast,
                          const ParetoPoint& ref_deep);

}  // namespace attnlab
