#pragma once

// Flat run configuration shared by every CLI command. Values resolve as
// defaults < preset < config file < command-line overrides, and unknown keys
// are an error, never silently dropped.

#include <cstdint>
#include <string>
#include <vector>

#include "attnlab/backbone.hpp"
#include "attnlab/train.hpp"

namespace attnlab {

struct AppConfig {
    // model
    std::string plan = "none";
    int attn_r = 16;
    int nl_inner_num = 1, nl_inner_den = 2;
    bool scale_similarity = false;

    // backbone
    std::vector<int> stage_depths{3, 4, 6, 3};
    int base_width = 64;
    int width_divisor = 1;
    int last_stride = 1;
    int input_h = 256, input_w = 128;
    int num_classes = 751;

    // data: folder dataset when data_root is set, synthetic otherwise
    std::string data_root;
    std::string manifest = "manifest.txt";
    int synth_train_ids = 50, synth_test_ids = 64;
    int synth_imgs_per_id = 20, synth_cams = 3;

    // training
    std::string loss = "ce";  // ce | circle
    float label_smoothing = 0.1f;
    float circle_gamma = 128.0f, circle_m = 0.25f, circle_weight = 1.0f;
    int epochs = 10, warmup_epochs = 10;
    float base_lr = 0.01f;
    std::string decay_epochs;  // comma-joined; empty = 50%/75% of epochs
    float momentum = 0.9f, weight_decay = 5e-4f;
    int p_ids = 8, k_per_id = 4, batches_per_epoch = 0;
    float flip_prob = 0.5f, erasing_prob = 0.5f;
    int pad = 10;
    int train_seeds = 1;  // independent runs aggregated mean±std

    // bench
    int bench_batch = 16, bench_warmup = 50, bench_iters = 500;
    bool bench_measure = true;
    bool bench_deep = false;

    // eval
    std::string protocol = "default";  // default | roreas-shape
    int eval_batch = 16;

    // search
    int budget = 16;
    int seeds_per_trial = 3;
    int max_blocks = 3;
    std::string kinds = "se,hac,nl,cnl";
    std::string positions;  // comma-joined sweep positions; empty = all

    // misc
    uint64_t seed = 7;
    int threads = 1;
    std::string out_dir = "out";
};

// One key=value assignment from a config file or a --set flag.
struct ConfigEntry {
    std::string key, value;
};

// Known keys only; throws std::invalid_argument on an unknown key or an
// unparseable value. `preset` entries must be resolved beforehand.
void apply_entry(AppConfig& cfg, const ConfigEntry& entry);

// Named default sets; "" and "full" keep the full-scale defaults, "desk"
// shrinks widths/inputs for laptop-speed runs.
AppConfig preset_config(const std::string& name);

// Reads a flat JSON object file into entries (scalars and int arrays).
std::vector<ConfigEntry> load_config_file(const std::string& path);

// Full resolution: preset (last `preset` key wins across file+cli), then
// file entries, then cli entries.
AppConfig resolve_config(const std::vector<ConfigEntry>& file_entries,
                         const std::vector<ConfigEntry>& cli_entries);

// Derived views.
BackboneConfig backbone_of(const AppConfig& cfg);
AttentionSpec attention_spec_of(const AppConfig& cfg);
InsertionPlan plan_of(const AppConfig& cfg);
TrainConfig train_config_of(const AppConfig& cfg);

// Comma-joined list parsing shared with the CLI.
std::vector<int> parse_int_csv(const std::string& s);
std::vector<AttentionKind> parse_kinds_csv(const std::string& s);

}  // namespace attnlab
