#include "attnlab/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "attnlab/reporting.hpp"

namespace attnlab {

namespace {

using json = nlohmann::json;

int parse_int(const std::string& s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::invalid_argument("expected an integer, got '" + s + "'");
    return v;
}

uint64_t parse_u64(const std::string& s) {
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::invalid_argument("expected an unsigned integer, got '" + s + "'");
    return v;
}

float parse_float(const std::string& s) {
    float v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::invalid_argument("expected a number, got '" + s + "'");
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument("expected true/false, got '" + s + "'");
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    size_t p = 0;
    while (p < s.size()) {
        size_t comma = s.find(',', p);
        if (comma == std::string::npos) comma = s.size();
        out.push_back(parse_int(s.substr(p, comma - p)));
        p = comma + 1;
    }
    return out;
}

using Setter = std::function<void(AppConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"plan", [](AppConfig& c, const std::string& v) { c.plan = v; }},
        {"attn_r", [](AppConfig& c, const std::string& v) { c.attn_r = parse_int(v); }},
        {"nl_inner_num",
         [](AppConfig& c, const std::string& v) { c.nl_inner_num = parse_int(v); }},
        {"nl_inner_den",
         [](AppConfig& c, const std::string& v) { c.nl_inner_den = parse_int(v); }},
        {"scale_similarity",
         [](AppConfig& c, const std::string& v) { c.scale_similarity = parse_bool(v); }},
        {"stage_depths",
         [](AppConfig& c, const std::string& v) {
             auto d = parse_int_list(v);
             if (d.size() != 4)
                 throw std::invalid_argument("stage_depths needs exactly 4 entries");
             c.stage_depths = d;
         }},
        {"base_width",
         [](AppConfig& c, const std::string& v) { c.base_width = parse_int(v); }},
        {"width_divisor",
         [](AppConfig& c, const std::string& v) { c.width_divisor = parse_int(v); }},
        {"last_stride",
         [](AppConfig& c, const std::string& v) { c.last_stride = parse_int(v); }},
        {"input_h", [](AppConfig& c, const std::string& v) { c.input_h = parse_int(v); }},
        {"input_w", [](AppConfig& c, const std::string& v) { c.input_w = parse_int(v); }},
        {"num_classes",
         [](AppConfig& c, const std::string& v) { c.num_classes = parse_int(v); }},
        {"data_root", [](AppConfig& c, const std::string& v) { c.data_root = v; }},
        {"manifest", [](AppConfig& c, const std::string& v) { c.manifest = v; }},
        {"synth_train_ids",
         [](AppConfig& c, const std::string& v) { c.synth_train_ids = parse_int(v); }},
        {"synth_test_ids",
         [](AppConfig& c, const std::string& v) { c.synth_test_ids = parse_int(v); }},
        {"synth_imgs_per_id",
         [](AppConfig& c, const std::string& v) { c.synth_imgs_per_id = parse_int(v); }},
        {"synth_cams",
         [](AppConfig& c, const std::string& v) { c.synth_cams = parse_int(v); }},
        {"loss",
         [](AppConfig& c, const std::string& v) {
             if (v != "ce" && v != "circle")
                 throw std::invalid_argument("loss must be ce or circle, got '" + v + "'");
             c.loss = v;
         }},
        {"label_smoothing",
         [](AppConfig& c, const std::string& v) { c.label_smoothing = parse_float(v); }},
        {"circle_gamma",
         [](AppConfig& c, const std::string& v) { c.circle_gamma = parse_float(v); }},
        {"circle_m",
         [](AppConfig& c, const std::string& v) { c.circle_m = parse_float(v); }},
        {"circle_weight",
         [](AppConfig& c, const std::string& v) { c.circle_weight = parse_float(v); }},
        {"epochs", [](AppConfig& c, const std::string& v) { c.epochs = parse_int(v); }},
        {"warmup_epochs",
         [](AppConfig& c, const std::string& v) { c.warmup_epochs = parse_int(v); }},
        {"base_lr", [](AppConfig& c, const std::string& v) { c.base_lr = parse_float(v); }},
        {"decay_epochs", [](AppConfig& c, const std::string& v) {
             parse_int_list(v);  // validate now, reparse at use
             c.decay_epochs = v;
         }},
        {"momentum",
         [](AppConfig& c, const std::string& v) { c.momentum = parse_float(v); }},
        {"weight_decay",
         [](AppConfig& c, const std::string& v) { c.weight_decay = parse_float(v); }},
        {"p_ids", [](AppConfig& c, const std::string& v) { c.p_ids = parse_int(v); }},
        {"k_per_id", [](AppConfig& c, const std::string& v) { c.k_per_id = parse_int(v); }},
        {"batches_per_epoch",
         [](AppConfig& c, const std::string& v) { c.batches_per_epoch = parse_int(v); }},
        {"flip_prob",
         [](AppConfig& c, const std::string& v) { c.flip_prob = parse_float(v); }},
        {"erasing_prob",
         [](AppConfig& c, const std::string& v) { c.erasing_prob = parse_float(v); }},
        {"pad", [](AppConfig& c, const std::string& v) { c.pad = parse_int(v); }},
        {"train_seeds",
         [](AppConfig& c, const std::string& v) { c.train_seeds = parse_int(v); }},
        {"bench_batch",
         [](AppConfig& c, const std::string& v) { c.bench_batch = parse_int(v); }},
        {"bench_warmup",
         [](AppConfig& c, const std::string& v) { c.bench_warmup = parse_int(v); }},
        {"bench_iters",
         [](AppConfig& c, const std::string& v) { c.bench_iters = parse_int(v); }},
        {"bench_measure",
         [](AppConfig& c, const std::string& v) { c.bench_measure = parse_bool(v); }},
        {"bench_deep",
         [](AppConfig& c, const std::string& v) { c.bench_deep = parse_bool(v); }},
        {"protocol",
         [](AppConfig& c, const std::string& v) {
             if (v != "default" && v != "roreas-shape")
                 throw std::invalid_argument("protocol must be default or roreas-shape");
             c.protocol = v;
         }},
        {"eval_batch",
         [](AppConfig& c, const std::string& v) { c.eval_batch = parse_int(v); }},
        {"budget", [](AppConfig& c, const std::string& v) { c.budget = parse_int(v); }},
        {"seeds_per_trial",
         [](AppConfig& c, const std::string& v) { c.seeds_per_trial = parse_int(v); }},
        {"max_blocks",
         [](AppConfig& c, const std::string& v) { c.max_blocks = parse_int(v); }},
        {"kinds", [](AppConfig& c, const std::string& v) { c.kinds = v; }},
        {"positions", [](AppConfig& c, const std::string& v) {
             if (!v.empty()) parse_int_list(v);  // validate now, reparse at use
             c.positions = v;
         }},
        {"seed", [](AppConfig& c, const std::string& v) { c.seed = parse_u64(v); }},
        {"threads", [](AppConfig& c, const std::string& v) { c.threads = parse_int(v); }},
        {"out_dir", [](AppConfig& c, const std::string& v) { c.out_dir = v; }},
    };
    return table;
}

}  // namespace

void apply_entry(AppConfig& cfg, const ConfigEntry& entry) {
    auto it = setters().find(entry.key);
    if (it == setters().end())
        throw std::invalid_argument("unknown config key '" + entry.key + "'");
    try {
        it->second(cfg, entry.value);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config key '" + entry.key + "': " + e.what());
    }
}

AppConfig preset_config(const std::string& name) {
    AppConfig cfg;
    if (name.empty() || name == "full") return cfg;
    if (name == "desk") {
        cfg.width_divisor = 8;
        cfg.input_h = 64;
        cfg.input_w = 32;
        cfg.num_classes = 50;
        cfg.attn_r = 4;  // insertable at every site down to the 8-channel stem
        cfg.pad = 2;     // crop jitter proportional to the quarter-size canvas
        return cfg;
    }
    throw std::invalid_argument("unknown preset '" + name + "' (expected full or desk)");
}

std::vector<ConfigEntry> load_config_file(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw DataError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    check_data(j.is_object(), "config file '" + path + "' must hold a JSON object");
    std::vector<ConfigEntry> out;
    for (const auto& [key, val] : j.items()) {
        std::string text;
        if (val.is_string()) {
            text = val.get<std::string>();
        } else if (val.is_boolean()) {
            text = val.get<bool>() ? "true" : "false";
        } else if (val.is_number_integer()) {
            text = fmt_int(val.get<int64_t>());
        } else if (val.is_number_float()) {
            text = fmt_double(val.get<double>());
        } else if (val.is_array()) {
            for (size_t i = 0; i < val.size(); ++i) {
                check_data(val[i].is_number_integer(),
                           "config key '" + key + "': arrays must hold integers");
                if (i) text += ',';
                text += fmt_int(val[i].get<int64_t>());
            }
        } else {
            throw DataError("config key '" + key + "' has an unsupported JSON type");
        }
        out.push_back({key, text});
    }
    return out;
}

AppConfig resolve_config(const std::vector<ConfigEntry>& file_entries,
                         const std::vector<ConfigEntry>& cli_entries) {
    std::string preset;
    for (const auto& e : file_entries)
        if (e.key == "preset") preset = e.value;
    for (const auto& e : cli_entries)
        if (e.key == "preset") preset = e.value;

    AppConfig cfg = preset_config(preset);
    for (const auto& e : file_entries)
        if (e.key != "preset") apply_entry(cfg, e);
    for (const auto& e : cli_entries)
        if (e.key != "preset") apply_entry(cfg, e);
    return cfg;
}

BackboneConfig backbone_of(const AppConfig& cfg) {
    BackboneConfig b;
    std::copy(cfg.stage_depths.begin(), cfg.stage_depths.end(), b.stage_depths.begin());
    b.base_width = cfg.base_width;
    b.width_divisor = cfg.width_divisor;
    b.last_stride = cfg.last_stride;
    b.input_h = cfg.input_h;
    b.input_w = cfg.input_w;
    b.num_classes = cfg.num_classes;
    return b;
}

AttentionSpec attention_spec_of(const AppConfig& cfg) {
    AttentionSpec spec;
    spec.r = cfg.attn_r;
    spec.inner_num = cfg.nl_inner_num;
    spec.inner_den = cfg.nl_inner_den;
    spec.scale_similarity = cfg.scale_similarity;
    return spec;
}

InsertionPlan plan_of(const AppConfig& cfg) {
    return InsertionPlan::parse(cfg.plan, attention_spec_of(cfg));
}

std::vector<int> parse_int_csv(const std::string& s) { return parse_int_list(s); }

std::vector<AttentionKind> parse_kinds_csv(const std::string& s) {
    std::vector<AttentionKind> out;
    size_t p = 0;
    while (p < s.size()) {
        size_t comma = s.find(',', p);
        if (comma == std::string::npos) comma = s.size();
        const std::string k = s.substr(p, comma - p);
        if (k == "se") out.push_back(AttentionKind::SE);
        else if (k == "hac") out.push_back(AttentionKind::HAC);
        else if (k == "nl") out.push_back(AttentionKind::NL);
        else if (k == "cnl") out.push_back(AttentionKind::CNL);
        else throw std::invalid_argument("unknown attention kind '" + k + "'");
        p = comma + 1;
    }
    if (out.empty()) throw std::invalid_argument("kinds list is empty");
    return out;
}

TrainConfig train_config_of(const AppConfig& cfg) {
    TrainConfig t;
    t.loss = cfg.loss == "circle" ? LossKind::Circle : LossKind::CE_LS;
    t.label_smoothing = cfg.label_smoothing;
    t.circle_gamma = cfg.circle_gamma;
    t.circle_m = cfg.circle_m;
    t.circle_weight = cfg.circle_weight;
    t.epochs = cfg.epochs;
    t.warmup_epochs = cfg.warmup_epochs;
    t.base_lr = cfg.base_lr;
    if (!cfg.decay_epochs.empty()) t.decay_epochs = parse_int_list(cfg.decay_epochs);
    t.momentum = cfg.momentum;
    t.weight_decay = cfg.weight_decay;
    t.p_ids = cfg.p_ids;
    t.k_per_id = cfg.k_per_id;
    t.batches_per_epoch = cfg.batches_per_epoch;
    t.augment.flip_prob = cfg.flip_prob;
    t.augment.erasing_prob = cfg.erasing_prob;
    t.augment.pad = cfg.pad;
    t.seed = cfg.seed;
    return t;
}

}  // namespace attnlab
