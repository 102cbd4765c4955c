// Cost accounting, Pareto exclusion, checkpoint serialization, report
// rendering, and config resolution.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "attnlab/checkpoint.hpp"
#include "attnlab/config.hpp"
#include "attnlab/cost.hpp"
#include "attnlab/reporting.hpp"

using namespace attnlab;

namespace {

namespace fs = std::filesystem;

std::string temp_dir(const char* tag) {
    auto p = fs::temp_directory_path() / (std::string("attnlab_infra_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

}  // namespace

TEST_CASE("conv mac counting: worked example") {
    // stem conv of the desk preset: 7x7, 3 -> 8 channels, stride 2 on 64x32
    // output 32x16; macs = out_h*out_w*out_c*in_c*k*k
    BackboneConfig cfg = BackboneConfig::desk_preset();
    auto report = count_macs(cfg, InsertionPlan{});
    REQUIRE_FALSE(report.per_layer.empty());
    CHECK(report.per_layer[0].name == "stem");
    CHECK(report.per_layer[0].macs == 32LL * 16 * 8 * 3 * 7 * 7);
    CHECK(report.per_layer[0].params == 8LL * 3 * 7 * 7 + 2 * 8);  // conv + stem BN
    CHECK(report.total_macs > 0);
    CHECK_FALSE(report.measured);

    // parameter count must equal the live model's parameter tally
    Model model(cfg, InsertionPlan{}, 1);
    int64_t live = 0;
    for (const auto& p : model.parameters()) live += p.tensor.numel();
    CHECK(report.total_params == live);
}

TEST_CASE("attention cost is position-invariant for fixed shape") {
    BackboneConfig cfg = BackboneConfig::desk_preset();
    const auto positions = enumerate_positions(cfg);
    AttentionSpec spec;
    spec.kind = AttentionKind::CNL;
    spec.r = 4;
    // positions 5..8 share stage-2 shape; block cost must be identical there
    const auto a = count_block_cost(spec, positions[4].channels, positions[4].h,
                                    positions[4].w);
    const auto b = count_block_cost(spec, positions[7].channels, positions[7].h,
                                    positions[7].w);
    CHECK(a.macs == b.macs);
    CHECK(a.params == b.params);
}

TEST_CASE("channel attention is orders of magnitude cheaper than spatial") {
    BackboneConfig cfg = BackboneConfig::desk_preset();
    const auto positions = enumerate_positions(cfg);
    AttentionSpec cnl;
    cnl.kind = AttentionKind::CNL;
    cnl.r = 4;
    AttentionSpec nl;
    nl.kind = AttentionKind::NL;
    for (const auto& p : positions) {
        const auto cheap = count_block_cost(cnl, p.channels, p.h, p.w);
        const auto heavy = count_block_cost(nl, p.channels, p.h, p.w);
        CHECK(cheap.macs < heavy.macs);
    }
    // at the early high-resolution sites the gap is content: HW^2 vs pooled
    const auto cheap1 = count_block_cost(cnl, positions[0].channels, positions[0].h,
                                         positions[0].w);
    const auto heavy1 = count_block_cost(nl, positions[0].channels, positions[0].h,
                                         positions[0].w);
    CHECK(heavy1.macs / std::max<int64_t>(cheap1.macs, 1) > 1000);
}

TEST_CASE("se counts as extra block parameters inside the walk") {
    BackboneConfig cfg = BackboneConfig::desk_preset();
    AttentionSpec se;
    se.kind = AttentionKind::SE;
    se.r = 4;
    InsertionPlan plan;
    plan.entries.emplace(6, se);
    const auto with = count_macs(cfg, plan);
    const auto without = count_macs(cfg, InsertionPlan{});
    CHECK(with.total_macs > without.total_macs);
    CHECK(with.total_params > without.total_params);

    Model model(cfg, plan, 1);
    int64_t live = 0;
    for (const auto& p : model.parameters()) live += p.tensor.numel();
    CHECK(with.total_params == live);
}

TEST_CASE("pareto filter: worked example") {
    const ParetoPoint fast{"fast", 0.80, 10.0};
    const ParetoPoint deep{"deep", 0.88, 4.0};
    std::vector<ParetoPoint> trials{
        {"better_both", 0.85, 12.0},   // keep: beats fast on map, faster than deep
        {"worse_map", 0.79, 15.0},     // reject: below the fast reference's accuracy
        {"slow_weak", 0.85, 3.0},      // reject: slower and weaker than deep
        {"slow_strong", 0.89, 3.5},    // keep: slower but more accurate than deep
        {"exact_fast", 0.80, 10.0},    // keep: ties are not strictly worse
    };
    const auto split = pareto_filter(trials, fast, deep);
    REQUIRE(split.kept.size() == 3);
    REQUIRE(split.rejected.size() == 2);
    CHECK(split.kept[0].id == "better_both");
    CHECK(split.kept[1].id == "slow_strong");
    CHECK(split.kept[2].id == "exact_fast");
    CHECK(split.rejected[0].id == "worse_map");
    CHECK(split.rejected[1].id == "slow_weak");
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const std::string dir = temp_dir("ckpt");
    BackboneConfig cfg = BackboneConfig::desk_preset();
    cfg.num_classes = 6;
    AttentionSpec base;
    base.r = 4;
    Model model(cfg, InsertionPlan::parse("cnl@6+se@8", base), 99);
    save_checkpoint(dir + "/m.ckpt", model);
    Model back = load_checkpoint(dir + "/m.ckpt");

    CHECK(back.plan().str() == model.plan().str());
    CHECK(back.config().num_classes == 6);
    CHECK(back.seed() == model.seed());

    const auto pa = model.parameters();
    const auto pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        REQUIRE(pa[i].tensor.numel() == pb[i].tensor.numel());
        CHECK(std::memcmp(pa[i].tensor.data(), pb[i].tensor.data(),
                          sizeof(float) * static_cast<size_t>(pa[i].tensor.numel())) == 0);
    }
    const auto ba = model.buffers();
    const auto bb = back.buffers();
    REQUIRE(ba.size() == bb.size());
    for (size_t i = 0; i < ba.size(); ++i)
        CHECK(std::memcmp(ba[i].tensor.data(), bb[i].tensor.data(),
                          sizeof(float) * static_cast<size_t>(ba[i].tensor.numel())) == 0);

    // identical forward pass through the restored model
    Rng rng(5);
    auto batch = Tensor<float>::randn({2, 3, 64, 32}, rng);
    NoGradGuard ng;
    auto ya = model.forward_features(batch);
    auto yb = back.forward_features(batch);
    CHECK(std::memcmp(ya.data(), yb.data(),
                      sizeof(float) * static_cast<size_t>(ya.numel())) == 0);
}

TEST_CASE("checkpoint corruption is rejected loudly") {
    const std::string dir = temp_dir("ckpt_bad");
    BackboneConfig cfg = BackboneConfig::desk_preset();
    cfg.num_classes = 3;
    Model model(cfg, InsertionPlan{}, 1);
    const std::string path = dir + "/m.ckpt";
    save_checkpoint(path, model);

    auto mutate = [&](const char* name, auto fn) {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        fn(bytes);
        const std::string out = dir + "/" + name;
        std::ofstream o(out, std::ios::binary);
        o.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        return out;
    };

    const auto bad_magic = mutate("magic.ckpt", [](std::string& b) { b[0] = 'X'; });
    CHECK_THROWS_AS(load_checkpoint(bad_magic), DataError);

    const auto truncated =
        mutate("short.ckpt", [](std::string& b) { b.resize(b.size() - 13); });
    CHECK_THROWS_AS(load_checkpoint(truncated), DataError);

    const auto trailing = mutate("long.ckpt", [](std::string& b) { b += "junk"; });
    CHECK_THROWS_AS(load_checkpoint(trailing), DataError);

    const auto bad_json = mutate("json.ckpt", [](std::string& b) {
        // headers start right after magic+version+length = 16 bytes
        b[16] = '?';
    });
    CHECK_THROWS_AS(load_checkpoint(bad_json), DataError);

    CHECK_THROWS_AS(load_checkpoint(dir + "/missing.ckpt"), DataError);
}

TEST_CASE("csv encoding round-trips, quotes and schema line included") {
    CsvTable t;
    t.schema = "demo";
    t.version = 1;
    t.header = {"plan", "value", "note"};
    t.rows = {{"cnl@6,8,14", "1.5", "plain"},
              {"se@1", "-2", "quote\"inside"},
              {"nl@4", "0", "multi\nline"}};
    const std::string text = csv_encode(t);
    CHECK(text.rfind("# schema: demo v1\n", 0) == 0);
    // the plan with commas must be quoted
    CHECK(text.find("\"cnl@6,8,14\"") != std::string::npos);

    const CsvTable back = csv_parse(text);
    CHECK(back.schema == t.schema);
    CHECK(back.version == t.version);
    CHECK(back.header == t.header);
    REQUIRE(back.rows.size() == t.rows.size());
    for (size_t i = 0; i < t.rows.size(); ++i) CHECK(back.rows[i] == t.rows[i]);

    CHECK_THROWS_AS(csv_parse("plan,value\nx,1\n"), DataError);  // no schema line
    CHECK_THROWS_AS(csv_parse("# schema: demo v1\na,b\n1\n"), DataError);  // ragged row
}

TEST_CASE("float formatting is shortest round-trip") {
    CHECK(fmt_double(0.5) == "0.5");
    CHECK(fmt_double(1e9) == "1e+09");
    CHECK(fmt_double(0.8707) == "0.8707");
    CHECK(fmt_int(123456789) == "123456789");
    CHECK(fmt_double_fixed(3.14159, 2) == "3.14");
    // round-trip: parsing the text recovers the exact double
    const double v = 0.1 + 0.2;
    CHECK(std::stod(fmt_double(v)) == v);
}

TEST_CASE("svg rendering is deterministic and escapes labels") {
    std::vector<PlotPoint> pts{{10.0, 0.85, "cnl@6", false},
                               {4.0, 0.88, "deep<&>", true},
                               {15.0, 0.80, "se@1", false}};
    const std::string a = render_scatter_svg(pts, "speed & accuracy");
    const std::string b = render_scatter_svg(pts, "speed & accuracy");
    CHECK(a == b);
    CHECK(a.find("speed &amp; accuracy") != std::string::npos);
    CHECK(a.find("deep&lt;&amp;&gt;") != std::string::npos);
    CHECK(a.find("<circle") != std::string::npos);  // trial markers
    CHECK(a.find("<path") != std::string::npos);    // anchor diamonds
    CHECK(a.find("width=\"800\"") != std::string::npos);

    const std::string empty = render_scatter_svg({}, "empty");
    CHECK(empty.find("no data") != std::string::npos);
}

TEST_CASE("config: defaults, preset, file, cli precedence") {
    const std::string dir = temp_dir("config");
    {
        std::ofstream out(dir + "/cfg.json");
        out << "{\"preset\": \"desk\", \"epochs\": 3, \"base_lr\": 0.02}";
    }
    const auto file_entries = load_config_file(dir + "/cfg.json");
    // cli overrides the file; the preset supplies desk geometry
    const auto cfg = resolve_config(file_entries, {{"epochs", "5"}});
    CHECK(cfg.width_divisor == 8);      // from the desk preset
    CHECK(cfg.input_h == 64);
    CHECK(cfg.base_lr == doctest::Approx(0.02));  // from the file
    CHECK(cfg.epochs == 5);             // cli wins over file
    CHECK(cfg.momentum == doctest::Approx(0.9));  // untouched default

    // a cli preset overrides the file's preset choice
    const auto cfg2 = resolve_config(file_entries, {{"preset", "full"}});
    CHECK(cfg2.width_divisor == 1);
    CHECK(cfg2.epochs == 3);  // file entry still applies on top

    CHECK_THROWS_AS(resolve_config({}, {{"no_such_key", "1"}}), std::invalid_argument);
    CHECK_THROWS_AS(resolve_config({}, {{"epochs", "banana"}}), std::invalid_argument);
    CHECK_THROWS_AS(resolve_config({}, {{"preset", "galaxy"}}), std::invalid_argument);
}

TEST_CASE("config file parsing accepts json scalars and rejects nests") {
    const std::string dir = temp_dir("config_json");
    {
        std::ofstream out(dir + "/ok.json");
        out << "{\"plan\": \"cnl@6\", \"bench_measure\": false, \"stage_depths\": "
               "[2,2,2,2], \"circle_weight\": 0.5}";
    }
    const auto entries = load_config_file(dir + "/ok.json");
    const auto cfg = resolve_config(entries, {});
    CHECK(cfg.plan == "cnl@6");
    CHECK_FALSE(cfg.bench_measure);
    CHECK(cfg.stage_depths == std::vector<int>{2, 2, 2, 2});
    CHECK(cfg.circle_weight == doctest::Approx(0.5));

    {
        std::ofstream out(dir + "/nested.json");
        out << "{\"training\": {\"epochs\": 3}}";
    }
    CHECK_THROWS_AS(load_config_file(dir + "/nested.json"), DataError);
    {
        std::ofstream out(dir + "/broken.json");
        out << "{\"epochs\": ";
    }
    CHECK_THROWS_AS(load_config_file(dir + "/broken.json"), DataError);
    CHECK_THROWS_AS(load_config_file(dir + "/absent.json"), DataError);
}

TEST_CASE("config derived views: backbone, spec, plan, training") {
    AppConfig cfg;
    cfg.width_divisor = 8;
    cfg.input_h = 64;
    cfg.input_w = 32;
    cfg.plan = "cnl@6,8";
    cfg.attn_r = 4;
    cfg.scale_similarity = true;
    cfg.loss = "circle";
    const auto backbone = backbone_of(cfg);
    CHECK(backbone.width_divisor == 8);
    const auto spec = attention_spec_of(cfg);
    CHECK(spec.r == 4);
    CHECK(spec.scale_similarity);
    const auto plan = plan_of(cfg);
    CHECK(plan.str() == "cnl@6,8");
    CHECK(plan.entries.at(6).r == 4);
    const auto tc = train_config_of(cfg);
    CHECK(tc.loss == LossKind::Circle);

    // the boundary rejects unknown loss names before any derived view runs
    CHECK_THROWS_AS(resolve_config({}, {{"loss", "nonsense"}}), std::invalid_argument);
}

TEST_CASE("list parsing helpers") {
    CHECK(parse_int_csv("6,8,14") == std::vector<int>{6, 8, 14});
    CHECK_THROWS_AS(parse_int_csv("6,,8"), std::invalid_argument);
    CHECK_THROWS_AS(parse_int_csv("6,x"), std::invalid_argument);
    const auto kinds = parse_kinds_csv("se,cnl");
    REQUIRE(kinds.size() == 2);
    CHECK(kinds[0] == AttentionKind::SE);
    CHECK(kinds[1] == AttentionKind::CNL);
    CHECK_THROWS_AS(parse_kinds_csv("se,what"), std::invalid_argument);
    CHECK_THROWS_AS(parse_kinds_csv(""), std::invalid_argument);
}
