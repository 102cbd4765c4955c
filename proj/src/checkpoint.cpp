#include "attnlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

namespace attnlab {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'A', 'T', 'N', 'L'};
constexpr uint32_t kVersion = 1;

json config_to_json(const BackboneConfig& cfg) {
    return json{{"stage_depths", cfg.stage_depths},
                {"base_width", cfg.base_width},
                {"width_divisor", cfg.width_divisor},
                {"last_stride", cfg.last_stride},
                {"input_h", cfg.input_h},
                {"input_w", cfg.input_w},
                {"num_classes", cfg.num_classes}};
}

BackboneConfig config_from_json(const json& j) {
    BackboneConfig cfg;
    const auto depths = j.at("stage_depths").get<std::vector<int>>();
    check_data(depths.size() == 4, "checkpoint: stage_depths must have 4 entries");
    std::copy(depths.begin(), depths.end(), cfg.stage_depths.begin());
    cfg.base_width = j.at("base_width").get<int>();
    cfg.width_divisor = j.at("width_divisor").get<int>();
    cfg.last_stride = j.at("last_stride").get<int>();
    cfg.input_h = j.at("input_h").get<int>();
    cfg.input_w = j.at("input_w").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    return cfg;
}

json plan_to_json(const InsertionPlan& plan) {
    json arr = json::array();
    for (const auto& [pos, spec] : plan.entries)
        arr.push_back(json{{"position", pos},
                           {"kind", kind_name(spec.kind)},
                           {"r", spec.r},
                           {"inner_num", spec.inner_num},
                           {"inner_den", spec.inner_den},
                           {"scale_similarity", spec.scale_similarity}});
    return arr;
}

InsertionPlan plan_from_json(const json& arr) {
    InsertionPlan plan;
    for (const auto& j : arr) {
        AttentionSpec spec;
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "se") spec.kind = AttentionKind::SE;
        else if (kind == "hac") spec.kind = AttentionKind::HAC;
        else if (kind == "nl") spec.kind = AttentionKind::NL;
        else if (kind == "cnl") spec.kind = AttentionKind::CNL;
        else throw DataError("checkpoint: unknown attention kind '" + kind + "'");
        spec.r = j.at("r").get<int>();
        spec.inner_num = j.at("inner_num").get<int>();
        spec.inner_den = j.at("inner_den").get<int>();
        spec.scale_similarity = j.at("scale_similarity").get<bool>();
        plan.entries.emplace(j.at("position").get<int>(), spec);
    }
    return plan;
}

std::vector<NamedTensor<float>> all_tensors(const Model& model) {
    auto out = model.parameters();
    auto bufs = model.buffers();
    out.insert(out.end(), bufs.begin(), bufs.end());
    return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
    const auto params = model.parameters();
    const auto bufs = model.buffers();

    json index = json::array();
    auto describe = [&](const NamedTensor<float>& t, const char* kind) {
        index.push_back(
            json{{"name", t.name}, {"kind", kind}, {"shape", t.tensor.shape()}});
    };
    for (const auto& t : params) describe(t, "param");
    for (const auto& t : bufs) describe(t, "buffer");

    const json header{{"config", config_to_json(model.config())},
                      {"plan", plan_to_json(model.plan())},
                      {"plan_str", model.plan().str()},
                      {"seed", model.seed()},
                      {"tensors", index}};
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    check_data(out.good(), "cannot open '" + path + "' for writing");
    out.write(kMagic, 4);
    const uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

    auto dump = [&](const std::vector<NamedTensor<float>>& ts) {
        for (const auto& t : ts)
            out.write(reinterpret_cast<const char*>(t.tensor.impl()->data.data()),
                      static_cast<std::streamsize>(t.tensor.numel() * sizeof(float)));
    };
    dump(params);
    dump(bufs);
    out.flush();
    check_data(out.good(), "write to '" + path + "' failed");
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check_data(in.good(), "cannot open checkpoint '" + path + "'");

    char magic[4];
    in.read(magic, 4);
    check_data(in.good() && std::memcmp(magic, kMagic, 4) == 0,
               "'" + path + "' is not a model checkpoint (bad magic)");
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    check_data(in.good() && version == kVersion,
               "checkpoint '" + path + "' has unsupported version " +
                   std::to_string(version));
    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    check_data(in.good() && header_len > 0 && header_len < (1u << 26),
               "checkpoint '" + path + "' has a corrupt header length");
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    check_data(in.good(), "checkpoint '" + path + "' truncated inside the header");

    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw DataError("checkpoint '" + path + "' header is not valid JSON: " + e.what());
    }

    Model model;
    try {
        model = Model(config_from_json(header.at("config")),
                      plan_from_json(header.at("plan")),
                      header.at("seed").get<uint64_t>());
    } catch (const json::exception& e) {
        throw DataError("checkpoint '" + path + "' header is missing fields: " + e.what());
    }

    std::map<std::string, Tensor<float>> by_name;
    for (const auto& t : all_tensors(model)) {
        check_data(by_name.emplace(t.name, t.tensor).second,
                   "model has duplicate tensor name '" + t.name + "'");
    }

    size_t filled = 0;
    for (const auto& entry : header.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<int>>();
        auto it = by_name.find(name);
        check_data(it != by_name.end(),
                   "checkpoint tensor '" + name + "' has no home in the rebuilt model");
        check_data(it->second.shape() == shape,
                   "checkpoint tensor '" + name + "' shape " + shape_str(shape) +
                       " does not match model shape " + shape_str(it->second.shape()));
        in.read(reinterpret_cast<char*>(it->second.data()),
                static_cast<std::streamsize>(it->second.numel() * sizeof(float)));
        check_data(in.good(), "checkpoint '" + path + "' truncated inside tensor '" + name + "'");
        ++filled;
    }
    check_data(filled == by_name.size(),
               "checkpoint fills " + std::to_string(filled) + " of " +
                   std::to_string(by_name.size()) + " model tensors");
    in.peek();
    check_data(in.eof(), "checkpoint '" + path + "' has trailing bytes");
    return model;
}

}  // namespace attnlab
