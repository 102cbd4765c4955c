#include "attnlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "attnlab/common.hpp"

namespace attnlab {

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Query: return "query";
        case Split::Gallery: return "gallery";
    }
    return "?";
}

std::vector<int> Dataset::indices_of(Split split) const {
    std::vector<int> out;
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].split == split) out.push_back(static_cast<int>(i));
    return out;
}

std::vector<int> Dataset::ids_of(Split split) const {
    std::set<int> ids;
    for (const auto& e : entries)
        if (e.split == split && e.id >= 0) ids.insert(e.id);
    return {ids.begin(), ids.end()};
}

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c, g = x;
    } else if (hp < 2) {
        r = x, g = c;
    } else if (hp < 3) {
        g = c, b = x;
    } else if (hp < 4) {
        g = x, b = c;
    } else if (hp < 5) {
        r = x, b = c;
    } else {
        r = c, b = x;
    }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

struct CameraProfile {
    double brightness;  // multiplicative
    double hue_mix;     // weight of the cyclic channel rotation
    double noise;       // additive gaussian stdev (0..1 scale)
    int max_jitter;     // horizontal placement jitter in pixels
};

CameraProfile camera_profile(int cam, uint64_t seed) {
    Rng rng(Rng::mix(seed, "cam." + std::to_string(cam)));
    CameraProfile p;
    p.brightness = rng.uniform(0.75, 1.25);
    p.hue_mix = rng.uniform(0.0, 0.22);
    p.noise = rng.uniform(0.01, 0.05);
    p.max_jitter = 2;
    return p;
}

uint8_t quantize(double v) {
    const double scaled = v * 255.0;
    const double clamped = scaled < 0.0 ? 0.0 : (scaled > 255.0 ? 255.0 : scaled);
    return static_cast<uint8_t>(std::lround(clamped));
}

}  // namespace

IdentitySpec identity_spec(int id, uint64_t seed) {
    IdentitySpec spec;
    spec.id = id;
    // Golden-ratio hue walk keeps every identity's torso color distinct.
    spec.torso_hue = std::fmod(0.61803398874989 * (id + 1), 1.0);
    Rng rng(Rng::mix(seed, "identity." + std::to_string(id)));
    spec.leg_hue = rng.uniform();
    spec.build = rng.uniform(0.5, 0.9);
    spec.accessories = static_cast<unsigned>(rng.uniform_int(0, 3));
    return spec;
}

ImageU8 render_person(const IdentitySpec& spec, int cam, int shot, int h, int w,
                      uint64_t seed) {
    check_shape(h >= 16 && w >= 8, "render_person: canvas too small");
    const CameraProfile profile = camera_profile(cam, seed);
    Rng rng(Rng::mix(seed, "img." + std::to_string(spec.id) + "." + std::to_string(cam) +
                               "." + std::to_string(shot)));

    std::vector<double> canvas(static_cast<size_t>(h) * w * 3);
    const double bg = rng.uniform(0.35, 0.55);
    for (size_t i = 0; i < canvas.size(); ++i) canvas[i] = bg;

    const int jitter = rng.uniform_int(-profile.max_jitter, profile.max_jitter);
    const int cx = w / 2 + jitter;
    auto paint = [&](int r0, int r1, int c0, int c1, Rgb color) {
        r0 = std::max(0, r0);
        c0 = std::max(0, c0);
        r1 = std::min(h, r1);
        c1 = std::min(w, c1);
        for (int r = r0; r < r1; ++r)
            for (int c = c0; c < c1; ++c) {
                const size_t i = (static_cast<size_t>(r) * w + c) * 3;
                canvas[i] = color.r;
                canvas[i + 1] = color.g;
                canvas[i + 2] = color.b;
            }
    };

    const Rgb torso = hsv(spec.torso_hue, 0.85, 0.9);
    const Rgb legs = hsv(spec.leg_hue, 0.8, 0.75);
    const Rgb skin = {0.85, 0.7, 0.55};
    const int torso_half = std::max(1, static_cast<int>(w * 0.24 * spec.build));
    const int head_half = std::max(1, torso_half / 2);
    const int leg_half = std::max(1, torso_half / 3);

    paint(static_cast<int>(h * 0.06), static_cast<int>(h * 0.18), cx - head_half,
          cx + head_half, skin);
    paint(static_cast<int>(h * 0.18), static_cast<int>(h * 0.55), cx - torso_half,
          cx + torso_half, torso);
    paint(static_cast<int>(h * 0.55), static_cast<int>(h * 0.95), cx - torso_half,
          cx - torso_half + 2 * leg_half, legs);
    paint(static_cast<int>(h * 0.55), static_cast<int>(h * 0.95),
          cx + torso_half - 2 * leg_half, cx + torso_half, legs);
    if (spec.accessories & 1u)  // hat
        paint(static_cast<int>(h * 0.02), static_cast<int>(h * 0.06), cx - head_half - 1,
              cx + head_half + 1, {0.1, 0.1, 0.1});
    if (spec.accessories & 2u)  // bag
        paint(static_cast<int>(h * 0.3), static_cast<int>(h * 0.5), cx + torso_half,
              cx + torso_half + leg_half + 1, {0.55, 0.4, 0.2});

    // Camera transform: brightness, cyclic hue mix, noise.
    ImageU8 img;
    img.h = h;
    img.w = w;
    img.rgb.resize(canvas.size());
    const double t = profile.hue_mix;
    for (size_t px = 0; px < canvas.size(); px += 3) {
        const double r = canvas[px], g = canvas[px + 1], b = canvas[px + 2];
        double rr = (1.0 - t) * r + t * g;
        double gg = (1.0 - t) * g + t * b;
        double bb = (1.0 - t) * b + t * r;
        rr = rr * profile.brightness + rng.normal(0.0, profile.noise);
        gg = gg * profile.brightness + rng.normal(0.0, profile.noise);
        bb = bb * profile.brightness + rng.normal(0.0, profile.noise);
        img.rgb[px] = quantize(rr);
        img.rgb[px + 1] = quantize(gg);
        img.rgb[px + 2] = quantize(bb);
    }
    return img;
}

Dataset generate_synthetic(int n_train_ids, int n_test_ids, int imgs_per_id, int n_cams,
                           int h, int w, uint64_t seed) {
    check_shape(n_train_ids >= 1 && n_test_ids >= 1, "generate_synthetic: need ids");
    check_shape(n_cams >= 2, "generate_synthetic: need at least 2 cameras for the "
                             "same-camera exclusion protocol");
    check_shape(imgs_per_id >= n_cams,
                "generate_synthetic: imgs_per_id must be >= n_cams so every identity "
                "appears under every camera");

    Dataset ds;
    char name[64];
    auto add = [&](int id, bool train) {
        const IdentitySpec spec = identity_spec(id, seed);
        std::vector<char> cam_seen(static_cast<size_t>(n_cams), 0);
        for (int k = 0; k < imgs_per_id; ++k) {
            const int cam = k % n_cams;
            DatasetEntry e;
            std::snprintf(name, sizeof(name), "id%04d_c%d_%03d.ppm", id, cam, k);
            e.path = name;
            e.id = id;
            e.cam = cam;
            if (train) {
                e.split = Split::Train;
            } else if (!cam_seen[static_cast<size_t>(cam)]) {
                e.split = Split::Query;
                cam_seen[static_cast<size_t>(cam)] = 1;
            } else {
                e.split = Split::Gallery;
            }
            ds.entries.push_back(e);
            ds.images.push_back(render_person(spec, cam, k, h, w, seed));
        }
    };
    for (int id = 0; id < n_train_ids; ++id) add(id, true);
    for (int id = n_train_ids; id < n_train_ids + n_test_ids; ++id) add(id, false);
    return ds;
}

// ---- PPM ----------------------------------------------------------------------

void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream out(path, std::ios::binary);
    check_data(out.good(), "cannot open " + path + " for writing");
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()),
              static_cast<std::streamsize>(img.rgb.size()));
    check_data(out.good(), "short write to " + path);
}

ImageU8 read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check_data(in.good(), "cannot open image " + path);
    std::string magic;
    in >> magic;
    check_data(magic == "P6", path + ": unsupported format '" + magic +
                                  "' (only binary PPM P6 is supported)");
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    check_data(in.good() && w > 0 && h > 0, path + ": bad PPM header");
    check_data(maxval == 255, path + ": only maxval 255 supported");
    in.get();  // single whitespace after header
    ImageU8 img;
    img.h = h;
    img.w = w;
    img.rgb.resize(static_cast<size_t>(h) * w * 3);
    in.read(reinterpret_cast<char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    check_data(in.gcount() == static_cast<std::streamsize>(img.rgb.size()),
               path + ": truncated pixel data");
    return img;
}

ImageU8 resize_nearest(const ImageU8& img, int out_h, int out_w) {
    if (img.h == out_h && img.w == out_w) return img;
    ImageU8 out;
    out.h = out_h;
    out.w = out_w;
    out.rgb.resize(static_cast<size_t>(out_h) * out_w * 3);
    for (int r = 0; r < out_h; ++r) {
        const int sr = std::min(img.h - 1, r * img.h / out_h);
        for (int c = 0; c < out_w; ++c) {
            const int sc = std::min(img.w - 1, c * img.w / out_w);
            const size_t src = (static_cast<size_t>(sr) * img.w + sc) * 3;
            const size_t dst = (static_cast<size_t>(r) * out_w + c) * 3;
            out.rgb[dst] = img.rgb[src];
            out.rgb[dst + 1] = img.rgb[src + 1];
            out.rgb[dst + 2] = img.rgb[src + 2];
        }
    }
    return out;
}

// ---- folder round-trip ----------------------------------------------------------

void write_dataset(const Dataset& ds, const std::string& root) {
    std::filesystem::create_directories(root);
    std::ofstream manifest(root + "/manifest.txt");
    check_data(manifest.good(), "cannot write manifest under " + root);
    manifest << "# path id cam split\n";
    for (size_t i = 0; i < ds.entries.size(); ++i) {
        const auto& e = ds.entries[i];
        write_ppm(root + "/" + e.path, ds.images[i]);
        manifest << e.path << " " << e.id << " " << e.cam << " " << split_name(e.split)
                 << "\n";
    }
    check_data(manifest.good(), "short manifest write under " + root);
}

Dataset load_folder_dataset(const std::string& root, const std::string& manifest_path,
                            int out_h, int out_w) {
    std::ifstream in(manifest_path);
    check_data(in.good(), "cannot open manifest " + manifest_path);
    Dataset ds;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ss(line);
        DatasetEntry e;
        std::string split_str;
        if (!(ss >> e.path)) continue;  // blank line
        const std::string where = manifest_path + ":" + std::to_string(line_no);
        check_data(static_cast<bool>(ss >> e.id), where + ": missing id field");
        check_data(static_cast<bool>(ss >> e.cam), where + ": malformed camera field");
        check_data(static_cast<bool>(ss >> split_str), where + ": missing split field");
        std::string extra;
        check_data(!(ss >> extra), where + ": trailing fields");
        if (split_str == "train") {
            e.split = Split::Train;
        } else if (split_str == "query") {
            e.split = Split::Query;
        } else if (split_str == "gallery") {
            e.split = Split::Gallery;
        } else {
            throw DataError(where + ": unknown split '" + split_str + "'");
        }
        ds.entries.push_back(e);
        ds.images.push_back(resize_nearest(read_ppm(root + "/" + e.path), out_h, out_w));
    }
    return ds;
}

// ---- tensor conversion ----------------------------------------------------------

void fill_image(float* dst, const ImageU8& img, float mean, float stdev) {
    const size_t plane = static_cast<size_t>(img.h) * img.w;
    for (size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c)
            dst[static_cast<size_t>(c) * plane + p] =
                (static_cast<float>(img.rgb[p * 3 + static_cast<size_t>(c)]) / 255.0f -
                 mean) /
                stdev;
}

Tensor<float> make_batch(const Dataset& ds, const std::vector<int>& indices, float mean,
                         float stdev) {
    check_shape(!indices.empty(), "make_batch: empty index list");
    const auto& first = ds.images[static_cast<size_t>(indices[0])];
    auto out = Tensor<float>::zeros({static_cast<int>(indices.size()), 3, first.h, first.w});
    const size_t stride = static_cast<size_t>(3) * first.h * first.w;
    for (size_t i = 0; i < indices.size(); ++i) {
        const auto& img = ds.images[static_cast<size_t>(indices[i])];
        check_shape(img.h == first.h && img.w == first.w, "make_batch: mixed image sizes");
        fill_image(out.data() + i * stride, img, mean, stdev);
    }
    return out;
}

}  // namespace attnlab
