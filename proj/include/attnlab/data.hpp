#pragma once

// Synthetic re-identification data and folder-based ingestion.
//
// Identities render as blocky person figures (head/torso/legs) whose colors
// and proportions are identity-determined; cameras apply fixed brightness,
// hue-mix, jitter, and noise transforms so the same identity looks different
// per viewpoint. Everything is deterministic per seed. Real data plugs in
// through a manifest of `relative/path id cam split` lines over portable
// pixmap images.

#include <cstdint>
#include <string>
#include <vector>

#include "attnlab/rng.hpp"
#include "attnlab/tensor.hpp"

namespace attnlab {

enum class Split { Train, Query, Gallery };

const char* split_name(Split s);

struct ImageU8 {
    int h = 0, w = 0;
    std::vector<uint8_t> rgb;  // interleaved, row-major
};

struct DatasetEntry {
    std::string path;
    int id = 0;   // -1 marks junk/distractor entries
    int cam = 0;
    Split split = Split::Train;
};

struct IdentitySpec {
    int id = 0;
    double torso_hue = 0, leg_hue = 0;
    double build = 0.7;       // torso width fraction
    unsigned accessories = 0;  // bit 0: hat, bit 1: bag
};

struct Dataset {
    std::vector<DatasetEntry> entries;
    std::vector<ImageU8> images;  // aligned with entries

    std::vector<int> indices_of(Split split) const;
    // Distinct person ids present in a split, ascending.
    std::vector<int> ids_of(Split split) const;
};

// Identity-determined appearance; distinct ids always differ (hues walk a
// golden-ratio sequence).
IdentitySpec identity_spec(int id, uint64_t seed);

ImageU8 render_person(const IdentitySpec& spec, int cam, int shot, int h, int w,
                      uint64_t seed);

// Train ids [0, n_train); test ids [n_train, n_train + n_test). Test images
// cycle through cameras; the first image per (id, cam) is the query, the
// rest are gallery.
Dataset generate_synthetic(int n_train_ids, int n_test_ids, int imgs_per_id, int n_cams,
                           int h, int w, uint64_t seed);

// ---- portable pixmap I/O ----

void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);

ImageU8 resize_nearest(const ImageU8& img, int out_h, int out_w);

// ---- manifest + folder datasets ----

// Writes every image as a .ppm plus `manifest.txt` under root.
void write_dataset(const Dataset& ds, const std::string& root);

// Reads a manifest (`relative/path id cam split`, '#' comments) and decodes
// the referenced images, resizing to out_h x out_w when they differ.
Dataset load_folder_dataset(const std::string& root, const std::string& manifest_path,
                            int out_h, int out_w);

// ---- tensor conversion ----

// [B x 3 x H x W], normalized to (x/255 - mean)/stdev per channel.
Tensor<float> make_batch(const Dataset& ds, const std::vector<int>& indices,
                         float mean = 0.5f, float stdev = 0.5f);

// Same normalization for a single already-augmented image.
void fill_image(float* dst, const ImageU8& img, float mean, float stdev);

}  // namespace attnlab
