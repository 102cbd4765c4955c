#pragma once

// Training-time image augmentation: horizontal flip, pad-and-random-crop,
// random erasing. All draws come from the caller's Rng, so a fixed seed
// reproduces the exact pixel stream.

#include "attnlab/data.hpp"
#include "attnlab/rng.hpp"

namespace attnlab {

struct AugmentConfig {
    double flip_prob = 0.5;
    int pad = 10;                // pad-and-random-crop margin; 0 disables
    bool center_crop = false;    // test hook: force the centered crop offset
    double erasing_prob = 0.5;
    double erase_area_lo = 0.02, erase_area_hi = 0.2;
    double erase_aspect_lo = 0.3, erase_aspect_hi = 3.3;
};

ImageU8 augment(const ImageU8& img, const AugmentConfig& cfg, Rng& rng);

}  // namespace attnlab
