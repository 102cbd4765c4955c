#include "attnlab/augment.hpp"

#include <algorithm>
#include <cmath>

namespace attnlab {

namespace {

ImageU8 hflip(const ImageU8& img) {
    ImageU8 out = img;
    for (int r = 0; r < img.h; ++r)
        for (int c = 0; c < img.w; ++c) {
            const size_t src = (static_cast<size_t>(r) * img.w + c) * 3;
            const size_t dst = (static_cast<size_t>(r) * img.w + (img.w - 1 - c)) * 3;
            out.rgb[dst] = img.rgb[src];
            out.rgb[dst + 1] = img.rgb[src + 1];
            out.rgb[dst + 2] = img.rgb[src + 2];
        }
    return out;
}

// Pad with the edge value, then crop back to the original size at a random
// offset in [0, 2*pad].
ImageU8 pad_crop(const ImageU8& img, int pad, int off_r, int off_c) {
    ImageU8 out = img;
    for (int r = 0; r < img.h; ++r) {
        const int sr = std::clamp(r + off_r - pad, 0, img.h - 1);
        for (int c = 0; c < img.w; ++c) {
            const int sc = std::clamp(c + off_c - pad, 0, img.w - 1);
            const size_t src = (static_cast<size_t>(sr) * img.w + sc) * 3;
            const size_t dst = (static_cast<size_t>(r) * img.w + c) * 3;
            out.rgb[dst] = img.rgb[src];
            out.rgb[dst + 1] = img.rgb[src + 1];
            out.rgb[dst + 2] = img.rgb[src + 2];
        }
    }
    return out;
}

}  // namespace

ImageU8 augment(const ImageU8& img, const AugmentConfig& cfg, Rng& rng) {
    ImageU8 out = img;
    if (cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob)) out = hflip(out);
    if (cfg.pad > 0) {
        const int off_r =
            cfg.center_crop ? cfg.pad : rng.uniform_int(0, 2 * cfg.pad);
        const int off_c =
            cfg.center_crop ? cfg.pad : rng.uniform_int(0, 2 * cfg.pad);
        out = pad_crop(out, cfg.pad, off_r, off_c);
    }
    if (cfg.erasing_prob > 0.0 && rng.bernoulli(cfg.erasing_prob)) {
        const double area = static_cast<double>(out.h) * out.w;
        for (int attempt = 0; attempt < 10; ++attempt) {
            const double target = rng.uniform(cfg.erase_area_lo, cfg.erase_area_hi) * area;
            const double aspect = rng.uniform(cfg.erase_aspect_lo, cfg.erase_aspect_hi);
            const int eh = static_cast<int>(std::lround(std::sqrt(target * aspect)));
            const int ew = static_cast<int>(std::lround(std::sqrt(target / aspect)));
            if (eh < 1 || ew < 1 || eh >= out.h || ew >= out.w) continue;
            const int r0 = rng.uniform_int(0, out.h - eh);
            const int c0 = rng.uniform_int(0, out.w - ew);
            for (int r = r0; r < r0 + eh; ++r)
                for (int c = c0; c < c0 + ew; ++c) {
                    const size_t i = (static_cast<size_t>(r) * out.w + c) * 3;
                    out.rgb[i] = static_cast<uint8_t>(rng.uniform_int(0, 255));
                    out.rgb[i + 1] = static_cast<uint8_t>(rng.uniform_int(0, 255));
                    out.rgb[i + 2] = static_cast<uint8_t>(rng.uniform_int(0, 255));
                }
            break;
        }
    }
    return out;
}

}  // namespace attnlab
