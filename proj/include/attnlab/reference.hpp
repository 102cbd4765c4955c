#pragma once

// Full-scale reference measurements (Market-scale data, embedded Xavier
// hardware) kept for report annotation and plot anchors. None of these are
// reproducible at desk scale and none are asserted against host hardware.

namespace attnlab::reference {

// ms per 16-image batch on the embedded target
inline constexpr double kXavierBaselineMs = 36.917;
inline constexpr double kXavierCnlTripleMs = 38.623;  // cnl@6,8,14
inline constexpr double kXavierResnet101Ms = 53.454;

// deep-reference accuracy at full scale
inline constexpr double kResnet101Map = 0.8707;
inline constexpr double kResnet101MapStd = 0.0006;

// headline full-scale results
inline constexpr double kCnlTripleCeMap = 0.8806;      // cnl@6,8,14, cross-entropy
inline constexpr double kCnlTripleCircleMap = 0.8916;  // cnl@6,8,14, circle loss

struct RefPoint {
    const char* label;
    double map;
    double speed;  // batches per second
};

// (mAP, batches/s) anchors at full scale, all with circle loss
inline constexpr RefPoint kFullScalePoints[] = {
    {"cnl@6,8,14", 0.8916, 25.89},
    {"hac@6,8,14", 0.8897, 24.93},
    {"agw@6,8,14", 0.8916, 19.88},
};

// two-step transfer at full scale: source-only vs fine-tuned target mAP
inline constexpr double kTransferSourceOnlyMap = 0.7551;
inline constexpr double kTransferFinetunedMap = 0.7658;

}  // namespace attnlab::reference
