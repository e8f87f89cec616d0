#pragma once

#include <vector>

#include "fsa/data.hpp"
#include "fsa/model.hpp"
#include "fsa/tensor.hpp"

namespace fsa {

// One (head, batch image, anchor, cell, gt) match produced by target
// assignment. Cell offsets follow the center-plus-two-neighbours rule.
struct TargetMatch {
    int head = 0;
    int image = 0;
    int anchor = 0;
    int gy = 0;
    int gx = 0;
    int gt = 0;
};

struct LossReport {
    float box = 0; // mean (1 - CIoU) over matches
    float obj = 0; // balance-weighted objectness BCE
    float cls = 0; // class BCE over matches
    float total = 0;
};

struct LossOutput {
    LossReport report;
    Tensor total; // scalar, connected to the raw head outputs
};

// A gt matches an anchor iff max(w/aw, aw/w, h/ah, ah/h) < 4; each match
// lands in the gt's center cell plus the up-to-two neighbour cells whose
// fractional offset is strictly below 0.5.
std::vector<TargetMatch> assign_targets(const std::vector<std::vector<GroundTruth>>& gts_per_image,
                                        const ModelConfig& cfg);

LossOutput compute_loss(const std::vector<Tensor>& raw_heads,
                        const std::vector<std::vector<GroundTruth>>& gts_per_image,
                        const ModelConfig& cfg);

// total = 0.05*box + 1.0*obj + 0.5*cls
inline constexpr float kBoxGain = 0.05f;
inline constexpr float kObjGain = 1.0f;
inline constexpr float kClsGain = 0.5f;
inline constexpr float kAnchorRatioMax = 4.0f;
// per-head objectness weights, stride-ascending; the first entry belongs to
// the stride-4 head and is dropped for 3-head models
inline constexpr float kObjBalance4[4] = {4.0f, 1.0f, 0.4f, 0.1f};
inline constexpr float kObjBalance3[3] = {4.0f, 1.0f, 0.4f};

} // namespace fsa
