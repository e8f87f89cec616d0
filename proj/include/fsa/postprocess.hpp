#pragma once

#include <array>
#include <vector>

#include "fsa/tensor.hpp"

namespace fsa {

// One decoded detection, pixel space.
struct DetBox {
    float cx = 0, cy = 0, w = 0, h = 0;
    float objectness = 0;
    std::vector<float> class_scores;
    float confidence = 0; // objectness * max class score
    int class_id = 0;     // argmax of class_scores, ties -> lowest id
};

// One labeled object, pixel space.
struct GroundTruthBox {
    int class_id = 0;
    float cx = 0, cy = 0, w = 0, h = 0;
};

// Anchor set for one output stride, pixel units.
struct HeadSpec {
    int stride = 8;
    std::array<std::array<float, 2>, 3> anchors{};
};

float box_iou(float acx, float acy, float aw, float ah, float bcx, float bcy, float bw, float bh);
float iou(const DetBox& a, const DetBox& b);

// Per grid cell (gx,gy) and anchor (aw,ah):
//   cx = (2*sigmoid(tx) - 0.5 + gx) * stride      (cy analogous)
//   w  = aw * (2*sigmoid(tw))^2                   (h analogous)
// Boxes below conf_threshold are dropped; centers are clipped to the image.
std::vector<DetBox> decode(const Tensor& raw, int batch_index, const HeadSpec& head,
                           int num_classes, int input_size, float conf_threshold);

// Greedy class-wise NMS. Boxes sort by confidence descending (ties: lower
// class_id, then input order); a box is kept iff its IoU with every
// already-kept box of the same class is < iou_threshold (IoU == threshold
// suppresses). Output is kept in descending confidence order.
std::vector<DetBox> nms(const std::vector<DetBox>& boxes, float iou_threshold);

} // namespace fsa
