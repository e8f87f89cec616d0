#include "fsa/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fsa {

namespace {
inline float sigmoidf(float x) {
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
}
} // namespace

float box_iou(float acx, float acy, float aw, float ah, float bcx, float bcy, float bw, float bh) {
    const float ax1 = acx - aw * 0.5f, ax2 = acx + aw * 0.5f;
    const float ay1 = acy - ah * 0.5f, ay2 = acy + ah * 0.5f;
    const float bx1 = bcx - bw * 0.5f, bx2 = bcx + bw * 0.5f;
    const float by1 = bcy - bh * 0.5f, by2 = bcy + bh * 0.5f;
    const float iw = std::min(ax2, bx2) - std::max(ax1, bx1);
    const float ih = std::min(ay2, by2) - std::max(ay1, by1);
    if (iw <= 0.0f || ih <= 0.0f) return 0.0f;
    const float inter = iw * ih;
    const float uni = aw * ah + bw * bh - inter;
    return inter / uni;
}

float iou(const DetBox& a, const DetBox& b) {
    return box_iou(a.cx, a.cy, a.w, a.h, b.cx, b.cy, b.w, b.h);
}

std::vector<DetBox> decode(const Tensor& raw, int batch_index, const HeadSpec& head,
                           int num_classes, int input_size, float conf_threshold) {
    if (raw.ndim() != 4)
        throw ShapeError("decode: expected a 4-D head tensor, got " + shape_str(raw.shape()));
    const int block = 5 + num_classes;
    const int C = raw.dim(1);
    if (C != 3 * block)
        throw ShapeError("decode: head has " + std::to_string(C) + " channels, expected 3*(5+" +
                         std::to_string(num_classes) + ") = " + std::to_string(3 * block));
    if (batch_index < 0 || batch_index >= raw.dim(0))
        throw ShapeError("decode: batch index out of range");
    const int H = raw.dim(2), W = raw.dim(3);
    const float s = static_cast<float>(head.stride);
    const float limit = static_cast<float>(input_size);
    const int64_t plane = static_cast<int64_t>(H) * W;
    const float* base = raw.data().data() + static_cast<int64_t>(batch_index) * C * plane;

    std::vector<DetBox> out;
    for (int a = 0; a < 3; ++a) {
        const float aw = head.anchors[static_cast<size_t>(a)][0];
        const float ah = head.anchors[static_cast<size_t>(a)][1];
        const float* ch = base + static_cast<int64_t>(a) * block * plane;
        for (int gy = 0; gy < H; ++gy) {
            for (int gx = 0; gx < W; ++gx) {
                const int64_t at = static_cast<int64_t>(gy) * W + gx;
                const float obj = sigmoidf(ch[4 * plane + at]);
                DetBox box;
                box.class_scores.resize(static_cast<size_t>(num_classes));
                float best = 0.0f;
                int bestId = 0;
                for (int c = 0; c < num_classes; ++c) {
                    const float p = sigmoidf(ch[(5 + c) * plane + at]);
                    box.class_scores[static_cast<size_t>(c)] = p;
                    if (p > best) {
                        best = p;
                        bestId = c;
                    }
                }
                const float conf = obj * best;
                if (conf < conf_threshold) continue;
                const float sx = 2.0f * sigmoidf(ch[0 * plane + at]) - 0.5f;
                const float sy = 2.0f * sigmoidf(ch[1 * plane + at]) - 0.5f;
                const float sw = 2.0f * sigmoidf(ch[2 * plane + at]);
                const float sh = 2.0f * sigmoidf(ch[3 * plane + at]);
                box.cx = std::clamp((sx + static_cast<float>(gx)) * s, 0.0f, limit);
                box.cy = std::clamp((sy + static_cast<float>(gy)) * s, 0.0f, limit);
                box.w = aw * sw * sw;
                box.h = ah * sh * sh;
                box.objectness = obj;
                box.confidence = conf;
                box.class_id = bestId;
                out.push_back(std::move(box));
            }
        }
    }
    return out;
}

std::vector<DetBox> nms(const std::vector<DetBox>& boxes, float iou_threshold) {
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (boxes[static_cast<size_t>(a)].confidence != boxes[static_cast<size_t>(b)].confidence)
            return boxes[static_cast<size_t>(a)].confidence > boxes[static_cast<size_t>(b)].confidence;
        return boxes[static_cast<size_t>(a)].class_id < boxes[static_cast<size_t>(b)].class_id;
        // equal confidence and class: stable_sort preserves input order
    });
    std::vector<DetBox> kept;
    for (int idx : order) {
        const DetBox& cand = boxes[static_cast<size_t>(idx)];
        bool suppressed = false;
        for (const DetBox& k : kept) {
            if (k.class_id != cand.class_id) continue;
            if (iou(k, cand) >= iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

} // namespace fsa
