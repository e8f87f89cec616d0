#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace oracle {

std::vector<double> finite_diff(const std::function<double()>& f, fsa::Tensor leaf, double h) {
    fsa::NoGradGuard ng;
    auto data = leaf.data_mut();
    std::vector<double> out(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        const float orig = data[i];
        data[i] = orig + static_cast<float>(h);
        const double lp = f();
        data[i] = orig - static_cast<float>(h);
        const double lm = f();
        data[i] = orig;
        out[i] = (lp - lm) / (2.0 * h);
    }
    return out;
}

double grad_rel_err(std::span<const float> analytic, const std::vector<double>& numeric) {
    double worst = 0.0;
    for (size_t i = 0; i < numeric.size(); ++i) {
        const double a = i < analytic.size() ? analytic[i] : 0.0;
        const double n = numeric[i];
        worst = std::max(worst, std::fabs(a - n) / std::max({1.0, std::fabs(a), std::fabs(n)}));
    }
    return worst;
}

std::vector<double> matmul_f64(const std::vector<double>& a, const std::vector<double>& b, int m,
                               int k, int n) {
    std::vector<double> y(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk)
            for (int j = 0; j < n; ++j)
                y[static_cast<size_t>(i) * n + j] +=
                    a[static_cast<size_t>(i) * k + kk] * b[static_cast<size_t>(kk) * n + j];
    return y;
}

double iou_grid_count(float acx, float acy, float aw, float ah, float bcx, float bcy, float bw,
                      float bh, int resolution) {
    const double ax1 = acx - aw * 0.5, ax2 = acx + aw * 0.5;
    const double ay1 = acy - ah * 0.5, ay2 = acy + ah * 0.5;
    const double bx1 = bcx - bw * 0.5, bx2 = bcx + bw * 0.5;
    const double by1 = bcy - bh * 0.5, by2 = bcy + bh * 0.5;
    const double x0 = std::min(ax1, bx1), x1 = std::max(ax2, bx2);
    const double y0 = std::min(ay1, by1), y1 = std::max(ay2, by2);
    const double step = 1.0 / resolution;
    long long inA = 0, inB = 0, inBoth = 0;
    for (double y = y0 + step / 2; y < y1; y += step)
        for (double x = x0 + step / 2; x < x1; x += step) {
            const bool a = x > ax1 && x < ax2 && y > ay1 && y < ay2;
            const bool b = x > bx1 && x < bx2 && y > by1 && y < by2;
            inA += a;
            inB += b;
            inBoth += a && b;
        }
    const long long uni = inA + inB - inBoth;
    return uni ? static_cast<double>(inBoth) / static_cast<double>(uni) : 0.0;
}

std::vector<fsa::DetBox> nms_subset_oracle(const std::vector<fsa::DetBox>& boxes, float iou_thr) {
    const size_t n = boxes.size();
    if (n > 16) throw std::runtime_error("nms_subset_oracle: too many boxes to enumerate");

    auto higher_priority = [&](size_t a, size_t b) {
        if (boxes[a].confidence != boxes[b].confidence)
            return boxes[a].confidence > boxes[b].confidence;
        if (boxes[a].class_id != boxes[b].class_id) return boxes[a].class_id < boxes[b].class_id;
        return a < b;
    };

    std::vector<size_t> match;
    for (uint32_t mask = 0; mask < (1u << n); ++mask) {
        bool ok = true;
        for (size_t i = 0; i < n && ok; ++i) {
            bool blocked = false;
            for (size_t j = 0; j < n; ++j) {
                if (!(mask >> j & 1u) || j == i) continue;
                if (boxes[j].class_id != boxes[i].class_id) continue;
                if (!higher_priority(j, i)) continue;
                if (fsa::iou(boxes[j], boxes[i]) >= iou_thr) blocked = true;
            }
            const bool kept = (mask >> i & 1u) != 0;
            if (kept == blocked) ok = false;
        }
        if (ok) match.push_back(mask);
    }
    if (match.size() != 1) throw std::runtime_error("nms_subset_oracle: fixed point not unique");

    std::vector<size_t> kept_idx;
    for (size_t i = 0; i < n; ++i)
        if (match[0] >> i & 1u) kept_idx.push_back(i);
    std::sort(kept_idx.begin(), kept_idx.end(),
              [&](size_t a, size_t b) { return higher_priority(a, b); });
    std::vector<fsa::DetBox> out;
    for (size_t i : kept_idx) out.push_back(boxes[i]);
    return out;
}

double ap_all_point(const std::vector<char>& flags, int num_gt) {
    if (num_gt == 0) return flags.empty() ? std::nan("") : 0.0;
    if (flags.empty()) return 0.0;
    const size_t n = flags.size();
    std::vector<double> recall(n), precision(n);
    int tp = 0;
    for (size_t i = 0; i < n; ++i) {
        tp += flags[i] ? 1 : 0;
        recall[i] = static_cast<double>(tp) / num_gt;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    }
    std::vector<double> env(n);
    double run = 0.0;
    for (size_t i = n; i-- > 0;) {
        run = std::max(run, precision[i]);
        env[i] = run;
    }
    double area = 0.0, prev_r = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (recall[i] > prev_r) {
            area += (recall[i] - prev_r) * env[i];
            prev_r = recall[i];
        }
    }
    return area;
}

std::vector<char> match_oracle(const std::vector<fsa::DetBox>& preds_conf_desc,
                               const std::vector<fsa::GroundTruthBox>& gts, double iou_thr) {
    std::vector<char> used(gts.size(), 0), tp(preds_conf_desc.size(), 0);
    for (size_t p = 0; p < preds_conf_desc.size(); ++p) {
        double best = -1.0;
        int pick = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (used[g] || gts[g].class_id != preds_conf_desc[p].class_id) continue;
            // corner IoU in doubles, straight from the definition
            const auto& a = preds_conf_desc[p];
            const auto& b = gts[g];
            const double ix = std::min(a.cx + a.w / 2.0, b.cx + b.w / 2.0) -
                              std::max(a.cx - a.w / 2.0, b.cx - b.w / 2.0);
            const double iy = std::min(a.cy + a.h / 2.0, b.cy + b.h / 2.0) -
                              std::max(a.cy - a.h / 2.0, b.cy - b.h / 2.0);
            double v = 0.0;
            if (ix > 0 && iy > 0) {
                const double inter = ix * iy;
                v = inter / (static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter);
            }
            if (v >= iou_thr && v > best) {
                best = v;
                pick = static_cast<int>(g);
            }
        }
        if (pick >= 0) {
            used[static_cast<size_t>(pick)] = 1;
            tp[p] = 1;
        }
    }
    return tp;
}

bool encode_box(std::vector<fsa::Tensor>& raws, const fsa::ModelConfig& cfg,
                const fsa::GroundTruthBox& gt, float obj_logit, float cls_logit,
                EncodeTarget* where) {
    const auto heads = cfg.head_specs();
    int best_head = -1, best_anchor = -1;
    double best_ratio = 4.0; // anchor bound
    for (size_t h = 0; h < heads.size(); ++h)
        for (int a = 0; a < 3; ++a) {
            const double aw = heads[h].anchors[static_cast<size_t>(a)][0];
            const double ah = heads[h].anchors[static_cast<size_t>(a)][1];
            const double r = std::max(std::max(gt.w / aw, aw / gt.w), std::max(gt.h / ah, ah / gt.h));
            if (r < best_ratio) {
                best_ratio = r;
                best_head = static_cast<int>(h);
                best_anchor = a;
            }
        }
    if (best_head < 0) return false;

    const auto& head = heads[static_cast<size_t>(best_head)];
    const int grid = cfg.input_size / head.stride;
    const double gxf = static_cast<double>(gt.cx) / head.stride;
    const double gyf = static_cast<double>(gt.cy) / head.stride;
    const int gx = std::min(grid - 1, static_cast<int>(gxf));
    const int gy = std::min(grid - 1, static_cast<int>(gyf));

    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    const double px = (gxf - gx + 0.5) / 2.0;
    const double py = (gyf - gy + 0.5) / 2.0;
    const double pw = std::sqrt(gt.w / head.anchors[static_cast<size_t>(best_anchor)][0]) / 2.0;
    const double ph = std::sqrt(gt.h / head.anchors[static_cast<size_t>(best_anchor)][1]) / 2.0;
    for (double p : {px, py, pw, ph})
        if (!(p > 1e-4 && p < 1.0 - 1e-4)) return false;

    fsa::Tensor& raw = raws[static_cast<size_t>(best_head)];
    const int block = 5 + cfg.num_classes;
    const int64_t plane = static_cast<int64_t>(raw.dim(2)) * raw.dim(3);
    auto data = raw.data_mut();
    const int64_t at = (static_cast<int64_t>(best_anchor) * block) * plane +
                       static_cast<int64_t>(gy) * raw.dim(3) + gx;
    data[static_cast<size_t>(at + 0 * plane)] = static_cast<float>(logit(px));
    data[static_cast<size_t>(at + 1 * plane)] = static_cast<float>(logit(py));
    data[static_cast<size_t>(at + 2 * plane)] = static_cast<float>(logit(pw));
    data[static_cast<size_t>(at + 3 * plane)] = static_cast<float>(logit(ph));
    data[static_cast<size_t>(at + 4 * plane)] = obj_logit;
    for (int c = 0; c < cfg.num_classes; ++c)
        data[static_cast<size_t>(at + (5 + c) * plane)] = c == gt.class_id ? cls_logit : -cls_logit;
    if (where) *where = {best_head, best_anchor, gy, gx};
    return true;
}

} // namespace oracle
