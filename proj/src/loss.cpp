#include "fsa/loss.hpp"

#include <algorithm>
#include <cmath>

namespace fsa {

std::vector<TargetMatch> assign_targets(const std::vector<std::vector<GroundTruth>>& gts_per_image,
                                        const ModelConfig& cfg) {
    const std::vector<HeadSpec> heads = cfg.head_specs();
    const float S = static_cast<float>(cfg.input_size);
    std::vector<TargetMatch> out;

    for (int im = 0; im < static_cast<int>(gts_per_image.size()); ++im) {
        const auto& gts = gts_per_image[static_cast<size_t>(im)];
        for (int gi = 0; gi < static_cast<int>(gts.size()); ++gi) {
            const GroundTruth& gt = gts[static_cast<size_t>(gi)];
            const float wpx = gt.w * S, hpx = gt.h * S;
            for (int hI = 0; hI < static_cast<int>(heads.size()); ++hI) {
                const HeadSpec& head = heads[static_cast<size_t>(hI)];
                const int grid = cfg.input_size / head.stride;
                const float gxf = gt.cx * S / static_cast<float>(head.stride);
                const float gyf = gt.cy * S / static_cast<float>(head.stride);
                const int cgx = std::min(grid - 1, static_cast<int>(gxf));
                const int cgy = std::min(grid - 1, static_cast<int>(gyf));
                for (int a = 0; a < 3; ++a) {
                    const float aw = head.anchors[static_cast<size_t>(a)][0];
                    const float ah = head.anchors[static_cast<size_t>(a)][1];
                    const float ratio = std::max(std::max(wpx / aw, aw / wpx),
                                                 std::max(hpx / ah, ah / hpx));
                    if (!(ratio < kAnchorRatioMax)) continue;

                    out.push_back({hI, im, a, cgy, cgx, gi});
                    // neighbour cells: strictly closer half only, ties excluded
                    const float fx = gxf - static_cast<float>(cgx);
                    const float fy = gyf - static_cast<float>(cgy);
                    const int nx = fx < 0.5f ? cgx - 1 : (fx > 0.5f ? cgx + 1 : -1);
                    const int ny = fy < 0.5f ? cgy - 1 : (fy > 0.5f ? cgy + 1 : -1);
                    if (nx >= 0 && nx < grid && nx != cgx) out.push_back({hI, im, a, cgy, nx, gi});
                    if (ny >= 0 && ny < grid && ny != cgy) out.push_back({hI, im, a, ny, cgx, gi});
                }
            }
        }
    }
    return out;
}

namespace {

constexpr float kEps = 1e-7f;

// CIoU between per-match column vectors, everything differentiable
Tensor ciou(const Tensor& pcx, const Tensor& pcy, const Tensor& pw, const Tensor& ph,
            const Tensor& gcx, const Tensor& gcy, const Tensor& gw, const Tensor& gh) {
    Tensor zero = Tensor::zeros(pcx.shape());

    Tensor px1 = pcx - mul_scalar(pw, 0.5f), px2 = pcx + mul_scalar(pw, 0.5f);
    Tensor py1 = pcy - mul_scalar(ph, 0.5f), py2 = pcy + mul_scalar(ph, 0.5f);
    Tensor gx1 = gcx - mul_scalar(gw, 0.5f), gx2 = gcx + mul_scalar(gw, 0.5f);
    Tensor gy1 = gcy - mul_scalar(gh, 0.5f), gy2 = gcy + mul_scalar(gh, 0.5f);

    Tensor iw = maximum(minimum(px2, gx2) - maximum(px1, gx1), zero);
    Tensor ih = maximum(minimum(py2, gy2) - maximum(py1, gy1), zero);
    Tensor inter = iw * ih;
    Tensor uni = pw * ph + gw * gh - inter;
    Tensor iou = div(inter, add_scalar(uni, kEps));

    Tensor cw = maximum(px2, gx2) - minimum(px1, gx1);
    Tensor chh = maximum(py2, gy2) - minimum(py1, gy1);
    Tensor c2 = add_scalar(cw * cw + chh * chh, kEps);
    Tensor dx = pcx - gcx;
    Tensor dy = pcy - gcy;
    Tensor rho2 = dx * dx + dy * dy;

    const float four_over_pi2 = 4.0f / (static_cast<float>(M_PI) * static_cast<float>(M_PI));
    Tensor dv = atan(div(gw, add_scalar(gh, kEps))) - atan(div(pw, add_scalar(ph, kEps)));
    Tensor v = mul_scalar(dv * dv, four_over_pi2);
    Tensor alpha = div(v, add_scalar(add_scalar(neg(iou), 1.0f) + v, kEps));

    return iou - div(rho2, c2) - alpha * v;
}

} // namespace

LossOutput compute_loss(const std::vector<Tensor>& raw_heads,
                        const std::vector<std::vector<GroundTruth>>& gts_per_image,
                        const ModelConfig& cfg) {
    const std::vector<HeadSpec> heads = cfg.head_specs();
    if (raw_heads.size() != heads.size())
        throw ShapeError("compute_loss: expected " + std::to_string(heads.size()) +
                         " head tensors, got " + std::to_string(raw_heads.size()));
    const int nc = cfg.num_classes;
    const int block = 5 + nc;
    const int B = raw_heads.front().dim(0);
    if (static_cast<int>(gts_per_image.size()) != B)
        throw ShapeError("compute_loss: batch size mismatch between heads and labels");
    const float S = static_cast<float>(cfg.input_size);
    const float* balance = cfg.use_p2_head ? kObjBalance4 : kObjBalance3;

    std::vector<TargetMatch> matches = assign_targets(gts_per_image, cfg);

    Tensor box_sum; // undefined until the first matched head
    Tensor cls_sum;
    Tensor obj_total;
    int64_t n_matches = 0;

    for (int hI = 0; hI < static_cast<int>(heads.size()); ++hI) {
        const Tensor& raw = raw_heads[static_cast<size_t>(hI)];
        if (raw.dim(1) != 3 * block)
            throw ShapeError("compute_loss: head " + std::to_string(hI) + " has " +
                             std::to_string(raw.dim(1)) + " channels, expected " +
                             std::to_string(3 * block));
        const int grid_h = raw.dim(2), grid_w = raw.dim(3);
        const float stride = static_cast<float>(heads[static_cast<size_t>(hI)].stride);

        // dense objectness target over every anchor plane of this head
        std::vector<float> obj_target(static_cast<size_t>(B) * 3 * grid_h * grid_w, 0.0f);
        std::vector<CellIndex> cells;
        std::vector<float> t_gx, t_gy, t_gw, t_gh, t_aw, t_ah;
        std::vector<float> t_cls;
        for (const TargetMatch& m : matches) {
            if (m.head != hI) continue;
            const GroundTruth& gt =
                gts_per_image[static_cast<size_t>(m.image)][static_cast<size_t>(m.gt)];
            cells.push_back({m.image, m.anchor * block, m.gy, m.gx});
            obj_target[((static_cast<size_t>(m.image) * 3 + static_cast<size_t>(m.anchor)) *
                            grid_h +
                        static_cast<size_t>(m.gy)) *
                           grid_w +
                       static_cast<size_t>(m.gx)] = 1.0f;
            t_gx.push_back(gt.cx * S / stride - static_cast<float>(m.gx));
            t_gy.push_back(gt.cy * S / stride - static_cast<float>(m.gy));
            t_gw.push_back(gt.w * S / stride);
            t_gh.push_back(gt.h * S / stride);
            t_aw.push_back(heads[static_cast<size_t>(hI)].anchors[static_cast<size_t>(m.anchor)][0] /
                           stride);
            t_ah.push_back(heads[static_cast<size_t>(hI)].anchors[static_cast<size_t>(m.anchor)][1] /
                           stride);
            for (int c = 0; c < nc; ++c) t_cls.push_back(c == gt.class_id ? 1.0f : 0.0f);
        }

        // objectness term: BCE over all cells of this head
        std::vector<Tensor> obj_slices;
        for (int a = 0; a < 3; ++a) obj_slices.push_back(slice(raw, 1, a * block + 4, 1));
        Tensor obj_logits = concat(obj_slices, 1); // (B,3,H,W)
        Tensor obj_t(Shape{B, 3, grid_h, grid_w}, std::move(obj_target));
        Tensor obj_loss = mean_all(bce_with_logits(obj_logits, obj_t));
        obj_loss = mul_scalar(obj_loss, balance[hI]);
        obj_total = obj_total.defined() ? add(obj_total, obj_loss) : obj_loss;

        if (cells.empty()) continue;
        const int n = static_cast<int>(cells.size());
        n_matches += n;

        Tensor g = gather_cells(raw, cells, block); // (n, block)
        Tensor tx = slice(g, 1, 0, 1), ty = slice(g, 1, 1, 1);
        Tensor tw = slice(g, 1, 2, 1), th = slice(g, 1, 3, 1);

        Tensor pcx = add_scalar(mul_scalar(sigmoid(tx), 2.0f), -0.5f); // cell-relative
        Tensor pcy = add_scalar(mul_scalar(sigmoid(ty), 2.0f), -0.5f);
        Tensor sw = mul_scalar(sigmoid(tw), 2.0f);
        Tensor sh = mul_scalar(sigmoid(th), 2.0f);
        Tensor pw = mul(sw * sw, Tensor(Shape{n, 1}, std::vector<float>(t_aw)));
        Tensor ph = mul(sh * sh, Tensor(Shape{n, 1}, std::vector<float>(t_ah)));

        Tensor gx(Shape{n, 1}, std::move(t_gx));
        Tensor gy(Shape{n, 1}, std::move(t_gy));
        Tensor gw(Shape{n, 1}, std::move(t_gw));
        Tensor gh(Shape{n, 1}, std::move(t_gh));

        Tensor c = ciou(pcx, pcy, pw, ph, gx, gy, gw, gh);
        Tensor head_box = sum_all(add_scalar(neg(c), 1.0f));
        box_sum = box_sum.defined() ? add(box_sum, head_box) : head_box;

        if (nc > 0) {
            Tensor cls_logits = slice(g, 1, 5, nc);
            Tensor cls_t(Shape{n, nc}, std::move(t_cls));
            Tensor head_cls = sum_all(bce_with_logits(cls_logits, cls_t));
            cls_sum = cls_sum.defined() ? add(cls_sum, head_cls) : head_cls;
        }
    }

    Tensor box_mean = n_matches ? div_scalar(box_sum, static_cast<float>(n_matches))
                                : Tensor::scalar(0.0f);
    Tensor cls_mean = n_matches ? div_scalar(cls_sum, static_cast<float>(n_matches * nc))
                                : Tensor::scalar(0.0f);

    Tensor total = add(add(mul_scalar(box_mean, kBoxGain), mul_scalar(obj_total, kObjGain)),
                       mul_scalar(cls_mean, kClsGain));

    LossOutput out;
    out.total = total;
    out.report.box = box_mean.item();
    out.report.obj = obj_total.item();
    out.report.cls = cls_mean.item();
    out.report.total = total.item();
    return out;
}

} // namespace fsa
