#include "fsa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fsa {

namespace {
constexpr float kSweepConf = 0.001f; // AP sweep threshold
constexpr int kMaxPerImage = 300;    // pre-NMS cap per image, highest confidence first
} // namespace

std::vector<char> match_predictions(const std::vector<DetBox>& preds_conf_desc,
                                    const std::vector<GroundTruthBox>& gts, float iou_threshold) {
    for (size_t i = 1; i < preds_conf_desc.size(); ++i)
        if (preds_conf_desc[i - 1].confidence < preds_conf_desc[i].confidence)
            throw ContractError("match_predictions: predictions must be confidence-descending");
    std::vector<char> used(gts.size(), 0);
    std::vector<char> tp(preds_conf_desc.size(), 0);
    for (size_t p = 0; p < preds_conf_desc.size(); ++p) {
        const DetBox& pred = preds_conf_desc[p];
        float best = -1.0f;
        int bestG = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (used[g] || gts[g].class_id != pred.class_id) continue;
            const float v = box_iou(pred.cx, pred.cy, pred.w, pred.h, gts[g].cx, gts[g].cy, gts[g].w,
                                    gts[g].h);
            if (v >= iou_threshold && v > best) { // ties keep the lowest gt index
                best = v;
                bestG = static_cast<int>(g);
            }
        }
        if (bestG >= 0) {
            used[static_cast<size_t>(bestG)] = 1;
            tp[p] = 1;
        }
    }
    return tp;
}

double average_precision(const std::vector<char>& flags, int num_gt) {
    if (num_gt < 0) throw ContractError("average_precision: num_gt must be >= 0");
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
    // monotone envelope: p(r) = max precision at recall >= r
    std::vector<double> env(n);
    double run = 0.0;
    for (size_t i = n; i-- > 0;) {
        run = std::max(run, precision[i]);
        env[i] = run;
    }
    double sum = 0.0;
    for (int k = 0; k <= 100; ++k) {
        const double r = k / 100.0;
        // first index with recall >= r
        size_t lo = 0, hi = n;
        while (lo < hi) {
            const size_t mid = (lo + hi) / 2;
            if (recall[mid] >= r)
                hi = mid;
            else
                lo = mid + 1;
        }
        sum += lo < n ? env[lo] : 0.0;
    }
    return sum / 101.0;
}

EvalReport evaluate_detections(const std::vector<std::vector<DetBox>>& preds_per_image,
                               const std::vector<std::vector<GroundTruthBox>>& gts_per_image,
                               int num_classes, float operating_conf, float nms_iou) {
    if (preds_per_image.size() != gts_per_image.size())
        throw ContractError("evaluate_detections: image count mismatch");
    const int nimg = static_cast<int>(preds_per_image.size());

    EvalReport rep;
    rep.operating_conf = operating_conf;
    rep.nms_iou = nms_iou;
    rep.images = nimg;
    for (int t = 0; t < 10; ++t) rep.iou_thresholds.push_back(0.5f + 0.05f * static_cast<float>(t));
    const int nthr = static_cast<int>(rep.iou_thresholds.size());

    struct Scored {
        float conf;
        int cls;
        int image;
        int rank; // position within the image's confidence ordering
        std::vector<char> tp;
    };
    std::vector<Scored> scored;
    std::vector<int> gt_per_class(static_cast<size_t>(num_classes), 0);
    int op_tp = 0, op_fp = 0;

    for (int im = 0; im < nimg; ++im) {
        std::vector<DetBox> preds = preds_per_image[static_cast<size_t>(im)];
        std::stable_sort(preds.begin(), preds.end(),
                         [](const DetBox& a, const DetBox& b) { return a.confidence > b.confidence; });
        const auto& gts = gts_per_image[static_cast<size_t>(im)];
        for (const GroundTruthBox& g : gts) {
            if (g.class_id < 0 || g.class_id >= num_classes)
                throw ContractError("evaluate_detections: gt class id out of range");
            ++gt_per_class[static_cast<size_t>(g.class_id)];
        }
        rep.instances += static_cast<int>(gts.size());

        std::vector<std::vector<char>> flags(static_cast<size_t>(nthr));
        for (int t = 0; t < nthr; ++t)
            flags[static_cast<size_t>(t)] =
                match_predictions(preds, gts, rep.iou_thresholds[static_cast<size_t>(t)]);

        for (size_t p = 0; p < preds.size(); ++p) {
            Scored s;
            s.conf = preds[p].confidence;
            s.cls = preds[p].class_id;
            s.image = im;
            s.rank = static_cast<int>(p);
            s.tp.resize(static_cast<size_t>(nthr));
            for (int t = 0; t < nthr; ++t) s.tp[static_cast<size_t>(t)] = flags[static_cast<size_t>(t)][p];
            scored.push_back(std::move(s));
            if (preds[p].confidence >= operating_conf) {
                if (flags[0][p])
                    ++op_tp;
                else
                    ++op_fp;
            }
        }
    }

    // global confidence ordering; ties resolved by (image, rank) so the result
    // is independent of evaluation order
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.conf != b.conf) return a.conf > b.conf;
        if (a.image != b.image) return a.image < b.image;
        return a.rank < b.rank;
    });

    rep.ap.assign(static_cast<size_t>(num_classes),
                  std::vector<float>(static_cast<size_t>(nthr), 0.0f));
    double map50_sum = 0.0, map_all_sum = 0.0;
    int valid_classes = 0;
    for (int c = 0; c < num_classes; ++c) {
        double class_sum = 0.0;
        bool defined = true;
        for (int t = 0; t < nthr; ++t) {
            std::vector<char> flags;
            for (const Scored& s : scored)
                if (s.cls == c) flags.push_back(s.tp[static_cast<size_t>(t)]);
            const double ap = average_precision(flags, gt_per_class[static_cast<size_t>(c)]);
            if (std::isnan(ap)) {
                defined = false;
                rep.ap[static_cast<size_t>(c)][static_cast<size_t>(t)] = std::nanf("");
            } else {
                rep.ap[static_cast<size_t>(c)][static_cast<size_t>(t)] = static_cast<float>(ap);
                class_sum += ap;
            }
        }
        if (defined) {
            ++valid_classes;
            map50_sum += rep.ap[static_cast<size_t>(c)][0];
            map_all_sum += class_sum / nthr;
        }
    }
    rep.map50 = valid_classes ? static_cast<float>(map50_sum / valid_classes) : 0.0f;
    rep.map5095 = valid_classes ? static_cast<float>(map_all_sum / valid_classes) : 0.0f;
    rep.precision = (op_tp + op_fp) ? static_cast<float>(op_tp) / static_cast<float>(op_tp + op_fp) : 0.0f;
    rep.recall = rep.instances ? static_cast<float>(op_tp) / static_cast<float>(rep.instances) : 0.0f;
    return rep;
}

std::vector<DetBox> detect_image(Model& model, const Tensor& image_chw, float conf_thr,
                                 float nms_thr, std::vector<Tensor>* fsa_maps) {
    NoGradGuard ng;
    const int S = model.config().input_size;
    Tensor batch = reshape(image_chw, {1, 3, S, S});
    std::vector<Tensor> raw = model.forward(batch, false, fsa_maps);
    const std::vector<HeadSpec> heads = model.config().head_specs();
    std::vector<DetBox> boxes;
    for (size_t h = 0; h < raw.size(); ++h) {
        std::vector<DetBox> part =
            decode(raw[h], 0, heads[h], model.config().num_classes, S, conf_thr);
        boxes.insert(boxes.end(), std::make_move_iterator(part.begin()),
                     std::make_move_iterator(part.end()));
    }
    if (static_cast<int>(boxes.size()) > kMaxPerImage) {
        std::stable_sort(boxes.begin(), boxes.end(),
                         [](const DetBox& a, const DetBox& b) { return a.confidence > b.confidence; });
        boxes.resize(kMaxPerImage);
    }
    return nms(boxes, nms_thr);
}

EvalReport evaluate(Model& model, const Dataset& data, float operating_conf, float nms_iou) {
    if (data.samples.empty()) throw ContractError("evaluate: dataset is empty");
    const int nimg = static_cast<int>(data.samples.size());
    const int S = model.config().input_size;
    std::vector<std::vector<DetBox>> preds(static_cast<size_t>(nimg));
    std::vector<std::vector<GroundTruthBox>> gts(static_cast<size_t>(nimg));

    std::string err;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < nimg; ++i) {
        try {
            const Sample& s = data.samples[static_cast<size_t>(i)];
            preds[static_cast<size_t>(i)] = detect_image(model, s.image, kSweepConf, nms_iou);
            for (const GroundTruth& gt : s.labels)
                gts[static_cast<size_t>(i)].push_back(to_pixel_box(gt, S));
        } catch (const std::exception& e) {
#pragma omp critical
            if (err.empty()) err = e.what();
        }
    }
    if (!err.empty()) throw Error(err);

    const int nc = std::max(1, data.num_classes());
    return evaluate_detections(preds, gts, nc, operating_conf, nms_iou);
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    os << "operating_conf = " << operating_conf << '\n';
    os << "nms_iou = " << nms_iou << '\n';
    os << "match_iou = " << match_iou << '\n';
    os << "images = " << images << '\n';
    os << "instances = " << instances << '\n';
    os << "precision = " << precision << '\n';
    os << "recall = " << recall << '\n';
    os << "map50 = " << map50 << '\n';
    os << "map5095 = " << map5095 << '\n';
    for (size_t c = 0; c < ap.size(); ++c)
        os << "ap50_class_" << c << " = " << ap[c][0] << '\n';
    return os.str();
}

std::string EvalReport::csv_header() {
    return "precision,recall,map50,map5095,operating_conf,nms_iou,match_iou,images,instances";
}

std::string EvalReport::to_csv_row() const {
    std::ostringstream os;
    os << precision << ',' << recall << ',' << map50 << ',' << map5095 << ',' << operating_conf
       << ',' << nms_iou << ',' << match_iou << ',' << images << ',' << instances;
    return os.str();
}

} // namespace fsa
