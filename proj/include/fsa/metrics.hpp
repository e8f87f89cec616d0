#pragma once

#include <string>
#include <vector>

#include "fsa/data.hpp"
#include "fsa/model.hpp"
#include "fsa/postprocess.hpp"

namespace fsa {

// Detection quality summary. AP sweeps use every prediction above confidence
// 0.001; the reported precision/recall are the single operating point given
// by operating_conf (matching IoU 0.5), so the two sets of numbers are
// interpretable together.
struct EvalReport {
    float precision = 0;
    float recall = 0;
    std::vector<float> iou_thresholds;   // {0.50,0.55,...,0.95}
    std::vector<std::vector<float>> ap;  // ap[class][threshold]; NaN = undefined
    float map50 = 0;
    float map5095 = 0;
    float operating_conf = 0.25f;
    float nms_iou = 0.45f;
    float match_iou = 0.5f;
    int images = 0;
    int instances = 0;

    std::string to_text() const; // key = value lines
    static std::string csv_header();
    std::string to_csv_row() const;
};

// Greedy matching for one image: predictions must arrive confidence-descending;
// each matches the unmatched same-class gt of highest IoU >= threshold (ties:
// lowest gt index); every gt is used at most once. Returns one TP flag per
// prediction.
std::vector<char> match_predictions(const std::vector<DetBox>& preds_conf_desc,
                                    const std::vector<GroundTruthBox>& gts, float iou_threshold);

// 101-point interpolated AP over a confidence-ordered TP/FP sequence.
// num_gt == 0: NaN without predictions (excluded from class means), 0 with.
double average_precision(const std::vector<char>& flags, int num_gt);

// Metric core on already-decoded detections; deterministic and independent of
// image iteration order.
EvalReport evaluate_detections(const std::vector<std::vector<DetBox>>& preds_per_image,
                               const std::vector<std::vector<GroundTruthBox>>& gts_per_image,
                               int num_classes, float operating_conf, float nms_iou);

// forward -> decode (conf 0.001, top-300 per image) -> NMS -> metrics.
EvalReport evaluate(Model& model, const Dataset& data, float operating_conf, float nms_iou);

// The decode+NMS front half of evaluate(), reusable by the CLI.
std::vector<DetBox> detect_image(Model& model, const Tensor& image_chw, float conf_thr,
                                 float nms_thr, std::vector<Tensor>* fsa_maps = nullptr);

} // namespace fsa
