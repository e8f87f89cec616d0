#pragma once

// Test-only oracles: independent implementations used to cross-check the
// library. Everything here is written directly from the definitions, in the
// most literal way possible, and stays decoupled from the code under test.

#include <cstdint>
#include <functional>
#include <vector>

#include "fsa/model.hpp"
#include "fsa/postprocess.hpp"
#include "fsa/tensor.hpp"

namespace oracle {

// Central finite differences (step h) of f over every element of one leaf.
std::vector<double> finite_diff(const std::function<double()>& f, fsa::Tensor leaf, double h);

// max over elements of |a-n| / max(1, |a|, |n|)
double grad_rel_err(std::span<const float> analytic, const std::vector<double>& numeric);

std::vector<double> matmul_f64(const std::vector<double>& a, const std::vector<double>& b, int m,
                               int k, int n);

// IoU estimated by counting sub-pixel sample points (resolution samples per
// unit length).
double iou_grid_count(float acx, float acy, float aw, float ah, float bcx, float bcy, float bw,
                      float bh, int resolution);

// Enumerates all subsets of the input and returns the unique one where a box
// is kept iff no kept same-class box of higher priority overlaps it at
// IoU >= threshold. Priority: confidence desc, class_id asc, input order asc.
std::vector<fsa::DetBox> nms_subset_oracle(const std::vector<fsa::DetBox>& boxes, float iou_thr);

// Exact average precision: area under the monotone interpolated
// precision-recall curve, integrated across every recall step.
double ap_all_point(const std::vector<char>& tp_flags_conf_desc, int num_gt);

// Greedy prediction-to-gt matching re-implemented from the protocol text.
std::vector<char> match_oracle(const std::vector<fsa::DetBox>& preds_conf_desc,
                               const std::vector<fsa::GroundTruthBox>& gts, double iou_thr);

// Algebraic inverse of the box decode. Picks the best-ratio (head, anchor),
// writes the exact logits into the raw head tensors at the gt's center cell,
// and reports where. Returns false when no anchor satisfies the ratio bound.
struct EncodeTarget {
    int head = 0;
    int anchor = 0;
    int gy = 0;
    int gx = 0;
};
bool encode_box(std::vector<fsa::Tensor>& raws, const fsa::ModelConfig& cfg,
                const fsa::GroundTruthBox& gt, float obj_logit, float cls_logit,
                EncodeTarget* where);

} // namespace oracle
