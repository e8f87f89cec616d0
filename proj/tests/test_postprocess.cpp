#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fsa/model.hpp"
#include "fsa/postprocess.hpp"
#include "fsa/rng.hpp"
#include "oracles.hpp"

using namespace fsa;

namespace {

DetBox make_box(float cx, float cy, float w, float h, float conf, int cls) {
    DetBox b;
    b.cx = cx;
    b.cy = cy;
    b.w = w;
    b.h = h;
    b.confidence = conf;
    b.objectness = conf;
    b.class_id = cls;
    b.class_scores.assign(static_cast<size_t>(cls + 1), 0.0f);
    b.class_scores.back() = 1.0f;
    return b;
}

std::vector<DetBox> random_box_set(Rng& rng, int max_n) {
    const int n = rng.range(1, max_n);
    std::vector<DetBox> out;
    for (int i = 0; i < n; ++i)
        out.push_back(make_box(rng.uniform(10, 90), rng.uniform(10, 90), rng.uniform(4, 40),
                               rng.uniform(4, 40), rng.uniform(0.05f, 1.0f), rng.range(0, 2)));
    return out;
}

bool same_set(const std::vector<DetBox>& a, const std::vector<DetBox>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].cx != b[i].cx || a[i].cy != b[i].cy || a[i].confidence != b[i].confidence ||
            a[i].class_id != b[i].class_id)
            return false;
    return true;
}

} // namespace

TEST_SUITE_BEGIN("postprocess");

TEST_CASE("decode: zero logits give the closed-form box") {
    const int nc = 1;
    Tensor raw = Tensor::zeros({1, 3 * (5 + nc), 8, 8});
    HeadSpec head;
    head.stride = 8;
    head.anchors = {{{10, 20}, {30, 30}, {50, 60}}};
    auto boxes = decode(raw, 0, head, nc, 64, 0.0f);
    CHECK(boxes.size() == 3 * 64);
    // anchor 0, cell gx=3, gy=4
    const DetBox& b = boxes[static_cast<size_t>(4 * 8 + 3)];
    CHECK(b.cx == doctest::Approx(28.0f));
    CHECK(b.cy == doctest::Approx(36.0f));
    CHECK(b.w == doctest::Approx(10.0f));
    CHECK(b.h == doctest::Approx(20.0f));
    CHECK(b.objectness == doctest::Approx(0.5f));
    CHECK(b.confidence == doctest::Approx(0.25f));

    CHECK(decode(raw, 0, head, nc, 64, 1.0f).empty());
    Tensor bad = Tensor::zeros({1, 17, 8, 8});
    CHECK_THROWS_AS(decode(bad, 0, head, nc, 64, 0.0f), ShapeError);
}

TEST_CASE("decode inverts encode within 1e-4 px") {
    ModelConfig cfg; // default anchors, 160px
    cfg.validate();
    Rng rng(77);
    int tried = 0, ok = 0;
    for (int trial = 0; trial < 60; ++trial) {
        GroundTruthBox gt;
        gt.class_id = rng.range(0, 2);
        gt.w = rng.uniform(4.0f, 70.0f);
        gt.h = rng.uniform(4.0f, 70.0f);
        gt.cx = rng.uniform(gt.w / 2, 160.0f - gt.w / 2);
        gt.cy = rng.uniform(gt.h / 2, 160.0f - gt.h / 2);

        std::vector<Tensor> raws;
        for (int s : cfg.strides())
            raws.push_back(Tensor::full({1, cfg.head_channels(), 160 / s, 160 / s}, -12.0f));
        oracle::EncodeTarget at;
        if (!oracle::encode_box(raws, cfg, gt, 8.0f, 6.0f, &at)) continue;
        ++tried;

        const auto heads = cfg.head_specs();
        auto boxes = decode(raws[static_cast<size_t>(at.head)], 0, heads[static_cast<size_t>(at.head)],
                            cfg.num_classes, 160, 0.5f);
        REQUIRE(boxes.size() == 1);
        const DetBox& b = boxes[0];
        if (std::fabs(b.cx - gt.cx) < 1e-4f && std::fabs(b.cy - gt.cy) < 1e-4f &&
            std::fabs(b.w - gt.w) < 1e-4f && std::fabs(b.h - gt.h) < 1e-4f &&
            b.class_id == gt.class_id)
            ++ok;
    }
    CHECK(tried > 20);
    CHECK(ok == tried);
}

TEST_CASE("iou: identical, disjoint and the 1/7 worked case") {
    DetBox a = make_box(1, 1, 2, 2, 0.9f, 0);
    CHECK(iou(a, a) == doctest::Approx(1.0f));
    DetBox far = make_box(10, 10, 2, 2, 0.9f, 0);
    CHECK(iou(a, far) == 0.0f);

    // corners (0,0,2,2) vs (1,1,3,3)
    DetBox b = make_box(2, 2, 2, 2, 0.9f, 0);
    CHECK(iou(a, b) == doctest::Approx(1.0f / 7.0f).epsilon(1e-6));
    const double grid = oracle::iou_grid_count(1, 1, 2, 2, 2, 2, 2, 2, 400);
    CHECK(grid == doctest::Approx(1.0 / 7.0).epsilon(2e-3));
}

TEST_CASE("nms: single box, boundary suppression, class separation") {
    DetBox solo = make_box(10, 10, 4, 4, 0.7f, 0);
    auto kept = nms({solo}, 0.45f);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].cx == solo.cx);

    // nested boxes with IoU exactly 0.5: suppressed at threshold 0.5
    DetBox big = make_box(1, 1, 2, 2, 0.9f, 0);
    DetBox half = make_box(1, 1, 2, 1, 0.8f, 0);
    CHECK(iou(big, half) == 0.5f);
    auto out = nms({big, half}, 0.5f);
    REQUIRE(out.size() == 1);
    CHECK(out[0].confidence == 0.9f);

    DetBox other = half;
    other.class_id = 1;
    CHECK(nms({big, other}, 0.5f).size() == 2);
}

TEST_CASE("nms properties against the subset-enumeration oracle") {
    Rng rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        auto boxes = random_box_set(rng, 8);
        const float thr = rng.uniform(0.2f, 0.7f);
        auto kept = nms(boxes, thr);
        auto want = oracle::nms_subset_oracle(boxes, thr);
        CHECK(same_set(kept, want));

        // idempotence
        CHECK(same_set(nms(kept, thr), kept));

        // kept boxes of one class never overlap at or above the threshold
        for (size_t i = 0; i < kept.size(); ++i)
            for (size_t j = i + 1; j < kept.size(); ++j)
                if (kept[i].class_id == kept[j].class_id) CHECK(iou(kept[i], kept[j]) < thr);

        // permutation invariance (confidences are continuous, ties have measure zero)
        std::vector<DetBox> shuffled = boxes;
        for (size_t i = shuffled.size(); i > 1; --i)
            std::swap(shuffled[i - 1], shuffled[rng.below(static_cast<uint32_t>(i))]);
        CHECK(same_set(nms(shuffled, thr), kept));

        // output confidences are sorted descending and form a subset of the input
        for (size_t i = 1; i < kept.size(); ++i)
            CHECK(kept[i - 1].confidence >= kept[i].confidence);
    }
}

TEST_SUITE_END();
