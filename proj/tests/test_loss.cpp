#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "fsa/loss.hpp"
#include "fsa/rng.hpp"
#include "fsa/train.hpp"
#include "oracles.hpp"

using namespace fsa;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.input_size = 32;
    cfg.widths = {4, 4, 8, 8, 8};
    cfg.num_classes = 2;
    cfg.mhsa_heads = 4;
    return cfg;
}

std::vector<Tensor> zero_raws(const ModelConfig& cfg, float fill = 0.0f) {
    std::vector<Tensor> raws;
    for (int s : cfg.strides())
        raws.push_back(Tensor::full({1, cfg.head_channels(), cfg.input_size / s, cfg.input_size / s},
                                    fill));
    return raws;
}

Dataset synthetic_dataset(int n, int image_size, uint64_t seed, int num_classes = 3) {
    SceneSpec spec;
    spec.image_size = image_size;
    spec.seed = seed;
    spec.num_classes = num_classes;
    Dataset ds;
    ds.class_names = default_class_names(num_classes);
    for (int i = 0; i < n; ++i) {
        std::vector<GroundTruth> labels;
        ImageU8 img = render_scene(spec, static_cast<uint64_t>(i), labels);
        Sample s;
        s.stem = "s" + std::to_string(i);
        std::vector<float> chw(3 * static_cast<size_t>(image_size) * image_size);
        const size_t plane = static_cast<size_t>(image_size) * image_size;
        for (size_t px = 0; px < plane; ++px) {
            chw[px] = img.rgb[3 * px] / 255.0f;
            chw[plane + px] = img.rgb[3 * px + 1] / 255.0f;
            chw[2 * plane + px] = img.rgb[3 * px + 2] / 255.0f;
        }
        s.image = Tensor({3, image_size, image_size}, std::move(chw));
        s.labels = labels;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace

TEST_SUITE_BEGIN("loss");

TEST_CASE("assignment: a gt on a cell center matches only the center cell") {
    ModelConfig cfg = tiny_cfg();
    // make exactly one anchor eligible
    cfg.anchors = {{{1000, 1000, 1000, 1000, 1000, 1000},
                    {8, 8, 1000, 1000, 1000, 1000},
                    {1000, 1000, 1000, 1000, 1000, 1000},
                    {1000, 1000, 1000, 1000, 1000, 1000}}};
    // stride 8 grid cell (2,2) center: pixel 20 -> normalized 0.625
    std::vector<std::vector<GroundTruth>> gts = {{{0, 0.625f, 0.625f, 0.25f, 0.25f}}};
    auto matches = assign_targets(gts, cfg);
    REQUIRE(matches.size() == 1);
    CHECK(matches[0].head == 1);
    CHECK(matches[0].anchor == 0);
    CHECK(matches[0].gx == 2);
    CHECK(matches[0].gy == 2);
}

TEST_CASE("assignment: a gt equal to an anchor passes the ratio gate") {
    ModelConfig cfg;
    cfg.input_size = 160;
    // default p3 anchors hold (16,16); gt of 16px matches it
    std::vector<std::vector<GroundTruth>> gts = {{{0, 0.5f, 0.5f, 0.1f, 0.1f}}};
    auto matches = assign_targets(gts, cfg);
    bool found = false;
    for (const TargetMatch& m : matches)
        if (m.head == 1 && m.anchor == 1) found = true;
    CHECK(found);
}

TEST_CASE("assignment invariants hold for random labels") {
    ModelConfig cfg;
    cfg.input_size = 160;
    Rng rng(3);
    std::vector<std::vector<GroundTruth>> gts(4);
    for (auto& image : gts)
        for (int i = 0; i < 3; ++i) {
            GroundTruth g;
            g.class_id = rng.range(0, 2);
            g.w = rng.uniform(0.02f, 0.4f);
            g.h = rng.uniform(0.02f, 0.4f);
            g.cx = rng.uniform(g.w / 2, 1 - g.w / 2);
            g.cy = rng.uniform(g.h / 2, 1 - g.h / 2);
            image.push_back(g);
        }
    const auto heads = cfg.head_specs();
    auto matches = assign_targets(gts, cfg);
    CHECK(!matches.empty());
    for (const TargetMatch& m : matches) {
        const GroundTruth& g = gts[static_cast<size_t>(m.image)][static_cast<size_t>(m.gt)];
        const HeadSpec& hs = heads[static_cast<size_t>(m.head)];
        const float wpx = g.w * 160, hpx = g.h * 160;
        const float aw = hs.anchors[static_cast<size_t>(m.anchor)][0];
        const float ah = hs.anchors[static_cast<size_t>(m.anchor)][1];
        const float ratio =
            std::max(std::max(wpx / aw, aw / wpx), std::max(hpx / ah, ah / hpx));
        CHECK(ratio < kAnchorRatioMax);
        // the cell contains the center, or neighbours it on the closer side
        const float gxf = g.cx * 160 / static_cast<float>(hs.stride);
        const float gyf = g.cy * 160 / static_cast<float>(hs.stride);
        const int cgx = static_cast<int>(gxf), cgy = static_cast<int>(gyf);
        const bool center = m.gx == cgx && m.gy == cgy;
        const bool xn = m.gy == cgy && std::fabs((gxf - cgx) - 0.5f) > 0 &&
                        m.gx == (gxf - cgx < 0.5f ? cgx - 1 : cgx + 1);
        const bool yn = m.gx == cgx && std::fabs((gyf - cgy) - 0.5f) > 0 &&
                        m.gy == (gyf - cgy < 0.5f ? cgy - 1 : cgy + 1);
        CHECK((center || xn || yn));
    }
}

TEST_CASE("loss: no labels and saturated negative logits give ~zero total") {
    ModelConfig cfg = tiny_cfg();
    auto raws = zero_raws(cfg, -20.0f);
    std::vector<std::vector<GroundTruth>> gts = {{}};
    LossOutput out = compute_loss(raws, gts, cfg);
    CHECK(out.report.box == 0.0f);
    CHECK(out.report.cls == 0.0f);
    CHECK(out.report.total < 1e-4f);
}

TEST_CASE("loss: an exactly-encoded box zeroes its term") {
    ModelConfig cfg = tiny_cfg();
    cfg.anchors = {{{1000, 1000, 1000, 1000, 1000, 1000},
                    {8, 8, 1000, 1000, 1000, 1000},
                    {1000, 1000, 1000, 1000, 1000, 1000},
                    {1000, 1000, 1000, 1000, 1000, 1000}}};
    std::vector<std::vector<GroundTruth>> gts = {{{0, 0.625f, 0.625f, 0.25f, 0.25f}}};
    auto raws = zero_raws(cfg);
    GroundTruthBox px{0, 0.625f * 32, 0.625f * 32, 8, 8};
    oracle::EncodeTarget at;
    REQUIRE(oracle::encode_box(raws, cfg, px, 4.0f, 4.0f, &at));
    CHECK(at.head == 1);
    LossOutput out = compute_loss(raws, gts, cfg);
    CHECK(out.report.box < 1e-5f); // CIoU of the identical box is 1
}

TEST_CASE("loss stays finite for extreme logits") {
    ModelConfig cfg = tiny_cfg();
    std::vector<std::vector<GroundTruth>> gts = {
        {{0, 0.4f, 0.4f, 0.3f, 0.3f}, {1, 0.7f, 0.7f, 0.2f, 0.2f}}};
    for (float v : {1e4f, -1e4f, 100.0f, -100.0f}) {
        auto raws = zero_raws(cfg, v);
        LossOutput out = compute_loss(raws, gts, cfg);
        CHECK(std::isfinite(out.report.total));
        CHECK(out.report.box >= 0.0f);
        CHECK(out.report.obj >= 0.0f);
        CHECK(out.report.cls >= 0.0f);
    }
}

TEST_CASE("train: zero learning rate leaves every trainable parameter bitwise intact") {
    ModelConfig cfg = tiny_cfg();
    Model m = Model::build(cfg, 21);
    std::vector<std::vector<float>> before;
    for (const ParamEntry& p : m.params())
        if (p.trainable) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

    Dataset ds = synthetic_dataset(4, 32, 99, 2);
    TrainHyper hyper;
    hyper.lr0 = 0.0f;
    hyper.epochs = 1;
    hyper.batch_size = 2;
    hyper.eval_interval = 1000;
    hyper.warmup_epochs = 0;
    train(m, ds, nullptr, hyper, nullptr);

    size_t i = 0;
    for (const ParamEntry& p : m.params()) {
        if (!p.trainable) continue;
        CHECK(std::memcmp(p.tensor.data().data(), before[i].data(),
                          before[i].size() * sizeof(float)) == 0);
        ++i;
    }
}

TEST_CASE("train: fixed seed reproduces the first-epoch loss exactly") {
    ModelConfig cfg = tiny_cfg();
    Dataset ds = synthetic_dataset(6, 32, 123, 2);
    TrainHyper hyper;
    hyper.lr0 = 0.01f;
    hyper.epochs = 1;
    hyper.batch_size = 3;
    hyper.eval_interval = 1000;
    hyper.seed = 77;

    Model a = Model::build(cfg, 5);
    Model b = Model::build(cfg, 5);
    TrainLog la = train(a, ds, nullptr, hyper, nullptr);
    TrainLog lb = train(b, ds, nullptr, hyper, nullptr);
    REQUIRE(la.records.size() == 1);
    CHECK(la.records[0].loss.total == lb.records[0].loss.total);
    CHECK(la.records[0].loss.box == lb.records[0].loss.box);
}

TEST_CASE("train: single-image overfit decreases the loss in at least 45 of 50 steps") {
    ModelConfig cfg = tiny_cfg();
    Model m = Model::build(cfg, 31);
    Dataset ds = synthetic_dataset(1, 32, 555, 2);
    TrainHyper hyper;
    hyper.lr0 = 0.01f;
    hyper.lrf = 1.0f; // constant rate; the check is about monotonicity
    hyper.epochs = 50;
    hyper.batch_size = 1;
    hyper.warmup_epochs = 0;
    hyper.eval_interval = 1000;
    hyper.seed = 1;
    TrainLog log = train(m, ds, nullptr, hyper, nullptr);
    REQUIRE(log.records.size() == 50);
    int decreases = 0;
    for (size_t i = 1; i < log.records.size(); ++i)
        if (log.records[i].loss.total < log.records[i - 1].loss.total) ++decreases;
    INFO("decreases = ", decreases);
    CHECK(decreases >= 45);
}

TEST_CASE("epoch records serialize one structured line each") {
    EpochRecord rec;
    rec.epoch = 3;
    rec.lr = 0.01f;
    rec.loss = {0.5f, 0.25f, 0.125f, 0.875f};
    std::string line = rec.to_line();
    CHECK(line.find("epoch=3") == 0);
    CHECK(line.find("box=0.5") != std::string::npos);
    CHECK(line.find("total=0.875") != std::string::npos);
    CHECK(line.find("map50") == std::string::npos); // no metrics on non-eval epochs
}

TEST_SUITE_END();
