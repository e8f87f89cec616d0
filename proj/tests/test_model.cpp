#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "fsa/model.hpp"
#include "fsa/rng.hpp"

using namespace fsa;
namespace fs = std::filesystem;

namespace {

Tensor rand_image(int s, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(static_cast<size_t>(3) * s * s);
    for (float& x : v) x = rng.uniform(0, 1);
    return Tensor({1, 3, s, s}, std::move(v));
}

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.input_size = 64;
    cfg.widths = {8, 8, 16, 16, 32};
    cfg.num_classes = 2;
    cfg.mhsa_heads = 4;
    return cfg;
}

} // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("head grids and channel extents follow the stride arithmetic") {
    ModelConfig cfg;
    cfg.input_size = 160;
    cfg.num_classes = 1;
    Model m = Model::build(cfg, 0);
    Tensor img = rand_image(160, 1);
    NoGradGuard ng;
    auto outs = m.forward(img, false);
    REQUIRE(outs.size() == 4);
    const int grids[4] = {40, 20, 10, 5};
    for (int i = 0; i < 4; ++i) {
        CHECK(outs[static_cast<size_t>(i)].shape() ==
              Shape{1, 18, grids[i], grids[i]}); // 3*(5+1) = 18
    }
}

TEST_CASE("zero input with fresh stats: every head logit equals its zero bias") {
    ModelConfig cfg = small_cfg();
    Model m = Model::build(cfg, 3);
    Tensor img = Tensor::zeros({1, 3, 64, 64});
    NoGradGuard ng;
    for (Tensor& t : m.forward(img, false))
        for (float v : t.data()) CHECK(v == 0.0f);
}

TEST_CASE("inference is bitwise deterministic") {
    ModelConfig cfg = small_cfg();
    Model m = Model::build(cfg, 5);
    Tensor img = rand_image(64, 9);
    NoGradGuard ng;
    auto a = m.forward(img, false);
    auto b = m.forward(img, false);
    for (size_t i = 0; i < a.size(); ++i)
        CHECK(std::memcmp(a[i].data().data(), b[i].data().data(),
                          static_cast<size_t>(a[i].numel()) * sizeof(float)) == 0);
}

TEST_CASE("toggling the attention changes outputs but not shapes or shared init") {
    ModelConfig on = small_cfg();
    ModelConfig off = small_cfg();
    off.use_fsa = false;
    Model m_on = Model::build(on, 7);
    Model m_off = Model::build(off, 7);

    // shared parameters drew identically
    for (const ParamEntry& p : m_off.params()) {
        bool found = false;
        for (const ParamEntry& q : m_on.params())
            if (q.name == p.name) {
                found = true;
                REQUIRE(q.tensor.numel() == p.tensor.numel());
                CHECK(std::memcmp(q.tensor.data().data(), p.tensor.data().data(),
                                  static_cast<size_t>(p.tensor.numel()) * sizeof(float)) == 0);
            }
        CHECK(found);
    }

    Tensor img = rand_image(64, 11);
    NoGradGuard ng;
    auto a = m_on.forward(img, false);
    auto b = m_off.forward(img, false);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].shape() == b[i].shape());
        for (int64_t j = 0; j < a[i].numel(); ++j)
            any_diff |= a[i].data()[static_cast<size_t>(j)] != b[i].data()[static_cast<size_t>(j)];
    }
    CHECK(any_diff);
}

TEST_CASE("parameter count: closed form equals enumeration; width growth is monotone") {
    ModelConfig a = small_cfg();
    ModelConfig b = small_cfg();
    b.use_p2_head = false;
    b.use_mhsa = false;
    b.use_fsa = false;
    b.anchors.erase(b.anchors.begin());
    ModelConfig c = small_cfg();
    c.widths = {16, 16, 32, 32, 64};
    for (const ModelConfig& cfg : {a, b, c}) {
        Model m = Model::build(cfg, 1);
        CHECK(m.parameter_count() == expected_parameter_count(cfg));
    }
    CHECK(Model::build(c, 1).parameter_count() > Model::build(a, 1).parameter_count());
}

TEST_CASE("checkpoint: save/load round trip is bitwise, corruption is rejected") {
    const fs::path dir = fs::temp_directory_path() / "fsa_test_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string path = (dir / "model.fsad").string();

    ModelConfig cfg = small_cfg();
    Model m = Model::build(cfg, 13);
    m.save(path);
    Model r = Model::load(path);

    REQUIRE(r.params().size() == m.params().size());
    for (size_t i = 0; i < m.params().size(); ++i) {
        CHECK(r.params()[i].name == m.params()[i].name);
        CHECK(std::memcmp(r.params()[i].tensor.data().data(), m.params()[i].tensor.data().data(),
                          static_cast<size_t>(m.params()[i].tensor.numel()) * sizeof(float)) == 0);
    }
    Tensor img = rand_image(64, 17);
    NoGradGuard ng;
    auto a = m.forward(img, false);
    auto b = r.forward(img, false);
    for (size_t i = 0; i < a.size(); ++i)
        CHECK(std::memcmp(a[i].data().data(), b[i].data().data(),
                          static_cast<size_t>(a[i].numel()) * sizeof(float)) == 0);

    // truncation
    {
        std::vector<char> bytes;
        {
            std::ifstream in(path, std::ios::binary);
            bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        }
        std::ofstream out(path + ".trunc", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(Model::load(path + ".trunc"), CheckpointError);

    // flipping a config byte breaks the stored hash
    {
        std::vector<char> bytes;
        {
            std::ifstream in(path, std::ios::binary);
            bytes.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        }
        bytes[25] ^= 0x01; // inside the config text block
        std::ofstream out(path + ".flip", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(Model::load(path + ".flip"), CheckpointError);

    CHECK_THROWS_AS(Model::load((dir / "missing.fsad").string()), IoError);
}

TEST_CASE("config text: round trip, unknown keys, named-field violations") {
    ModelConfig cfg = small_cfg();
    ModelConfig back = ModelConfig::from_text(cfg.to_text());
    CHECK(back.to_text() == cfg.to_text());
    CHECK(back.hash() == cfg.hash());

    CHECK_THROWS_AS(ModelConfig::from_text("nonsense = 1\n"), ConfigError);

    try {
        ModelConfig::from_text("input_size = 50\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("input_size") != std::string::npos);
    }

    try {
        ModelConfig bad = small_cfg();
        bad.fsa_r = 3; // 8 % 3 != 0
        bad.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("fsa_r") != std::string::npos);
    }

    // `anchors = auto` parses and falls back to the stock anchors
    ModelConfig autoc = ModelConfig::from_text("anchors = auto\n");
    CHECK(autoc.anchors.size() == 4);
}

TEST_CASE("k-means anchors: deterministic, positive, area-ordered") {
    Rng rng(19);
    std::vector<GroundTruthBox> boxes;
    for (int i = 0; i < 300; ++i) {
        const float w = rng.uniform(3, 60), h = rng.uniform(3, 60);
        boxes.push_back({0, 80, 80, w, h});
    }
    auto a = kmeans_anchors(boxes, 4);
    auto b = kmeans_anchors(boxes, 4);
    REQUIRE(a.size() == 4);
    CHECK(a == b);
    float prev_area = 0;
    for (const auto& set : a)
        for (int k = 0; k < 3; ++k) {
            CHECK(set[static_cast<size_t>(2 * k)] > 0);
            CHECK(set[static_cast<size_t>(2 * k + 1)] > 0);
            const float area = set[static_cast<size_t>(2 * k)] * set[static_cast<size_t>(2 * k + 1)];
            CHECK(area >= prev_area);
            prev_area = area;
        }
}

TEST_SUITE_END();
