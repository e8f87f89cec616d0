#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fsa/blocks.hpp"
#include "fsa/fsa_module.hpp"
#include "fsa/postprocess.hpp"
#include "fsa/tensor.hpp"

namespace fsa {

// Full architectural description. Configs are data: the same code scales up
// by editing widths/depths.
struct ModelConfig {
    int input_size = 160;
    std::vector<int> widths = {16, 32, 64, 128, 256}; // stem, p2, p3, p4, p5
    std::vector<int> depths = {1, 1, 1, 1};           // csp depth per stage p2..p5
    bool use_fsa = true;
    bool use_mhsa = true;
    bool use_p2_head = true; // tiny-object head at stride 4
    int mhsa_heads = 4;
    int num_classes = 3;
    int fsa_r = 4;
    int fsa_k = 7;
    // per head: 3 anchor (w,h) pairs in pixels, stride-ascending order
    std::vector<std::array<float, 6>> anchors;

    ModelConfig();

    int num_heads() const { return use_p2_head ? 4 : 3; }
    std::vector<int> strides() const;
    std::vector<HeadSpec> head_specs() const;
    int head_channels() const { return 3 * (5 + num_classes); }

    void validate() const; // ConfigError naming the offending field
    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);
    static ModelConfig from_file(const std::string& path);
    uint64_t hash() const; // FNV-1a64 over to_text()
};

// k-means (log w, log h) over training labels, 3 anchors per head, sorted by
// area and grouped stride-ascending. Deterministic.
std::vector<std::array<float, 6>> kmeans_anchors(const std::vector<GroundTruthBox>& boxes,
                                                 int num_heads);

class Model {
public:
    Model() = default;

    static Model build(const ModelConfig& cfg, uint64_t seed);

    // Raw head outputs, stride-ascending. fsa_maps, when given, receives the
    // attention map of every FSA site. timings, when given, receives
    // (section, seconds) pairs.
    std::vector<Tensor> forward(const Tensor& images, bool training,
                                std::vector<Tensor>* fsa_maps = nullptr,
                                std::vector<std::pair<std::string, double>>* timings = nullptr);

    const ModelConfig& config() const { return cfg_; }
    ParamList& params() { return params_; }
    const ParamList& params() const { return params_; }
    int64_t parameter_count() const; // trainable, by enumeration

    void save(const std::string& path) const;
    static Model load(const std::string& path);

private:
    void wire(uint64_t seed);
    Tensor apply_fsa(size_t site, const Tensor& x, std::vector<Tensor>* maps);

    ModelConfig cfg_;
    ParamList params_;

    ConvBlock stem_, d2_, d3_, d4_, d5_;
    CspStage c2_, c3_, c4_, c5_;
    Sppf sppf_;
    ConvBlock lat5_, lat4_, lat3_;
    CspStage t4_, t3_, t2_;
    ConvBlock pan2_, pan3_, pan4_;
    CspStage n3_, n4_, n5_;
    std::vector<FsaModule> fsa_;
    std::vector<Tensor> head_w_, head_b_;
};

// Closed-form trainable parameter count for a config; validated against the
// built model's enumeration in tests.
int64_t expected_parameter_count(const ModelConfig& cfg);

} // namespace fsa
