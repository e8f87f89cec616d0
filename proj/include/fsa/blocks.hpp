#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fsa/rng.hpp"
#include "fsa/tensor.hpp"

namespace fsa {

// One named parameter (or state buffer) of a model. `decay` marks entries
// that receive weight decay during training.
struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
    bool decay = false;
};
using ParamList = std::vector<ParamEntry>;

// Deterministic Kaiming-uniform fill, bound sqrt(6 / fan_in).
void kaiming_uniform(Tensor& t, int fan_in, Rng& rng);

// Conv (no bias) -> batch norm -> SiLU. Batch statistics in training,
// running statistics at inference.
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(int cin, int cout, int k, int stride, Rng& rng);

    Tensor forward(const Tensor& x, bool training);
    void collect(const std::string& prefix, ParamList& out);
    int out_channels() const { return w_.defined() ? w_.dim(0) : 0; }

    static int64_t param_count(int cin, int cout, int k);

private:
    Tensor w_, gamma_, beta_, run_mean_, run_var_;
    int stride_ = 1;
    int pad_ = 0;
};

// 1x1 reduce -> 3x3 expand, optional residual add when channels match.
class Bottleneck {
public:
    Bottleneck() = default;
    Bottleneck(int c, bool shortcut, Rng& rng);
    Tensor forward(const Tensor& x, bool training);
    void collect(const std::string& prefix, ParamList& out);
    static int64_t param_count(int c);

private:
    ConvBlock cv1_, cv2_;
    bool shortcut_ = true;
};

// Minimal multi-head self-attention over the H*W spatial positions of a
// (B,C,H,W) map; channels are the embedding. No positional encoding.
class MhsaBlock {
public:
    MhsaBlock() = default;
    MhsaBlock(int channels, int heads, bool residual, Rng& rng);

    // attn_out, when given, receives one (heads*B) list of (T,T) row-stochastic
    // attention matrices for inspection.
    Tensor forward(const Tensor& x, std::vector<Tensor>* attn_out = nullptr);
    void collect(const std::string& prefix, ParamList& out);
    static int64_t param_count(int channels);

    int heads() const { return heads_; }

private:
    Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
    int heads_ = 1;
    bool residual_ = true;
};

// CSP stage: two 1x1 split convs, a bottleneck stack (or an MHSA block in
// its place), concat, 1x1 merge.
class CspStage {
public:
    CspStage() = default;
    CspStage(int cin, int cout, int depth, bool shortcut, Rng& rng, int mhsa_heads = 0);

    Tensor forward(const Tensor& x, bool training);
    void collect(const std::string& prefix, ParamList& out);
    static int64_t param_count(int cin, int cout, int depth, int mhsa_heads = 0);

private:
    ConvBlock cv1_, cv2_, cv3_;
    std::vector<Bottleneck> units_;
    std::unique_ptr<MhsaBlock> attn_;
};

// 1x1 reduce, three chained 5x5 stride-1 max pools, concat of all four maps,
// 1x1 merge. Preserves H,W.
class Sppf {
public:
    Sppf() = default;
    Sppf(int cin, int cout, Rng& rng);
    Tensor forward(const Tensor& x, bool training);
    // the map and its three chained pools, concatenated on channels
    static Tensor pool_concat(const Tensor& x);
    void collect(const std::string& prefix, ParamList& out);
    static int64_t param_count(int cin, int cout);

private:
    ConvBlock cv1_, cv2_;
};

} // namespace fsa
