#pragma once

#include <string>

#include "fsa/blocks.hpp"
#include "fsa/tensor.hpp"

namespace fsa {

// Full-separation attention. The input map is pooled along H, W and C
// separately; the H- and W-pooled branches each pass through their own
// channel gate (two 1x1 projections with a reduction ratio, SiLU between,
// sigmoid out), the C-pooled branch through a spatial gate (one kxk conv,
// sigmoid out). The three gate maps are broadcast back to the input shape,
// averaged into a per-pixel importance map A in (0,1), and the output is
// x * A. With all gate parameters at zero every coefficient is exactly 0.5,
// so the module reduces to x/2.
class FsaModule {
public:
    FsaModule() = default;
    // channels % reduction must hold; violations fail here, not at forward.
    FsaModule(int channels, int reduction, int spatial_kernel, Rng& rng);

    Tensor forward(const Tensor& x);
    // The importance map alone; forward(x) == x * attention_map(x) bit for bit.
    Tensor attention_map(const Tensor& x);

    void collect(const std::string& prefix, ParamList& out);
    static int64_t param_count(int channels, int reduction, int spatial_kernel);

    int channels() const { return channels_; }

private:
    Tensor channel_gate(const Tensor& pooled, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                        const Tensor& b2) const;

    // channel gates for the H- and W-pooled branches, each with its own weights
    Tensor h_w1_, h_b1_, h_w2_, h_b2_;
    Tensor w_w1_, w_b1_, w_w2_, w_b2_;
    // spatial gate for the C-pooled branch
    Tensor c_wk_, c_bk_;
    int channels_ = 0;
    int reduction_ = 0;
    int kernel_ = 0;
};

} // namespace fsa
