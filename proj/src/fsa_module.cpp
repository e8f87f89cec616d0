#include "fsa/fsa_module.hpp"

namespace fsa {

FsaModule::FsaModule(int channels, int reduction, int spatial_kernel, Rng& rng)
    : channels_(channels), reduction_(reduction), kernel_(spatial_kernel) {
    if (reduction < 1 || channels % reduction != 0)
        throw ConfigError("fsa_r: channel count " + std::to_string(channels) +
                          " not divisible by reduction ratio " + std::to_string(reduction));
    if (spatial_kernel < 1 || spatial_kernel % 2 == 0)
        throw ConfigError("fsa_k: spatial kernel must be odd, got " + std::to_string(spatial_kernel));
    const int hidden = channels / reduction;

    // First projections get ordinary init; the sigmoid-side layers start at
    // zero so every gate opens at exactly 0.5.
    auto make_gate = [&](Tensor& w1, Tensor& b1, Tensor& w2, Tensor& b2) {
        w1 = Tensor::zeros({hidden, channels, 1, 1}, true);
        kaiming_uniform(w1, channels, rng);
        b1 = Tensor::zeros({hidden}, true);
        w2 = Tensor::zeros({channels, hidden, 1, 1}, true);
        b2 = Tensor::zeros({channels}, true);
    };
    make_gate(h_w1_, h_b1_, h_w2_, h_b2_);
    make_gate(w_w1_, w_b1_, w_w2_, w_b2_);
    c_wk_ = Tensor::zeros({1, 1, spatial_kernel, spatial_kernel}, true);
    c_bk_ = Tensor::zeros({1}, true);
}

Tensor FsaModule::channel_gate(const Tensor& pooled, const Tensor& w1, const Tensor& b1,
                               const Tensor& w2, const Tensor& b2) const {
    return sigmoid(conv2d(silu(conv2d(pooled, w1, b1, 1, 0)), w2, b2, 1, 0));
}

Tensor FsaModule::attention_map(const Tensor& x) {
    if (x.ndim() != 4 || x.dim(1) != channels_)
        throw ShapeError("fsa: expected (B," + std::to_string(channels_) + ",H,W), got " +
                         shape_str(x.shape()));
    const Shape& full = x.shape();

    Tensor gate_h = channel_gate(pool_axis(x, Axis::H, PoolMode::Mean), h_w1_, h_b1_, h_w2_, h_b2_);
    Tensor gate_w = channel_gate(pool_axis(x, Axis::W, PoolMode::Mean), w_w1_, w_b1_, w_w2_, w_b2_);
    Tensor gate_c = sigmoid(conv2d(pool_axis(x, Axis::C, PoolMode::Mean), c_wk_, c_bk_, 1, kernel_ / 2));

    Tensor merged = add(add(broadcast_to(gate_h, full), broadcast_to(gate_w, full)),
                        broadcast_to(gate_c, full));
    // true division keeps the all-gates-at-0.5 case exact
    return div_scalar(merged, 3.0f);
}

Tensor FsaModule::forward(const Tensor& x) { return mul(x, attention_map(x)); }

void FsaModule::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".h_gate.w1", h_w1_, true, true});
    out.push_back({prefix + ".h_gate.b1", h_b1_, true, false});
    out.push_back({prefix + ".h_gate.w2", h_w2_, true, true});
    out.push_back({prefix + ".h_gate.b2", h_b2_, true, false});
    out.push_back({prefix + ".w_gate.w1", w_w1_, true, true});
    out.push_back({prefix + ".w_gate.b1", w_b1_, true, false});
    out.push_back({prefix + ".w_gate.w2", w_w2_, true, true});
    out.push_back({prefix + ".w_gate.b2", w_b2_, true, false});
    out.push_back({prefix + ".c_gate.weight", c_wk_, true, true});
    out.push_back({prefix + ".c_gate.bias", c_bk_, true, false});
}

int64_t FsaModule::param_count(int channels, int reduction, int spatial_kernel) {
    const int hidden = channels / reduction;
    const int64_t gate = static_cast<int64_t>(hidden) * channels + hidden +
                         static_cast<int64_t>(channels) * hidden + channels;
    return 2 * gate + static_cast<int64_t>(spatial_kernel) * spatial_kernel + 1;
}

} // namespace fsa
