#include "fsa/blocks.hpp"

#include <cmath>

namespace fsa {

namespace {
constexpr float kBnMomentum = 0.03f;
constexpr float kBnEps = 1e-3f;
} // namespace

void kaiming_uniform(Tensor& t, int fan_in, Rng& rng) {
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    for (float& v : t.data_mut()) v = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------------------
// ConvBlock
// ---------------------------------------------------------------------------

ConvBlock::ConvBlock(int cin, int cout, int k, int stride, Rng& rng)
    : stride_(stride), pad_(k / 2) {
    w_ = Tensor::zeros({cout, cin, k, k}, true);
    kaiming_uniform(w_, cin * k * k, rng);
    gamma_ = Tensor::full({cout}, 1.0f, true);
    beta_ = Tensor::zeros({cout}, true);
    run_mean_ = Tensor::zeros({cout});
    run_var_ = Tensor::full({cout}, 1.0f);
}

Tensor ConvBlock::forward(const Tensor& x, bool training) {
    Tensor y = conv2d(x, w_, Tensor(), stride_, pad_);
    if (training) {
        std::vector<float> bm, bv;
        y = batch_norm_train(y, gamma_, beta_, kBnEps, &bm, &bv);
        // running update uses the unbiased variance
        const int64_t cnt = static_cast<int64_t>(y.dim(0)) * y.dim(2) * y.dim(3);
        const float unbias = cnt > 1 ? static_cast<float>(cnt) / static_cast<float>(cnt - 1) : 1.0f;
        auto rm = run_mean_.data_mut();
        auto rv = run_var_.data_mut();
        for (size_t c = 0; c < bm.size(); ++c) {
            rm[c] = (1.0f - kBnMomentum) * rm[c] + kBnMomentum * bm[c];
            rv[c] = (1.0f - kBnMomentum) * rv[c] + kBnMomentum * bv[c] * unbias;
        }
    } else {
        y = batch_norm_eval(y, gamma_, beta_, run_mean_, run_var_, kBnEps);
    }
    return silu(y);
}

void ConvBlock::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".conv.weight", w_, true, true});
    out.push_back({prefix + ".bn.gamma", gamma_, true, false});
    out.push_back({prefix + ".bn.beta", beta_, true, false});
    out.push_back({prefix + ".bn.running_mean", run_mean_, false, false});
    out.push_back({prefix + ".bn.running_var", run_var_, false, false});
}

int64_t ConvBlock::param_count(int cin, int cout, int k) {
    return static_cast<int64_t>(cout) * cin * k * k + 2 * cout;
}

// ---------------------------------------------------------------------------
// Bottleneck
// ---------------------------------------------------------------------------

Bottleneck::Bottleneck(int c, bool shortcut, Rng& rng) : shortcut_(shortcut) {
    cv1_ = ConvBlock(c, c, 1, 1, rng);
    cv2_ = ConvBlock(c, c, 3, 1, rng);
}

Tensor Bottleneck::forward(const Tensor& x, bool training) {
    Tensor y = cv2_.forward(cv1_.forward(x, training), training);
    return shortcut_ ? add(x, y) : y;
}

void Bottleneck::collect(const std::string& prefix, ParamList& out) {
    cv1_.collect(prefix + ".cv1", out);
    cv2_.collect(prefix + ".cv2", out);
}

int64_t Bottleneck::param_count(int c) {
    return ConvBlock::param_count(c, c, 1) + ConvBlock::param_count(c, c, 3);
}

// ---------------------------------------------------------------------------
// MhsaBlock
// ---------------------------------------------------------------------------

MhsaBlock::MhsaBlock(int channels, int heads, bool residual, Rng& rng)
    : heads_(heads), residual_(residual) {
    if (heads < 1 || channels % heads != 0)
        throw ConfigError("mhsa_heads: embedding dimension " + std::to_string(channels) +
                          " not divisible by head count " + std::to_string(heads));
    auto make_w = [&] {
        Tensor t = Tensor::zeros({channels, channels}, true);
        kaiming_uniform(t, channels, rng);
        return t;
    };
    wq_ = make_w();
    bq_ = Tensor::zeros({channels}, true);
    wk_ = make_w();
    bk_ = Tensor::zeros({channels}, true);
    wv_ = make_w();
    bv_ = Tensor::zeros({channels}, true);
    wo_ = make_w();
    bo_ = Tensor::zeros({channels}, true);
}

Tensor MhsaBlock::forward(const Tensor& x, std::vector<Tensor>* attn_out) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int T = H * W;
    const int dh = C / heads_;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    auto project = [T, C](const Tensor& tokens, const Tensor& w, const Tensor& b) {
        Tensor y = matmul(tokens, w);
        Tensor brow = broadcast_to(reshape(b, {1, C}), {T, C});
        return add(y, brow);
    };

    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        Tensor tokens = transpose2d(reshape(slice(x, 0, b, 1), {C, T})); // (T, C)
        Tensor q = project(tokens, wq_, bq_);
        Tensor k = project(tokens, wk_, bk_);
        Tensor v = project(tokens, wv_, bv_);
        std::vector<Tensor> heads;
        heads.reserve(static_cast<size_t>(heads_));
        for (int h = 0; h < heads_; ++h) {
            Tensor qh = slice(q, 1, h * dh, dh);
            Tensor kh = slice(k, 1, h * dh, dh);
            Tensor vh = slice(v, 1, h * dh, dh);
            Tensor attn = softmax(mul_scalar(matmul(qh, transpose2d(kh)), scale), 1);
            if (attn_out) attn_out->push_back(attn);
            heads.push_back(matmul(attn, vh));
        }
        Tensor merged = heads_ == 1 ? heads.front() : concat(heads, 1);
        Tensor o = project(merged, wo_, bo_);
        if (residual_) o = add(o, tokens);
        outs.push_back(reshape(transpose2d(o), {1, C, H, W}));
    }
    return B == 1 ? outs.front() : concat(outs, 0);
}

void MhsaBlock::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".wq", wq_, true, true});
    out.push_back({prefix + ".bq", bq_, true, false});
    out.push_back({prefix + ".wk", wk_, true, true});
    out.push_back({prefix + ".bk", bk_, true, false});
    out.push_back({prefix + ".wv", wv_, true, true});
    out.push_back({prefix + ".bv", bv_, true, false});
    out.push_back({prefix + ".wo", wo_, true, true});
    out.push_back({prefix + ".bo", bo_, true, false});
}

int64_t MhsaBlock::param_count(int channels) {
    return 4ll * channels * channels + 4ll * channels;
}

// ---------------------------------------------------------------------------
// CspStage
// ---------------------------------------------------------------------------

CspStage::CspStage(int cin, int cout, int depth, bool shortcut, Rng& rng, int mhsa_heads) {
    if (cout % 2 != 0) throw ConfigError("csp stage width " + std::to_string(cout) + " must be even");
    const int h = cout / 2;
    cv1_ = ConvBlock(cin, h, 1, 1, rng);
    cv2_ = ConvBlock(cin, h, 1, 1, rng);
    cv3_ = ConvBlock(2 * h, cout, 1, 1, rng);
    if (mhsa_heads > 0) {
        attn_ = std::make_unique<MhsaBlock>(h, mhsa_heads, true, rng);
    } else {
        units_.reserve(static_cast<size_t>(depth));
        for (int i = 0; i < depth; ++i) units_.emplace_back(h, shortcut, rng);
    }
}

Tensor CspStage::forward(const Tensor& x, bool training) {
    Tensor a = cv1_.forward(x, training);
    if (attn_) {
        a = attn_->forward(a);
    } else {
        for (Bottleneck& u : units_) a = u.forward(a, training);
    }
    Tensor b = cv2_.forward(x, training);
    return cv3_.forward(concat({a, b}, 1), training);
}

void CspStage::collect(const std::string& prefix, ParamList& out) {
    cv1_.collect(prefix + ".cv1", out);
    cv2_.collect(prefix + ".cv2", out);
    if (attn_) attn_->collect(prefix + ".attn", out);
    for (size_t i = 0; i < units_.size(); ++i) units_[i].collect(prefix + ".m" + std::to_string(i), out);
    cv3_.collect(prefix + ".cv3", out);
}

int64_t CspStage::param_count(int cin, int cout, int depth, int mhsa_heads) {
    const int h = cout / 2;
    int64_t n = ConvBlock::param_count(cin, h, 1) * 2 + ConvBlock::param_count(2 * h, cout, 1);
    if (mhsa_heads > 0)
        n += MhsaBlock::param_count(h);
    else
        n += static_cast<int64_t>(depth) * Bottleneck::param_count(h);
    return n;
}

// ---------------------------------------------------------------------------
// Sppf
// ---------------------------------------------------------------------------

Sppf::Sppf(int cin, int cout, Rng& rng) {
    if (cin % 2 != 0) throw ConfigError("sppf input width " + std::to_string(cin) + " must be even");
    cv1_ = ConvBlock(cin, cin / 2, 1, 1, rng);
    cv2_ = ConvBlock(cin * 2, cout, 1, 1, rng);
}

Tensor Sppf::pool_concat(const Tensor& x) {
    Tensor p1 = maxpool2d(x, 5, 1, 2);
    Tensor p2 = maxpool2d(p1, 5, 1, 2);
    Tensor p3 = maxpool2d(p2, 5, 1, 2);
    return concat({x, p1, p2, p3}, 1);
}

Tensor Sppf::forward(const Tensor& x, bool training) {
    return cv2_.forward(pool_concat(cv1_.forward(x, training)), training);
}

void Sppf::collect(const std::string& prefix, ParamList& out) {
    cv1_.collect(prefix + ".cv1", out);
    cv2_.collect(prefix + ".cv2", out);
}

int64_t Sppf::param_count(int cin, int cout) {
    return ConvBlock::param_count(cin, cin / 2, 1) + ConvBlock::param_count(cin * 2, cout, 1);
}

} // namespace fsa
