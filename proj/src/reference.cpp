#include "fsa/reference.hpp"

#include <algorithm>
#include <cmath>

namespace fsa::ref {

void conv2d(const float* x, const float* w, const float* bias, float* y,
            int B, int Cin, int H, int W, int Cout, int kh, int kw,
            int stride, int pad, int Ho, int Wo) {
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co)
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    float acc = bias ? bias[co] : 0.0f;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += w[((static_cast<int64_t>(co) * Cin + ci) * kh + ky) * kw + kx] *
                                       x[((static_cast<int64_t>(b) * Cin + ci) * H + iy) * W + ix];
                            }
                    y[((static_cast<int64_t>(b) * Cout + co) * Ho + oy) * Wo + ox] = acc;
                }
}

void matmul(const float* a, const float* b, float* y, int m, int k, int n) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int kk = 0; kk < k; ++kk)
                acc += a[static_cast<int64_t>(i) * k + kk] * b[static_cast<int64_t>(kk) * n + j];
            y[static_cast<int64_t>(i) * n + j] = acc;
        }
}

void maxpool2d(const float* x, float* y, int B, int C, int H, int W,
               int k, int stride, int pad, int Ho, int Wo) {
    for (int64_t ch = 0; ch < static_cast<int64_t>(B) * C; ++ch) {
        const float* xch = x + ch * H * W;
        float* ych = y + ch * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                float best = 0.0f;
                bool seen = false;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const int iy = oy * stride - pad + ky;
                        const int ix = ox * stride - pad + kx;
                        if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                        const float v = xch[static_cast<int64_t>(iy) * W + ix];
                        if (!seen || v > best) {
                            best = v;
                            seen = true;
                        }
                    }
                ych[static_cast<int64_t>(oy) * Wo + ox] = best;
            }
    }
}

namespace {

void pool_extents(int B, int C, int H, int W, int axis, int& red, int& sy, int& oB, int& oC, int& oH, int& oW) {
    oB = B;
    oC = C;
    oH = H;
    oW = W;
    if (axis == 1) {
        red = C;
        sy = H * W;
        oC = 1;
    } else if (axis == 2) {
        red = H;
        sy = W;
        oH = 1;
    } else {
        red = W;
        sy = 1;
        oW = 1;
    }
}

} // namespace

void pool_axis_mean(const float* x, float* y, int B, int C, int H, int W, int axis) {
    int red, stridein, oB, oC, oH, oW;
    pool_extents(B, C, H, W, axis, red, stridein, oB, oC, oH, oW);
    int64_t o = 0;
    for (int b = 0; b < oB; ++b)
        for (int c = 0; c < oC; ++c)
            for (int h = 0; h < oH; ++h)
                for (int w = 0; w < oW; ++w, ++o) {
                    const int64_t base = ((static_cast<int64_t>(b) * C + c) * H + h) * W + w;
                    float acc = 0.0f;
                    for (int r = 0; r < red; ++r) acc += x[base + static_cast<int64_t>(r) * stridein];
                    y[o] = acc / static_cast<float>(red);
                }
}

void pool_axis_max(const float* x, float* y, int B, int C, int H, int W, int axis) {
    int red, stridein, oB, oC, oH, oW;
    pool_extents(B, C, H, W, axis, red, stridein, oB, oC, oH, oW);
    int64_t o = 0;
    for (int b = 0; b < oB; ++b)
        for (int c = 0; c < oC; ++c)
            for (int h = 0; h < oH; ++h)
                for (int w = 0; w < oW; ++w, ++o) {
                    const int64_t base = ((static_cast<int64_t>(b) * C + c) * H + h) * W + w;
                    float best = x[base];
                    for (int r = 1; r < red; ++r)
                        best = std::max(best, x[base + static_cast<int64_t>(r) * stridein]);
                    y[o] = best;
                }
}

void silu(const float* x, float* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        const float v = x[i];
        const float s = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
        y[i] = v * s;
    }
}

} // namespace fsa::ref
