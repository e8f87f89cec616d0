#include "fsa/kernels.hpp"

#include <algorithm>

namespace fsa::kern {

namespace {

// smallest ox with ox*stride - pad + kx >= 0
inline int first_valid(int kx, int stride, int pad) {
    const int num = pad - kx;
    if (num <= 0) return 0;
    return (num + stride - 1) / stride;
}

// largest ox with ox*stride - pad + kx <= limit-1, clamped to wo-1
inline int last_valid(int kx, int stride, int pad, int limit, int wo) {
    const int num = limit - 1 + pad - kx;
    if (num < 0) return -1;
    return std::min(wo - 1, num / stride);
}

} // namespace

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    int B, int Cin, int H, int W, int Cout, int kh, int kw,
                    int stride, int pad, int Ho, int Wo) {
    // 1x1 convs flatten H*W into one contiguous run; small maps stay
    // vector-friendly that way
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
        const int64_t plane = static_cast<int64_t>(H) * W;
        const int64_t units = static_cast<int64_t>(B) * Cout;
#pragma omp parallel for schedule(static) if (units * plane * Cin > 16384)
        for (int64_t u = 0; u < units; ++u) {
            const int co = static_cast<int>(u % Cout);
            const int b = static_cast<int>(u / Cout);
            float* yp = y + u * plane;
            const float bv = bias ? bias[co] : 0.0f;
            for (int64_t p = 0; p < plane; ++p) yp[p] = bv;
            const float* xb = x + static_cast<int64_t>(b) * Cin * plane;
            const float* wrow = w + static_cast<int64_t>(co) * Cin;
            for (int ci = 0; ci < Cin; ++ci) {
                const float wv = wrow[ci];
                const float* xp = xb + static_cast<int64_t>(ci) * plane;
                for (int64_t p = 0; p < plane; ++p) yp[p] += wv * xp[p];
            }
        }
        return;
    }

    const int64_t rows = static_cast<int64_t>(B) * Cout * Ho;
#pragma omp parallel for schedule(static) if (rows * Wo > 2048)
    for (int64_t row = 0; row < rows; ++row) {
        const int oy = static_cast<int>(row % Ho);
        const int co = static_cast<int>((row / Ho) % Cout);
        const int b = static_cast<int>(row / (static_cast<int64_t>(Ho) * Cout));
        float* yrow = y + ((static_cast<int64_t>(b) * Cout + co) * Ho + oy) * Wo;
        const float bv = bias ? bias[co] : 0.0f;
        for (int ox = 0; ox < Wo; ++ox) yrow[ox] = bv;
        for (int ci = 0; ci < Cin; ++ci) {
            const float* xch = x + (static_cast<int64_t>(b) * Cin + ci) * H * W;
            const float* wch = w + (static_cast<int64_t>(co) * Cin + ci) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                const float* xrow = xch + static_cast<int64_t>(iy) * W;
                if (kw == 3 && stride == 1) {
                    // interior columns take all three taps in one pass
                    const int lo0 = first_valid(0, 1, pad);
                    const int hi2 = last_valid(2, 1, pad, W, Wo);
                    const float w0 = wch[ky * 3], w1 = wch[ky * 3 + 1], w2 = wch[ky * 3 + 2];
                    for (int kx = 0; kx < 3; ++kx) {
                        const int lo = first_valid(kx, 1, pad);
                        const int hi = last_valid(kx, 1, pad, W, Wo);
                        for (int ox = lo; ox < lo0; ++ox) yrow[ox] += wch[ky * 3 + kx] * xrow[ox + kx - pad];
                        for (int ox = std::max(lo, hi2 + 1); ox <= hi; ++ox)
                            yrow[ox] += wch[ky * 3 + kx] * xrow[ox + kx - pad];
                    }
                    const float* xs = xrow - pad;
                    for (int ox = lo0; ox <= hi2; ++ox)
                        yrow[ox] += w0 * xs[ox] + w1 * xs[ox + 1] + w2 * xs[ox + 2];
                    continue;
                }
                for (int kx = 0; kx < kw; ++kx) {
                    const float wv = wch[ky * kw + kx];
                    const int lo = first_valid(kx, stride, pad);
                    const int hi = last_valid(kx, stride, pad, W, Wo);
                    const int base = kx - pad;
                    if (stride == 1) {
                        const float* xs = xrow + base;
                        for (int ox = lo; ox <= hi; ++ox) yrow[ox] += wv * xs[ox];
                    } else {
                        for (int ox = lo; ox <= hi; ++ox) yrow[ox] += wv * xrow[ox * stride + base];
                    }
                }
            }
        }
    }
}

void conv2d_backward_input(const float* gy, const float* w, float* gx,
                           int B, int Cin, int H, int W, int Cout, int kh, int kw,
                           int stride, int pad, int Ho, int Wo) {
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
        const int64_t plane = static_cast<int64_t>(H) * W;
        const int64_t units = static_cast<int64_t>(B) * Cin;
#pragma omp parallel for schedule(static) if (units * plane * Cout > 16384)
        for (int64_t u = 0; u < units; ++u) {
            const int ci = static_cast<int>(u % Cin);
            const int b = static_cast<int>(u / Cin);
            float* gxp = gx + u * plane;
            const float* gyb = gy + static_cast<int64_t>(b) * Cout * plane;
            for (int co = 0; co < Cout; ++co) {
                const float wv = w[static_cast<int64_t>(co) * Cin + ci];
                const float* gyp = gyb + static_cast<int64_t>(co) * plane;
                for (int64_t p = 0; p < plane; ++p) gxp[p] += wv * gyp[p];
            }
        }
        return;
    }

    const int64_t rows = static_cast<int64_t>(B) * Cin * H;
#pragma omp parallel for schedule(static) if (rows * W > 2048)
    for (int64_t row = 0; row < rows; ++row) {
        const int iy = static_cast<int>(row % H);
        const int ci = static_cast<int>((row / H) % Cin);
        const int b = static_cast<int>(row / (static_cast<int64_t>(H) * Cin));
        float* gxrow = gx + ((static_cast<int64_t>(b) * Cin + ci) * H + iy) * W;
        for (int co = 0; co < Cout; ++co) {
            const float* gych = gy + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
            const float* wch = w + (static_cast<int64_t>(co) * Cin + ci) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
                const int num = iy + pad - ky;
                if (num < 0 || num % stride != 0) continue;
                const int oy = num / stride;
                if (oy >= Ho) continue;
                const float* gyrow = gych + static_cast<int64_t>(oy) * Wo;
                for (int kx = 0; kx < kw; ++kx) {
                    const float wv = wch[ky * kw + kx];
                    const int lo = first_valid(kx, stride, pad);
                    const int hi = last_valid(kx, stride, pad, W, Wo);
                    const int base = kx - pad;
                    if (stride == 1) {
                        float* gs = gxrow + base;
                        for (int ox = lo; ox <= hi; ++ox) gs[ox] += wv * gyrow[ox];
                    } else {
                        for (int ox = lo; ox <= hi; ++ox) gxrow[ox * stride + base] += wv * gyrow[ox];
                    }
                }
            }
        }
    }
}

void conv2d_backward_weight(const float* gy, const float* x, float* gw,
                            int B, int Cin, int H, int W, int Cout, int kh, int kw,
                            int stride, int pad, int Ho, int Wo) {
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t oplane = static_cast<int64_t>(Ho) * Wo;
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
        const int64_t pairs = static_cast<int64_t>(Cout) * Cin;
#pragma omp parallel for schedule(static) if (pairs > 8)
        for (int64_t pr = 0; pr < pairs; ++pr) {
            const int ci = static_cast<int>(pr % Cin);
            const int co = static_cast<int>(pr / Cin);
            float acc = 0.0f;
            for (int b = 0; b < B; ++b) {
                const float* gyp = gy + (static_cast<int64_t>(b) * Cout + co) * plane;
                const float* xp = x + (static_cast<int64_t>(b) * Cin + ci) * plane;
                for (int64_t p = 0; p < plane; ++p) acc += gyp[p] * xp[p];
            }
            gw[pr] += acc;
        }
        return;
    }

    if (kw == 3 && stride == 1) {
        // one sweep fills all three taps of a (co,ci,ky) row
        const int64_t triples = static_cast<int64_t>(Cout) * Cin * kh;
#pragma omp parallel for schedule(static) if (triples > 8)
        for (int64_t tr = 0; tr < triples; ++tr) {
            const int ky = static_cast<int>(tr % kh);
            const int ci = static_cast<int>((tr / kh) % Cin);
            const int co = static_cast<int>(tr / (static_cast<int64_t>(kh) * Cin));
            float acc[3] = {0.0f, 0.0f, 0.0f};
            const int lo[3] = {first_valid(0, 1, pad), first_valid(1, 1, pad), first_valid(2, 1, pad)};
            const int hi[3] = {last_valid(0, 1, pad, W, Wo), last_valid(1, 1, pad, W, Wo),
                               last_valid(2, 1, pad, W, Wo)};
            const int ilo = std::max(lo[0], std::max(lo[1], lo[2]));
            const int ihi = std::min(hi[0], std::min(hi[1], hi[2]));
            for (int b = 0; b < B; ++b) {
                const float* gych = gy + (static_cast<int64_t>(b) * Cout + co) * oplane;
                const float* xch = x + (static_cast<int64_t>(b) * Cin + ci) * plane;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const float* gyrow = gych + static_cast<int64_t>(oy) * Wo;
                    const float* xrow = xch + static_cast<int64_t>(iy) * W - pad;
                    for (int kx = 0; kx < 3; ++kx) {
                        for (int ox = lo[kx]; ox < ilo; ++ox)
                            acc[kx] += gyrow[ox] * xrow[ox + kx];
                        for (int ox = std::max(lo[kx], ihi + 1); ox <= hi[kx]; ++ox)
                            acc[kx] += gyrow[ox] * xrow[ox + kx];
                    }
                    float a0 = 0.0f, a1 = 0.0f, a2 = 0.0f;
                    for (int ox = ilo; ox <= ihi; ++ox) {
                        const float g = gyrow[ox];
                        a0 += g * xrow[ox];
                        a1 += g * xrow[ox + 1];
                        a2 += g * xrow[ox + 2];
                    }
                    acc[0] += a0;
                    acc[1] += a1;
                    acc[2] += a2;
                }
            }
            float* gwr = gw + (static_cast<int64_t>(co) * Cin + ci) * kh * 3 + static_cast<int64_t>(ky) * 3;
            gwr[0] += acc[0];
            gwr[1] += acc[1];
            gwr[2] += acc[2];
        }
        return;
    }

    const int64_t nw = static_cast<int64_t>(Cout) * Cin * kh * kw;
#pragma omp parallel for schedule(static) if (nw > 8)
    for (int64_t wi = 0; wi < nw; ++wi) {
        const int kx = static_cast<int>(wi % kw);
        const int ky = static_cast<int>((wi / kw) % kh);
        const int ci = static_cast<int>((wi / (kw * kh)) % Cin);
        const int co = static_cast<int>(wi / (static_cast<int64_t>(kw) * kh * Cin));
        float acc = 0.0f;
        const int lo = first_valid(kx, stride, pad);
        const int hi = last_valid(kx, stride, pad, W, Wo);
        const int base = kx - pad;
        for (int b = 0; b < B; ++b) {
            const float* gych = gy + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
            const float* xch = x + (static_cast<int64_t>(b) * Cin + ci) * H * W;
            for (int oy = 0; oy < Ho; ++oy) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                const float* gyrow = gych + static_cast<int64_t>(oy) * Wo;
                const float* xrow = xch + static_cast<int64_t>(iy) * W;
                if (stride == 1) {
                    const float* xs = xrow + base;
                    for (int ox = lo; ox <= hi; ++ox) acc += gyrow[ox] * xs[ox];
                } else {
                    for (int ox = lo; ox <= hi; ++ox) acc += gyrow[ox] * xrow[ox * stride + base];
                }
            }
        }
        gw[wi] += acc;
    }
}

void conv2d_backward_bias(const float* gy, float* gb, int B, int Cout, int Ho, int Wo) {
#pragma omp parallel for schedule(static) if (Cout > 4)
    for (int co = 0; co < Cout; ++co) {
        float acc = 0.0f;
        for (int b = 0; b < B; ++b) {
            const float* p = gy + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
            for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) acc += p[i];
        }
        gb[co] += acc;
    }
}

void matmul(const float* a, const float* b, float* y, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i) {
        float* yrow = y + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) yrow[j] = 0.0f;
        const float* arow = a + static_cast<int64_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b + static_cast<int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    }
}

void matmul_abt(const float* a, const float* b, float* y, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > 16384)
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * k;
        float* yrow = y + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<int64_t>(j) * k;
            float acc = 0.0f;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            yrow[j] = acc;
        }
    }
}

void matmul_atb(const float* a, const float* b, float* y, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > 16384)
    for (int kk = 0; kk < k; ++kk) {
        float* yrow = y + static_cast<int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) yrow[j] = 0.0f;
        for (int i = 0; i < m; ++i) {
            const float av = a[static_cast<int64_t>(i) * k + kk];
            const float* brow = b + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    }
}

void maxpool2d_forward(const float* x, float* y, int32_t* argmax,
                       int B, int C, int H, int W, int k, int stride, int pad,
                       int Ho, int Wo) {
    const int64_t outs = static_cast<int64_t>(B) * C * Ho * Wo;
#pragma omp parallel for schedule(static) if (outs > 2048)
    for (int64_t o = 0; o < outs; ++o) {
        const int ox = static_cast<int>(o % Wo);
        const int oy = static_cast<int>((o / Wo) % Ho);
        const int64_t ch = o / (static_cast<int64_t>(Wo) * Ho); // fused (b,c)
        const float* xch = x + ch * H * W;
        float best = 0.0f;
        int32_t bestIdx = -1;
        for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                const int32_t idx = iy * W + ix;
                const float v = xch[idx];
                if (bestIdx < 0 || v > best) {
                    best = v;
                    bestIdx = idx;
                }
            }
        }
        y[o] = best;
        if (argmax) argmax[o] = bestIdx;
    }
}

void upsample2x_forward(const float* x, float* y, int B, int C, int H, int W) {
    const int64_t rows = static_cast<int64_t>(B) * C * H;
#pragma omp parallel for schedule(static) if (rows * W > 2048)
    for (int64_t row = 0; row < rows; ++row) {
        const float* xrow = x + row * W;
        float* y0 = y + row * 2 * (2 * W);
        float* y1 = y0 + 2 * W;
        for (int i = 0; i < W; ++i) {
            const float v = xrow[i];
            y0[2 * i] = v;
            y0[2 * i + 1] = v;
            y1[2 * i] = v;
            y1[2 * i + 1] = v;
        }
    }
}

void upsample2x_backward(const float* gy, float* gx, int B, int C, int H, int W) {
    const int64_t rows = static_cast<int64_t>(B) * C * H;
#pragma omp parallel for schedule(static) if (rows * W > 2048)
    for (int64_t row = 0; row < rows; ++row) {
        float* gxrow = gx + row * W;
        const float* g0 = gy + row * 2 * (2 * W);
        const float* g1 = g0 + 2 * W;
        for (int i = 0; i < W; ++i) {
            gxrow[i] += g0[2 * i] + g0[2 * i + 1] + g1[2 * i] + g1[2 * i + 1];
        }
    }
}

} // namespace fsa::kern
