#pragma once

#include <cstdint>

// Deliberately naive single-threaded kernels. Tests use them as the
// independent oracle for the OpenMP kernels in fsa::kern, and the kernel
// benchmark reports the speedup of the parallel path against them. Keep these
// loops boring; do not "optimize" them.

namespace fsa::ref {

void conv2d(const float* x, const float* w, const float* bias, float* y,
            int B, int Cin, int H, int W, int Cout, int kh, int kw,
            int stride, int pad, int Ho, int Wo);

void matmul(const float* a, const float* b, float* y, int m, int k, int n);

void maxpool2d(const float* x, float* y, int B, int C, int H, int W,
               int k, int stride, int pad, int Ho, int Wo);

// axis: 1 = channel, 2 = height, 3 = width (layout B,C,H,W)
void pool_axis_mean(const float* x, float* y, int B, int C, int H, int W, int axis);
void pool_axis_max(const float* x, float* y, int B, int C, int H, int W, int axis);

void silu(const float* x, float* y, int64_t n);

} // namespace fsa::ref
