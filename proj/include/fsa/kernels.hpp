#pragma once

#include <cstdint>

// Hot loops behind the tensor ops. Every kernel parallelizes over disjoint
// output elements and keeps each element's accumulation order fixed, so
// results are bitwise identical for any thread count. The serial twins used
// by tests and the kernel benchmark live in fsa::ref (reference.hpp).

namespace fsa::kern {

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    int B, int Cin, int H, int W, int Cout, int kh, int kw,
                    int stride, int pad, int Ho, int Wo);

void conv2d_backward_input(const float* gy, const float* w, float* gx,
                           int B, int Cin, int H, int W, int Cout, int kh, int kw,
                           int stride, int pad, int Ho, int Wo);

void conv2d_backward_weight(const float* gy, const float* x, float* gw,
                            int B, int Cin, int H, int W, int Cout, int kh, int kw,
                            int stride, int pad, int Ho, int Wo);

void conv2d_backward_bias(const float* gy, float* gb, int B, int Cout, int Ho, int Wo);

// y(m,n) = a(m,k) * b(k,n)
void matmul(const float* a, const float* b, float* y, int m, int k, int n);
// y(m,n) = a(m,k) * b(n,k)^T
void matmul_abt(const float* a, const float* b, float* y, int m, int k, int n);
// y(k,n) = a(m,k)^T * b(m,n)
void matmul_atb(const float* a, const float* b, float* y, int m, int k, int n);

// Windowed max pool; argmax stores the flat input index per output element,
// lowest index on ties.
void maxpool2d_forward(const float* x, float* y, int32_t* argmax,
                       int B, int C, int H, int W, int k, int stride, int pad,
                       int Ho, int Wo);

void upsample2x_forward(const float* x, float* y, int B, int C, int H, int W);
void upsample2x_backward(const float* gy, float* gx, int B, int C, int H, int W);

} // namespace fsa::kern
