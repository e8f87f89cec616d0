// Compares the OpenMP kernels against their serial reference twins on
// detector-sized workloads: correctness first, then timing.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <omp.h>
#include <vector>

#include "fsa/kernels.hpp"
#include "fsa/reference.hpp"
#include "fsa/rng.hpp"

using clock_t_ = std::chrono::steady_clock;

namespace {

double time_best_of(int reps, const std::function<void()>& fn) {
    double best = 1e30;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = clock_t_::now();
        fn();
        best = std::min(best, std::chrono::duration<double>(clock_t_::now() - t0).count());
    }
    return best;
}

std::vector<float> randv(size_t n, fsa::Rng& rng) {
    std::vector<float> v(n);
    for (float& x : v) x = rng.uniform(-1, 1);
    return v;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - b[i]));
    return m;
}

void report(const char* name, double serial, double parallel, double diff) {
    std::printf("%-26s serial %8.2f ms   parallel %8.2f ms   speedup %5.2fx   max|diff| %.2e\n",
                name, 1e3 * serial, 1e3 * parallel, serial / parallel, diff);
}

} // namespace

int main() {
    std::printf("kernel benchmark, %d thread(s)\n", omp_get_max_threads());
    fsa::Rng rng(7);

    { // conv2d, a neck-sized case
        const int B = 4, Cin = 32, H = 40, W = 40, Cout = 32, k = 3, s = 1, p = 1;
        auto x = randv(static_cast<size_t>(B) * Cin * H * W, rng);
        auto w = randv(static_cast<size_t>(Cout) * Cin * k * k, rng);
        auto b = randv(static_cast<size_t>(Cout), rng);
        std::vector<float> ys(static_cast<size_t>(B) * Cout * H * W), yp(ys.size());
        const double ts = time_best_of(3, [&] {
            fsa::ref::conv2d(x.data(), w.data(), b.data(), ys.data(), B, Cin, H, W, Cout, k, k, s, p,
                             H, W);
        });
        const double tp = time_best_of(3, [&] {
            fsa::kern::conv2d_forward(x.data(), w.data(), b.data(), yp.data(), B, Cin, H, W, Cout, k,
                                      k, s, p, H, W);
        });
        report("conv2d 4x32x40x40 k3", ts, tp, max_abs_diff(ys, yp));
    }

    { // matmul, attention-projection sized
        const int m = 400, k = 256, n = 256;
        auto a = randv(static_cast<size_t>(m) * k, rng);
        auto b = randv(static_cast<size_t>(k) * n, rng);
        std::vector<float> ys(static_cast<size_t>(m) * n), yp(ys.size());
        const double ts = time_best_of(3, [&] { fsa::ref::matmul(a.data(), b.data(), ys.data(), m, k, n); });
        const double tp =
            time_best_of(3, [&] { fsa::kern::matmul(a.data(), b.data(), yp.data(), m, k, n); });
        report("matmul 400x256x256", ts, tp, max_abs_diff(ys, yp));
    }

    { // maxpool, sppf-sized
        const int B = 8, C = 128, H = 20, W = 20, k = 5, s = 1, p = 2;
        auto x = randv(static_cast<size_t>(B) * C * H * W, rng);
        std::vector<float> ys(x.size()), yp(x.size());
        const double ts = time_best_of(5, [&] {
            fsa::ref::maxpool2d(x.data(), ys.data(), B, C, H, W, k, s, p, H, W);
        });
        const double tp = time_best_of(5, [&] {
            fsa::kern::maxpool2d_forward(x.data(), yp.data(), nullptr, B, C, H, W, k, s, p, H, W);
        });
        report("maxpool 8x128x20x20 k5", ts, tp, max_abs_diff(ys, yp));
    }

    { // elementwise silu on a stem-sized map
        const size_t n = static_cast<size_t>(8) * 16 * 80 * 80;
        auto x = randv(n, rng);
        std::vector<float> ys(n), yp(n);
        const double ts = time_best_of(5, [&] { fsa::ref::silu(x.data(), ys.data(), static_cast<int64_t>(n)); });
        const double tp = time_best_of(5, [&] {
            const float* in = x.data();
            float* out = yp.data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < static_cast<int64_t>(n); ++i) {
                const float v = in[i];
                const float sg = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                           : std::exp(v) / (1.0f + std::exp(v));
                out[i] = v * sg;
            }
        });
        report("silu 8x16x80x80", ts, tp, max_abs_diff(ys, yp));
    }

    return 0;
}
