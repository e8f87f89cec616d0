#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fsa/errors.hpp"

namespace fsa {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

// Activation layout is (batch, channel, height, width), row-major.
enum class Axis { C = 1, H = 2, W = 3 };
enum class PoolMode { Mean, Max };

class Tensor;

// One recorded op in the lineage DAG. `backward` accumulates dL/d(input_i)
// into gin[i] (null when that input needs no gradient), given dL/d(self) in
// gy. Output gradient shapes always equal the corresponding input shapes.
struct BackwardRecord {
    const char* op = "leaf";
    std::vector<Tensor> inputs;
    std::function<void(const float* gy, const std::vector<float*>& gin)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad; // leaf gradient accumulator, allocated lazily
    bool requires_grad = false;
    std::unique_ptr<BackwardRecord> record;
};

// Dense float32 tensor, a shared handle. Values are immutable once created
// except for gradient accumulation and explicit parameter updates through
// data_mut() between graphs.
class Tensor {
public:
    Tensor() = default;
    // Validates data length against the shape and rejects non-finite values.
    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    // Internal fast path for op results; skips the input-validation pass.
    static Tensor from_op(Shape shape, std::vector<float> data);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int ndim() const;
    int dim(int i) const;
    int64_t numel() const;
    float item() const;

    std::span<const float> data() const;
    std::span<float> data_mut();

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const float> grad() const;
    std::span<float> grad_mut();
    void zero_grad();

    TensorImpl* impl() const { return impl_.get(); }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Whether ops record lineage on this thread. Inference paths disable it.
bool grad_mode_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Reverse-mode sweep from a scalar loss. Gradients of leaf tensors with
// requires_grad accumulate into their grad buffers; repeated calls without
// zeroing keep accumulating.
void backward(const Tensor& loss);

// ---- convolution / pooling / shape ----
// Cross-correlation, odd kernels only. bias may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
Tensor pool_axis(const Tensor& x, Axis axis, PoolMode mode);
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor maxpool2d(const Tensor& x, int k, int stride, int padding);
Tensor upsample_nearest2x(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor reshape(const Tensor& x, Shape target);
Tensor transpose2d(const Tensor& x);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float v);
Tensor mul_scalar(const Tensor& a, float v);
// True division so cases like /3 stay correctly rounded.
Tensor div_scalar(const Tensor& a, float v);
Tensor minimum(const Tensor& a, const Tensor& b); // ties take a
Tensor maximum(const Tensor& a, const Tensor& b); // ties take a
Tensor neg(const Tensor& a);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor atan(const Tensor& x);
Tensor square(const Tensor& x);

// ---- linear algebra / reductions ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, int axis);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
// (B,C,H,W) -> (1,C,1,1), mean over batch and space
Tensor channel_mean(const Tensor& x);

// Numerically stable elementwise binary cross-entropy on logits.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// gamma/beta/mean/var are per-channel (C). Training mode computes biased
// batch statistics (optionally reported through the out pointers) and
// differentiates through them; eval mode treats mean/var as constants.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                        std::vector<float>* batch_mean_out, std::vector<float>* batch_var_out);
Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const Tensor& running_mean, const Tensor& running_var, float eps);

// Pulls `block` consecutive channels at one spatial location per entry out of
// a (B,C,H,W) tensor into a (n, block) matrix. Backward scatter-adds.
struct CellIndex {
    int b;
    int c_start;
    int y;
    int x;
};
Tensor gather_cells(const Tensor& x, const std::vector<CellIndex>& cells, int block);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, float v) { return mul_scalar(a, v); }
inline Tensor operator*(float v, const Tensor& a) { return mul_scalar(a, v); }
inline Tensor operator+(const Tensor& a, float v) { return add_scalar(a, v); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

} // namespace fsa
