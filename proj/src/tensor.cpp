#include "fsa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "fsa/kernels.hpp"

namespace fsa {

int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ')';
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

void validate_shape(const Shape& s) {
    for (int e : s) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
    }
}

bool all_finite(std::span<const float> v) {
    float ok = 0.0f;
    for (float x : v) ok += x - x; // NaN/Inf poison the sum
    return ok == 0.0f;
}

void check_finite(std::span<const float> v, const char* op) {
    if (!all_finite(v)) throw NumericError(std::string(op) + ": produced non-finite values");
}

inline float stable_sigmoid(float x) {
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

void require_4d(const Tensor& x, const char* op) {
    if (!x.defined() || x.ndim() != 4)
        throw ShapeError(std::string(op) + ": expected a 4-D (B,C,H,W) tensor, got " +
                         (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
}

bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : ins)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

using BackwardFn = std::function<void(const float*, const std::vector<float*>&)>;

Tensor finish(Tensor out, const char* op, std::vector<Tensor> inputs, BackwardFn bw) {
    check_finite(out.data(), op);
    bool rg = false;
    if (g_grad_enabled) {
        for (const Tensor& t : inputs)
            if (t.defined() && t.requires_grad()) rg = true;
    }
    if (rg) {
        out.set_requires_grad(true);
        auto rec = std::make_unique<BackwardRecord>();
        rec->op = op;
        rec->inputs = std::move(inputs);
        rec->backward = std::move(bw);
        out.impl()->record = std::move(rec);
    }
    return out;
}

} // namespace

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) {
    validate_shape(shape);
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    if (!all_finite(data)) throw NumericError("tensor constructed with non-finite values");
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    validate_shape(shape);
    Tensor t = from_op(std::move(shape), std::vector<float>());
    t.impl_->data.assign(numel_of(t.impl_->shape), 0.0f);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    validate_shape(shape);
    if (!std::isfinite(value)) throw NumericError("tensor constructed with non-finite values");
    Tensor t = from_op(std::move(shape), std::vector<float>());
    t.impl_->data.assign(numel_of(t.impl_->shape), value);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

Tensor Tensor::from_op(Shape shape, std::vector<float> data) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

float Tensor::item() const {
    if (!defined() || numel() != 1) throw ContractError("item(): tensor is not a scalar");
    return impl_->data[0];
}

std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::data_mut() { return impl_->data; }

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
    return impl_->grad;
}

std::span<float> Tensor::grad_mut() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---------------------------------------------------------------------------
// reverse-mode engine
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a defined scalar tensor");
    TensorImpl* root = loss.impl();
    if (!root->requires_grad) return;

    // post-order DFS over the lineage DAG (children = record inputs)
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (node->record && idx < node->record->inputs.size()) {
            TensorImpl* child = node->record->inputs[idx].impl();
            ++idx;
            if (child && child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // transient gradient buffers for interior nodes; leaves accumulate into
    // their persistent grad
    std::unordered_map<TensorImpl*, std::vector<float>> pass;
    auto leaf_grad = [](TensorImpl* n) -> float* {
        if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0f);
        return n->grad.data();
    };

    if (!root->record) {
        leaf_grad(root)[0] += 1.0f;
        return;
    }
    pass[root] = {1.0f};

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->record) continue;
        auto found = pass.find(node);
        if (found == pass.end()) continue;
        std::vector<float> gy = std::move(found->second);
        pass.erase(found);

        const auto& inputs = node->record->inputs;
        std::vector<float*> gin(inputs.size(), nullptr);
        for (size_t i = 0; i < inputs.size(); ++i) {
            TensorImpl* in = inputs[i].impl();
            if (!in || !in->requires_grad) continue;
            if (!in->record) {
                gin[i] = leaf_grad(in);
            } else {
                auto& buf = pass[in];
                if (buf.empty()) buf.assign(in->data.size(), 0.0f);
                gin[i] = buf.data();
            }
        }
        node->record->backward(gy.data(), gin);
    }
}

// ---------------------------------------------------------------------------
// elementwise helpers
// ---------------------------------------------------------------------------

namespace {

template <class F>
Tensor unary_with_deriv(const Tensor& x, const char* op, F fn) {
    // fn(v, &dv) -> value; writes local derivative into *dv
    const int64_t n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const bool rg = want_grad({&x});
    std::vector<float> deriv;
    if (rg) deriv.resize(static_cast<size_t>(n));
    const float* xd = x.data().data();
    float* od = out.data();
    float* dd = rg ? deriv.data() : nullptr;
#pragma omp parallel for schedule(static) if (n > 8192)
    for (int64_t i = 0; i < n; ++i) {
        float dv = 0.0f;
        od[i] = fn(xd[i], &dv);
        if (dd) dd[i] = dv;
    }
    Tensor y = Tensor::from_op(x.shape(), std::move(out));
    return finish(std::move(y), op, {x},
                  [d = std::move(deriv), n](const float* gy, const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i] * d[static_cast<size_t>(i)];
                  });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.defined() && b.defined() && a.shape() == b.shape(),
            std::string(op) + ": shapes differ, " + (a.defined() ? shape_str(a.shape()) : "undefined") +
                " vs " + (b.defined() ? shape_str(b.shape()) : "undefined"));
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    const float* bd = b.data().data();
#pragma omp parallel for schedule(static) if (n > 8192)
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] + bd[i];
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "add", {a, b}, [n](const float* gy, const std::vector<float*>& gin) {
        if (gin[0])
            for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i];
        if (gin[1])
            for (int64_t i = 0; i < n; ++i) gin[1][i] += gy[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    const float* bd = b.data().data();
#pragma omp parallel for schedule(static) if (n > 8192)
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] - bd[i];
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "sub", {a, b}, [n](const float* gy, const std::vector<float*>& gin) {
        if (gin[0])
            for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i];
        if (gin[1])
            for (int64_t i = 0; i < n; ++i) gin[1][i] -= gy[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    const float* bd = b.data().data();
#pragma omp parallel for schedule(static) if (n > 8192)
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] * bd[i];
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "mul", {a, b}, [a, b, n](const float* gy, const std::vector<float*>& gin) {
        const float* ad = a.data().data();
        const float* bd = b.data().data();
        if (gin[0])
            for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i] * bd[i];
        if (gin[1])
            for (int64_t i = 0; i < n; ++i) gin[1][i] += gy[i] * ad[i];
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    const float* bd = b.data().data();
#pragma omp parallel for schedule(static) if (n > 8192)
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] / bd[i];
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "div", {a, b}, [a, b, n](const float* gy, const std::vector<float*>& gin) {
        const float* ad = a.data().data();
        const float* bd = b.data().data();
        if (gin[0])
            for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i] / bd[i];
        if (gin[1])
            for (int64_t i = 0; i < n; ++i) gin[1][i] -= gy[i] * ad[i] / (bd[i] * bd[i]);
    });
}

Tensor add_scalar(const Tensor& a, float v) {
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] + v;
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "add_scalar", {a}, [n](const float* gy, const std::vector<float*>& gin) {
        if (gin[0])
            for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i];
    });
}

Tensor mul_scalar(const Tensor& a, float v) {
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] * v;
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "mul_scalar", {a}, [n, v](const float* gy, const std::vector<float*>& gin) {
        if (gin[0])
            for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i] * v;
    });
}

Tensor div_scalar(const Tensor& a, float v) {
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] / v;
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "div_scalar", {a}, [n, v](const float* gy, const std::vector<float*>& gin) {
        if (gin[0])
            for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i] / v;
    });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

Tensor minimum(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "minimum");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    const float* bd = b.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] <= bd[i] ? ad[i] : bd[i];
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "minimum", {a, b}, [a, b, n](const float* gy, const std::vector<float*>& gin) {
        const float* ad = a.data().data();
        const float* bd = b.data().data();
        for (int64_t i = 0; i < n; ++i) {
            if (ad[i] <= bd[i]) {
                if (gin[0]) gin[0][i] += gy[i];
            } else if (gin[1]) {
                gin[1][i] += gy[i];
            }
        }
    });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "maximum");
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* ad = a.data().data();
    const float* bd = b.data().data();
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[i] >= bd[i] ? ad[i] : bd[i];
    Tensor y = Tensor::from_op(a.shape(), std::move(out));
    return finish(std::move(y), "maximum", {a, b}, [a, b, n](const float* gy, const std::vector<float*>& gin) {
        const float* ad = a.data().data();
        const float* bd = b.data().data();
        for (int64_t i = 0; i < n; ++i) {
            if (ad[i] >= bd[i]) {
                if (gin[0]) gin[0][i] += gy[i];
            } else if (gin[1]) {
                gin[1][i] += gy[i];
            }
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    return unary_with_deriv(x, "sigmoid", [](float v, float* dv) {
        const float s = stable_sigmoid(v);
        *dv = s * (1.0f - s);
        return s;
    });
}

Tensor silu(const Tensor& x) {
    return unary_with_deriv(x, "silu", [](float v, float* dv) {
        const float s = stable_sigmoid(v);
        *dv = s * (1.0f + v * (1.0f - s));
        return v * s;
    });
}

Tensor exp(const Tensor& x) {
    return unary_with_deriv(x, "exp", [](float v, float* dv) {
        const float e = std::exp(v);
        *dv = e;
        return e;
    });
}

Tensor sqrt(const Tensor& x) {
    return unary_with_deriv(x, "sqrt", [](float v, float* dv) {
        const float r = std::sqrt(v);
        *dv = 0.5f / r;
        return r;
    });
}

Tensor atan(const Tensor& x) {
    return unary_with_deriv(x, "atan", [](float v, float* dv) {
        *dv = 1.0f / (1.0f + v * v);
        return std::atan(v);
    });
}

Tensor square(const Tensor& x) { return mul(x, x); }

// ---------------------------------------------------------------------------
// convolution / pooling / shape ops
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    require_4d(x, "conv2d");
    require(w.defined() && w.ndim() == 4, "conv2d: weight must be 4-D (Cout,Cin,kh,kw)");
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    require(w.dim(1) == Cin, "conv2d: weight expects " + std::to_string(w.dim(1)) +
                                 " input channels, tensor has " + std::to_string(Cin));
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got " +
                                            std::to_string(kh) + "x" + std::to_string(kw));
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(padding >= 0, "conv2d: padding must be >= 0");
    if (bias.defined())
        require(bias.numel() == Cout, "conv2d: bias length " + std::to_string(bias.numel()) +
                                          " != output channels " + std::to_string(Cout));
    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");

    check_finite(x.data(), "conv2d(input)");

    std::vector<float> out(static_cast<size_t>(B) * Cout * Ho * Wo);
    kern::conv2d_forward(x.data().data(), w.data().data(),
                         bias.defined() ? bias.data().data() : nullptr, out.data(), B, Cin, H, W,
                         Cout, kh, kw, stride, padding, Ho, Wo);
    Tensor y = Tensor::from_op({B, Cout, Ho, Wo}, std::move(out));
    std::vector<Tensor> ins = bias.defined() ? std::vector<Tensor>{x, w, bias}
                                             : std::vector<Tensor>{x, w};
    return finish(std::move(y), "conv2d", std::move(ins),
                  [x, w, B, Cin, H, W, Cout, kh, kw, stride, padding, Ho,
                   Wo](const float* gy, const std::vector<float*>& gin) {
                      if (gin[0])
                          kern::conv2d_backward_input(gy, w.data().data(), gin[0], B, Cin, H, W, Cout,
                                                      kh, kw, stride, padding, Ho, Wo);
                      if (gin[1])
                          kern::conv2d_backward_weight(gy, x.data().data(), gin[1], B, Cin, H, W, Cout,
                                                       kh, kw, stride, padding, Ho, Wo);
                      if (gin.size() > 2 && gin[2])
                          kern::conv2d_backward_bias(gy, gin[2], B, Cout, Ho, Wo);
                  });
}

Tensor pool_axis(const Tensor& x, Axis axis, PoolMode mode) {
    require_4d(x, "pool_axis");
    const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int ax = static_cast<int>(axis);
    Shape oshape = x.shape();
    oshape[static_cast<size_t>(ax)] = 1;
    const int red = x.dim(ax);
    // stride between consecutive elements along the reduced axis
    const int64_t strides[4] = {static_cast<int64_t>(C) * H * W, static_cast<int64_t>(H) * W, W, 1};
    const int64_t rstride = strides[ax];
    const int64_t on = numel_of(oshape);
    const int oC = ax == 1 ? 1 : C, oH = ax == 2 ? 1 : H, oW = ax == 3 ? 1 : W;

    std::vector<float> out(static_cast<size_t>(on));
    const float* xd = x.data().data();
    const bool rg = want_grad({&x});

    auto src_base = [=](int64_t o) {
        const int w = static_cast<int>(o % oW);
        const int h = static_cast<int>((o / oW) % oH);
        const int c = static_cast<int>((o / (static_cast<int64_t>(oW) * oH)) % oC);
        const int b = static_cast<int>(o / (static_cast<int64_t>(oW) * oH * oC));
        return ((static_cast<int64_t>(b) * C + c) * H + h) * W + w;
    };

    if (mode == PoolMode::Mean) {
#pragma omp parallel for schedule(static) if (on * red > 8192)
        for (int64_t o = 0; o < on; ++o) {
            const int64_t base = src_base(o);
            float acc = 0.0f;
            for (int r = 0; r < red; ++r) acc += xd[base + r * rstride];
            out[static_cast<size_t>(o)] = acc / static_cast<float>(red);
        }
        Tensor y = Tensor::from_op(std::move(oshape), std::move(out));
        return finish(std::move(y), "pool_axis_mean", {x},
                      [src_base, on, red, rstride](const float* gy, const std::vector<float*>& gin) {
                          if (!gin[0]) return;
                          for (int64_t o = 0; o < on; ++o) {
                              const int64_t base = src_base(o);
                              const float g = gy[o] / static_cast<float>(red);
                              for (int r = 0; r < red; ++r) gin[0][base + r * rstride] += g;
                          }
                      });
    }

    std::vector<int32_t> argmax;
    if (rg) argmax.resize(static_cast<size_t>(on));
#pragma omp parallel for schedule(static) if (on * red > 8192)
    for (int64_t o = 0; o < on; ++o) {
        const int64_t base = src_base(o);
        float best = xd[base];
        int bestR = 0;
        for (int r = 1; r < red; ++r) {
            const float v = xd[base + r * rstride];
            if (v > best) {
                best = v;
                bestR = r;
            }
        }
        out[static_cast<size_t>(o)] = best;
        if (rg) argmax[static_cast<size_t>(o)] = bestR;
    }
    Tensor y = Tensor::from_op(std::move(oshape), std::move(out));
    return finish(std::move(y), "pool_axis_max", {x},
                  [src_base, on, rstride, am = std::move(argmax)](const float* gy,
                                                                  const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      for (int64_t o = 0; o < on; ++o)
                          gin[0][src_base(o) + am[static_cast<size_t>(o)] * rstride] += gy[o];
                  });
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
    require(x.defined(), "broadcast_to: undefined tensor");
    require(x.ndim() == static_cast<int>(target.size()),
            "broadcast_to: rank mismatch, " + shape_str(x.shape()) + " vs " + shape_str(target));
    validate_shape(target);
    const int nd = x.ndim();
    for (int i = 0; i < nd; ++i)
        require(x.dim(i) == target[static_cast<size_t>(i)] || x.dim(i) == 1,
                "broadcast_to: extent " + std::to_string(x.dim(i)) + " at axis " + std::to_string(i) +
                    " incompatible with target " + shape_str(target));

    // source strides with zeros on broadcast axes
    std::vector<int64_t> sstride(static_cast<size_t>(nd));
    int64_t acc = 1;
    for (int i = nd - 1; i >= 0; --i) {
        sstride[static_cast<size_t>(i)] = x.dim(i) == 1 ? 0 : acc;
        acc *= x.dim(i);
    }
    std::vector<int64_t> tstride(static_cast<size_t>(nd));
    acc = 1;
    for (int i = nd - 1; i >= 0; --i) {
        tstride[static_cast<size_t>(i)] = acc;
        acc *= target[static_cast<size_t>(i)];
    }
    const int64_t on = numel_of(target);
    std::vector<float> out(static_cast<size_t>(on));
    const float* xd = x.data().data();

    auto src_of = [nd, sstride, tstride, target](int64_t o) {
        int64_t s = 0;
        for (int i = 0; i < nd; ++i) {
            const int64_t coord = (o / tstride[static_cast<size_t>(i)]) % target[static_cast<size_t>(i)];
            s += coord * sstride[static_cast<size_t>(i)];
        }
        return s;
    };

#pragma omp parallel for schedule(static) if (on > 8192)
    for (int64_t o = 0; o < on; ++o) out[static_cast<size_t>(o)] = xd[src_of(o)];

    Tensor y = Tensor::from_op(target, std::move(out));
    return finish(std::move(y), "broadcast_to", {x},
                  [src_of, on](const float* gy, const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      for (int64_t o = 0; o < on; ++o) gin[0][src_of(o)] += gy[o];
                  });
}

Tensor maxpool2d(const Tensor& x, int k, int stride, int padding) {
    require_4d(x, "maxpool2d");
    require(k >= 1 && stride >= 1 && padding >= 0, "maxpool2d: bad window parameters");
    require(padding < k, "maxpool2d: padding must be smaller than the window");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = (H + 2 * padding - k) / stride + 1;
    const int Wo = (W + 2 * padding - k) / stride + 1;
    require(Ho >= 1 && Wo >= 1, "maxpool2d: window larger than padded input");
    const int64_t on = static_cast<int64_t>(B) * C * Ho * Wo;
    std::vector<float> out(static_cast<size_t>(on));
    const bool rg = want_grad({&x});
    std::vector<int32_t> argmax;
    if (rg) argmax.resize(static_cast<size_t>(on));
    kern::maxpool2d_forward(x.data().data(), out.data(), rg ? argmax.data() : nullptr, B, C, H, W, k,
                            stride, padding, Ho, Wo);
    Tensor y = Tensor::from_op({B, C, Ho, Wo}, std::move(out));
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t oplane = static_cast<int64_t>(Ho) * Wo;
    return finish(std::move(y), "maxpool2d", {x},
                  [am = std::move(argmax), on, plane, oplane](const float* gy,
                                                              const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      // overlapping windows may share an argmax; serial scatter keeps it deterministic
                      for (int64_t o = 0; o < on; ++o) {
                          const int64_t ch = o / oplane;
                          gin[0][ch * plane + am[static_cast<size_t>(o)]] += gy[o];
                      }
                  });
}

Tensor upsample_nearest2x(const Tensor& x) {
    require_4d(x, "upsample_nearest2x");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<float> out(static_cast<size_t>(B) * C * H * W * 4);
    kern::upsample2x_forward(x.data().data(), out.data(), B, C, H, W);
    Tensor y = Tensor::from_op({B, C, 2 * H, 2 * W}, std::move(out));
    return finish(std::move(y), "upsample_nearest2x", {x},
                  [B, C, H, W](const float* gy, const std::vector<float*>& gin) {
                      if (gin[0]) kern::upsample2x_backward(gy, gin[0], B, C, H, W);
                  });
}

namespace {

// splits a shape at `axis` into (outer, extent, inner) for block copies
void split_axis(const Shape& s, int axis, int64_t& outer, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

} // namespace

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    require(!xs.empty(), "concat: no inputs");
    const Tensor& first = xs.front();
    require(first.defined(), "concat: undefined tensor");
    const int nd = first.ndim();
    require(axis >= 0 && axis < nd, "concat: axis out of range");
    int total = 0;
    for (const Tensor& t : xs) {
        require(t.defined() && t.ndim() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            require(i == axis || t.dim(i) == first.dim(i),
                    "concat: extent mismatch at axis " + std::to_string(i) + ": " +
                        shape_str(t.shape()) + " vs " + shape_str(first.shape()));
        total += t.dim(axis);
    }
    Shape oshape = first.shape();
    oshape[static_cast<size_t>(axis)] = total;
    int64_t outer, inner;
    split_axis(oshape, axis, outer, inner);

    std::vector<float> out(static_cast<size_t>(numel_of(oshape)));
    std::vector<int> offsets(xs.size());
    int off = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        offsets[i] = off;
        const int ext = xs[i].dim(axis);
        const float* src = xs[i].data().data();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * total + off) * inner, src + o * ext * inner,
                        static_cast<size_t>(ext) * inner * sizeof(float));
        }
        off += ext;
    }
    Tensor y = Tensor::from_op(std::move(oshape), std::move(out));
    std::vector<int> extents(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) extents[i] = xs[i].dim(axis);
    BackwardFn bw = [outer, inner, total, offsets, extents](const float* gy,
                                                            const std::vector<float*>& gin) {
        for (size_t i = 0; i < gin.size(); ++i) {
            if (!gin[i]) continue;
            const int ext = extents[i];
            for (int64_t o = 0; o < outer; ++o) {
                const float* g = gy + (o * total + offsets[i]) * inner;
                float* dst = gin[i] + o * ext * inner;
                for (int64_t j = 0; j < ext * inner; ++j) dst[j] += g[j];
            }
        }
    };
    return finish(std::move(y), "concat", xs, std::move(bw));
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
    require(x.defined(), "slice: undefined tensor");
    const int nd = x.ndim();
    require(axis >= 0 && axis < nd, "slice: axis out of range");
    require(start >= 0 && length >= 1 && start + length <= x.dim(axis),
            "slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                ") outside extent " + std::to_string(x.dim(axis)));
    Shape oshape = x.shape();
    oshape[static_cast<size_t>(axis)] = length;
    int64_t outer, inner;
    split_axis(x.shape(), axis, outer, inner);
    const int ext = x.dim(axis);

    std::vector<float> out(static_cast<size_t>(numel_of(oshape)));
    const float* xd = x.data().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * length * inner, xd + (o * ext + start) * inner,
                    static_cast<size_t>(length) * inner * sizeof(float));
    Tensor y = Tensor::from_op(std::move(oshape), std::move(out));
    return finish(std::move(y), "slice", {x},
                  [outer, inner, ext, start, length](const float* gy, const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      for (int64_t o = 0; o < outer; ++o) {
                          const float* g = gy + o * length * inner;
                          float* dst = gin[0] + (o * ext + start) * inner;
                          for (int64_t j = 0; j < length * inner; ++j) dst[j] += g[j];
                      }
                  });
}

Tensor reshape(const Tensor& x, Shape target) {
    require(x.defined(), "reshape: undefined tensor");
    validate_shape(target);
    require(numel_of(target) == x.numel(), "reshape: element count mismatch, " +
                                               shape_str(x.shape()) + " -> " + shape_str(target));
    std::vector<float> out(x.data().begin(), x.data().end());
    Tensor y = Tensor::from_op(std::move(target), std::move(out));
    const int64_t n = x.numel();
    return finish(std::move(y), "reshape", {x}, [n](const float* gy, const std::vector<float*>& gin) {
        if (!gin[0]) return;
        for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i];
    });
}

Tensor transpose2d(const Tensor& x) {
    require(x.defined() && x.ndim() == 2, "transpose2d: expected a 2-D tensor");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    const float* xd = x.data().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = xd[static_cast<size_t>(i) * n + j];
    Tensor y = Tensor::from_op({n, m}, std::move(out));
    return finish(std::move(y), "transpose2d", {x},
                  [m, n](const float* gy, const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      for (int j = 0; j < n; ++j)
                          for (int i = 0; i < m; ++i)
                              gin[0][static_cast<size_t>(i) * n + j] += gy[static_cast<size_t>(j) * m + i];
                  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.defined() && a.ndim() == 2 && b.defined() && b.ndim() == 2,
            "matmul: expected 2-D tensors");
    require(a.dim(1) == b.dim(0), "matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    kern::matmul(a.data().data(), b.data().data(), out.data(), m, k, n);
    Tensor y = Tensor::from_op({m, n}, std::move(out));
    return finish(std::move(y), "matmul", {a, b},
                  [a, b, m, k, n](const float* gy, const std::vector<float*>& gin) {
                      if (gin[0]) {
                          std::vector<float> tmp(static_cast<size_t>(m) * k);
                          kern::matmul_abt(gy, b.data().data(), tmp.data(), m, n, k);
                          for (int64_t i = 0; i < static_cast<int64_t>(m) * k; ++i) gin[0][i] += tmp[static_cast<size_t>(i)];
                      }
                      if (gin[1]) {
                          std::vector<float> tmp(static_cast<size_t>(k) * n);
                          kern::matmul_atb(a.data().data(), gy, tmp.data(), m, k, n);
                          for (int64_t i = 0; i < static_cast<int64_t>(k) * n; ++i) gin[1][i] += tmp[static_cast<size_t>(i)];
                      }
                  });
}

Tensor softmax(const Tensor& x, int axis) {
    require(x.defined(), "softmax: undefined tensor");
    const int nd = x.ndim();
    require(axis >= 0 && axis < nd, "softmax: axis out of range");
    int64_t outer, inner;
    split_axis(x.shape(), axis, outer, inner);
    const int ext = x.dim(axis);
    const int64_t n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const float* xd = x.data().data();
    float* od = out.data();
    const int64_t rows = outer * inner;
#pragma omp parallel for schedule(static) if (rows * ext > 8192)
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t o = r / inner;
        const int64_t in = r % inner;
        const int64_t base = o * ext * inner + in;
        float mx = xd[base];
        for (int e = 1; e < ext; ++e) mx = std::max(mx, xd[base + e * inner]);
        float sum = 0.0f;
        for (int e = 0; e < ext; ++e) {
            const float v = std::exp(xd[base + e * inner] - mx);
            od[base + e * inner] = v;
            sum += v;
        }
        for (int e = 0; e < ext; ++e) od[base + e * inner] /= sum;
    }
    Tensor y = Tensor::from_op(x.shape(), std::move(out));
    std::vector<float> ycopy;
    if (want_grad({&x})) ycopy.assign(y.data().begin(), y.data().end());
    return finish(std::move(y), "softmax", {x},
                  [yv = std::move(ycopy), outer, inner, ext](const float* gy,
                                                             const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      for (int64_t r = 0; r < outer * inner; ++r) {
                          const int64_t o = r / inner;
                          const int64_t in = r % inner;
                          const int64_t base = o * ext * inner + in;
                          float dot = 0.0f;
                          for (int e = 0; e < ext; ++e)
                              dot += gy[base + e * inner] * yv[static_cast<size_t>(base + e * inner)];
                          for (int e = 0; e < ext; ++e) {
                              const int64_t i = base + e * inner;
                              gin[0][i] += yv[static_cast<size_t>(i)] * (gy[i] - dot);
                          }
                      }
                  });
}

Tensor sum_all(const Tensor& x) {
    require(x.defined(), "sum_all: undefined tensor");
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    Tensor y = Tensor::from_op({1}, {static_cast<float>(acc)});
    const int64_t n = x.numel();
    return finish(std::move(y), "sum_all", {x}, [n](const float* gy, const std::vector<float*>& gin) {
        if (!gin[0]) return;
        for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[0];
    });
}

Tensor mean_all(const Tensor& x) {
    require(x.defined(), "mean_all: undefined tensor");
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const int64_t n = x.numel();
    Tensor y = Tensor::from_op({1}, {static_cast<float>(acc / static_cast<double>(n))});
    return finish(std::move(y), "mean_all", {x}, [n](const float* gy, const std::vector<float*>& gin) {
        if (!gin[0]) return;
        const float g = gy[0] / static_cast<float>(n);
        for (int64_t i = 0; i < n; ++i) gin[0][i] += g;
    });
}

Tensor channel_mean(const Tensor& x) {
    require_4d(x, "channel_mean");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t cnt = static_cast<int64_t>(B) * plane;
    std::vector<float> out(static_cast<size_t>(C));
    const float* xd = x.data().data();
#pragma omp parallel for schedule(static) if (C > 4)
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
            const float* p = xd + (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) acc += p[i];
        }
        out[static_cast<size_t>(c)] = static_cast<float>(acc / static_cast<double>(cnt));
    }
    Tensor y = Tensor::from_op({1, C, 1, 1}, std::move(out));
    return finish(std::move(y), "channel_mean", {x},
                  [B, C, plane, cnt](const float* gy, const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      for (int b = 0; b < B; ++b)
                          for (int c = 0; c < C; ++c) {
                              float* p = gin[0] + (static_cast<int64_t>(b) * C + c) * plane;
                              const float g = gy[c] / static_cast<float>(cnt);
                              for (int64_t i = 0; i < plane; ++i) p[i] += g;
                          }
                  });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    require_same_shape(logits, targets, "bce_with_logits");
    const int64_t n = logits.numel();
    std::vector<float> out(static_cast<size_t>(n));
    const bool rg = want_grad({&logits, &targets});
    std::vector<float> dz;
    if (rg) dz.resize(static_cast<size_t>(n));
    const float* zd = logits.data().data();
    const float* td = targets.data().data();
#pragma omp parallel for schedule(static) if (n > 8192)
    for (int64_t i = 0; i < n; ++i) {
        const float z = zd[i];
        const float t = td[i];
        out[static_cast<size_t>(i)] = std::max(z, 0.0f) - z * t + std::log1p(std::exp(-std::fabs(z)));
        if (rg) dz[static_cast<size_t>(i)] = stable_sigmoid(z) - t;
    }
    Tensor y = Tensor::from_op(logits.shape(), std::move(out));
    return finish(std::move(y), "bce_with_logits", {logits, targets},
                  [d = std::move(dz), logits, n](const float* gy, const std::vector<float*>& gin) {
                      if (gin[0])
                          for (int64_t i = 0; i < n; ++i) gin[0][i] += gy[i] * d[static_cast<size_t>(i)];
                      if (gin[1]) {
                          const float* zd = logits.data().data();
                          for (int64_t i = 0; i < n; ++i) gin[1][i] -= gy[i] * zd[i];
                      }
                  });
}

namespace {

void require_channel_vector(const Tensor& t, int C, const char* op, const char* name) {
    require(t.defined() && t.numel() == C,
            std::string(op) + ": " + name + " must have " + std::to_string(C) + " elements");
}

} // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                        std::vector<float>* batch_mean_out, std::vector<float>* batch_var_out) {
    require_4d(x, "batch_norm_train");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require_channel_vector(gamma, C, "batch_norm_train", "gamma");
    require_channel_vector(beta, C, "batch_norm_train", "beta");
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t cnt = static_cast<int64_t>(B) * plane;

    std::vector<float> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C)),
        invstd(static_cast<size_t>(C));
    const float* xd = x.data().data();
#pragma omp parallel for schedule(static) if (C > 4)
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
            const float* p = xd + (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) acc += p[i];
        }
        const float m = static_cast<float>(acc / static_cast<double>(cnt));
        double vacc = 0.0;
        for (int b = 0; b < B; ++b) {
            const float* p = xd + (static_cast<int64_t>(b) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const double d = static_cast<double>(p[i]) - m;
                vacc += d * d;
            }
        }
        mean[static_cast<size_t>(c)] = m;
        var[static_cast<size_t>(c)] = static_cast<float>(vacc / static_cast<double>(cnt));
        invstd[static_cast<size_t>(c)] = 1.0f / std::sqrt(var[static_cast<size_t>(c)] + eps);
    }
    if (batch_mean_out) *batch_mean_out = mean;
    if (batch_var_out) *batch_var_out = var;

    const bool rg = want_grad({&x, &gamma, &beta});
    std::vector<float> xhat;
    if (rg) xhat.resize(static_cast<size_t>(x.numel()));
    std::vector<float> out(static_cast<size_t>(x.numel()));
    const float* gd = gamma.data().data();
    const float* bd = beta.data().data();
    const int64_t rows = static_cast<int64_t>(B) * C;
#pragma omp parallel for schedule(static) if (rows * plane > 8192)
    for (int64_t row = 0; row < rows; ++row) {
        const int c = static_cast<int>(row % C);
        const float m = mean[static_cast<size_t>(c)];
        const float is = invstd[static_cast<size_t>(c)];
        const float g = gd[c];
        const float bt = bd[c];
        const float* p = xd + row * plane;
        float* o = out.data() + row * plane;
        float* xh = rg ? xhat.data() + row * plane : nullptr;
        for (int64_t i = 0; i < plane; ++i) {
            const float h = (p[i] - m) * is;
            if (xh) xh[i] = h;
            o[i] = g * h + bt;
        }
    }
    Tensor y = Tensor::from_op(x.shape(), std::move(out));
    return finish(std::move(y), "batch_norm_train", {x, gamma, beta},
                  [xh = std::move(xhat), invstd, gamma, B, C, plane,
                   cnt](const float* gy, const std::vector<float*>& gin) {
                      const float* gd = gamma.data().data();
                      for (int c = 0; c < C; ++c) {
                          // per-channel sums in a fixed order
                          double sum_gy = 0.0, sum_gyxh = 0.0;
                          for (int b = 0; b < B; ++b) {
                              const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                              for (int64_t i = 0; i < plane; ++i) {
                                  sum_gy += gy[base + i];
                                  sum_gyxh += static_cast<double>(gy[base + i]) * xh[static_cast<size_t>(base + i)];
                              }
                          }
                          if (gin[1]) gin[1][c] += static_cast<float>(sum_gyxh);
                          if (gin[2]) gin[2][c] += static_cast<float>(sum_gy);
                          if (gin[0]) {
                              const float is = invstd[static_cast<size_t>(c)];
                              const float g = gd[c];
                              const float mg = static_cast<float>(sum_gy / static_cast<double>(cnt));
                              const float mgxh = static_cast<float>(sum_gyxh / static_cast<double>(cnt));
                              for (int b = 0; b < B; ++b) {
                                  const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                                  for (int64_t i = 0; i < plane; ++i)
                                      gin[0][base + i] +=
                                          g * is * (gy[base + i] - mg - xh[static_cast<size_t>(base + i)] * mgxh);
                              }
                          }
                      }
                  });
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       const Tensor& running_mean, const Tensor& running_var, float eps) {
    require_4d(x, "batch_norm_eval");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require_channel_vector(gamma, C, "batch_norm_eval", "gamma");
    require_channel_vector(beta, C, "batch_norm_eval", "beta");
    require_channel_vector(running_mean, C, "batch_norm_eval", "running_mean");
    require_channel_vector(running_var, C, "batch_norm_eval", "running_var");
    const int64_t plane = static_cast<int64_t>(H) * W;
    std::vector<float> invstd(static_cast<size_t>(C));
    const float* rv = running_var.data().data();
    for (int c = 0; c < C; ++c) invstd[static_cast<size_t>(c)] = 1.0f / std::sqrt(rv[c] + eps);

    std::vector<float> out(static_cast<size_t>(x.numel()));
    const float* xd = x.data().data();
    const float* rm = running_mean.data().data();
    const float* gd = gamma.data().data();
    const float* bd = beta.data().data();
    const int64_t rows = static_cast<int64_t>(B) * C;
#pragma omp parallel for schedule(static) if (rows * plane > 8192)
    for (int64_t row = 0; row < rows; ++row) {
        const int c = static_cast<int>(row % C);
        const float m = rm[c];
        const float is = invstd[static_cast<size_t>(c)];
        const float g = gd[c];
        const float bt = bd[c];
        const float* p = xd + row * plane;
        float* o = out.data() + row * plane;
        for (int64_t i = 0; i < plane; ++i) o[i] = g * (p[i] - m) * is + bt;
    }
    Tensor y = Tensor::from_op(x.shape(), std::move(out));
    return finish(std::move(y), "batch_norm_eval", {x, gamma, beta},
                  [x, running_mean, invstd, gamma, B, C, plane](const float* gy,
                                                                const std::vector<float*>& gin) {
                      const float* xd = x.data().data();
                      const float* rm = running_mean.data().data();
                      const float* gd = gamma.data().data();
                      for (int c = 0; c < C; ++c) {
                          const float is = invstd[static_cast<size_t>(c)];
                          double sum_gy = 0.0, sum_gyxh = 0.0;
                          for (int b = 0; b < B; ++b) {
                              const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                              for (int64_t i = 0; i < plane; ++i) {
                                  sum_gy += gy[base + i];
                                  sum_gyxh += static_cast<double>(gy[base + i]) * (xd[base + i] - rm[c]) * is;
                              }
                          }
                          if (gin[1]) gin[1][c] += static_cast<float>(sum_gyxh);
                          if (gin[2]) gin[2][c] += static_cast<float>(sum_gy);
                          if (gin[0]) {
                              const float k = gd[c] * is;
                              for (int b = 0; b < B; ++b) {
                                  const int64_t base = (static_cast<int64_t>(b) * C + c) * plane;
                                  for (int64_t i = 0; i < plane; ++i) gin[0][base + i] += k * gy[base + i];
                              }
                          }
                      }
                  });
}

Tensor gather_cells(const Tensor& x, const std::vector<CellIndex>& cells, int block) {
    require_4d(x, "gather_cells");
    require(block >= 1, "gather_cells: block must be >= 1");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int n = static_cast<int>(cells.size());
    require(n >= 1, "gather_cells: no cells");
    for (const CellIndex& ci : cells)
        require(ci.b >= 0 && ci.b < B && ci.y >= 0 && ci.y < H && ci.x >= 0 && ci.x < W &&
                    ci.c_start >= 0 && ci.c_start + block <= C,
                "gather_cells: cell index out of range");
    std::vector<float> out(static_cast<size_t>(n) * block);
    const float* xd = x.data().data();
    const int64_t plane = static_cast<int64_t>(H) * W;
    for (int i = 0; i < n; ++i) {
        const CellIndex& ci = cells[static_cast<size_t>(i)];
        const int64_t at = static_cast<int64_t>(ci.y) * W + ci.x;
        for (int j = 0; j < block; ++j)
            out[static_cast<size_t>(i) * block + j] =
                xd[(static_cast<int64_t>(ci.b) * C + ci.c_start + j) * plane + at];
    }
    Tensor y = Tensor::from_op({n, block}, std::move(out));
    return finish(std::move(y), "gather_cells", {x},
                  [cells, block, C, W, plane](const float* gy, const std::vector<float*>& gin) {
                      if (!gin[0]) return;
                      // duplicate cells are legal; serial scatter keeps accumulation deterministic
                      for (size_t i = 0; i < cells.size(); ++i) {
                          const CellIndex& ci = cells[i];
                          const int64_t at = static_cast<int64_t>(ci.y) * W + ci.x;
                          for (int j = 0; j < block; ++j)
                              gin[0][(static_cast<int64_t>(ci.b) * C + ci.c_start + j) * plane + at] +=
                                  gy[i * static_cast<size_t>(block) + j];
                      }
                  });
}

} // namespace fsa
