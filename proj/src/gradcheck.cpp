#include "fsa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fsa/blocks.hpp"
#include "fsa/fsa_module.hpp"
#include "fsa/loss.hpp"
#include "fsa/rng.hpp"

namespace fsa {

FdReport fd_check(const std::string& name, const std::function<Tensor()>& f,
                  std::vector<Tensor> leaves, double h, double tol) {
    for (Tensor& t : leaves) {
        if (!t.requires_grad()) throw ContractError("fd_check: leaf without requires_grad");
        t.zero_grad();
    }
    Tensor loss = f();
    backward(loss);

    std::vector<std::vector<float>> analytic;
    for (Tensor& t : leaves) {
        auto g = t.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(static_cast<size_t>(t.numel()), 0.0f);
    }

    FdReport rep{name, 0.0, true};
    NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto data = leaves[li].data_mut();
        for (size_t i = 0; i < data.size(); ++i) {
            const float orig = data[i];
            data[i] = orig + static_cast<float>(h);
            const double lp = f().item();
            data[i] = orig - static_cast<float>(h);
            const double lm = f().item();
            data[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[li][i];
            const double rel = std::fabs(a - numeric) /
                               std::max(1.0, std::max(std::fabs(a), std::fabs(numeric)));
            rep.max_rel = std::max(rep.max_rel, rel);
        }
    }
    rep.pass = rep.max_rel <= tol;
    return rep;
}

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, float lo = -1.0f, float hi = 1.0f,
                     bool requires_grad = true) {
    std::vector<float> v(static_cast<size_t>(numel_of(s)));
    for (float& x : v) x = rng.uniform(lo, hi);
    return Tensor(s, std::move(v), requires_grad);
}

// distinct well-separated values, for ops with argmax/tie kinks
Tensor separated_tensor(const Shape& s, Rng& rng, bool requires_grad = true) {
    const int64_t n = numel_of(s);
    std::vector<float> v(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = 0.05f * static_cast<float>(i) - 0.025f * static_cast<float>(n);
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = rng.below(static_cast<uint32_t>(i + 1));
        std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
    return Tensor(s, std::move(v), requires_grad);
}

} // namespace

std::vector<FdReport> run_gradient_checks(uint64_t seed) {
    std::vector<FdReport> reports;
    auto run = [&](const std::string& name, const std::function<Tensor()>& f,
                   std::vector<Tensor> leaves) {
        reports.push_back(fd_check(name, f, std::move(leaves)));
    };

    { // conv2d, three shapes
        Rng rng(mix_seed(seed, 1));
        Tensor x = random_tensor({2, 3, 5, 5}, rng);
        Tensor w = random_tensor({4, 3, 3, 3}, rng);
        Tensor b = random_tensor({4}, rng);
        Rng prj(mix_seed(seed, 2));
        Tensor proj = random_tensor({2, 4, 5, 5}, prj, -1, 1, false);
        run("conv2d/k3s1p1", [&] { return sum_all(mul(conv2d(x, w, b, 1, 1), proj)); }, {x, w, b});

        Tensor w2 = random_tensor({2, 3, 3, 3}, rng);
        Tensor b2 = random_tensor({2}, rng);
        run("conv2d/k3s2p1",
            [&] { return mean_all(conv2d(x, w2, b2, 2, 1)); }, {x, w2, b2});

        Tensor w3 = random_tensor({5, 3, 1, 1}, rng);
        run("conv2d/1x1", [&] { return mean_all(conv2d(x, w3, Tensor(), 1, 0)); }, {x, w3});
    }

    { // pooling over each axis, both modes
        Rng rng(mix_seed(seed, 3));
        for (Axis ax : {Axis::C, Axis::H, Axis::W}) {
            Tensor xm = random_tensor({2, 4, 3, 5}, rng);
            const char* an = ax == Axis::C ? "C" : (ax == Axis::H ? "H" : "W");
            run(std::string("pool_axis/mean/") + an,
                [&, ax] { return mean_all(square(pool_axis(xm, ax, PoolMode::Mean))); }, {xm});
            Tensor xx = separated_tensor({2, 4, 3, 5}, rng);
            run(std::string("pool_axis/max/") + an,
                [&, ax] { return mean_all(square(pool_axis(xx, ax, PoolMode::Max))); }, {xx});
        }
    }

    { // broadcast / elementwise
        Rng rng(mix_seed(seed, 4));
        Tensor x = random_tensor({1, 4, 1, 5}, rng);
        run("broadcast_to", [&] { return mean_all(square(broadcast_to(x, {3, 4, 2, 5}))); }, {x});

        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        run("add", [&] { return mean_all(square(add(a, b))); }, {a, b});
        run("sub", [&] { return mean_all(square(sub(a, b))); }, {a, b});
        run("mul", [&] { return mean_all(mul(a, b)); }, {a, b});
        Tensor d = random_tensor({3, 4}, rng, 0.5f, 2.0f);
        run("div", [&] { return mean_all(div(a, d)); }, {a, d});
        run("scalar_ops",
            [&] { return mean_all(div_scalar(add_scalar(mul_scalar(a, 1.7f), 0.3f), 3.0f)); }, {a});

        // keep |a-b| clear of the finite-difference step
        std::vector<float> bv(a.data().begin(), a.data().end());
        Rng r2(mix_seed(seed, 5));
        for (float& v : bv) v += (r2.chance(0.5f) ? 1.0f : -1.0f) * r2.uniform(0.1f, 0.5f);
        Tensor bsep(Shape{3, 4}, std::move(bv), true);
        run("minimum", [&] { return mean_all(minimum(a, bsep)); }, {a, bsep});
        run("maximum", [&] { return mean_all(maximum(a, bsep)); }, {a, bsep});
    }

    { // unary
        Rng rng(mix_seed(seed, 6));
        Tensor x = random_tensor({4, 5}, rng);
        run("sigmoid", [&] { return mean_all(square(sigmoid(x))); }, {x});
        run("silu", [&] { return mean_all(square(silu(x))); }, {x});
        run("exp", [&] { return mean_all(exp(x)); }, {x});
        run("atan", [&] { return mean_all(square(atan(x))); }, {x});
        Tensor p = random_tensor({4, 5}, rng, 0.5f, 2.0f);
        run("sqrt", [&] { return mean_all(square(sqrt(p))); }, {p});
    }

    { // shape ops
        Rng rng(mix_seed(seed, 7));
        Tensor a = random_tensor({1, 2, 4, 4}, rng);
        Tensor b = random_tensor({1, 3, 4, 4}, rng);
        run("concat", [&] { return mean_all(square(concat({a, b}, 1))); }, {a, b});
        run("slice", [&] { return mean_all(square(slice(b, 1, 1, 2))); }, {b});
        run("reshape", [&] { return mean_all(square(reshape(a, {4, 8}))); }, {a});
        Tensor m = random_tensor({3, 5}, rng);
        run("transpose2d", [&] { return mean_all(square(transpose2d(m))); }, {m});
        run("upsample_nearest2x", [&] { return mean_all(square(upsample_nearest2x(a))); }, {a});
        Tensor sepp = separated_tensor({1, 2, 6, 6}, rng);
        run("maxpool2d/k3s1p1", [&] { return mean_all(square(maxpool2d(sepp, 3, 1, 1))); }, {sepp});
        run("maxpool2d/k5s1p2", [&] { return mean_all(square(maxpool2d(sepp, 5, 1, 2))); }, {sepp});
    }

    { // linear algebra / reductions
        Rng rng(mix_seed(seed, 8));
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({4, 2}, rng);
        run("matmul", [&] { return mean_all(square(matmul(a, b))); }, {a, b});
        Tensor s = random_tensor({2, 5, 3, 2}, rng);
        run("softmax/axis1", [&] { return mean_all(square(softmax(s, 1))); }, {s});
        run("softmax/axis3", [&] { return mean_all(square(softmax(s, 3))); }, {s});
        run("mean_all", [&] { return mean_all(square(a)); }, {a});
        run("sum_all", [&] { return div_scalar(sum_all(square(a)), 7.0f); }, {a});
        Tensor x4 = random_tensor({2, 3, 4, 4}, rng);
        run("channel_mean", [&] { return mean_all(square(channel_mean(x4))); }, {x4});
        Tensor cells_x = random_tensor({2, 6, 3, 3}, rng);
        std::vector<CellIndex> cells = {{0, 0, 1, 2}, {1, 3, 0, 0}, {0, 0, 1, 2}}; // duplicate on purpose
        run("gather_cells", [&] { return mean_all(square(gather_cells(cells_x, cells, 3))); },
            {cells_x});
    }

    { // bce + batch norm
        Rng rng(mix_seed(seed, 9));
        Tensor z = random_tensor({3, 6}, rng, -3.0f, 3.0f);
        Tensor t = random_tensor({3, 6}, rng, 0.0f, 1.0f, false);
        run("bce_with_logits", [&] { return mean_all(bce_with_logits(z, t)); }, {z});

        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        Tensor gamma = random_tensor({3}, rng, 0.5f, 1.5f);
        Tensor beta = random_tensor({3}, rng, -0.5f, 0.5f);
        run("batch_norm_train",
            [&] { return mean_all(square(batch_norm_train(x, gamma, beta, 1e-3f, nullptr, nullptr))); },
            {x, gamma, beta});
        Tensor rm = random_tensor({3}, rng, -0.2f, 0.2f, false);
        Tensor rv = random_tensor({3}, rng, 0.5f, 1.5f, false);
        run("batch_norm_eval",
            [&] { return mean_all(square(batch_norm_eval(x, gamma, beta, rm, rv, 1e-3f))); },
            {x, gamma, beta});
    }

    { // composite blocks
        Rng rng(mix_seed(seed, 10));
        Rng init(mix_seed(seed, 11));
        Tensor x = random_tensor({2, 4, 5, 5}, rng);
        ConvBlock cb(4, 6, 3, 1, init);
        ParamList ps;
        cb.collect("cb", ps);
        std::vector<Tensor> leaves = {x};
        for (ParamEntry& p : ps)
            if (p.trainable) leaves.push_back(p.tensor);
        run("block/conv_bn_silu", [&] { return mean_all(square(cb.forward(x, true))); }, leaves);

        CspStage csp(4, 6, 1, true, init);
        ParamList cp;
        csp.collect("csp", cp);
        std::vector<Tensor> cl = {x};
        for (ParamEntry& p : cp)
            if (p.trainable) cl.push_back(p.tensor);
        run("block/csp", [&] { return mean_all(square(csp.forward(x, true))); }, cl);

        Sppf sppf(4, 4, init);
        ParamList sp;
        sppf.collect("sppf", sp);
        Tensor xs = separated_tensor({1, 4, 6, 6}, rng);
        std::vector<Tensor> sl = {xs};
        for (ParamEntry& p : sp)
            if (p.trainable) sl.push_back(p.tensor);
        run("block/sppf", [&] { return mean_all(square(sppf.forward(xs, true))); }, sl);

        MhsaBlock mhsa(4, 2, true, init);
        ParamList mp;
        mhsa.collect("mhsa", mp);
        Tensor xm = random_tensor({2, 4, 2, 3}, rng);
        std::vector<Tensor> ml = {xm};
        for (ParamEntry& p : mp)
            if (p.trainable) ml.push_back(p.tensor);
        run("block/mhsa", [&] { return mean_all(square(mhsa.forward(xm))); }, ml);
    }

    { // full FSA module, every parameter group plus the input
        Rng rng(mix_seed(seed, 12));
        Rng init(mix_seed(seed, 13));
        FsaModule fsa(4, 4, 3, init);
        // move the zero-initialized gate layers off their symmetric start so
        // the check exercises a generic point
        ParamList fp;
        fsa.collect("fsa", fp);
        Rng jitter(mix_seed(seed, 14));
        for (ParamEntry& p : fp)
            for (float& v : p.tensor.data_mut()) v += jitter.uniform(-0.3f, 0.3f);
        Tensor x = random_tensor({1, 4, 5, 5}, rng);
        std::vector<Tensor> leaves = {x};
        for (ParamEntry& p : fp) leaves.push_back(p.tensor);
        run("fsa/full_module", [&] { return mean_all(square(fsa.forward(x))); }, leaves);
    }

    { // detection loss on a tiny head set
        ModelConfig cfg;
        cfg.input_size = 32;
        cfg.num_classes = 2;
        cfg.validate();
        Rng rng(mix_seed(seed, 15));
        std::vector<std::vector<GroundTruth>> gts = {
            {{0, 0.40f, 0.42f, 0.25f, 0.25f}, {1, 0.70f, 0.66f, 0.40f, 0.30f}}};
        std::vector<Tensor> raws;
        std::vector<Tensor> leaves;
        for (int s : cfg.strides()) {
            const int g = cfg.input_size / s;
            Tensor r = random_tensor({1, cfg.head_channels(), g, g}, rng, -0.8f, 0.8f);
            raws.push_back(r);
            leaves.push_back(r);
        }
        run("loss/two_gts", [&] { return compute_loss(raws, gts, cfg).total; }, leaves);
    }

    return reports;
}

bool all_pass(const std::vector<FdReport>& reports) {
    for (const FdReport& r : reports)
        if (!r.pass) return false;
    return true;
}

} // namespace fsa
