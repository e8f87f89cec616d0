#include "fsa/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <ostream>
#include <sstream>

#include "fsa/rng.hpp"

namespace fsa {

std::string EpochRecord::to_line() const {
    std::ostringstream os;
    os << "epoch=" << epoch << " lr=" << lr << " box=" << loss.box << " obj=" << loss.obj
       << " cls=" << loss.cls << " total=" << loss.total;
    if (train_eval) {
        os << " map50=" << train_eval->map50 << " map5095=" << train_eval->map5095
           << " precision=" << train_eval->precision << " recall=" << train_eval->recall;
    }
    if (val_eval) os << " val_map50=" << val_eval->map50 << " val_map5095=" << val_eval->map5095;
    return os.str();
}

TrainLog train(Model& model, const Dataset& train_set, const Dataset* val_set,
               const TrainHyper& hyper, std::ostream* log_stream) {
    if (train_set.samples.empty()) throw ContractError("train: dataset is empty");
    if (hyper.epochs < 1 || hyper.batch_size < 1)
        throw ConfigError("train: epochs and batch_size must be >= 1");
    const ModelConfig& cfg = model.config();
    const int S = cfg.input_size;
    for (const Sample& s : train_set.samples)
        if (s.image.dim(1) != S || s.image.dim(2) != S)
            throw ShapeError("train: image " + s.stem + " is " + shape_str(s.image.shape()) +
                             ", model expects " + std::to_string(S) + "x" + std::to_string(S));

    // trainable parameters and their momentum buffers
    std::vector<ParamEntry*> trainable;
    for (ParamEntry& p : model.params())
        if (p.trainable) trainable.push_back(&p);
    std::vector<std::vector<float>> velocity(trainable.size());
    for (size_t i = 0; i < trainable.size(); ++i)
        velocity[i].assign(static_cast<size_t>(trainable[i]->tensor.numel()), 0.0f);

    const int n_images = static_cast<int>(train_set.samples.size());
    const int steps_per_epoch = (n_images + hyper.batch_size - 1) / hyper.batch_size;
    const int64_t warmup_steps =
        static_cast<int64_t>(hyper.warmup_epochs) * steps_per_epoch;

    auto epoch_lr = [&](int epoch) {
        const int w = std::min(hyper.warmup_epochs, hyper.epochs);
        if (hyper.epochs <= w) return hyper.lr0;
        const float progress = static_cast<float>(epoch - w) / static_cast<float>(hyper.epochs - w);
        const float cosv = 0.5f * (1.0f + std::cos(static_cast<float>(M_PI) * std::min(1.0f, std::max(0.0f, progress))));
        return hyper.lr0 * (hyper.lrf + (1.0f - hyper.lrf) * cosv);
    };

    TrainLog log;
    std::vector<int> order(static_cast<size_t>(n_images));
    std::iota(order.begin(), order.end(), 0);
    int64_t global_step = 0;

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(hyper.seed, 0xE000u + static_cast<uint64_t>(epoch)));
        for (int i = n_images - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_rng.below(static_cast<uint32_t>(i + 1)));
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }

        double box_acc = 0, obj_acc = 0, cls_acc = 0, total_acc = 0;
        float lr = epoch_lr(epoch);

        for (int step = 0; step < steps_per_epoch; ++step) {
            const int lo = step * hyper.batch_size;
            const int hi = std::min(n_images, lo + hyper.batch_size);
            const int bs = hi - lo;

            std::vector<float> batch(static_cast<size_t>(bs) * 3 * S * S);
            std::vector<std::vector<GroundTruth>> gts(static_cast<size_t>(bs));
            for (int b = 0; b < bs; ++b) {
                const Sample& s = train_set.samples[static_cast<size_t>(order[static_cast<size_t>(lo + b)])];
                std::memcpy(batch.data() + static_cast<size_t>(b) * 3 * S * S, s.image.data().data(),
                            static_cast<size_t>(3) * S * S * sizeof(float));
                gts[static_cast<size_t>(b)] = s.labels;
            }
            Tensor images(Shape{bs, 3, S, S}, std::move(batch));

            for (ParamEntry* p : trainable) p->tensor.zero_grad();
            std::vector<Tensor> raw = model.forward(images, true);
            LossOutput lo_out = compute_loss(raw, gts, cfg);
            backward(lo_out.total);

            if (global_step < warmup_steps)
                lr = hyper.lr0 * static_cast<float>(global_step + 1) / static_cast<float>(warmup_steps);
            else
                lr = epoch_lr(epoch);

            for (size_t i = 0; i < trainable.size(); ++i) {
                Tensor& t = trainable[i]->tensor;
                if (!t.has_grad()) continue;
                auto w = t.data_mut();
                auto g = t.grad();
                auto& v = velocity[i];
                const bool decay = trainable[i]->decay;
                for (size_t k = 0; k < w.size(); ++k) {
                    float gk = g[k];
                    if (decay) gk += hyper.weight_decay * w[k];
                    v[k] = hyper.momentum * v[k] + gk;
                    w[k] -= lr * v[k];
                }
            }
            ++global_step;

            box_acc += lo_out.report.box;
            obj_acc += lo_out.report.obj;
            cls_acc += lo_out.report.cls;
            total_acc += lo_out.report.total;
        }

        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = lr;
        rec.loss.box = static_cast<float>(box_acc / steps_per_epoch);
        rec.loss.obj = static_cast<float>(obj_acc / steps_per_epoch);
        rec.loss.cls = static_cast<float>(cls_acc / steps_per_epoch);
        rec.loss.total = static_cast<float>(total_acc / steps_per_epoch);

        const bool eval_now = ((epoch + 1) % std::max(1, hyper.eval_interval) == 0) ||
                              epoch + 1 == hyper.epochs;
        if (eval_now) {
            rec.train_eval = evaluate(model, train_set, 0.25f, 0.45f);
            if (val_set && !val_set->samples.empty())
                rec.val_eval = evaluate(model, *val_set, 0.25f, 0.45f);
        }
        if (log_stream) *log_stream << rec.to_line() << '\n' << std::flush;
        log.records.push_back(std::move(rec));
    }
    return log;
}

} // namespace fsa
