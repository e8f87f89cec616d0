#pragma once

#include <iosfwd>
#include <optional>

#include "fsa/loss.hpp"
#include "fsa/metrics.hpp"
#include "fsa/model.hpp"

namespace fsa {

// SGD with momentum, weight decay on weight matrices only, linear warmup then
// cosine decay to lrf*lr0. One record per epoch.
struct TrainHyper {
    float lr0 = 0.02f;
    float lrf = 0.05f;
    float momentum = 0.937f;
    float weight_decay = 5e-4f;
    int warmup_epochs = 3;
    int batch_size = 8;
    int epochs = 120;
    int eval_interval = 10; // metrics every k-th epoch and on the last one
    uint64_t seed = 0;
};

struct EpochRecord {
    int epoch = 0; // 1-based
    LossReport loss;
    float lr = 0;
    std::optional<EvalReport> train_eval;
    std::optional<EvalReport> val_eval;
    std::string to_line() const;
};

struct TrainLog {
    std::vector<EpochRecord> records;
};

// Deterministic under a fixed hyper.seed: same model init + data + hyper give
// bitwise-identical parameters. log_stream, when given, receives one
// structured text line per epoch.
TrainLog train(Model& model, const Dataset& train_set, const Dataset* val_set,
               const TrainHyper& hyper, std::ostream* log_stream);

} // namespace fsa
