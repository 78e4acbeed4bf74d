#pragma once

#include "covmon/data.hpp"
#include "covmon/model.hpp"

namespace covmon {

struct TrainConfig {
    int epochs = 8;
    int batch_size = 64;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 1;
    bool verbose = false;
};

// Cross-entropy + Adam training. Deterministic given the seed: weights are
// re-initialized from it and the per-epoch shuffle derives from it.
NetworkModel train(const NetworkModel& model, const DatasetSplit& train_set,
                   const TrainConfig& cfg);

}  // namespace covmon
