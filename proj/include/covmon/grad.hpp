#pragma once

#include <variant>
#include <vector>

#include "covmon/cam.hpp"
#include "covmon/model.hpp"

namespace covmon {

// Gradient seeds injected at tap outputs, aligned with a model's tap ids.
struct TapSeed {
    int tap_id = -1;
    std::vector<float> grad;
};

struct WeightGrads {
    std::vector<Tensor> w;
    std::vector<Tensor> b;

    static WeightGrads zeros_like(const NetworkModel& model);
};

// Backpropagates from an optional logit-level seed plus optional tap-level
// seeds down to the input. Weight/bias gradients are accumulated into *wg
// when provided.
Tensor backward(const NetworkModel& model, const ForwardTrace& trace,
                const std::vector<float>& logit_seed, const std::vector<TapSeed>& tap_seeds,
                WeightGrads* wg = nullptr);

struct CrossEntropyLossSpec {
    int label = -1;
};

// Sum of hinge penalties for tap activations outside the SRC ranges of one class.
struct SignatureLossSpec {
    const SrcSignature* signature = nullptr;
    int class_index = -1;
};

using LossSpec = std::variant<CrossEntropyLossSpec, SignatureLossSpec>;

// Gradient of the selected loss with respect to the input image.
Tensor input_gradient(const NetworkModel& model, const Tensor& x, const LossSpec& loss);

double cross_entropy(const Tensor& probabilities, int label);

}  // namespace covmon
