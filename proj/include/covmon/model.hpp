#pragma once

#include <optional>
#include <string>
#include <vector>

#include "covmon/tensor.hpp"

namespace covmon {

enum class LayerKind { kConv, kRelu, kMaxPool, kFc, kSoftmax, kTap };

struct LayerSpec {
    LayerKind kind{};
    // conv
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
    // maxpool
    int window = 0;
    int pool_stride = 0;
    // fc
    int units = 0;
    // tap
    int tap_id = -1;

    static LayerSpec conv(int out_channels, int kernel, int stride);
    static LayerSpec relu();
    static LayerSpec maxpool(int window, int stride);
    static LayerSpec fc(int units);
    static LayerSpec softmax();
    static LayerSpec tap(int tap_id);
};

// Per-tap activation capture from one inference.
struct TapCapture {
    int tap_id = -1;
    std::vector<float> values;
};

struct ActiveState {
    std::vector<TapCapture> taps;

    const std::vector<float>* find(int tap_id) const {
        for (const auto& t : taps)
            if (t.tap_id == tap_id) return &t.values;
        return nullptr;
    }
    bool empty() const { return taps.empty(); }
};

struct ForwardResult {
    Tensor logits;
    Tensor probabilities;
    int predicted = -1;
    float score = 0.0f;
    ActiveState taps;
};

// Sorted set of tap ids enabled for a forward pass. Empty means none.
using TapSet = std::vector<int>;

class NetworkModel {
public:
    NetworkModel() = default;
    NetworkModel(std::vector<int64_t> input_shape, std::vector<LayerSpec> layers, int class_count);

    const std::vector<LayerSpec>& layers() const { return layers_; }
    const std::vector<int64_t>& input_shape() const { return input_shape_; }
    int class_count() const { return class_count_; }

    Tensor& weight(size_t layer) { return weights_[layer]; }
    Tensor& bias(size_t layer) { return biases_[layer]; }
    const Tensor& weight(size_t layer) const { return weights_[layer]; }
    const Tensor& bias(size_t layer) const { return biases_[layer]; }

    // Output shape of every layer, index 0 being the input shape.
    const std::vector<std::vector<int64_t>>& layer_shapes() const { return shapes_; }
    std::vector<int> tap_ids() const;
    int64_t tap_width(int tap_id) const;
    // Channel count of the layer feeding a tap (conv taps have one channel
    // per feature map, fc taps one channel total).
    int tap_channels(int tap_id) const;

    void init_weights(uint64_t seed);

private:
    std::vector<int64_t> input_shape_;
    std::vector<LayerSpec> layers_;
    std::vector<Tensor> weights_;   // empty tensor for layers without weights
    std::vector<Tensor> biases_;
    std::vector<std::vector<int64_t>> shapes_;
    int class_count_ = 0;
};

// The Table-1 LeNet-4 topology with a tap after each ReLU block:
// conv(20,5,1)-ReLU-tap1-maxpool(2,2)-conv(50,5,1)-ReLU-tap2-fc(500)-ReLU-tap3-fc(m).
NetworkModel build_lenet4(int class_count);

ForwardResult forward(const NetworkModel& model, const Tensor& x, const TapSet& taps_enabled = {});

// Forward pass that keeps per-layer outputs for backprop.
struct ForwardTrace {
    std::vector<Tensor> outputs;        // outputs[i] = output of layer i; input stored separately
    Tensor input;
    std::vector<std::vector<int32_t>> pool_argmax;  // per maxpool layer index
    Tensor logits;
    Tensor probabilities;
    int predicted = -1;
};

ForwardTrace forward_trace(const NetworkModel& model, const Tensor& x);

}  // namespace covmon
