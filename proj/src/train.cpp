#include "covmon/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "covmon/grad.hpp"
#include "covmon/log.hpp"

namespace covmon {

namespace {

struct AdamState {
    std::vector<Tensor> mw, vw, mb, vb;
    int64_t step = 0;

    explicit AdamState(const NetworkModel& model) {
        mw.resize(model.layers().size());
        vw.resize(model.layers().size());
        mb.resize(model.layers().size());
        vb.resize(model.layers().size());
        for (size_t i = 0; i < model.layers().size(); ++i) {
            if (model.weight(i).numel() == 0) continue;
            mw[i] = Tensor(model.weight(i).shape());
            vw[i] = Tensor(model.weight(i).shape());
            mb[i] = Tensor(model.bias(i).shape());
            vb[i] = Tensor(model.bias(i).shape());
        }
    }
};

void adam_update(std::vector<float>& param, const std::vector<float>& grad, std::vector<float>& m,
                 std::vector<float>& v, const TrainConfig& cfg, double bias1, double bias2) {
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const float lr = static_cast<float>(cfg.learning_rate);
    const float eps = static_cast<float>(cfg.adam_eps);
    const float c1 = static_cast<float>(1.0 / bias1), c2 = static_cast<float>(1.0 / bias2);
    for (size_t i = 0; i < param.size(); ++i) {
        float g = grad[i];
        m[i] = b1 * m[i] + (1.0f - b1) * g;
        v[i] = b2 * v[i] + (1.0f - b2) * g * g;
        float mhat = m[i] * c1;
        float vhat = v[i] * c2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace

NetworkModel train(const NetworkModel& model, const DatasetSplit& train_set,
                   const TrainConfig& cfg) {
    if (train_set.images.empty()) throw std::invalid_argument("empty training set");
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw std::invalid_argument("epochs and batch size must be at least 1");

    NetworkModel net = model;
    net.init_weights(cfg.seed);
    AdamState adam(net);

    std::vector<int64_t> order(train_set.images.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

    const int64_t n = static_cast<int64_t>(train_set.images.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (int64_t start = 0; start < n; start += cfg.batch_size) {
            int64_t end = std::min<int64_t>(n, start + cfg.batch_size);
            const float inv = 1.0f / static_cast<float>(end - start);
            WeightGrads wg = WeightGrads::zeros_like(net);
            for (int64_t i = start; i < end; ++i) {
                const LabeledImage& sample = train_set.images[static_cast<size_t>(order[i])];
                if (sample.label < 0 || sample.label >= net.class_count())
                    throw std::invalid_argument("training label out of range");
                ForwardTrace trace = forward_trace(net, sample.pixels);
                epoch_loss += cross_entropy(trace.probabilities, sample.label);
                std::vector<float> seed(trace.probabilities.values());
                seed[static_cast<size_t>(sample.label)] -= 1.0f;
                for (auto& s : seed) s *= inv;
                backward(net, trace, seed, {}, &wg);
            }
            adam.step++;
            double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
            double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));
            for (size_t li = 0; li < net.layers().size(); ++li) {
                if (net.weight(li).numel() == 0) continue;
                adam_update(net.weight(li).values(), wg.w[li].values(), adam.mw[li].values(),
                            adam.vw[li].values(), cfg, bias1, bias2);
                adam_update(net.bias(li).values(), wg.b[li].values(), adam.mb[li].values(),
                            adam.vb[li].values(), cfg, bias1, bias2);
            }
        }
        if (cfg.verbose)
            log_info("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
                     " mean loss " + std::to_string(epoch_loss / static_cast<double>(n)));
    }
    return net;
}

}  // namespace covmon
