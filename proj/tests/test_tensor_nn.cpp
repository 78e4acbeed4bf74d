#include "doctest.h"

#include <cmath>
#include <random>

#include "covmon/grad.hpp"
#include "covmon/model.hpp"
#include "covmon/train.hpp"

using namespace covmon;

namespace {

Tensor random_image(std::mt19937_64& rng, const std::vector<int64_t>& shape) {
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    Tensor t(shape);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

// small conv net used by the gradient and oracle tests
NetworkModel tiny_net(uint64_t seed, int classes = 3) {
    std::vector<LayerSpec> layers{
        LayerSpec::conv(3, 3, 1), LayerSpec::relu(),        LayerSpec::tap(1),
        LayerSpec::maxpool(2, 2), LayerSpec::fc(8),         LayerSpec::relu(),
        LayerSpec::tap(2),        LayerSpec::fc(classes),   LayerSpec::softmax(),
    };
    NetworkModel m({1, 8, 8}, std::move(layers), classes);
    m.init_weights(seed);
    return m;
}

// naive loop-nest forward oracle, independent of the Eigen/im2col path
std::vector<double> oracle_forward_logits(const NetworkModel& model, const Tensor& x) {
    std::vector<double> cur(x.values().begin(), x.values().end());
    std::vector<int64_t> shape = model.input_shape();
    for (size_t li = 0; li < model.layers().size(); ++li) {
        const auto& spec = model.layers()[li];
        switch (spec.kind) {
            case LayerKind::kConv: {
                int ic = shape[0], ih = shape[1], iw = shape[2];
                int oh = (ih - spec.kernel) / spec.stride + 1;
                int ow = (iw - spec.kernel) / spec.stride + 1;
                std::vector<double> out(static_cast<size_t>(spec.out_channels) * oh * ow);
                const Tensor& w = model.weight(li);
                for (int oc = 0; oc < spec.out_channels; ++oc)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            double acc = model.bias(li)[oc];
                            for (int c = 0; c < ic; ++c)
                                for (int ky = 0; ky < spec.kernel; ++ky)
                                    for (int kx = 0; kx < spec.kernel; ++kx) {
                                        int iy = oy * spec.stride + ky;
                                        int ix = ox * spec.stride + kx;
                                        double wv = w[(oc * w.dim(1)) +
                                                      ((c * spec.kernel + ky) * spec.kernel + kx)];
                                        acc += wv * cur[(c * ih + iy) * iw + ix];
                                    }
                            out[(oc * oh + oy) * ow + ox] = acc;
                        }
                cur = out;
                shape = {spec.out_channels, oh, ow};
                break;
            }
            case LayerKind::kRelu:
                for (auto& v : cur) v = v > 0 ? v : 0;
                break;
            case LayerKind::kMaxPool: {
                int c = shape[0], ih = shape[1], iw = shape[2];
                int oh = (ih - spec.window) / spec.pool_stride + 1;
                int ow = (iw - spec.window) / spec.pool_stride + 1;
                std::vector<double> out(static_cast<size_t>(c) * oh * ow);
                for (int ch = 0; ch < c; ++ch)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            double best = -1e300;
                            for (int ky = 0; ky < spec.window; ++ky)
                                for (int kx = 0; kx < spec.window; ++kx) {
                                    int iy = oy * spec.pool_stride + ky;
                                    int ix = ox * spec.pool_stride + kx;
                                    best = std::max(best, cur[(ch * ih + iy) * iw + ix]);
                                }
                            out[(ch * oh + oy) * ow + ox] = best;
                        }
                cur = out;
                shape = {c, oh, ow};
                break;
            }
            case LayerKind::kFc: {
                const Tensor& w = model.weight(li);
                std::vector<double> out(static_cast<size_t>(spec.units));
                for (int u = 0; u < spec.units; ++u) {
                    double acc = model.bias(li)[u];
                    for (int64_t j = 0; j < w.dim(1); ++j) acc += w[u * w.dim(1) + j] * cur[j];
                    out[static_cast<size_t>(u)] = acc;
                }
                cur = out;
                shape = {spec.units};
                break;
            }
            case LayerKind::kSoftmax:
                return cur;  // logits
            case LayerKind::kTap:
                break;
        }
    }
    return cur;
}

}  // namespace

TEST_CASE("lenet4 tap widths follow the 28x28 shape arithmetic") {
    NetworkModel m = build_lenet4(10);
    CHECK(m.tap_width(1) == 24 * 24 * 20);  // 11520
    CHECK(m.tap_width(2) == 8 * 8 * 50);    // 3200
    CHECK(m.tap_width(3) == 500);
    CHECK(m.tap_channels(1) == 20);
    CHECK(m.tap_channels(2) == 50);
    CHECK(m.tap_channels(3) == 1);
    CHECK(m.tap_ids() == std::vector<int>{1, 2, 3});

    NetworkModel binary = build_lenet4(2);
    CHECK(binary.layer_shapes().back() == std::vector<int64_t>{2});
    CHECK_THROWS(build_lenet4(1));
}

TEST_CASE("all-zero weights give a uniform softmax") {
    NetworkModel m = build_lenet4(10);
    for (size_t i = 0; i < m.layers().size(); ++i) {
        for (auto& v : m.weight(i).values()) v = 0.0f;
        for (auto& v : m.bias(i).values()) v = 0.0f;
    }
    std::mt19937_64 rng(7);
    Tensor x = random_image(rng, {1, 28, 28});
    ForwardResult res = forward(m, x);
    for (int64_t i = 0; i < 10; ++i) CHECK(res.probabilities[i] == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("softmax sums to one and taps never change the logits") {
    std::mt19937_64 rng(11);
    NetworkModel m = tiny_net(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_image(rng, {1, 8, 8});
        ForwardResult bare = forward(m, x);
        ForwardResult tapped = forward(m, x, {1, 2});
        double sum = 0;
        for (int64_t i = 0; i < bare.probabilities.numel(); ++i) {
            sum += bare.probabilities[i];
            CHECK(bare.probabilities[i] > 0.0f);
            CHECK(bare.probabilities[i] < 1.0f);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(bare.predicted == tapped.predicted);
        for (int64_t i = 0; i < bare.logits.numel(); ++i)
            CHECK(bare.logits[i] == tapped.logits[i]);  // bitwise: same execution order
        CHECK(tapped.taps.taps.size() == 2);
        CHECK(bare.taps.empty());
    }
}

TEST_CASE("forward matches the naive loop-nest oracle") {
    std::mt19937_64 rng(23);
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        NetworkModel m = tiny_net(seed);
        for (int trial = 0; trial < 5; ++trial) {
            Tensor x = random_image(rng, {1, 8, 8});
            ForwardResult res = forward(m, x);
            auto oracle = oracle_forward_logits(m, x);
            REQUIRE(oracle.size() == static_cast<size_t>(res.logits.numel()));
            for (size_t i = 0; i < oracle.size(); ++i)
                CHECK(res.logits[static_cast<int64_t>(i)] ==
                      doctest::Approx(oracle[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("forward is bit-reproducible and rejects bad input shapes") {
    NetworkModel m = tiny_net(5);
    std::mt19937_64 rng(3);
    Tensor x = random_image(rng, {1, 8, 8});
    ForwardResult a = forward(m, x);
    ForwardResult b = forward(m, x);
    for (int64_t i = 0; i < a.logits.numel(); ++i) CHECK(a.logits[i] == b.logits[i]);
    CHECK_THROWS_AS(forward(m, Tensor({1, 7, 7})), std::invalid_argument);
}

TEST_CASE("input gradient matches central finite differences") {
    std::mt19937_64 rng(31);
    int checked = 0, within = 0;
    for (uint64_t seed = 1; seed <= 2; ++seed) {
        NetworkModel m = tiny_net(seed + 40);
        Tensor x = random_image(rng, {1, 8, 8});
        int label = static_cast<int>(seed % 3);
        Tensor g = input_gradient(m, x, CrossEntropyLossSpec{label});
        const double h = 1e-3;
        for (int64_t i = 0; i < x.numel(); ++i) {
            Tensor xp = x, xm = x;
            xp[i] += static_cast<float>(h);
            xm[i] -= static_cast<float>(h);
            double lp = cross_entropy(forward(m, xp).probabilities, label);
            double lm = cross_entropy(forward(m, xm).probabilities, label);
            double fd = (lp - lm) / (2 * h);
            double tol = std::max(1e-3, 0.02 * std::abs(fd));
            ++checked;
            within += std::abs(g[i] - fd) <= tol;
        }
    }
    CHECK(within >= checked * 99 / 100);
}

TEST_CASE("constant network has zero input gradient") {
    NetworkModel m = tiny_net(9);
    // zero the weights feeding the logits
    size_t last_fc = 0;
    for (size_t i = 0; i < m.layers().size(); ++i)
        if (m.layers()[i].kind == LayerKind::kFc) last_fc = i;
    for (auto& v : m.weight(last_fc).values()) v = 0.0f;
    std::mt19937_64 rng(1);
    Tensor x = random_image(rng, {1, 8, 8});
    Tensor g = input_gradient(m, x, CrossEntropyLossSpec{0});
    for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0f);
    CHECK_THROWS_AS(input_gradient(m, x, CrossEntropyLossSpec{99}), std::invalid_argument);
}

TEST_CASE("one-sample training memorizes the sample") {
    DatasetSplit set;
    std::mt19937_64 rng(17);
    set.images.push_back({random_image(rng, {1, 8, 8}), 2});
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 1;
    cfg.seed = 4;
    NetworkModel trained = train(tiny_net(1), set, cfg);
    CHECK(forward(trained, set.images[0].pixels).predicted == 2);
}

TEST_CASE("training is deterministic given the seed") {
    DatasetSplit set;
    std::mt19937_64 rng(5);
    for (int i = 0; i < 12; ++i) set.images.push_back({random_image(rng, {1, 8, 8}), i % 3});
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 99;
    NetworkModel a = train(tiny_net(1), set, cfg);
    NetworkModel b = train(tiny_net(1), set, cfg);
    for (size_t li = 0; li < a.layers().size(); ++li)
        for (int64_t j = 0; j < a.weight(li).numel(); ++j)
            CHECK(a.weight(li)[j] == b.weight(li)[j]);
}

TEST_CASE("evaluate_accuracy counts argmax hits") {
    std::mt19937_64 rng(8);
    NetworkModel m = tiny_net(12);
    DatasetSplit set;
    for (int i = 0; i < 10; ++i) set.images.push_back({random_image(rng, {1, 8, 8}), i % 3});
    int hand = 0;
    for (const auto& img : set.images) hand += forward(m, img.pixels).predicted == img.label;
    CHECK(evaluate_accuracy(m, set) == doctest::Approx(hand / 10.0));
    CHECK_THROWS(evaluate_accuracy(m, DatasetSplit{}));
}
