#include "covmon/model.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace covmon {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
using VecF = Eigen::VectorXf;

struct ConvDims {
    int in_c, in_h, in_w;
    int out_c, out_h, out_w;
    int k, s;
    int64_t patch() const { return static_cast<int64_t>(in_c) * k * k; }
    int64_t positions() const { return static_cast<int64_t>(out_h) * out_w; }
};

ConvDims conv_dims(const std::vector<int64_t>& in_shape, const LayerSpec& spec) {
    ConvDims d{};
    d.in_c = static_cast<int>(in_shape[0]);
    d.in_h = static_cast<int>(in_shape[1]);
    d.in_w = static_cast<int>(in_shape[2]);
    d.k = spec.kernel;
    d.s = spec.stride;
    d.out_c = spec.out_channels;
    d.out_h = (d.in_h - d.k) / d.s + 1;
    d.out_w = (d.in_w - d.k) / d.s + 1;
    return d;
}

void im2col(const float* in, const ConvDims& d, float* col) {
    // col is patch() x positions(), column-major (each output position contiguous).
    const int64_t K = d.patch();
    for (int oy = 0; oy < d.out_h; ++oy) {
        for (int ox = 0; ox < d.out_w; ++ox) {
            float* dst = col + (static_cast<int64_t>(oy) * d.out_w + ox) * K;
            for (int ic = 0; ic < d.in_c; ++ic) {
                const float* plane = in + static_cast<int64_t>(ic) * d.in_h * d.in_w;
                for (int ky = 0; ky < d.k; ++ky) {
                    const float* src = plane + static_cast<int64_t>(oy * d.s + ky) * d.in_w + ox * d.s;
                    for (int kx = 0; kx < d.k; ++kx) *dst++ = src[kx];
                }
            }
        }
    }
}

}  // namespace

LayerSpec LayerSpec::conv(int out_channels, int kernel, int stride) {
    LayerSpec s;
    s.kind = LayerKind::kConv;
    s.out_channels = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    return s;
}
LayerSpec LayerSpec::relu() {
    LayerSpec s;
    s.kind = LayerKind::kRelu;
    return s;
}
LayerSpec LayerSpec::maxpool(int window, int stride) {
    LayerSpec s;
    s.kind = LayerKind::kMaxPool;
    s.window = window;
    s.pool_stride = stride;
    return s;
}
LayerSpec LayerSpec::fc(int units) {
    LayerSpec s;
    s.kind = LayerKind::kFc;
    s.units = units;
    return s;
}
LayerSpec LayerSpec::softmax() {
    LayerSpec s;
    s.kind = LayerKind::kSoftmax;
    return s;
}
LayerSpec LayerSpec::tap(int tap_id) {
    LayerSpec s;
    s.kind = LayerKind::kTap;
    s.tap_id = tap_id;
    return s;
}

NetworkModel::NetworkModel(std::vector<int64_t> input_shape, std::vector<LayerSpec> layers,
                           int class_count)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), class_count_(class_count) {
    shapes_.push_back(input_shape_);
    weights_.resize(layers_.size());
    biases_.resize(layers_.size());
    std::vector<int64_t> cur = input_shape_;
    for (size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& spec = layers_[i];
        switch (spec.kind) {
            case LayerKind::kConv: {
                if (cur.size() != 3) throw std::invalid_argument("conv expects CHW input");
                ConvDims d = conv_dims(cur, spec);
                if (d.out_h <= 0 || d.out_w <= 0)
                    throw std::invalid_argument("conv kernel larger than input");
                weights_[i] = Tensor({d.out_c, d.patch()});
                biases_[i] = Tensor({d.out_c});
                cur = {d.out_c, d.out_h, d.out_w};
                break;
            }
            case LayerKind::kMaxPool: {
                if (cur.size() != 3) throw std::invalid_argument("maxpool expects CHW input");
                int h = static_cast<int>((cur[1] - spec.window) / spec.pool_stride + 1);
                int w = static_cast<int>((cur[2] - spec.window) / spec.pool_stride + 1);
                if (h <= 0 || w <= 0) throw std::invalid_argument("pool window larger than input");
                cur = {cur[0], h, w};
                break;
            }
            case LayerKind::kFc: {
                int64_t in = shape_numel(cur);
                weights_[i] = Tensor({spec.units, in});
                biases_[i] = Tensor({spec.units});
                cur = {spec.units};
                break;
            }
            case LayerKind::kRelu:
            case LayerKind::kSoftmax:
            case LayerKind::kTap:
                break;  // shape preserving
        }
        shapes_.push_back(cur);
    }
    if (shape_numel(shapes_.back()) != class_count_)
        throw std::invalid_argument("final layer width does not match class count");
}

std::vector<int> NetworkModel::tap_ids() const {
    std::vector<int> ids;
    for (const auto& l : layers_)
        if (l.kind == LayerKind::kTap) ids.push_back(l.tap_id);
    return ids;
}

int64_t NetworkModel::tap_width(int tap_id) const {
    for (size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i].kind == LayerKind::kTap && layers_[i].tap_id == tap_id)
            return shape_numel(shapes_[i + 1]);
    throw std::invalid_argument("unknown tap id");
}

int NetworkModel::tap_channels(int tap_id) const {
    for (size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i].kind == LayerKind::kTap && layers_[i].tap_id == tap_id) {
            const auto& s = shapes_[i + 1];
            return s.size() == 3 ? static_cast<int>(s[0]) : 1;
        }
    throw std::invalid_argument("unknown tap id");
}

void NetworkModel::init_weights(uint64_t seed) {
    // Kaiming-uniform fan-in for conv/fc, zero bias.
    std::mt19937_64 rng(seed);
    for (size_t i = 0; i < layers_.size(); ++i) {
        if (weights_[i].numel() == 0) continue;
        int64_t fan_in = weights_[i].dim(1);
        float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (auto& v : weights_[i].values()) v = dist(rng);
        for (auto& v : biases_[i].values()) v = 0.0f;
    }
}

NetworkModel build_lenet4(int class_count) {
    if (class_count < 2) throw std::invalid_argument("class count must be at least 2");
    std::vector<LayerSpec> layers{
        LayerSpec::conv(20, 5, 1), LayerSpec::relu(),    LayerSpec::tap(1),
        LayerSpec::maxpool(2, 2),  LayerSpec::conv(50, 5, 1), LayerSpec::relu(),
        LayerSpec::tap(2),         LayerSpec::fc(500),   LayerSpec::relu(),
        LayerSpec::tap(3),         LayerSpec::fc(class_count), LayerSpec::softmax(),
    };
    NetworkModel m({1, 28, 28}, std::move(layers), class_count);
    m.init_weights(0x1e4e7u);
    return m;
}

namespace {

void conv_forward(const NetworkModel& model, size_t li, const std::vector<int64_t>& in_shape,
                  const float* in, float* out, std::vector<float>& col_buf) {
    ConvDims d = conv_dims(in_shape, model.layers()[li]);
    const int64_t K = d.patch(), P = d.positions();
    col_buf.resize(static_cast<size_t>(K * P));
    im2col(in, d, col_buf.data());
    Eigen::Map<const RowMat> w(model.weight(li).data(), d.out_c, K);
    Eigen::Map<const ColMat> col(col_buf.data(), K, P);
    Eigen::Map<RowMat> o(out, d.out_c, P);
    o.noalias() = w * col;
    Eigen::Map<const VecF> b(model.bias(li).data(), d.out_c);
    o.colwise() += b;
}

void fc_forward(const NetworkModel& model, size_t li, int64_t in_n, const float* in, float* out) {
    const Tensor& wt = model.weight(li);
    Eigen::Map<const RowMat> w(wt.data(), wt.dim(0), wt.dim(1));
    Eigen::Map<const VecF> x(in, in_n);
    Eigen::Map<VecF> o(out, wt.dim(0));
    Eigen::Map<const VecF> b(model.bias(li).data(), wt.dim(0));
    o.noalias() = w * x + b;
}

void maxpool_forward(const LayerSpec& spec, const std::vector<int64_t>& in_shape, const float* in,
                     float* out, std::vector<int32_t>* argmax) {
    const int c = static_cast<int>(in_shape[0]);
    const int ih = static_cast<int>(in_shape[1]), iw = static_cast<int>(in_shape[2]);
    const int w = spec.window, s = spec.pool_stride;
    const int oh = (ih - w) / s + 1, ow = (iw - w) / s + 1;
    if (argmax) argmax->resize(static_cast<size_t>(c) * oh * ow);
    int64_t oi = 0;
    for (int ch = 0; ch < c; ++ch) {
        const float* plane = in + static_cast<int64_t>(ch) * ih * iw;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox, ++oi) {
                float best = -std::numeric_limits<float>::infinity();
                int32_t best_idx = 0;
                for (int ky = 0; ky < w; ++ky) {
                    const int64_t row = static_cast<int64_t>(oy * s + ky) * iw + ox * s;
                    for (int kx = 0; kx < w; ++kx) {
                        float v = plane[row + kx];
                        if (v > best) {  // strict: ties keep the first index in scan order
                            best = v;
                            best_idx = static_cast<int32_t>(row + kx);
                        }
                    }
                }
                out[oi] = best;
                if (argmax) (*argmax)[oi] = best_idx;
            }
        }
    }
}

void softmax_stable(const float* in, int64_t n, float* out) {
    float mx = in[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        sum += out[i];
    }
    for (int64_t i = 0; i < n; ++i) out[i] = static_cast<float>(out[i] / sum);
}

}  // namespace

ForwardResult forward(const NetworkModel& model, const Tensor& x, const TapSet& taps_enabled) {
    if (x.shape() != model.input_shape())
        throw std::invalid_argument("input shape " + x.shape_str() + " does not match model input");
    const auto& layers = model.layers();
    const auto& shapes = model.layer_shapes();

    ForwardResult res;
    std::vector<float> cur(x.values());
    std::vector<float> next;
    std::vector<float> col_buf;
    Tensor logits;
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& spec = layers[i];
        const auto& in_shape = shapes[i];
        const auto& out_shape = shapes[i + 1];
        switch (spec.kind) {
            case LayerKind::kConv:
                next.resize(static_cast<size_t>(shape_numel(out_shape)));
                conv_forward(model, i, in_shape, cur.data(), next.data(), col_buf);
                cur.swap(next);
                break;
            case LayerKind::kFc:
                next.resize(static_cast<size_t>(shape_numel(out_shape)));
                fc_forward(model, i, shape_numel(in_shape), cur.data(), next.data());
                cur.swap(next);
                break;
            case LayerKind::kMaxPool:
                next.resize(static_cast<size_t>(shape_numel(out_shape)));
                maxpool_forward(spec, in_shape, cur.data(), next.data(), nullptr);
                cur.swap(next);
                break;
            case LayerKind::kRelu:
                for (auto& v : cur) v = v > 0.0f ? v : 0.0f;
                break;
            case LayerKind::kSoftmax:
                logits = Tensor(out_shape, cur);
                next.resize(cur.size());
                softmax_stable(cur.data(), static_cast<int64_t>(cur.size()), next.data());
                cur.swap(next);
                break;
            case LayerKind::kTap:
                if (std::find(taps_enabled.begin(), taps_enabled.end(), spec.tap_id) !=
                    taps_enabled.end())
                    res.taps.taps.push_back({spec.tap_id, cur});
                break;
        }
    }
    res.probabilities = Tensor(shapes.back(), cur);
    res.logits = logits.numel() ? std::move(logits) : res.probabilities;
    int arg = 0;
    for (int64_t i = 1; i < res.probabilities.numel(); ++i)
        if (res.probabilities[i] > res.probabilities[arg]) arg = static_cast<int>(i);
    res.predicted = arg;
    res.score = res.probabilities[arg];
    return res;
}

ForwardTrace forward_trace(const NetworkModel& model, const Tensor& x) {
    if (x.shape() != model.input_shape())
        throw std::invalid_argument("input shape " + x.shape_str() + " does not match model input");
    const auto& layers = model.layers();
    const auto& shapes = model.layer_shapes();

    ForwardTrace tr;
    tr.input = x;
    tr.outputs.resize(layers.size());
    std::vector<float> col_buf;
    const std::vector<float>* cur = &x.values();
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& spec = layers[i];
        const auto& in_shape = shapes[i];
        const auto& out_shape = shapes[i + 1];
        Tensor out(out_shape);
        switch (spec.kind) {
            case LayerKind::kConv:
                conv_forward(model, i, in_shape, cur->data(), out.data(), col_buf);
                break;
            case LayerKind::kFc:
                fc_forward(model, i, shape_numel(in_shape), cur->data(), out.data());
                break;
            case LayerKind::kMaxPool: {
                tr.pool_argmax.emplace_back();
                maxpool_forward(spec, in_shape, cur->data(), out.data(), &tr.pool_argmax.back());
                break;
            }
            case LayerKind::kRelu:
                for (int64_t j = 0; j < out.numel(); ++j)
                    out[j] = (*cur)[static_cast<size_t>(j)] > 0.0f ? (*cur)[static_cast<size_t>(j)]
                                                                   : 0.0f;
                break;
            case LayerKind::kSoftmax:
                tr.logits = Tensor(in_shape, *cur);
                softmax_stable(cur->data(), shape_numel(in_shape), out.data());
                break;
            case LayerKind::kTap:
                out.values() = *cur;
                break;
        }
        tr.outputs[i] = std::move(out);
        cur = &tr.outputs[i].values();
    }
    tr.probabilities = tr.outputs.back();
    if (tr.logits.numel() == 0) tr.logits = tr.probabilities;
    int arg = 0;
    for (int64_t i = 1; i < tr.probabilities.numel(); ++i)
        if (tr.probabilities[i] > tr.probabilities[arg]) arg = static_cast<int>(i);
    tr.predicted = arg;
    return tr;
}

}  // namespace covmon
