#include "covmon/grad.hpp"

#include <Eigen/Core>

#include <cmath>
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
    const int64_t K = d.patch();
    for (int oy = 0; oy < d.out_h; ++oy)
        for (int ox = 0; ox < d.out_w; ++ox) {
            float* dst = col + (static_cast<int64_t>(oy) * d.out_w + ox) * K;
            for (int ic = 0; ic < d.in_c; ++ic) {
                const float* plane = in + static_cast<int64_t>(ic) * d.in_h * d.in_w;
                for (int ky = 0; ky < d.k; ++ky) {
                    const float* src =
                        plane + static_cast<int64_t>(oy * d.s + ky) * d.in_w + ox * d.s;
                    for (int kx = 0; kx < d.k; ++kx) *dst++ = src[kx];
                }
            }
        }
}

void col2im(const float* col, const ConvDims& d, float* in_grad) {
    const int64_t K = d.patch();
    for (int oy = 0; oy < d.out_h; ++oy)
        for (int ox = 0; ox < d.out_w; ++ox) {
            const float* src = col + (static_cast<int64_t>(oy) * d.out_w + ox) * K;
            for (int ic = 0; ic < d.in_c; ++ic) {
                float* plane = in_grad + static_cast<int64_t>(ic) * d.in_h * d.in_w;
                for (int ky = 0; ky < d.k; ++ky) {
                    float* dst = plane + static_cast<int64_t>(oy * d.s + ky) * d.in_w + ox * d.s;
                    for (int kx = 0; kx < d.k; ++kx) dst[kx] += *src++;
                }
            }
        }
}

}  // namespace

WeightGrads WeightGrads::zeros_like(const NetworkModel& model) {
    WeightGrads g;
    g.w.resize(model.layers().size());
    g.b.resize(model.layers().size());
    for (size_t i = 0; i < model.layers().size(); ++i) {
        if (model.weight(i).numel() == 0) continue;
        g.w[i] = Tensor(model.weight(i).shape());
        g.b[i] = Tensor(model.bias(i).shape());
    }
    return g;
}

Tensor backward(const NetworkModel& model, const ForwardTrace& trace,
                const std::vector<float>& logit_seed, const std::vector<TapSeed>& tap_seeds,
                WeightGrads* wg) {
    const auto& layers = model.layers();
    const auto& shapes = model.layer_shapes();

    // pool ordinal per layer index
    std::vector<int> pool_ordinal(layers.size(), -1);
    int pools = 0;
    for (size_t i = 0; i < layers.size(); ++i)
        if (layers[i].kind == LayerKind::kMaxPool) pool_ordinal[i] = pools++;

    std::vector<float> grad;  // dL/d(output of current layer)
    std::vector<float> below;
    std::vector<float> col_buf;
    bool grad_live = false;

    for (size_t ri = layers.size(); ri-- > 0;) {
        const auto& spec = layers[ri];
        const auto& in_shape = shapes[ri];
        const int64_t in_n = shape_numel(in_shape);
        const std::vector<float>& layer_in =
            ri == 0 ? trace.input.values() : trace.outputs[ri - 1].values();

        switch (spec.kind) {
            case LayerKind::kSoftmax: {
                // losses are fused at the logits; gradients w.r.t. the softmax
                // output itself are not propagated
                below.assign(static_cast<size_t>(in_n), 0.0f);
                if (!logit_seed.empty()) {
                    if (static_cast<int64_t>(logit_seed.size()) != in_n)
                        throw std::invalid_argument("logit seed width mismatch");
                    below = logit_seed;
                }
                grad_live = true;
                break;
            }
            case LayerKind::kTap: {
                if (!grad_live) below.assign(static_cast<size_t>(in_n), 0.0f);
                else below = grad;
                for (const auto& seed : tap_seeds) {
                    if (seed.tap_id != spec.tap_id) continue;
                    if (static_cast<int64_t>(seed.grad.size()) != in_n)
                        throw std::invalid_argument("tap seed width mismatch");
                    for (int64_t j = 0; j < in_n; ++j)
                        below[static_cast<size_t>(j)] += seed.grad[static_cast<size_t>(j)];
                }
                grad_live = true;
                break;
            }
            case LayerKind::kRelu: {
                below.assign(static_cast<size_t>(in_n), 0.0f);
                if (grad_live) {
                    const auto& out = trace.outputs[ri].values();
                    for (int64_t j = 0; j < in_n; ++j)
                        below[static_cast<size_t>(j)] =
                            out[static_cast<size_t>(j)] > 0.0f ? grad[static_cast<size_t>(j)] : 0.0f;
                }
                break;
            }
            case LayerKind::kMaxPool: {
                below.assign(static_cast<size_t>(in_n), 0.0f);
                if (grad_live) {
                    const auto& argmax = trace.pool_argmax[static_cast<size_t>(pool_ordinal[ri])];
                    const int64_t plane = in_shape[1] * in_shape[2];
                    const int64_t out_plane =
                        shapes[ri + 1][1] * shapes[ri + 1][2];
                    for (int64_t ch = 0; ch < in_shape[0]; ++ch)
                        for (int64_t o = 0; o < out_plane; ++o) {
                            int64_t oi = ch * out_plane + o;
                            below[static_cast<size_t>(ch * plane + argmax[static_cast<size_t>(oi)])] +=
                                grad[static_cast<size_t>(oi)];
                        }
                }
                break;
            }
            case LayerKind::kFc: {
                below.assign(static_cast<size_t>(in_n), 0.0f);
                if (grad_live) {
                    const Tensor& wt = model.weight(ri);
                    Eigen::Map<const RowMat> w(wt.data(), wt.dim(0), wt.dim(1));
                    Eigen::Map<const VecF> g(grad.data(), wt.dim(0));
                    Eigen::Map<VecF> dx(below.data(), in_n);
                    dx.noalias() = w.transpose() * g;
                    if (wg) {
                        Eigen::Map<const VecF> x(layer_in.data(), in_n);
                        Eigen::Map<RowMat> dw(wg->w[ri].data(), wt.dim(0), wt.dim(1));
                        dw.noalias() += g * x.transpose();
                        Eigen::Map<VecF> db(wg->b[ri].data(), wt.dim(0));
                        db += g;
                    }
                }
                break;
            }
            case LayerKind::kConv: {
                below.assign(static_cast<size_t>(in_n), 0.0f);
                if (grad_live) {
                    ConvDims d = conv_dims(in_shape, spec);
                    const int64_t K = d.patch(), P = d.positions();
                    const Tensor& wt = model.weight(ri);
                    Eigen::Map<const RowMat> w(wt.data(), d.out_c, K);
                    Eigen::Map<const RowMat> g(grad.data(), d.out_c, P);
                    ColMat dcol(K, P);
                    dcol.noalias() = w.transpose() * g;
                    col2im(dcol.data(), d, below.data());
                    if (wg) {
                        col_buf.resize(static_cast<size_t>(K * P));
                        im2col(layer_in.data(), d, col_buf.data());
                        Eigen::Map<const ColMat> col(col_buf.data(), K, P);
                        Eigen::Map<RowMat> dw(wg->w[ri].data(), d.out_c, K);
                        dw.noalias() += g * col.transpose();
                        Eigen::Map<VecF> db(wg->b[ri].data(), d.out_c);
                        db += g.rowwise().sum();
                    }
                }
                break;
            }
        }
        grad.swap(below);
    }
    return Tensor(model.input_shape(), grad);
}

double cross_entropy(const Tensor& probabilities, int label) {
    double p = std::max(static_cast<double>(probabilities[label]), 1e-30);
    return -std::log(p);
}

Tensor input_gradient(const NetworkModel& model, const Tensor& x, const LossSpec& loss) {
    ForwardTrace trace = forward_trace(model, x);
    if (const auto* ce = std::get_if<CrossEntropyLossSpec>(&loss)) {
        if (ce->label < 0 || ce->label >= model.class_count())
            throw std::invalid_argument("label out of range");
        std::vector<float> seed(trace.probabilities.values());
        seed[static_cast<size_t>(ce->label)] -= 1.0f;
        return backward(model, trace, seed, {});
    }
    const auto& spec = std::get<SignatureLossSpec>(loss);
    if (!spec.signature) throw std::invalid_argument("signature loss needs an SRC signature");
    spec.signature->require_class(spec.class_index);

    // hinge subgradient at each monitored tap, zero at the corner
    std::vector<TapSeed> seeds;
    const auto& layers = model.layers();
    for (size_t t = 0; t < spec.signature->taps.size(); ++t) {
        const auto& tap = spec.signature->taps[t];
        const float* lo = spec.signature->vmin[spec.class_index][t].data();
        const float* hi = spec.signature->vmax[spec.class_index][t].data();
        for (size_t li = 0; li < layers.size(); ++li) {
            if (layers[li].kind != LayerKind::kTap || layers[li].tap_id != tap.tap_id) continue;
            const auto& v = trace.outputs[li].values();
            TapSeed seed{tap.tap_id, std::vector<float>(v.size(), 0.0f)};
            for (size_t j = 0; j < v.size(); ++j) {
                if (v[j] > hi[j]) seed.grad[j] = 1.0f;
                else if (v[j] < lo[j]) seed.grad[j] = -1.0f;
            }
            seeds.push_back(std::move(seed));
        }
    }
    return backward(model, trace, {}, seeds);
}

}  // namespace covmon
