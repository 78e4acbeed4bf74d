#include "covmon/attacks.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

#include "covmon/grad.hpp"
#include "covmon/log.hpp"
#include "covmon/squeeze.hpp"

namespace covmon {

namespace {

float sgn(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

void clip01(Tensor& t) {
    for (auto& v : t.values()) v = std::clamp(v, 0.0f, 1.0f);
}

void clip_ball(Tensor& t, const Tensor& center, float epsilon) {
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = std::clamp(t[i], center[i] - epsilon, center[i] + epsilon);
}

void check_bounded(const Tensor& adv, const Tensor& src, double epsilon) {
    for (int64_t i = 0; i < adv.numel(); ++i) {
        if (adv[i] < 0.0f || adv[i] > 1.0f) throw std::logic_error("pixel outside [0,1]");
        if (std::abs(adv[i] - src[i]) > epsilon + 1e-6)
            throw std::logic_error("perturbation outside the epsilon ball");
    }
}

Tensor ce_gradient(const NetworkModel& model, const Tensor& x, int label) {
    return input_gradient(model, x, CrossEntropyLossSpec{label});
}

AdversarialSample finish(const NetworkModel& model, Tensor image, int source_label,
                         AttackMethod method) {
    ForwardResult res = forward(model, image);
    AdversarialSample out;
    out.image = std::move(image);
    out.source_label = source_label;
    out.predicted = res.predicted;
    out.score = res.score;
    out.method = method;
    out.success = res.predicted != source_label;
    return out;
}

}  // namespace

const char* attack_name(AttackMethod method) {
    switch (method) {
        case AttackMethod::kFgsm: return "fgsm";
        case AttackMethod::kPgd: return "pgd";
        case AttackMethod::kBim: return "bim";
        case AttackMethod::kCw: return "cw";
        case AttackMethod::kOod: return "ood";
        case AttackMethod::kPatch: return "patch";
        case AttackMethod::kSignature: return "signature";
    }
    return "?";
}

AdversarialSample fgsm(const NetworkModel& model, const Tensor& x, int label, double epsilon) {
    Tensor g = ce_gradient(model, x, label);
    Tensor adv = x;
    for (int64_t i = 0; i < adv.numel(); ++i)
        adv[i] += static_cast<float>(epsilon) * sgn(g[i]);
    clip01(adv);
    check_bounded(adv, x, epsilon);
    return finish(model, std::move(adv), label, AttackMethod::kFgsm);
}

namespace {

AdversarialSample projected_ascent(const NetworkModel& model, const Tensor& x, int label,
                                   double epsilon, double alpha, int iterations,
                                   bool random_start, uint64_t seed, AttackMethod method) {
    if (alpha > epsilon)
        log_warn("iterative attack with alpha > epsilon; steps will be clipped hard");
    Tensor adv = x;
    if (random_start) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<float> dist(-static_cast<float>(epsilon),
                                                   static_cast<float>(epsilon));
        for (int64_t i = 0; i < adv.numel(); ++i) adv[i] += dist(rng);
        clip_ball(adv, x, static_cast<float>(epsilon));
        clip01(adv);
    }
    for (int it = 0; it < iterations; ++it) {
        Tensor g = ce_gradient(model, adv, label);
        for (int64_t i = 0; i < adv.numel(); ++i)
            adv[i] += static_cast<float>(alpha) * sgn(g[i]);
        clip_ball(adv, x, static_cast<float>(epsilon));
        clip01(adv);
    }
    check_bounded(adv, x, epsilon);
    return finish(model, std::move(adv), label, method);
}

}  // namespace

AdversarialSample pgd(const NetworkModel& model, const Tensor& x, int label, double epsilon,
                      double alpha, int iterations, bool random_start, uint64_t seed) {
    return projected_ascent(model, x, label, epsilon, alpha, iterations, random_start, seed,
                            AttackMethod::kPgd);
}

AdversarialSample bim(const NetworkModel& model, const Tensor& x, int label, double epsilon,
                      double alpha, int iterations) {
    return projected_ascent(model, x, label, epsilon, alpha, iterations, false, 0,
                            AttackMethod::kBim);
}

AdversarialSample cw(const NetworkModel& model, const Tensor& x, int label, int iterations,
                     double c, double kappa, double lr, CwObjective objective, bool keep_final) {
    const int64_t n = x.numel();
    const double dist_w = objective == CwObjective::kCanonical ? 1.0 : c;
    const double margin_w = objective == CwObjective::kCanonical ? c : 1.0;

    // tanh-space variable keeps iterates inside the pixel box
    std::vector<double> w(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double xi = std::clamp(static_cast<double>(x[i]), 1e-6, 1.0 - 1e-6);
        w[static_cast<size_t>(i)] = std::atanh(2.0 * xi - 1.0);
    }
    std::vector<double> m(static_cast<size_t>(n), 0.0), v(static_cast<size_t>(n), 0.0);

    Tensor best = x;
    double best_l2 = std::numeric_limits<double>::infinity();
    bool found = false;
    Tensor cur(x.shape());

    for (int it = 1; it <= iterations; ++it) {
        for (int64_t i = 0; i < n; ++i)
            cur[i] = static_cast<float>(0.5 * (std::tanh(w[static_cast<size_t>(i)]) + 1.0));
        ForwardTrace trace = forward_trace(model, cur);

        // margin = Z_y - max_{j != y} Z_j
        int other = -1;
        for (int j = 0; j < model.class_count(); ++j)
            if (j != label && (other < 0 || trace.logits[j] > trace.logits[other])) other = j;
        double margin = trace.logits[label] - trace.logits[other];

        if (trace.predicted != label) {
            double l2 = 0.0;
            for (int64_t i = 0; i < n; ++i)
                l2 += (cur[i] - x[i]) * static_cast<double>(cur[i] - x[i]);
            l2 = std::sqrt(l2);
            if (!found || l2 < best_l2) {
                best = cur;
                best_l2 = l2;
                found = true;
            }
        }

        Tensor margin_grad(x.shape());
        if (margin > -kappa) {
            std::vector<float> seed(static_cast<size_t>(model.class_count()), 0.0f);
            seed[static_cast<size_t>(label)] = 1.0f;
            seed[static_cast<size_t>(other)] = -1.0f;
            margin_grad = backward(model, trace, seed, {});
        }
        for (int64_t i = 0; i < n; ++i) {
            size_t si = static_cast<size_t>(i);
            double dx = dist_w * 2.0 * (cur[i] - x[i]) + margin_w * margin_grad[i];
            double dw = dx * 0.5 * (1.0 - std::tanh(w[si]) * std::tanh(w[si]));
            m[si] = 0.9 * m[si] + 0.1 * dw;
            v[si] = 0.999 * v[si] + 0.001 * dw * dw;
            double mh = m[si] / (1.0 - std::pow(0.9, it));
            double vh = v[si] / (1.0 - std::pow(0.999, it));
            w[si] -= lr * mh / (std::sqrt(vh) + 1e-8);
        }
    }

    Tensor final_img(x.shape());
    for (int64_t i = 0; i < n; ++i)
        final_img[i] = static_cast<float>(0.5 * (std::tanh(w[static_cast<size_t>(i)]) + 1.0));
    ForwardResult final_res = forward(model, final_img);

    AdversarialSample out;
    out.method = AttackMethod::kCw;
    out.source_label = label;
    if (keep_final && final_res.predicted != label) {
        out.image = std::move(final_img);
        out.predicted = final_res.predicted;
        out.score = final_res.score;
        out.success = true;
    } else if (found) {
        ForwardResult res = forward(model, best);
        out.image = std::move(best);
        out.predicted = res.predicted;
        out.score = res.score;
        out.success = true;
    } else {
        out.image = x;  // failure marker: unchanged input, success = false
        out.predicted = final_res.predicted;
        out.score = final_res.score;
        out.success = false;
    }
    return out;
}

AdversarialSample ood_targeted(const NetworkModel& model, const Tensor& x, int target_label,
                               double epsilon, int iterations, double stop_score) {
    if (target_label < 0 || target_label >= model.class_count())
        throw std::invalid_argument("target label out of range");
    Tensor adv = x;
    bool reached = false;
    for (int it = 1; it <= iterations && !reached; ++it) {
        Tensor g = ce_gradient(model, adv, target_label);
        const float step = static_cast<float>(epsilon / (static_cast<double>(it) * it));
        for (int64_t i = 0; i < adv.numel(); ++i) adv[i] -= step * sgn(g[i]);
        clip01(adv);
        ForwardResult res = forward(model, adv);
        reached = res.predicted == target_label && res.score >= stop_score;
    }
    ForwardResult res = forward(model, adv);
    AdversarialSample out;
    out.image = std::move(adv);
    out.source_label = target_label;  // OOD samples carry the targeted label
    out.predicted = res.predicted;
    out.score = res.score;
    out.method = AttackMethod::kOod;
    out.success = res.predicted == target_label && res.score >= stop_score;
    return out;
}

AdversarialSample patch_attack(const NetworkModel& model, const Tensor& x, int label,
                               double epsilon, int iterations, PatchRect patch) {
    const int h = static_cast<int>(x.dim(1)), w = static_cast<int>(x.dim(2));
    if (patch.y < 0 || patch.x < 0 || patch.y + patch.height > h || patch.x + patch.width > w)
        throw std::invalid_argument("patch outside the image bounds");
    Tensor adv = x;
    for (int it = 0; it < iterations; ++it) {
        Tensor g = ce_gradient(model, adv, label);
        for (int64_t ch = 0; ch < x.dim(0); ++ch)
            for (int py = patch.y; py < patch.y + patch.height; ++py)
                for (int px = patch.x; px < patch.x + patch.width; ++px) {
                    int64_t idx = (ch * h + py) * w + px;
                    adv[idx] = std::clamp(
                        adv[idx] + static_cast<float>(epsilon) * g[idx], 0.0f, 1.0f);
                }
    }
    return finish(model, std::move(adv), label, AttackMethod::kPatch);
}

SignatureLossValue signature_loss(const ActiveState& active, const SrcSignature& sig,
                                  int predicted) {
    sig.require_class(predicted);
    SignatureLossValue out;
    for (size_t t = 0; t < sig.taps.size(); ++t) {
        const auto* v = active.find(sig.taps[t].tap_id);
        if (!v) throw std::invalid_argument("active state is missing a monitored tap");
        const float* lo = sig.vmin[predicted][t].data();
        const float* hi = sig.vmax[predicted][t].data();
        TapSeed seed{sig.taps[t].tap_id, std::vector<float>(v->size(), 0.0f)};
        for (size_t j = 0; j < v->size(); ++j) {
            float val = (*v)[j];
            if (val > hi[j]) {
                out.loss += val - hi[j];
                seed.grad[j] = 1.0f;
            } else if (val < lo[j]) {
                out.loss += lo[j] - val;
                seed.grad[j] = -1.0f;
            }
        }
        out.seeds.push_back(std::move(seed));
    }
    return out;
}

AdversarialSample signature_attack(const NetworkModel& model, const SrcSignature& sig,
                                   const Tensor& x, double epsilon, double alpha, int iterations,
                                   double gamma) {
    if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("gamma must be in [0,1]");
    const int predicted = forward(model, x).predicted;  // class whose signature is attacked
    sig.require_class(predicted);
    TapSet tap_ids;
    for (const auto& t : sig.taps) tap_ids.push_back(t.tap_id);

    Tensor adv = x;
    for (int it = 0; it < iterations; ++it) {
        ForwardTrace trace = forward_trace(model, adv);
        std::vector<float> ce_seed(trace.probabilities.values());
        ce_seed[static_cast<size_t>(predicted)] -= 1.0f;
        Tensor g_ce = backward(model, trace, ce_seed, {});

        ActiveState state;
        for (size_t li = 0; li < model.layers().size(); ++li)
            if (model.layers()[li].kind == LayerKind::kTap)
                state.taps.push_back({model.layers()[li].tap_id, trace.outputs[li].values()});
        SignatureLossValue ls = signature_loss(state, sig, predicted);
        Tensor g_s = backward(model, trace, {}, ls.seeds);

        Eigen::Map<Eigen::VectorXf> vce(g_ce.data(), g_ce.numel());
        Eigen::Map<Eigen::VectorXf> vs(g_s.data(), g_s.numel());
        float nce = vce.norm(), ns = vs.norm();
        Tensor blended(x.shape());
        bool any = false;
        if (nce > 0.0f) {
            for (int64_t i = 0; i < blended.numel(); ++i)
                blended[i] += static_cast<float>(1.0 - gamma) * g_ce[i] / nce;
            any = true;
        } else {
            log_warn("signature attack: zero-norm CE gradient; term dropped for this step");
        }
        if (ns > 0.0f) {
            for (int64_t i = 0; i < blended.numel(); ++i)
                blended[i] -= static_cast<float>(gamma) * g_s[i] / ns;
            any = true;
        } else if (gamma > 0.0) {
            // inside all ranges: the hinge is flat, nothing to descend
        }
        if (!any) break;
        for (int64_t i = 0; i < adv.numel(); ++i)
            adv[i] += static_cast<float>(alpha) * sgn(blended[i]);
        clip_ball(adv, x, static_cast<float>(epsilon));
        clip01(adv);
    }
    check_bounded(adv, x, epsilon);
    AdversarialSample out = finish(model, std::move(adv), predicted, AttackMethod::kSignature);
    out.success = out.predicted != predicted;
    return out;
}

double kl_divergence(const Tensor& p, const Tensor& q) {
    if (!p.same_shape(q)) throw std::invalid_argument("distribution shapes differ");
    double d = 0.0;
    for (int64_t i = 0; i < p.numel(); ++i) {
        double pi = std::max(static_cast<double>(p[i]), 1e-12);
        double qi = std::max(static_cast<double>(q[i]), 1e-12);
        d += pi * std::log(pi / qi);
    }
    return d;
}

double vision_guard_divergence(const NetworkModel& model, const Tensor& x, int jpeg_quality) {
    Tensor compressed = jpeg_like_compress(x, jpeg_quality);
    Tensor out = forward(model, x).probabilities;
    Tensor out_jpg = forward(model, compressed).probabilities;
    return std::min(kl_divergence(out, out_jpg), kl_divergence(out_jpg, out));
}

DetectorResult vision_guard_detect(const NetworkModel& model, const Tensor& x, double tau_vg,
                                   int jpeg_quality) {
    double j = vision_guard_divergence(model, x, jpeg_quality);
    return {j >= tau_vg, j};
}

double feature_squeezing_divergence(const NetworkModel& model, const Tensor& x, int bits,
                                    int window) {
    Tensor out = forward(model, x).probabilities;
    Tensor out_q = forward(model, bit_depth_reduce(x, bits)).probabilities;
    Tensor out_s = forward(model, median_smooth(x, window)).probabilities;
    double jq = 0.0, js = 0.0;
    for (int64_t i = 0; i < out.numel(); ++i) {
        jq += std::abs(static_cast<double>(out[i]) - out_q[i]);
        js += std::abs(static_cast<double>(out[i]) - out_s[i]);
    }
    return std::max(jq, js);
}

DetectorResult feature_squeezing_detect(const NetworkModel& model, const Tensor& x, double tau_fs,
                                        int bits, int window) {
    double j = feature_squeezing_divergence(model, x, bits, window);
    return {j >= tau_fs, j};
}

}  // namespace covmon
