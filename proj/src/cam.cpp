#include "covmon/cam.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>

#include "covmon/log.hpp"
#include "covmon/threading.hpp"

namespace covmon {

const char* cam_name(CamKind cam) {
    switch (cam) {
        case CamKind::kSrc: return "src";
        case CamKind::kMrc: return "mrc";
        case CamKind::kNrc: return "nrc";
        case CamKind::kKnnc: return "knnc";
    }
    return "?";
}

CamKind cam_from_name(const std::string& name) {
    if (name == "src") return CamKind::kSrc;
    if (name == "mrc" || name == "mrc16" || name == "mrc-16") return CamKind::kMrc;
    if (name == "mrc32" || name == "mrc-32") return CamKind::kMrc;
    if (name == "nrc") return CamKind::kNrc;
    if (name == "knnc") return CamKind::kKnnc;
    throw std::invalid_argument("unknown CAM name: " + name);
}

std::vector<TapLayout> tap_layouts(const NetworkModel& model, const TapSet& taps) {
    std::vector<TapLayout> out;
    out.reserve(taps.size());
    for (int id : taps)
        out.push_back({id, model.tap_width(id), model.tap_channels(id)});
    return out;
}

namespace {

TapSet tap_ids_of(const std::vector<TapLayout>& layouts) {
    TapSet ids;
    for (const auto& t : layouts) ids.push_back(t.tap_id);
    return ids;
}

void require_same_layout(const std::vector<TapLayout>& a, const std::vector<TapLayout>& b,
                         int class_a, int class_b, const char* what) {
    if (a != b || class_a != class_b)
        throw LayoutMismatchError(std::string("cannot merge ") + what +
                                  ": tap/class layout differs");
}

const std::vector<float>& tap_values(const ActiveState& active, int tap_id) {
    const auto* v = active.find(tap_id);
    if (!v) throw std::invalid_argument("active state is missing tap " + std::to_string(tap_id));
    return *v;
}

}  // namespace

// ---- SRC ---------------------------------------------------------------

SrcSignature SrcSignature::empty(std::vector<TapLayout> tap_list, int class_count) {
    SrcSignature s;
    s.taps = std::move(tap_list);
    s.class_count = class_count;
    s.class_samples.assign(static_cast<size_t>(class_count), 0);
    s.vmin.resize(static_cast<size_t>(class_count));
    s.vmax.resize(static_cast<size_t>(class_count));
    for (int c = 0; c < class_count; ++c) {
        s.vmin[c].resize(s.taps.size());
        s.vmax[c].resize(s.taps.size());
        for (size_t t = 0; t < s.taps.size(); ++t) {
            s.vmin[c][t].assign(static_cast<size_t>(s.taps[t].width),
                                std::numeric_limits<float>::infinity());
            s.vmax[c][t].assign(static_cast<size_t>(s.taps[t].width),
                                -std::numeric_limits<float>::infinity());
        }
    }
    return s;
}

void SrcSignature::require_class(int c) const {
    if (c < 0 || c >= class_count || !class_present(c)) throw AbsentClassError(c);
}
void MrcSignature::require_class(int c) const {
    if (c < 0 || c >= class_count || !class_present(c)) throw AbsentClassError(c);
}
void NrcSignature::require_class(int c) const {
    if (c < 0 || c >= class_count || !class_present(c)) throw AbsentClassError(c);
}
void KnncSignature::require_class(int c) const {
    if (c < 0 || c >= class_count || !class_present(c)) throw AbsentClassError(c);
}

int64_t src_eta(const ActiveState& active, const SrcSignature& sig, int predicted) {
    sig.require_class(predicted);
    int64_t eta = 0;
    for (size_t t = 0; t < sig.taps.size(); ++t) {
        const auto& v = tap_values(active, sig.taps[t].tap_id);
        const float* lo = sig.vmin[predicted][t].data();
        const float* hi = sig.vmax[predicted][t].data();
        const size_t n = v.size();
        for (size_t j = 0; j < n; ++j) eta += (v[j] < lo[j]) | (v[j] > hi[j]);
    }
    return eta;
}

Confidence confidence_src(const ActiveState& active, const SrcSignature& sig, int predicted,
                          double tau) {
    double eta = static_cast<double>(src_eta(active, sig, predicted));
    return {cost_confidence(eta, tau), eta, predicted};
}

SrcSignature merge_partial_signatures(const SrcSignature& a, const SrcSignature& b) {
    require_same_layout(a.taps, b.taps, a.class_count, b.class_count, "SRC partials");
    SrcSignature out = a;
    for (int c = 0; c < out.class_count; ++c) {
        out.class_samples[c] += b.class_samples[c];
        if (b.class_samples[c] == 0) continue;
        for (size_t t = 0; t < out.taps.size(); ++t) {
            auto& lo = out.vmin[c][t];
            auto& hi = out.vmax[c][t];
            const auto& blo = b.vmin[c][t];
            const auto& bhi = b.vmax[c][t];
            for (size_t j = 0; j < lo.size(); ++j) {
                lo[j] = std::min(lo[j], blo[j]);
                hi[j] = std::max(hi[j], bhi[j]);
            }
        }
    }
    return out;
}

// ---- MRC ---------------------------------------------------------------

int mrc_subrange(float v, float vmin, float vmax, int sections) {
    float delta = (vmax - vmin) / static_cast<float>(sections);
    if (delta <= 0.0f) return 1;  // constant neuron: all mass in sub-range 1
    int q = static_cast<int>(std::ceil((v - vmin) / delta));
    if (q < 1) q = 1;
    if (q > sections) q = sections;
    return q;
}

double mrc_eta(const ActiveState& active, const MrcSignature& sig, int predicted) {
    sig.require_class(predicted);
    double eta = 0.0;
    const int q_n = sig.sections;
    for (size_t t = 0; t < sig.taps.size(); ++t) {
        const auto& v = tap_values(active, sig.taps[t].tap_id);
        const float* lo = sig.vmin[predicted][t].data();
        const float* hi = sig.vmax[predicted][t].data();
        const float* lam = sig.lambda[predicted][t].data();
        for (size_t j = 0; j < v.size(); ++j) {
            if (v[j] < lo[j] || v[j] > hi[j]) {
                eta += 1.0;
            } else {
                int q = mrc_subrange(v[j], lo[j], hi[j], q_n);
                eta += 1.0 - static_cast<double>(lam[j * q_n + (q - 1)]);
            }
        }
    }
    return eta;
}

Confidence confidence_mrc(const ActiveState& active, const MrcSignature& sig, int predicted,
                          double tau) {
    double eta = mrc_eta(active, sig, predicted);
    return {cost_confidence(eta, tau), eta, predicted};
}

MrcPartial merge_partial_signatures(const MrcPartial& a, const MrcPartial& b) {
    require_same_layout(a.ranges.taps, b.ranges.taps, a.ranges.class_count, b.ranges.class_count,
                        "MRC partials");
    if (a.sections != b.sections)
        throw LayoutMismatchError("cannot merge MRC partials with different Q");
    for (int c = 0; c < a.ranges.class_count; ++c)
        for (size_t t = 0; t < a.ranges.taps.size(); ++t)
            if (a.ranges.vmin[c][t] != b.ranges.vmin[c][t] ||
                a.ranges.vmax[c][t] != b.ranges.vmax[c][t])
                throw LayoutMismatchError("cannot merge MRC partials counted on different ranges");
    MrcPartial out = a;
    for (int c = 0; c < a.ranges.class_count; ++c) {
        out.class_samples[c] += b.class_samples[c];
        for (size_t t = 0; t < a.ranges.taps.size(); ++t) {
            auto& dst = out.counts[c][t];
            const auto& src = b.counts[c][t];
            for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
    }
    return out;
}

MrcSignature finalize_mrc(const MrcPartial& partial) {
    MrcSignature sig;
    sig.taps = partial.ranges.taps;
    sig.class_count = partial.ranges.class_count;
    sig.sections = partial.sections;
    sig.class_samples = partial.class_samples;
    sig.vmin = partial.ranges.vmin;
    sig.vmax = partial.ranges.vmax;
    sig.lambda.resize(sig.vmin.size());
    for (int c = 0; c < sig.class_count; ++c) {
        sig.lambda[c].resize(sig.taps.size());
        const double n = static_cast<double>(partial.class_samples[c]);
        for (size_t t = 0; t < sig.taps.size(); ++t) {
            const auto& counts = partial.counts[c][t];
            auto& lam = sig.lambda[c][t];
            lam.resize(counts.size());
            for (size_t j = 0; j < counts.size(); ++j)
                lam[j] = n > 0 ? static_cast<float>(static_cast<double>(counts[j]) / n) : 0.0f;
        }
    }
    return sig;
}

// ---- NRC ---------------------------------------------------------------

void top_p_indices(const float* values, int64_t width, int channels, int top_p,
                   std::vector<int32_t>& out) {
    out.clear();
    const int64_t ch_width = width / channels;
    const int p = static_cast<int>(std::min<int64_t>(top_p, ch_width));
    if (p > 64) {
        // large P: sort each channel outright
        std::vector<int32_t> order(static_cast<size_t>(ch_width));
        for (int ch = 0; ch < channels; ++ch) {
            const float* v = values + static_cast<int64_t>(ch) * ch_width;
            std::iota(order.begin(), order.end(), 0);
            std::partial_sort(order.begin(), order.begin() + p, order.end(),
                              [v](int32_t a, int32_t b) {
                                  return v[a] > v[b] || (v[a] == v[b] && a < b);
                              });
            for (int r = 0; r < p; ++r)
                out.push_back(static_cast<int32_t>(ch * ch_width) + order[static_cast<size_t>(r)]);
        }
        return;
    }
    for (int ch = 0; ch < channels; ++ch) {
        const float* v = values + static_cast<int64_t>(ch) * ch_width;
        // running top-p: descending value, earlier index wins ties
        int32_t idx[64];
        float val[64];
        int filled = 0;
        for (int64_t j = 0; j < ch_width; ++j) {
            float x = v[j];
            if (filled == p && x <= val[p - 1]) continue;
            int pos = filled < p ? filled : p - 1;
            while (pos > 0 && x > val[pos - 1]) {
                val[pos] = val[pos - 1];
                idx[pos] = idx[pos - 1];
                --pos;
            }
            val[pos] = x;
            idx[pos] = static_cast<int32_t>(ch * ch_width + j);
            if (filled < p) ++filled;
        }
        for (int r = 0; r < filled; ++r) out.push_back(idx[r]);
    }
}

double nrc_eta(const ActiveState& active, const NrcSignature& sig, int predicted) {
    sig.require_class(predicted);
    double eta = 0.0;
    std::vector<int32_t> top;
    for (size_t t = 0; t < sig.taps.size(); ++t) {
        const auto& v = tap_values(active, sig.taps[t].tap_id);
        const float* lam = sig.lambda[predicted][t].data();
        top_p_indices(v.data(), sig.taps[t].width, sig.taps[t].channels, sig.top_p, top);
        for (int32_t j : top) eta += static_cast<double>(lam[j]);
    }
    return eta;
}

Confidence confidence_nrc(const ActiveState& active, const NrcSignature& sig, int predicted,
                          double tau) {
    double eta = nrc_eta(active, sig, predicted);
    return {rank_confidence(eta, tau), eta, predicted};
}

NrcPartial merge_partial_signatures(const NrcPartial& a, const NrcPartial& b) {
    require_same_layout(a.taps, b.taps, a.class_count, b.class_count, "NRC partials");
    if (a.top_p != b.top_p) throw LayoutMismatchError("cannot merge NRC partials with different P");
    NrcPartial out = a;
    for (int c = 0; c < a.class_count; ++c) {
        out.class_samples[c] += b.class_samples[c];
        for (size_t t = 0; t < a.taps.size(); ++t) {
            auto& dst = out.counts[c][t];
            const auto& src = b.counts[c][t];
            for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
    }
    return out;
}

NrcSignature finalize_nrc(const NrcPartial& partial) {
    NrcSignature sig;
    sig.taps = partial.taps;
    sig.class_count = partial.class_count;
    sig.top_p = partial.top_p;
    sig.class_samples = partial.class_samples;
    sig.lambda.resize(partial.counts.size());
    for (int c = 0; c < sig.class_count; ++c) {
        sig.lambda[c].resize(sig.taps.size());
        const double n = static_cast<double>(partial.class_samples[c]);
        for (size_t t = 0; t < sig.taps.size(); ++t) {
            const auto& counts = partial.counts[c][t];
            auto& lam = sig.lambda[c][t];
            lam.resize(counts.size());
            for (size_t j = 0; j < counts.size(); ++j)
                lam[j] = n > 0 ? static_cast<float>(static_cast<double>(counts[j]) / n) : 0.0f;
        }
    }
    return sig;
}

// ---- kNNC --------------------------------------------------------------

KnncTapView KnncTapData::view() const {
    KnncTapView v;
    v.tap_id = tap_id;
    v.width = width;
    v.rows_n = rows_n();
    v.rows = rows.data();
    v.labels = labels.data();
    v.sqnorms = sqnorms.empty() ? nullptr : sqnorms.data();
    return v;
}

void KnncSignature::finalize_sqnorms() {
    for (auto& tap : data) {
        tap.sqnorms.resize(static_cast<size_t>(tap.rows_n()));
        for (int64_t r = 0; r < tap.rows_n(); ++r) {
            Eigen::Map<const Eigen::VectorXf> row(tap.rows.data() + r * tap.width, tap.width);
            tap.sqnorms[static_cast<size_t>(r)] = row.squaredNorm();
        }
    }
}

std::vector<int64_t> knn_search(const float* query, const KnncTapView& tap, int neighbors) {
    if (neighbors <= 0 || neighbors > tap.rows_n)
        throw std::invalid_argument("neighbor count exceeds stored rows");
    Eigen::Map<const Eigen::VectorXf> q(query, tap.width);
    std::vector<float> dist(static_cast<size_t>(tap.rows_n));
    for (int64_t r = 0; r < tap.rows_n; ++r) {
        Eigen::Map<const Eigen::VectorXf> row(tap.rows + r * tap.width, tap.width);
        dist[static_cast<size_t>(r)] = (row - q).squaredNorm();
    }
    std::vector<int64_t> order(static_cast<size_t>(tap.rows_n));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + neighbors, order.end(),
                      [&dist](int64_t a, int64_t b) {
                          float da = dist[static_cast<size_t>(a)], db = dist[static_cast<size_t>(b)];
                          return da < db || (da == db && a < b);
                      });
    order.resize(static_cast<size_t>(neighbors));
    return order;
}

double knnc_eta(const ActiveState& active, const std::vector<KnncTapView>& taps, int predicted,
                int neighbors, KnncCount mode) {
    int64_t eta = 0;
    for (const auto& tap : taps) {
        const auto& v = tap_values(active, tap.tap_id);
        auto nearest = knn_search(v.data(), tap, neighbors);
        for (int64_t r : nearest) {
            bool match = tap.labels[r] == predicted;
            eta += (mode == KnncCount::kMismatch) ? !match : match;
        }
    }
    return static_cast<double>(eta);
}

Confidence confidence_knnc(const ActiveState& active, const KnncSignature& sig, int predicted,
                           double tau, int neighbors, KnncCount mode) {
    sig.require_class(predicted);
    std::vector<KnncTapView> views;
    for (const auto& d : sig.data) views.push_back(d.view());
    double eta = knnc_eta(active, views, predicted, neighbors, mode);
    return {cost_confidence(eta, tau), eta, predicted};
}

KnncSignature merge_partial_signatures(const KnncSignature& a, const KnncSignature& b) {
    require_same_layout(a.taps, b.taps, a.class_count, b.class_count, "kNNC partials");
    KnncSignature out;
    out.taps = a.taps;
    out.class_count = a.class_count;
    out.class_samples.assign(static_cast<size_t>(a.class_count), 0);
    out.data.resize(a.taps.size());
    for (size_t t = 0; t < a.taps.size(); ++t) {
        out.data[t].tap_id = a.taps[t].tap_id;
        out.data[t].width = a.taps[t].width;
    }
    // keep rows grouped by class: class-major concatenation, a's rows first
    for (int c = 0; c < a.class_count; ++c) {
        out.class_samples[c] = a.class_samples[c] + b.class_samples[c];
        for (size_t t = 0; t < a.taps.size(); ++t) {
            for (const KnncSignature* part : {&a, &b}) {
                const auto& d = part->data[t];
                for (int64_t r = 0; r < d.rows_n(); ++r) {
                    if (d.labels[static_cast<size_t>(r)] != c) continue;
                    const float* row = d.rows.data() + r * d.width;
                    out.data[t].rows.insert(out.data[t].rows.end(), row, row + d.width);
                    out.data[t].labels.push_back(c);
                }
            }
        }
    }
    return out;
}

// ---- aggregation over the trusted set -----------------------------------

namespace {

struct ClassBatches {
    // batches of (class, sample indices) pairs, classes in order
    std::vector<std::pair<int, std::vector<int32_t>>> batches;
};

ClassBatches make_batches(const TrustedSet& trusted, size_t batch_size) {
    ClassBatches out;
    for (size_t c = 0; c < trusted.per_class.size(); ++c) {
        const auto& idx = trusted.per_class[c];
        for (size_t start = 0; start < idx.size(); start += batch_size) {
            size_t end = std::min(idx.size(), start + batch_size);
            out.batches.emplace_back(static_cast<int>(c),
                                     std::vector<int32_t>(idx.begin() + start, idx.begin() + end));
        }
    }
    return out;
}

}  // namespace

SrcSignature src_range_batch(const std::vector<TapLayout>& taps, int class_count,
                             const TrustedSet& trusted, const NetworkModel& model, int class_index,
                             const std::vector<int32_t>& sample_indices) {
    SrcSignature sig = SrcSignature::empty(taps, class_count);
    TapSet ids = tap_ids_of(taps);
    auto& lo = sig.vmin[class_index];
    auto& hi = sig.vmax[class_index];
    for (int32_t i : sample_indices) {
        ForwardResult res = forward(model, trusted.source->images[static_cast<size_t>(i)].pixels, ids);
        for (size_t t = 0; t < taps.size(); ++t) {
            const auto& v = *res.taps.find(taps[t].tap_id);
            for (size_t j = 0; j < v.size(); ++j) {
                lo[t][j] = std::min(lo[t][j], v[j]);
                hi[t][j] = std::max(hi[t][j], v[j]);
            }
        }
    }
    sig.class_samples[class_index] = sample_indices.size();
    return sig;
}

SrcSignature aggregate_src(const TrustedSet& trusted, const NetworkModel& model, const TapSet& taps,
                           size_t batch_size, int workers) {
    auto layouts = tap_layouts(model, taps);
    int classes = static_cast<int>(trusted.per_class.size());
    auto batches = make_batches(trusted, batch_size);
    std::vector<SrcSignature> partials(batches.batches.size());
    parallel_for(static_cast<int64_t>(batches.batches.size()), workers, [&](int64_t b) {
        const auto& [cls, idx] = batches.batches[static_cast<size_t>(b)];
        partials[static_cast<size_t>(b)] = src_range_batch(layouts, classes, trusted, model, cls, idx);
    });
    SrcSignature sig = SrcSignature::empty(layouts, classes);
    for (const auto& p : partials) sig = merge_partial_signatures(sig, p);
    for (int c = 0; c < classes; ++c)
        if (sig.class_samples[c] == 0)
            log_warn("SRC signature: class " + std::to_string(c) + " has no trusted samples");
    return sig;
}

MrcPartial mrc_count_batch(const SrcSignature& ranges, int sections, const TrustedSet& trusted,
                           const NetworkModel& model, int class_index,
                           const std::vector<int32_t>& sample_indices) {
    MrcPartial part;
    part.ranges = ranges;
    part.sections = sections;
    part.class_samples.assign(static_cast<size_t>(ranges.class_count), 0);
    part.counts.resize(static_cast<size_t>(ranges.class_count));
    for (int c = 0; c < ranges.class_count; ++c) {
        part.counts[c].resize(ranges.taps.size());
        for (size_t t = 0; t < ranges.taps.size(); ++t)
            part.counts[c][t].assign(static_cast<size_t>(ranges.taps[t].width) * sections, 0);
    }
    TapSet ids = tap_ids_of(ranges.taps);
    for (int32_t i : sample_indices) {
        ForwardResult res = forward(model, trusted.source->images[static_cast<size_t>(i)].pixels, ids);
        for (size_t t = 0; t < ranges.taps.size(); ++t) {
            const auto& v = *res.taps.find(ranges.taps[t].tap_id);
            const float* lo = ranges.vmin[class_index][t].data();
            const float* hi = ranges.vmax[class_index][t].data();
            auto& counts = part.counts[class_index][t];
            for (size_t j = 0; j < v.size(); ++j) {
                int q = mrc_subrange(v[j], lo[j], hi[j], sections);
                counts[j * sections + (q - 1)]++;
            }
        }
    }
    part.class_samples[class_index] = sample_indices.size();
    return part;
}

MrcSignature aggregate_mrc(const TrustedSet& trusted, const NetworkModel& model, const TapSet& taps,
                           int sections, size_t batch_size, int workers) {
    if (sections < 2) throw std::invalid_argument("MRC requires at least two sections");
    SrcSignature ranges = aggregate_src(trusted, model, taps, batch_size, workers);
    auto batches = make_batches(trusted, batch_size);
    std::vector<MrcPartial> partials(batches.batches.size());
    parallel_for(static_cast<int64_t>(batches.batches.size()), workers, [&](int64_t b) {
        const auto& [cls, idx] = batches.batches[static_cast<size_t>(b)];
        partials[static_cast<size_t>(b)] = mrc_count_batch(ranges, sections, trusted, model, cls, idx);
    });
    MrcPartial total;
    total.ranges = ranges;
    total.sections = sections;
    total.class_samples.assign(ranges.class_samples.size(), 0);
    total.counts.resize(static_cast<size_t>(ranges.class_count));
    for (int c = 0; c < ranges.class_count; ++c) {
        total.counts[c].resize(ranges.taps.size());
        for (size_t t = 0; t < ranges.taps.size(); ++t)
            total.counts[c][t].assign(static_cast<size_t>(ranges.taps[t].width) * sections, 0);
    }
    for (const auto& p : partials) total = merge_partial_signatures(total, p);
    return finalize_mrc(total);
}

NrcPartial nrc_count_batch(const std::vector<TapLayout>& taps, int class_count, int top_p,
                           const TrustedSet& trusted, const NetworkModel& model, int class_index,
                           const std::vector<int32_t>& sample_indices) {
    NrcPartial part;
    part.taps = taps;
    part.class_count = class_count;
    part.top_p = top_p;
    part.class_samples.assign(static_cast<size_t>(class_count), 0);
    part.counts.resize(static_cast<size_t>(class_count));
    for (int c = 0; c < class_count; ++c) {
        part.counts[c].resize(taps.size());
        for (size_t t = 0; t < taps.size(); ++t)
            part.counts[c][t].assign(static_cast<size_t>(taps[t].width), 0);
    }
    TapSet ids = tap_ids_of(taps);
    std::vector<int32_t> top;
    for (int32_t i : sample_indices) {
        ForwardResult res = forward(model, trusted.source->images[static_cast<size_t>(i)].pixels, ids);
        for (size_t t = 0; t < taps.size(); ++t) {
            const auto& v = *res.taps.find(taps[t].tap_id);
            top_p_indices(v.data(), taps[t].width, taps[t].channels, top_p, top);
            for (int32_t j : top) part.counts[class_index][t][static_cast<size_t>(j)]++;
        }
    }
    part.class_samples[class_index] = sample_indices.size();
    return part;
}

NrcSignature aggregate_nrc(const TrustedSet& trusted, const NetworkModel& model, const TapSet& taps,
                           int top_p, size_t batch_size, int workers) {
    if (top_p < 1) throw std::invalid_argument("NRC requires P >= 1");
    auto layouts = tap_layouts(model, taps);
    for (const auto& t : layouts)
        if (top_p > t.width / t.channels)
            log_warn("NRC: P exceeds channel width of tap " + std::to_string(t.tap_id) +
                     "; clamped");
    int classes = static_cast<int>(trusted.per_class.size());
    auto batches = make_batches(trusted, batch_size);
    std::vector<NrcPartial> partials(batches.batches.size());
    parallel_for(static_cast<int64_t>(batches.batches.size()), workers, [&](int64_t b) {
        const auto& [cls, idx] = batches.batches[static_cast<size_t>(b)];
        partials[static_cast<size_t>(b)] =
            nrc_count_batch(layouts, classes, top_p, trusted, model, cls, idx);
    });
    NrcPartial total;
    total.taps = layouts;
    total.class_count = classes;
    total.top_p = top_p;
    total.class_samples.assign(static_cast<size_t>(classes), 0);
    total.counts.resize(static_cast<size_t>(classes));
    for (int c = 0; c < classes; ++c) {
        total.counts[c].resize(layouts.size());
        for (size_t t = 0; t < layouts.size(); ++t)
            total.counts[c][t].assign(static_cast<size_t>(layouts[t].width), 0);
    }
    for (const auto& p : partials) total = merge_partial_signatures(total, p);
    return finalize_nrc(total);
}

KnncSignature aggregate_knnc(const TrustedSet& trusted, const NetworkModel& model,
                             const TapSet& taps) {
    auto layouts = tap_layouts(model, taps);
    int classes = static_cast<int>(trusted.per_class.size());
    KnncSignature sig;
    sig.taps = layouts;
    sig.class_count = classes;
    sig.class_samples.assign(static_cast<size_t>(classes), 0);
    sig.data.resize(layouts.size());
    size_t total = trusted.total();
    for (size_t t = 0; t < layouts.size(); ++t) {
        sig.data[t].tap_id = layouts[t].tap_id;
        sig.data[t].width = layouts[t].width;
        sig.data[t].rows.reserve(total * static_cast<size_t>(layouts[t].width));
        sig.data[t].labels.reserve(total);
    }
    TapSet ids = tap_ids_of(layouts);
    for (int c = 0; c < classes; ++c) {
        for (int32_t i : trusted.per_class[static_cast<size_t>(c)]) {
            ForwardResult res =
                forward(model, trusted.source->images[static_cast<size_t>(i)].pixels, ids);
            for (size_t t = 0; t < layouts.size(); ++t) {
                const auto& v = *res.taps.find(layouts[t].tap_id);
                sig.data[t].rows.insert(sig.data[t].rows.end(), v.begin(), v.end());
                sig.data[t].labels.push_back(c);
            }
        }
        sig.class_samples[c] = trusted.per_class[static_cast<size_t>(c)].size();
    }
    return sig;
}

}  // namespace covmon
