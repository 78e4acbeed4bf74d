#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "covmon/model.hpp"

namespace covmon {

enum class CamKind : uint8_t { kSrc = 1, kMrc = 2, kNrc = 3, kKnnc = 4 };

const char* cam_name(CamKind cam);
CamKind cam_from_name(const std::string& name);

struct TapLayout {
    int tap_id = -1;
    int64_t width = 0;
    int channels = 1;

    bool operator==(const TapLayout&) const = default;
};

std::vector<TapLayout> tap_layouts(const NetworkModel& model, const TapSet& taps);

struct AbsentClassError : std::runtime_error {
    explicit AbsentClassError(int class_index)
        : std::runtime_error("no signature for class " + std::to_string(class_index)),
          class_index(class_index) {}
    int class_index;
};

struct LayoutMismatchError : std::runtime_error {
    explicit LayoutMismatchError(const std::string& what) : std::runtime_error(what) {}
};

// confidence for cost-style CAMs: c(0)=1, c(tau)=0.5, strictly decreasing
inline double cost_confidence(double eta, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("threshold must be positive");
    return std::exp(-eta * M_LN2 / tau);
}

// NRC safety score: c(0)=0, c(tau)=0.5, strictly increasing
inline double rank_confidence(double eta, double tau) {
    return 1.0 - cost_confidence(eta, tau);
}

struct Confidence {
    double c = 0.0;
    double eta = 0.0;
    int predicted = -1;
};

// ---- SRC -------------------------------------------------------------

// Per-class min/max activation ranges. Also serves as the mergeable partial
// aggregate (min/max and sample counts combine directly).
struct SrcSignature {
    std::vector<TapLayout> taps;
    int class_count = 0;
    std::vector<uint64_t> class_samples;            // per class
    std::vector<std::vector<std::vector<float>>> vmin;  // [class][tap][neuron]
    std::vector<std::vector<std::vector<float>>> vmax;

    bool class_present(int c) const { return class_samples[static_cast<size_t>(c)] > 0; }
    void require_class(int c) const;
    static SrcSignature empty(std::vector<TapLayout> taps, int class_count);
};

int64_t src_eta(const ActiveState& active, const SrcSignature& sig, int predicted);
Confidence confidence_src(const ActiveState& active, const SrcSignature& sig, int predicted,
                          double tau);

// ---- MRC -------------------------------------------------------------

struct MrcSignature {
    std::vector<TapLayout> taps;
    int class_count = 0;
    int sections = 0;  // Q
    std::vector<uint64_t> class_samples;
    std::vector<std::vector<std::vector<float>>> vmin;
    std::vector<std::vector<std::vector<float>>> vmax;
    std::vector<std::vector<std::vector<float>>> lambda;  // [class][tap][neuron*Q + q]

    bool class_present(int c) const { return class_samples[static_cast<size_t>(c)] > 0; }
    void require_class(int c) const;
};

// Count-form partial for mini-batch aggregation; counts merge exactly.
struct MrcPartial {
    SrcSignature ranges;  // fixed before counting
    int sections = 0;
    std::vector<uint64_t> class_samples;
    std::vector<std::vector<std::vector<uint64_t>>> counts;  // [class][tap][neuron*Q + q]
};

// Sub-range index in [1, Q] per Algorithm 3: q = max(1, ceil((v - vmin)/delta)),
// clamped to Q against rounding at the upper edge. Requires v in [vmin, vmax].
int mrc_subrange(float v, float vmin, float vmax, int sections);

double mrc_eta(const ActiveState& active, const MrcSignature& sig, int predicted);
Confidence confidence_mrc(const ActiveState& active, const MrcSignature& sig, int predicted,
                          double tau);

// ---- NRC -------------------------------------------------------------

struct NrcSignature {
    std::vector<TapLayout> taps;
    int class_count = 0;
    int top_p = 0;
    std::vector<uint64_t> class_samples;
    std::vector<std::vector<std::vector<float>>> lambda;  // [class][tap][neuron]

    bool class_present(int c) const { return class_samples[static_cast<size_t>(c)] > 0; }
    void require_class(int c) const;
};

struct NrcPartial {
    std::vector<TapLayout> taps;
    int class_count = 0;
    int top_p = 0;
    std::vector<uint64_t> class_samples;
    std::vector<std::vector<std::vector<uint64_t>>> counts;  // [class][tap][neuron]
};

// Indices of neurons ranked in the top P of their channel (descending value,
// ties before lower index). `width` is the tap width, split evenly over channels.
void top_p_indices(const float* values, int64_t width, int channels, int top_p,
                   std::vector<int32_t>& out);

double nrc_eta(const ActiveState& active, const NrcSignature& sig, int predicted);
Confidence confidence_nrc(const ActiveState& active, const NrcSignature& sig, int predicted,
                          double tau);

// ---- kNNC ------------------------------------------------------------

// Flat row matrix for one tap: rows grouped by class, plus one label per row.
// Rows may live in owned storage or in a read-only mapping.
struct KnncTapView {
    int tap_id = -1;
    int64_t width = 0;
    int64_t rows_n = 0;
    const float* rows = nullptr;
    const int32_t* labels = nullptr;
    const float* sqnorms = nullptr;  // optional precomputed row squared norms
};

struct KnncTapData {
    int tap_id = -1;
    int64_t width = 0;
    std::vector<float> rows;
    std::vector<int32_t> labels;
    std::vector<float> sqnorms;

    int64_t rows_n() const { return width ? static_cast<int64_t>(labels.size()) : 0; }
    KnncTapView view() const;
};

struct KnncSignature {
    std::vector<TapLayout> taps;
    int class_count = 0;
    std::vector<uint64_t> class_samples;
    std::vector<KnncTapData> data;  // aligned with taps

    bool class_present(int c) const { return class_samples[static_cast<size_t>(c)] > 0; }
    void require_class(int c) const;
    void finalize_sqnorms();
};

// How evaluated neighbors contribute to the coverage cost. The paper's
// Algorithm 7 literally counts matching neighbors; the cost-style reading
// counts mismatches. Mismatch is the default here.
enum class KnncCount { kMismatch, kMatchLiteral };

// Exact Euclidean G nearest rows, ties broken by row index.
std::vector<int64_t> knn_search(const float* query, const KnncTapView& tap, int neighbors);

double knnc_eta(const ActiveState& active, const std::vector<KnncTapView>& taps, int predicted,
                int neighbors, KnncCount mode = KnncCount::kMismatch);
Confidence confidence_knnc(const ActiveState& active, const KnncSignature& sig, int predicted,
                           double tau, int neighbors, KnncCount mode = KnncCount::kMismatch);

// ---- merge -----------------------------------------------------------

SrcSignature merge_partial_signatures(const SrcSignature& a, const SrcSignature& b);
MrcPartial merge_partial_signatures(const MrcPartial& a, const MrcPartial& b);
NrcPartial merge_partial_signatures(const NrcPartial& a, const NrcPartial& b);
KnncSignature merge_partial_signatures(const KnncSignature& a, const KnncSignature& b);

MrcSignature finalize_mrc(const MrcPartial& partial);
NrcSignature finalize_nrc(const NrcPartial& partial);

}  // namespace covmon
