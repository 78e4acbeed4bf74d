#pragma once

#include "covmon/cam_types.hpp"
#include "covmon/data.hpp"

namespace covmon {

// Offline aggregation over the trusted set. `batch_size` controls the
// mini-batch split; results are identical for any split because partials
// merge integer counts and min/max, normalizing once at the end.
SrcSignature aggregate_src(const TrustedSet& trusted, const NetworkModel& model,
                           const TapSet& taps, size_t batch_size = 256, int workers = 1);

MrcSignature aggregate_mrc(const TrustedSet& trusted, const NetworkModel& model,
                           const TapSet& taps, int sections, size_t batch_size = 256,
                           int workers = 1);

NrcSignature aggregate_nrc(const TrustedSet& trusted, const NetworkModel& model,
                           const TapSet& taps, int top_p, size_t batch_size = 256,
                           int workers = 1);

KnncSignature aggregate_knnc(const TrustedSet& trusted, const NetworkModel& model,
                             const TapSet& taps);

// Count pass of MRC against fixed ranges, for explicit mini-batch use.
MrcPartial mrc_count_batch(const SrcSignature& ranges, int sections, const TrustedSet& trusted,
                           const NetworkModel& model, int class_index,
                           const std::vector<int32_t>& sample_indices);

NrcPartial nrc_count_batch(const std::vector<TapLayout>& taps, int class_count, int top_p,
                           const TrustedSet& trusted, const NetworkModel& model, int class_index,
                           const std::vector<int32_t>& sample_indices);

SrcSignature src_range_batch(const std::vector<TapLayout>& taps, int class_count,
                             const TrustedSet& trusted, const NetworkModel& model, int class_index,
                             const std::vector<int32_t>& sample_indices);

}  // namespace covmon
