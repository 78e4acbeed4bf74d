#pragma once

#include <memory>
#include <optional>

#include "covmon/calibrate.hpp"
#include "covmon/cam.hpp"
#include "covmon/config.hpp"
#include "covmon/report.hpp"
#include "covmon/store.hpp"

namespace covmon {

struct StageError : std::runtime_error {
    StageError(std::string stage_name, const std::string& what, std::string artifact = "")
        : std::runtime_error("stage '" + stage_name + "' failed: " + what +
                             (artifact.empty() ? "" : " (cached artifacts under " + artifact + ")")),
          stage(std::move(stage_name)) {}
    std::string stage;
};

// Adversarial set record file: per sample method, config hash, source index,
// image, predicted class and score.
struct AdversarialRecord {
    uint8_t method = 0;
    uint64_t config_hash = 0;
    int32_t source_index = -1;
    int32_t source_label = -1;
    int32_t predicted = -1;
    float score = 0.0f;
    Tensor image;
};

void write_adversarial_set(const std::filesystem::path& path,
                           const std::vector<AdversarialRecord>& records);
std::vector<AdversarialRecord> read_adversarial_set(const std::filesystem::path& path);

// Batched kNNC cost evaluation (one GEMM per tap per block of queries).
std::vector<double> knnc_eta_batch(const std::vector<KnncTapView>& taps,
                                   const std::vector<const float*>& row_sqnorms,
                                   const std::vector<const ActiveState*>& states,
                                   const std::vector<int>& predicted, int neighbors,
                                   KnncCount mode);

struct AdaptiveOutcome {
    DetectionReport before;
    DetectionReport after;
    std::vector<std::pair<std::string, double>> tau_shift;  // cam -> mean tau after / before
};

class Pipeline {
public:
    explicit Pipeline(ExperimentConfig cfg, HttpTransport* transport = nullptr);
    ~Pipeline();

    const ExperimentConfig& config() const;

    // pipeline stages; each one caches its artifact under <out>/cache and is
    // a no-op when the content-addressed artifact already exists
    void fetch();
    const NetworkModel& model();
    const TrustedSet& trusted();
    const std::vector<int32_t>& trusted_test();
    void build_signatures();
    void generate_attacks();
    void calibrate_thresholds();
    DetectionReport evaluate();
    BenchReport bench_latency();
    BenchReport bench_memory();
    std::vector<SweepRow> epsilon_sweep();
    AdaptiveOutcome adaptive_roundtrip();

    // accessors used by tests and the acceptance suite
    const SrcSignature& src_signature();
    const MrcSignature& mrc_signature(int sections);
    const NrcSignature& nrc_signature();
    const std::vector<KnncTapView>& knnc_views();
    const ThresholdSet& thresholds(const std::string& cam);
    double baseline_tau(const std::string& which);  // "vg" or "fs"
    const DatasetSplit& train_split();
    const DatasetSplit& test_split();
    std::filesystem::path signature_path(const std::string& cam) const;
    std::vector<AdversarialRecord> attack_records(const std::string& name);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace covmon
