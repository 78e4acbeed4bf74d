#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace covmon {

// Direction of the safe/unsafe decision rule. Cost-style CAMs (SRC, MRC,
// kNNC) reject when eta > tau (c < 0.5); NRC rejects when eta < tau.
enum class CostSense { kCostlike, kSafetylike };

struct CalItem {
    double eta = 0.0;
    int predicted = -1;
    bool unsafe = false;
};

struct CalibrationSet {
    std::vector<CalItem> items;

    void add_safe(double eta, int predicted) { items.push_back({eta, predicted, false}); }
    void add_unsafe(double eta, int predicted) { items.push_back({eta, predicted, true}); }
};

struct RocPoint {
    double tau = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;  // ascending tau
    CostSense sense = CostSense::kCostlike;
};

struct OneSidedClassError : std::runtime_error {
    explicit OneSidedClassError(int class_index, bool missing_unsafe)
        : std::runtime_error("class " + std::to_string(class_index) + " has no " +
                             (missing_unsafe ? "unsafe" : "safe") + " calibration items"),
          class_index(class_index) {}
    int class_index;
};

struct ThresholdSet {
    std::vector<double> tau;       // per class, > 0
    std::vector<double> youden_j;  // per class, J at the selected threshold
    uint8_t cam_id = 0;
    uint64_t fingerprint = 0;  // CAM + tap configuration the set was calibrated for
};

// Candidate thresholds are the distinct observed eta values plus sentinels;
// one (tau, FPR, TPR) triple per candidate.
RocCurve roc_curve(const CalibrationSet& cal, int class_index,
                   CostSense sense = CostSense::kCostlike);

// Maximizes Youden J = TPR - FPR; ties toward smaller FPR, then smaller tau.
double select_threshold(const RocCurve& curve, double* youden_out = nullptr);

// Per-class ROC + selection. One-sided classes fall back to an
// accept-everything-safe threshold and are logged, not fatal.
ThresholdSet calibrate_all_classes(const CalibrationSet& cal, int class_count,
                                   CostSense sense = CostSense::kCostlike);

// Re-runs calibration with Signature-Attack samples appended to the unsafe
// side (the recalibration countermeasure).
ThresholdSet recalibrate_with_adaptive(const CalibrationSet& cal,
                                       const std::vector<CalItem>& adaptive_unsafe,
                                       int class_count, CostSense sense = CostSense::kCostlike);

}  // namespace covmon
