#include "covmon/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "covmon/log.hpp"

namespace covmon {

namespace {

constexpr double kTinyTau = 1e-9;

bool unsafe_decision(double eta, double tau, CostSense sense) {
    return sense == CostSense::kCostlike ? eta > tau : eta < tau;
}

}  // namespace

RocCurve roc_curve(const CalibrationSet& cal, int class_index, CostSense sense) {
    std::vector<double> safe_eta, unsafe_eta;
    for (const auto& item : cal.items) {
        if (item.predicted != class_index) continue;
        (item.unsafe ? unsafe_eta : safe_eta).push_back(item.eta);
    }
    if (safe_eta.empty()) throw OneSidedClassError(class_index, false);
    if (unsafe_eta.empty()) throw OneSidedClassError(class_index, true);

    std::vector<double> candidates;
    candidates.reserve(safe_eta.size() + unsafe_eta.size() + 2);
    for (double e : safe_eta) candidates.push_back(e);
    for (double e : unsafe_eta) candidates.push_back(e);
    double max_eta = *std::max_element(candidates.begin(), candidates.end());
    candidates.push_back(kTinyTau);       // reject everything with positive cost
    candidates.push_back(max_eta + 1.0);  // accept everything (cost sense)
    for (double& c : candidates) c = std::max(c, kTinyTau);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    RocCurve curve;
    curve.sense = sense;
    curve.points.reserve(candidates.size());
    for (double tau : candidates) {
        int64_t fp = 0, tp = 0;
        for (double e : safe_eta) fp += unsafe_decision(e, tau, sense);
        for (double e : unsafe_eta) tp += unsafe_decision(e, tau, sense);
        curve.points.push_back({tau, static_cast<double>(fp) / static_cast<double>(safe_eta.size()),
                                static_cast<double>(tp) / static_cast<double>(unsafe_eta.size())});
    }
    return curve;
}

double select_threshold(const RocCurve& curve, double* youden_out) {
    if (curve.points.empty()) throw std::invalid_argument("empty ROC curve");
    const RocPoint* best = &curve.points.front();
    double best_j = best->tpr - best->fpr;
    for (const auto& p : curve.points) {
        double j = p.tpr - p.fpr;
        if (j > best_j ||
            (j == best_j && (p.fpr < best->fpr || (p.fpr == best->fpr && p.tau < best->tau)))) {
            best = &p;
            best_j = j;
        }
    }
    if (youden_out) *youden_out = best_j;
    return best->tau;
}

ThresholdSet calibrate_all_classes(const CalibrationSet& cal, int class_count, CostSense sense) {
    ThresholdSet out;
    out.tau.resize(static_cast<size_t>(class_count), 1.0);
    out.youden_j.resize(static_cast<size_t>(class_count), 0.0);
    for (int c = 0; c < class_count; ++c) {
        try {
            RocCurve curve = roc_curve(cal, c, sense);
            out.tau[static_cast<size_t>(c)] =
                select_threshold(curve, &out.youden_j[static_cast<size_t>(c)]);
        } catch (const OneSidedClassError& e) {
            // fall back to accepting every safe item for this class
            double max_safe = 0.0, min_safe = std::numeric_limits<double>::infinity();
            bool any_safe = false;
            for (const auto& item : cal.items) {
                if (item.predicted != c || item.unsafe) continue;
                any_safe = true;
                max_safe = std::max(max_safe, item.eta);
                min_safe = std::min(min_safe, item.eta);
            }
            double fallback;
            if (sense == CostSense::kCostlike)
                fallback = any_safe ? max_safe + 1.0 : 1.0;
            else
                fallback = any_safe ? std::max(min_safe, kTinyTau) : 1.0;
            out.tau[static_cast<size_t>(c)] = fallback;
            out.youden_j[static_cast<size_t>(c)] = 0.0;
            log_warn(std::string(e.what()) + "; falling back to tau = " + std::to_string(fallback));
        }
    }
    return out;
}

ThresholdSet recalibrate_with_adaptive(const CalibrationSet& cal,
                                       const std::vector<CalItem>& adaptive_unsafe,
                                       int class_count, CostSense sense) {
    CalibrationSet augmented = cal;
    for (CalItem item : adaptive_unsafe) {
        item.unsafe = true;
        augmented.items.push_back(item);
    }
    return calibrate_all_classes(augmented, class_count, sense);
}

}  // namespace covmon
