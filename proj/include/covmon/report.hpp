#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace covmon {

// Detection accuracy per input type (rows) and detector (columns).
struct DetectionReport {
    std::vector<std::string> detectors;
    struct Row {
        std::string input_type;
        int64_t total = 0;
        std::vector<double> accuracy;       // per detector
        std::vector<int64_t> accepted;      // per detector; rejected = total - accepted
    };
    std::vector<Row> rows;
};

std::string detection_report_csv(const DetectionReport& report);
std::string detection_report_table(const DetectionReport& report);
DetectionReport detection_report_from_csv(const std::string& csv);

struct BenchLatencyRow {
    std::string cam;
    std::string installation;   // e.g. "{1,2,3}"
    double bare_mean_us = 0.0;
    double mean_us = 0.0;       // monitored inference
    double p95_us = 0.0;
    double overhead_pct = 0.0;  // vs the same-process bare inference
};

struct BenchMemoryRow {
    std::string cam;
    int tap_id = 0;
    uint64_t payload_bytes = 0;   // analytic = stored data bytes for the tap
    uint64_t file_bytes = 0;      // single-tap signature file as written
};

struct BenchReport {
    std::vector<BenchLatencyRow> latency;
    std::vector<BenchMemoryRow> memory;
};

std::string bench_latency_csv(const BenchReport& report);
std::string bench_memory_csv(const BenchReport& report);

struct SweepRow {
    double epsilon = 0.0;
    double mean_eta = 0.0;
    double mean_confidence = 0.0;
    double adversarial_fraction = 0.0;  // wrong high-score predictions in the attacked set
};

std::string sweep_csv(const std::vector<SweepRow>& rows);

// Plain structured-text export of per-class thresholds.
std::string thresholds_text(const std::string& cam, const std::vector<double>& tau,
                            const std::vector<double>& youden_j);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace covmon
