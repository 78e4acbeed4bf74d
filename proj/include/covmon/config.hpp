#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "covmon/attacks.hpp"
#include "covmon/data.hpp"
#include "covmon/train.hpp"

namespace covmon {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Parsed INI-style file: ordered sections of key/value pairs.
struct IniFile {
    struct Section {
        std::string name;
        std::vector<std::pair<std::string, std::string>> entries;

        const std::string* find(const std::string& key) const;
        std::string get(const std::string& key, const std::string& fallback = "") const;
        double get_num(const std::string& key, double fallback) const;
        int64_t get_int(const std::string& key, int64_t fallback) const;
    };
    std::vector<Section> sections;

    static IniFile parse_file(const std::filesystem::path& path);
    static IniFile parse_text(const std::string& text);
    const Section* find(const std::string& name) const;
};

struct AttackEntry {
    std::string name;  // row label in reports
    AttackConfig config;
    size_t calibration_count = 0;
    size_t evaluation_count = 0;
    size_t max_attempts = 0;  // 0 = scan the whole source pool
};

struct MonitorConfig {
    TapSet taps{1, 2, 3};
    std::vector<std::string> cams{"src", "mrc16", "mrc32", "nrc", "knnc"};
    std::vector<std::string> eval_cams;  // detection-report columns; empty = cams
    int mrc16_sections = 16;
    int mrc32_sections = 32;
    int nrc_p = 2;
    int knnc_g = 75;
    KnncCount knnc_mode = KnncCount::kMismatch;
    bool baselines = true;
    int vg_quality = 50;
    int fs_bits = 1;
    int fs_window = 2;
};

struct AdaptiveConfig {
    double epsilon = 0.1;
    double alpha = 0.004;
    int iterations = 40;
    std::vector<double> gammas{0.0, 0.25, 0.5, 0.75};
    std::vector<double> recalibration_gammas{0.25, 0.75};
    size_t calibration_per_gamma = 400;
    size_t evaluation_per_gamma = 2000;
    double wrong_score_threshold = 0.8;
    std::vector<std::string> cams{"src", "mrc16", "mrc32"};
};

struct BenchConfig {
    int inferences = 1000;
    int warmup = 100;
    uint64_t knnc_rows_cap = 5000;  // trusted rows used by the latency runs
    std::vector<TapSet> installations{{1}, {2}, {3}, {1, 2}, {1, 2, 3}};
};

struct SweepConfig {
    std::vector<double> epsilons{0.0, 0.01, 0.02, 0.05, 0.08, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35};
};

struct ExperimentConfig {
    std::string dataset = "mnist";
    uint64_t seed = 1;
    int workers = 1;
    std::filesystem::path out_dir = "runs/out";
    std::filesystem::path cache_dir;  // dataset cache

    DatasetSpec dataset_spec;
    TrainConfig train;
    int classes = 10;

    float trusted_threshold = 0.9f;
    size_t trusted_test_cap = 9000;
    size_t calibration_safe = 4500;

    MonitorConfig monitor;
    std::vector<AttackEntry> roster;
    AdaptiveConfig adaptive;
    BenchConfig bench;
    SweepConfig sweep;

    static ExperimentConfig load(const std::filesystem::path& path);
    // stable content hash of the sections that define a stage's inputs
    uint64_t stage_hash(const std::string& stage) const;
};

std::filesystem::path default_cache_dir();

}  // namespace covmon
