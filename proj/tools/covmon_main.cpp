#include <CLI11.hpp>

#include <iostream>

#include "covmon/log.hpp"
#include "covmon/pipeline.hpp"

using namespace covmon;

namespace {

int stage_exit_code(const std::string& stage) {
    if (stage == "fetch") return 10;
    if (stage == "train") return 11;
    if (stage == "trusted") return 12;
    if (stage == "sign") return 13;
    if (stage == "calibrate") return 14;
    if (stage == "attack") return 15;
    if (stage == "evaluate") return 16;
    if (stage == "bench") return 17;
    if (stage == "sweep") return 18;
    if (stage == "adaptive") return 19;
    return 1;
}

void print_latency(const BenchReport& report) {
    std::cout << "cam        install    mean(us)    p95(us)   overhead%\n";
    for (const auto& r : report.latency) {
        std::printf("%-10s %-9s %10.1f %10.1f %10.1f\n", r.cam.c_str(), r.installation.c_str(),
                    r.mean_us, r.p95_us, r.overhead_pct);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"coverage-based runtime monitoring for DNN classifiers"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<int> workers;
    std::optional<std::string> out_dir;
    app.add_option("--config", config_path, "experiment config file (INI)")->required();
    app.add_option("--seed", seed, "override the experiment seed");
    app.add_option("--workers", workers, "worker threads for per-sample stages");
    app.add_option("--out", out_dir, "override the output directory");

    auto* cmd_fetch = app.add_subcommand("fetch", "download and verify the dataset");
    auto* cmd_train = app.add_subcommand("train", "train the model (cached by config hash)");
    auto* cmd_trusted = app.add_subcommand("trusted", "build the trusted set and trusted test set");
    auto* cmd_sign = app.add_subcommand("sign", "aggregate the DNN signatures");
    auto* cmd_calibrate = app.add_subcommand("calibrate", "ROC-calibrate per-class thresholds");
    auto* cmd_attack = app.add_subcommand("attack", "generate the adversarial sets");
    auto* cmd_evaluate = app.add_subcommand("evaluate", "produce the detection report");
    auto* cmd_bench = app.add_subcommand("bench", "latency and memory footprint benchmarks");
    auto* cmd_sweep = app.add_subcommand("sweep", "FGSM epsilon sweep of mean coverage cost");
    auto* cmd_adaptive =
        app.add_subcommand("adaptive", "Signature-Attack round-trip with recalibration");

    CLI11_PARSE(app, argc, argv);

    std::string stage = "config";
    try {
        ExperimentConfig cfg = ExperimentConfig::load(config_path);
        if (seed) {
            cfg.seed = *seed;
            cfg.train.seed = *seed;
        }
        if (workers) cfg.workers = *workers;
        if (out_dir) cfg.out_dir = *out_dir;
        Pipeline pipe(cfg);

        if (cmd_fetch->parsed()) {
            stage = "fetch";
            pipe.fetch();
            std::cout << "dataset " << cfg.dataset << ": " << pipe.train_split().images.size()
                      << " train / " << pipe.test_split().images.size() << " test images\n";
        } else if (cmd_train->parsed()) {
            stage = "train";
            pipe.model();
            std::cout << "model ready; test accuracy "
                      << evaluate_accuracy(pipe.model(), pipe.test_split()) << "\n";
        } else if (cmd_trusted->parsed()) {
            stage = "trusted";
            std::cout << "trusted set: " << pipe.trusted().total() << " samples; trusted test: "
                      << pipe.trusted_test().size() << " samples\n";
        } else if (cmd_sign->parsed()) {
            stage = "sign";
            pipe.build_signatures();
            for (const auto& cam : cfg.monitor.cams)
                std::cout << cam << " signature: " << pipe.signature_path(cam).string() << " ("
                          << std::filesystem::file_size(pipe.signature_path(cam)) << " bytes)\n";
        } else if (cmd_attack->parsed()) {
            stage = "attack";
            pipe.generate_attacks();
            for (const auto& entry : cfg.roster)
                std::cout << entry.name << ": " << pipe.attack_records(entry.name).size()
                          << " samples\n";
        } else if (cmd_calibrate->parsed()) {
            stage = "calibrate";
            pipe.calibrate_thresholds();
            for (const auto& cam : cfg.monitor.cams) {
                std::cout << cam << " tau:";
                for (double t : pipe.thresholds(cam).tau) std::printf(" %.3f", t);
                std::cout << "\n";
            }
        } else if (cmd_evaluate->parsed()) {
            stage = "evaluate";
            DetectionReport report = pipe.evaluate();
            std::cout << detection_report_table(report)
                      << "\nreports written under " << cfg.out_dir.string() << "\n";
        } else if (cmd_bench->parsed()) {
            stage = "bench";
            BenchReport lat = pipe.bench_latency();
            print_latency(lat);
            BenchReport memr = pipe.bench_memory();
            std::cout << "\ncam        tap   payload(bytes)   file(bytes)\n";
            for (const auto& r : memr.memory)
                std::printf("%-10s %3d %16llu %13llu\n", r.cam.c_str(), r.tap_id,
                            static_cast<unsigned long long>(r.payload_bytes),
                            static_cast<unsigned long long>(r.file_bytes));
        } else if (cmd_sweep->parsed()) {
            stage = "sweep";
            auto rows = pipe.epsilon_sweep();
            std::cout << sweep_csv(rows);
        } else if (cmd_adaptive->parsed()) {
            stage = "adaptive";
            AdaptiveOutcome outcome = pipe.adaptive_roundtrip();
            std::cout << "before recalibration:\n"
                      << detection_report_table(outcome.before) << "\nafter recalibration:\n"
                      << detection_report_table(outcome.after);
        }
        return 0;
    } catch (const StageError& e) {
        log_warn(e.what());
        return stage_exit_code(e.stage);
    } catch (const ConfigError& e) {
        log_warn(e.what());
        return 2;
    } catch (const std::exception& e) {
        log_warn(std::string("unexpected failure in stage '") + stage + "': " + e.what());
        return stage_exit_code(stage);
    }
}
