#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

#include "covmon/cam.hpp"
#include "covmon/pipeline.hpp"

using namespace covmon;
namespace fs = std::filesystem;

namespace {

void be32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

// three separable 28x28 patterns with pixel noise
void write_toy_dataset(const fs::path& dir, int per_class_train, int per_class_test) {
    fs::create_directories(dir / "toy");
    std::mt19937_64 rng(1234);
    std::uniform_int_distribution<int> noise(0, 60);
    auto emit = [&](const std::string& img_name, const std::string& lbl_name, int per_class) {
        std::vector<uint8_t> imgs, labels;
        be32(imgs, 0x803);
        be32(imgs, static_cast<uint32_t>(3 * per_class));
        be32(imgs, 28);
        be32(imgs, 28);
        be32(labels, 0x801);
        be32(labels, static_cast<uint32_t>(3 * per_class));
        for (int i = 0; i < per_class; ++i)
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < 28; ++y)
                    for (int x = 0; x < 28; ++x) {
                        int v = noise(rng);
                        if (c == 0 && x >= 12 && x < 16) v = 200 + noise(rng) / 4;
                        if (c == 1 && y >= 12 && y < 16) v = 200 + noise(rng) / 4;
                        if (c == 2 && ((x / 4 + y / 4) % 2 == 0)) v = 180 + noise(rng) / 4;
                        imgs.push_back(static_cast<uint8_t>(std::min(v, 255)));
                    }
                labels.push_back(static_cast<uint8_t>(c));
            }
        std::ofstream fi(dir / "toy" / img_name, std::ios::binary);
        fi.write(reinterpret_cast<const char*>(imgs.data()), static_cast<std::streamsize>(imgs.size()));
        std::ofstream fl(dir / "toy" / lbl_name, std::ios::binary);
        fl.write(reinterpret_cast<const char*>(labels.data()),
                 static_cast<std::streamsize>(labels.size()));
    };
    emit("train-images-idx3-ubyte", "train-labels-idx1-ubyte", per_class_train);
    emit("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", per_class_test);
}

std::string toy_config_text(const fs::path& cache, const fs::path& out) {
    std::ostringstream ss;
    ss << R"([experiment]
dataset = toy
seed = 7
workers = 1
)";
    ss << "out_dir = " << out.string() << "\ncache_dir = " << cache.string() << "\n";
    ss << R"(
[model]
classes = 3
epochs = 2
batch_size = 16

[trusted]
score_threshold = 0.6
test_cap = 60
calibration_safe = 30

[monitor]
taps = 1,2,3
cams = src,mrc16,mrc32,nrc,knnc
mrc16_sections = 4
mrc32_sections = 8
nrc_p = 2
knnc_g = 5
baselines = on

[attack:FGSM-A]
method = fgsm
epsilon = 0.3
wrong_score = 0.5
calibration = 8
evaluation = 8

[attack:PGD-A]
method = pgd
epsilon = 0.3
alpha = 0.05
iterations = 8
wrong_score = 0.5
calibration = 8
evaluation = 8

[adaptive]
epsilon = 0.3
alpha = 0.05
iterations = 8
gammas = 0,0.5
recalibration_gammas = 0.5
calibration_per_gamma = 6
evaluation_per_gamma = 6
wrong_score = 0.5
cams = src

[bench]
inferences = 30
warmup = 5
knnc_rows_cap = 40
installations = 3|1,2,3

[sweep]
epsilons = 0,0.2
)";
    return ss.str();
}

struct ToyEnv {
    fs::path root, cache, out, config_path;

    ToyEnv() {
        root = fs::temp_directory_path() / "covmon-harness";
        fs::remove_all(root);
        cache = root / "cache";
        out = root / "out";
        write_toy_dataset(cache, 40, 20);
        config_path = root / "toy.ini";
        std::ofstream f(config_path);
        f << toy_config_text(cache, out);
    }
};

}  // namespace

TEST_CASE("bundled configs parse with the documented roster") {
    fs::path cfg_dir = fs::path(COVMON_SOURCE_DIR) / "configs";
    ExperimentConfig mnist = ExperimentConfig::load(cfg_dir / "mnist.ini");
    CHECK(mnist.dataset == "mnist");
    CHECK(mnist.train.epochs == 8);
    CHECK(mnist.monitor.taps == TapSet{1, 2, 3});
    REQUIRE(mnist.roster.size() == 9);
    CHECK(mnist.roster[0].name == "FGSM-1");
    CHECK(mnist.roster[0].config.epsilon == 0.1);
    CHECK(mnist.roster[0].calibration_count == 500);
    CHECK(mnist.roster[3].name == "PGD-2");
    CHECK(mnist.roster[3].config.epsilon == 0.18);
    CHECK(mnist.roster[3].config.alpha == 0.015);
    CHECK(mnist.roster[3].config.iterations == 40);
    CHECK(mnist.roster[6].config.iterations == 500);  // CW
    CHECK(mnist.roster[7].name == "Out of Dis.");
    CHECK(mnist.roster[7].config.wrong_score_threshold == 0.99);
    CHECK(mnist.roster[8].config.patch.height == 8);
    CHECK(mnist.adaptive.evaluation_per_gamma == 2000);

    ExperimentConfig fm = ExperimentConfig::load(cfg_dir / "fmnist.ini");
    CHECK(fm.roster[0].config.epsilon == 0.05);
    CHECK(fm.roster[0].evaluation_count == 3400);
    CHECK(fm.roster[6].calibration_count == 200);

    // different configs hash differently, same config hashes identically
    CHECK(mnist.stage_hash("train") != fm.stage_hash("train"));
    CHECK(mnist.stage_hash("roster") ==
          ExperimentConfig::load(cfg_dir / "mnist.ini").stage_hash("roster"));
}

TEST_CASE("config parser rejects malformed input") {
    CHECK_THROWS_AS(IniFile::parse_text("key = 1\n"), ConfigError);       // entry outside section
    CHECK_THROWS_AS(IniFile::parse_text("[a\nk = 1\n"), ConfigError);     // unterminated section
    CHECK_THROWS_AS(IniFile::parse_text("[a]\nnonsense\n"), ConfigError); // no equals
    IniFile ini = IniFile::parse_text("[a]\n# comment\nk = v ; kept verbatim\n");
    CHECK(ini.find("a")->get("k") == "v ; kept verbatim");
}

TEST_CASE("toy pipeline end to end") {
    ToyEnv env;
    ExperimentConfig cfg = ExperimentConfig::load(env.config_path);
    Pipeline pipe(cfg);

    const NetworkModel& net = pipe.model();
    double acc = evaluate_accuracy(net, pipe.test_split());
    CHECK(acc > 0.9);  // separable patterns

    const TrustedSet& trusted = pipe.trusted();
    CHECK(trusted.total() > 0);
    CHECK(pipe.trusted_test().size() <= 60);

    SUBCASE("fused signature aggregation equals the per-CAM reference aggregators") {
        pipe.build_signatures();
        SrcSignature ref_src = aggregate_src(trusted, net, cfg.monitor.taps);
        CHECK(pipe.src_signature().vmin == ref_src.vmin);
        CHECK(pipe.src_signature().vmax == ref_src.vmax);
        MrcSignature ref_mrc = aggregate_mrc(trusted, net, cfg.monitor.taps, 4);
        CHECK(pipe.mrc_signature(4).lambda == ref_mrc.lambda);
        NrcSignature ref_nrc = aggregate_nrc(trusted, net, cfg.monitor.taps, 2);
        CHECK(pipe.nrc_signature().lambda == ref_nrc.lambda);
        KnncSignature ref_knnc = aggregate_knnc(trusted, net, cfg.monitor.taps);
        REQUIRE(pipe.knnc_views().size() == 3);
        CHECK(pipe.knnc_views()[0].rows_n == ref_knnc.data[0].rows_n());
        for (int64_t i = 0; i < ref_knnc.data[0].rows_n() * ref_knnc.data[0].width; ++i)
            CHECK(pipe.knnc_views()[0].rows[i] == ref_knnc.data[0].rows[static_cast<size_t>(i)]);
    }

    SUBCASE("trusted members evaluate safe under the SRC invariant") {
        pipe.build_signatures();
        const auto& img =
            pipe.train_split().images[static_cast<size_t>(trusted.per_class[0].front())];
        ForwardResult res = forward(net, img.pixels, cfg.monitor.taps);
        Confidence c = confidence_src(res.taps, pipe.src_signature(), res.predicted, 10.0);
        CHECK(c.eta == 0.0);
        CHECK(c.c == 1.0);
    }

    SUBCASE("evaluation report: accounting, rule consistency and CSV round-trip") {
        DetectionReport report = pipe.evaluate();
        REQUIRE(report.rows.size() >= 1);
        CHECK(report.rows.back().input_type == "Safe Samples");
        // column order: config cams then baselines
        REQUIRE(report.detectors.size() == 7);
        CHECK(report.detectors[0] == "src");
        CHECK(report.detectors[4] == "knnc");
        CHECK(report.detectors[5] == "vg");
        CHECK(report.detectors[6] == "fs");
        for (const auto& row : report.rows) {
            CHECK(row.accuracy.size() == report.detectors.size());
            for (size_t d = 0; d < report.detectors.size(); ++d) {
                CHECK(row.accepted[d] >= 0);
                CHECK(row.accepted[d] <= row.total);  // accepted + rejected = total
                CHECK(row.accuracy[d] >= 0.0);
                CHECK(row.accuracy[d] <= 1.0);
            }
        }
        // safe-row accuracy equals the accepted fraction (safe <=> c >= 0.5)
        const auto& safe = report.rows.back();
        if (safe.total > 0)
            for (size_t d = 0; d < report.detectors.size(); ++d)
                CHECK(safe.accuracy[d] ==
                      doctest::Approx(static_cast<double>(safe.accepted[d]) / safe.total));

        std::string csv = detection_report_csv(report);
        DetectionReport parsed = detection_report_from_csv(csv);
        CHECK(parsed.detectors == report.detectors);
        REQUIRE(parsed.rows.size() == report.rows.size());
        for (size_t r = 0; r < report.rows.size(); ++r) {
            CHECK(parsed.rows[r].input_type == report.rows[r].input_type);
            CHECK(parsed.rows[r].total == report.rows[r].total);
            CHECK(parsed.rows[r].accuracy == report.rows[r].accuracy);
            CHECK(parsed.rows[r].accepted == report.rows[r].accepted);
        }

        // empty roster renders a header-only CSV
        DetectionReport empty;
        empty.detectors = report.detectors;
        std::string empty_csv = detection_report_csv(empty);
        CHECK(std::count(empty_csv.begin(), empty_csv.end(), '\n') == 1);
    }

    SUBCASE("rerunning the pipeline with the identical config is byte-identical") {
        pipe.evaluate();
        std::string first = read_text_file(env.out / "report-detection.csv");
        // a fresh pipeline object reuses cached artifacts but recomputes costs
        Pipeline again(ExperimentConfig::load(env.config_path));
        again.evaluate();
        CHECK(read_text_file(env.out / "report-detection.csv") == first);

        // and a cold rerun from scratch reproduces it too (full determinism)
        fs::remove_all(env.out / "cache");
        Pipeline cold(ExperimentConfig::load(env.config_path));
        cold.evaluate();
        CHECK(read_text_file(env.out / "report-detection.csv") == first);
    }

    SUBCASE("bench reports cover every cam and tap with positive timings") {
        BenchReport lat = pipe.bench_latency();
        CHECK(lat.latency.size() == cfg.monitor.cams.size() * cfg.bench.installations.size());
        for (const auto& row : lat.latency) {
            CHECK(row.mean_us > 0.0);
            CHECK(row.p95_us > 0.0);
        }
        BenchReport mem = pipe.bench_memory();
        CHECK(mem.memory.size() == cfg.monitor.cams.size() * cfg.monitor.taps.size());
        for (const auto& row : mem.memory) {
            CHECK(row.file_bytes > row.payload_bytes);  // payload plus framing
            fs::path f = env.out / "bench-signatures" / (row.cam + "-tap" +
                                                         std::to_string(row.tap_id) + ".cvsg");
            CHECK(fs::file_size(f) == row.file_bytes);
        }
        // measured payload equals the analytic size formula on every tap file
        for (const auto& row : mem.memory) {
            if (row.cam != "src") continue;
            auto [sig, thr] = read_signature(env.out / "bench-signatures" /
                                             (row.cam + "-tap" + std::to_string(row.tap_id) + ".cvsg"));
            const auto& s = std::get<SrcSignature>(sig);
            uint64_t present = 0;
            for (auto n : s.class_samples) present += n > 0;
            CHECK(row.payload_bytes ==
                  analytic_tap_payload_bytes(CamKind::kSrc, static_cast<uint64_t>(s.taps[0].width),
                                             static_cast<uint32_t>(present), 0, 0));
        }
    }

    SUBCASE("epsilon sweep rows carry the closed-form confidence") {
        auto rows = pipe.epsilon_sweep();
        REQUIRE(rows.size() == 2);
        CHECK(rows[0].epsilon == 0.0);
        CHECK(rows[1].mean_eta >= rows[0].mean_eta);       // more perturbation, more cost
        CHECK(rows[1].mean_confidence <= rows[0].mean_confidence);
    }

    SUBCASE("adaptive roundtrip produces paired reports and never raises thresholds") {
        AdaptiveOutcome outcome = pipe.adaptive_roundtrip();
        CHECK(outcome.before.rows.size() == outcome.after.rows.size());
        bool has_gamma_row = false;
        for (const auto& row : outcome.before.rows)
            has_gamma_row |= row.input_type.find("Signature-Attack") != std::string::npos;
        CHECK(has_gamma_row);
        for (const auto& [cam, shift] : outcome.tau_shift) CHECK(shift <= 1.0 + 1e-9);
    }
}

TEST_CASE("stage failures carry the stage name and a distinct error") {
    ToyEnv env;
    // corrupt the dataset cache: fetch must fail with the stage name
    std::ofstream f(env.cache / "toy" / "train-images-idx3-ubyte", std::ios::trunc);
    f << "junk";
    f.close();
    ExperimentConfig cfg = ExperimentConfig::load(env.config_path);
    Pipeline pipe(cfg);
    try {
        pipe.model();
        FAIL("expected a stage error");
    } catch (const StageError& e) {
        CHECK(e.stage == "fetch");
    }
}

TEST_CASE("adversarial record files round-trip and verify") {
    fs::path dir = fs::temp_directory_path() / "covmon-ae-test";
    fs::create_directories(dir);
    std::vector<AdversarialRecord> records(3);
    std::mt19937_64 rng(5);
    for (size_t i = 0; i < records.size(); ++i) {
        records[i].method = 1;
        records[i].config_hash = 0xdeadbeefull + i;
        records[i].source_index = static_cast<int32_t>(10 + i);
        records[i].source_label = 2;
        records[i].predicted = 7;
        records[i].score = 0.91f;
        Tensor img({1, 4, 4});
        for (auto& v : img.values()) v = static_cast<float>(rng() % 256) / 255.0f;
        records[i].image = img;
    }
    write_adversarial_set(dir / "set.cvae", records);
    auto loaded = read_adversarial_set(dir / "set.cvae");
    REQUIRE(loaded.size() == 3);
    CHECK(loaded[1].config_hash == records[1].config_hash);
    CHECK(loaded[2].image.values() == records[2].image.values());

    // corruption is caught
    std::fstream fx(dir / "set.cvae", std::ios::binary | std::ios::in | std::ios::out);
    fx.seekp(30);
    char c = 0x77;
    fx.write(&c, 1);
    fx.close();
    CHECK_THROWS_AS(read_adversarial_set(dir / "set.cvae"), ChecksumMismatchError);
}
