#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

#include "covmon/cam.hpp"
#include "covmon/store.hpp"

using namespace covmon;
namespace fs = std::filesystem;

namespace {

fs::path tmp_file(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "covmon-store-test";
    fs::create_directories(dir);
    return dir / name;
}

NetworkModel probe_model(int channels, int width, int classes) {
    NetworkModel m({channels, 1, width},
                   {LayerSpec::tap(1), LayerSpec::fc(classes), LayerSpec::softmax()}, classes);
    return m;
}

TrustedSet trust(const DatasetSplit& split, int classes) {
    TrustedSet t;
    t.source = &split;
    t.per_class.resize(static_cast<size_t>(classes));
    for (size_t i = 0; i < split.images.size(); ++i)
        t.per_class[static_cast<size_t>(split.images[i].label)].push_back(static_cast<int32_t>(i));
    return t;
}

DatasetSplit random_split(std::mt19937_64& rng, int n, int channels, int width, int classes) {
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    DatasetSplit split;
    for (int i = 0; i < n; ++i) {
        std::vector<float> v(static_cast<size_t>(channels * width));
        for (auto& x : v) x = dist(rng);
        split.images.push_back({Tensor({channels, 1, width}, std::move(v)), i % classes});
    }
    return split;
}

ThresholdSet toy_thresholds(CamKind cam, const std::vector<TapLayout>& taps, int classes) {
    ThresholdSet t;
    t.cam_id = static_cast<uint8_t>(cam);
    t.fingerprint = config_fingerprint(cam, 0, taps, classes);
    for (int c = 0; c < classes; ++c) {
        t.tau.push_back(1.5 + c);
        t.youden_j.push_back(0.25 * c);
    }
    return t;
}

}  // namespace

TEST_CASE("tap payload bytes follow the analytic formula") {
    // SRC, 1 class, 3 neurons -> 3*2*4 = 24 bytes
    CHECK(analytic_tap_payload_bytes(CamKind::kSrc, 3, 1, 0, 0) == 24);
    CHECK(analytic_tap_payload_bytes(CamKind::kSrc, 11520, 10, 0, 0) == 921600);
    CHECK(analytic_tap_payload_bytes(CamKind::kMrc, 11520, 10, 16, 0) == 8294400);
    CHECK(analytic_tap_payload_bytes(CamKind::kMrc, 500, 10, 32, 0) == 680000);
    CHECK(analytic_tap_payload_bytes(CamKind::kNrc, 3200, 10, 2, 0) == 128000);
    CHECK(analytic_tap_payload_bytes(CamKind::kKnnc, 11520, 10, 0, 59309) == 2732958720ull);
}

TEST_CASE("every CAM round-trips through the container") {
    std::mt19937_64 rng(42);
    NetworkModel m = probe_model(2, 4, 3);
    DatasetSplit split = random_split(rng, 24, 2, 4, 3);
    TrustedSet t = trust(split, 3);
    auto taps = tap_layouts(m, {1});

    SUBCASE("SRC with thresholds") {
        SrcSignature sig = aggregate_src(t, m, {1});
        auto path = tmp_file("src.sig");
        uint64_t bytes = write_signature(sig, toy_thresholds(CamKind::kSrc, taps, 3), path);
        CHECK(bytes == fs::file_size(path));
        CHECK(bytes == analytic_file_bytes(CamKind::kSrc, taps, sig.class_samples, 0, true));
        auto [loaded, thr] = read_signature(path);
        const auto& s = std::get<SrcSignature>(loaded);
        CHECK(s.vmin == sig.vmin);
        CHECK(s.vmax == sig.vmax);
        CHECK(s.class_samples == sig.class_samples);
        CHECK(s.taps == sig.taps);
        REQUIRE(thr.has_value());
        CHECK(thr->tau == std::vector<double>{1.5, 2.5, 3.5});
        CHECK(thr->fingerprint == config_fingerprint(CamKind::kSrc, 0, taps, 3));
    }

    SUBCASE("MRC field-by-field") {
        MrcSignature sig = aggregate_mrc(t, m, {1}, 8);
        auto path = tmp_file("mrc.sig");
        uint64_t bytes = write_signature(sig, std::nullopt, path);
        CHECK(bytes == analytic_file_bytes(CamKind::kMrc, taps, sig.class_samples, 8, false));
        auto [loaded, thr] = read_signature(path);
        const auto& s = std::get<MrcSignature>(loaded);
        CHECK(!thr.has_value());
        CHECK(s.sections == 8);
        CHECK(s.vmin == sig.vmin);
        CHECK(s.vmax == sig.vmax);
        CHECK(s.lambda == sig.lambda);
    }

    SUBCASE("NRC") {
        NrcSignature sig = aggregate_nrc(t, m, {1}, 2);
        auto path = tmp_file("nrc.sig");
        uint64_t bytes = write_signature(sig, std::nullopt, path);
        CHECK(bytes == analytic_file_bytes(CamKind::kNrc, taps, sig.class_samples, 2, false));
        auto [loaded, thr] = read_signature(path);
        CHECK(std::get<NrcSignature>(loaded).lambda == sig.lambda);
        CHECK(std::get<NrcSignature>(loaded).top_p == 2);
    }

    SUBCASE("kNNC with rows and labels") {
        KnncSignature sig = aggregate_knnc(t, m, {1});
        auto path = tmp_file("knnc.sig");
        uint64_t bytes = write_signature(sig, std::nullopt, path);
        CHECK(bytes == analytic_file_bytes(CamKind::kKnnc, taps, sig.class_samples, 0, false));
        auto [loaded, thr] = read_signature(path);
        const auto& s = std::get<KnncSignature>(loaded);
        CHECK(s.data[0].rows == sig.data[0].rows);
        CHECK(s.data[0].labels == sig.data[0].labels);
    }

    SUBCASE("empty-class markers survive the round trip") {
        DatasetSplit partial;
        partial.images.push_back(split.images[0]);  // only one class present
        TrustedSet tp = trust(partial, 3);
        SrcSignature sig = aggregate_src(tp, m, {1});
        auto path = tmp_file("partial.sig");
        write_signature(sig, std::nullopt, path);
        auto [loaded, thr] = read_signature(path);
        const auto& s = std::get<SrcSignature>(loaded);
        CHECK(s.class_present(0) == sig.class_present(0));
        CHECK(!s.class_present(1));
        CHECK(!s.class_present(2));
    }
}

TEST_CASE("container failure modes are distinct") {
    std::mt19937_64 rng(7);
    NetworkModel m = probe_model(1, 3, 2);
    DatasetSplit split = random_split(rng, 8, 1, 3, 2);
    SrcSignature sig = aggregate_src(trust(split, 2), m, {1});
    auto path = tmp_file("failures.sig");
    write_signature(sig, std::nullopt, path);

    SUBCASE("truncated file -> checksum error, no partial signature") {
        auto bytes_path = tmp_file("trunc.sig");
        fs::copy_file(path, bytes_path, fs::copy_options::overwrite_existing);
        fs::resize_file(bytes_path, fs::file_size(bytes_path) - 9);
        CHECK_THROWS_AS(read_signature(bytes_path), ChecksumMismatchError);
    }

    SUBCASE("bad magic") {
        auto bad = tmp_file("magic.sig");
        fs::copy_file(path, bad, fs::copy_options::overwrite_existing);
        std::fstream f(bad, std::ios::binary | std::ios::in | std::ios::out);
        f.write("JUNK", 4);
        f.close();
        CHECK_THROWS_AS(read_signature(bad), BadMagicError);
    }

    SUBCASE("version skew names both versions") {
        auto skew = tmp_file("skew.sig");
        fs::copy_file(path, skew, fs::copy_options::overwrite_existing);
        std::fstream f(skew, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4);
        uint32_t v2 = kStoreVersion + 1;
        f.write(reinterpret_cast<const char*>(&v2), 4);
        f.close();
        try {
            read_signature(skew);
            FAIL("expected version skew");
        } catch (const VersionSkewError& e) {
            CHECK(e.found == kStoreVersion + 1);
            CHECK(e.supported == kStoreVersion);
        }
    }

    SUBCASE("flipped payload byte -> checksum mismatch") {
        auto flip = tmp_file("flip.sig");
        fs::copy_file(path, flip, fs::copy_options::overwrite_existing);
        std::fstream f(flip, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(40);
        char c = 0x5A;
        f.write(&c, 1);
        f.close();
        CHECK_THROWS_AS(read_signature(flip), ChecksumMismatchError);
    }
}

TEST_CASE("file size is a pure function of the layout") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 12; ++trial) {
        int channels = 1 + static_cast<int>(rng() % 3);
        int width = 2 + static_cast<int>(rng() % 5);
        int classes = 2 + static_cast<int>(rng() % 3);
        int n = classes * (1 + static_cast<int>(rng() % 6));
        NetworkModel m = probe_model(channels, width, classes);
        DatasetSplit split = random_split(rng, n, channels, width, classes);
        TrustedSet t = trust(split, classes);
        auto taps = tap_layouts(m, {1});

        int q = 2 + static_cast<int>(rng() % 14);
        MrcSignature mrc = aggregate_mrc(t, m, {1}, q);
        CHECK(write_signature(mrc, std::nullopt, tmp_file("fs_mrc.sig")) ==
              analytic_file_bytes(CamKind::kMrc, taps, mrc.class_samples, static_cast<uint32_t>(q),
                                  false));
        KnncSignature knnc = aggregate_knnc(t, m, {1});
        CHECK(write_signature(knnc, std::nullopt, tmp_file("fs_knnc.sig")) ==
              analytic_file_bytes(CamKind::kKnnc, taps, knnc.class_samples, 0, false));
    }
}

TEST_CASE("model weights round-trip through the model section") {
    NetworkModel m = probe_model(2, 3, 3);
    m.init_weights(123);
    auto path = tmp_file("model.sig");
    uint64_t bytes = write_model(m, path);
    CHECK(bytes == fs::file_size(path));
    NetworkModel loaded = read_model(path);
    CHECK(loaded.class_count() == 3);
    CHECK(loaded.input_shape() == m.input_shape());
    for (size_t i = 0; i < m.layers().size(); ++i) {
        CHECK(loaded.weight(i).values() == m.weight(i).values());
        CHECK(loaded.bias(i).values() == m.bias(i).values());
    }
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    Tensor x({2, 1, 3});
    for (auto& v : x.values()) v = dist(rng);
    ForwardResult a = forward(m, x), b = forward(loaded, x);
    for (int64_t i = 0; i < a.logits.numel(); ++i) CHECK(a.logits[i] == b.logits[i]);
}

TEST_CASE("rewriting thresholds keeps the signature intact") {
    std::mt19937_64 rng(3);
    NetworkModel m = probe_model(1, 4, 2);
    DatasetSplit split = random_split(rng, 10, 1, 4, 2);
    SrcSignature sig = aggregate_src(trust(split, 2), m, {1});
    auto path = tmp_file("rethr.sig");
    write_signature(sig, std::nullopt, path);
    ThresholdSet t = toy_thresholds(CamKind::kSrc, sig.taps, 2);
    rewrite_thresholds(path, t);
    auto [loaded, thr] = read_signature(path);
    CHECK(std::get<SrcSignature>(loaded).vmin == sig.vmin);
    REQUIRE(thr.has_value());
    CHECK(thr->tau == t.tau);
    // a second rewrite replaces, not duplicates
    t.tau[0] = 9.0;
    rewrite_thresholds(path, t);
    auto [loaded2, thr2] = read_signature(path);
    CHECK(thr2->tau[0] == 9.0);
}

TEST_CASE("streaming kNNC writer matches the in-memory writer and maps back") {
    std::mt19937_64 rng(21);
    NetworkModel m = probe_model(2, 5, 3);
    DatasetSplit split = random_split(rng, 21, 2, 5, 3);
    TrustedSet t = trust(split, 3);
    KnncSignature mem = aggregate_knnc(t, m, {1});

    auto layouts = tap_layouts(m, {1});
    std::vector<uint64_t> per_class;
    for (const auto& cls : t.per_class) per_class.push_back(cls.size());
    auto path = tmp_file("stream.knnc");
    KnncFileWriter writer(path, layouts, per_class);
    for (int c = 0; c < 3; ++c)
        for (int32_t i : t.per_class[static_cast<size_t>(c)])
            writer.append(c, forward(m, split.images[static_cast<size_t>(i)].pixels, {1}).taps);
    uint64_t bytes = writer.finalize(toy_thresholds(CamKind::kKnnc, layouts, 3));
    CHECK(bytes == fs::file_size(path));
    CHECK(bytes == analytic_file_bytes(CamKind::kKnnc, layouts, mem.class_samples, 0, true));

    // the streamed file equals the in-memory signature
    auto [loaded, thr] = read_signature(path);
    const auto& s = std::get<KnncSignature>(loaded);
    CHECK(s.data[0].rows == mem.data[0].rows);
    CHECK(s.data[0].labels == mem.data[0].labels);
    REQUIRE(thr.has_value());

    // and the mapped view points at the same rows
    MappedKnncSignature mapped(path);
    CHECK(mapped.class_count() == 3);
    REQUIRE(mapped.views().size() == 1);
    CHECK(mapped.views()[0].rows_n == mem.data[0].rows_n());
    for (int64_t i = 0; i < mapped.views()[0].rows_n * 10; ++i)
        CHECK(mapped.views()[0].rows[i] == mem.data[0].rows[static_cast<size_t>(i)]);
    CHECK(mapped.thresholds().has_value());
}

TEST_CASE("golden fixture files parse to the expected signatures") {
    fs::path fixtures = fs::path(COVMON_SOURCE_DIR) / "tests" / "fixtures";
    if (!fs::exists(fixtures / "golden_src.sig")) {
        MESSAGE("fixtures not generated yet");
        return;
    }
    auto [src, thr] = read_signature(fixtures / "golden_src.sig");
    const auto& s = std::get<SrcSignature>(src);
    CHECK(s.class_count == 2);
    CHECK(s.taps.size() == 1);
    CHECK(s.vmin[0][0] == std::vector<float>{0.125f, 0.25f, 0.5f});
    CHECK(s.vmax[0][0] == std::vector<float>{1.0f, 2.0f, 4.0f});
    CHECK(s.vmin[1][0] == std::vector<float>{-1.0f, -2.0f, -4.0f});
    REQUIRE(thr.has_value());
    CHECK(thr->tau == std::vector<double>{10.0, 20.0});

    auto [mrc, t2] = read_signature(fixtures / "golden_mrc.sig");
    CHECK(std::get<MrcSignature>(mrc).sections == 4);
    auto [nrc, t3] = read_signature(fixtures / "golden_nrc.sig");
    CHECK(std::get<NrcSignature>(nrc).top_p == 2);
    auto [knnc, t4] = read_signature(fixtures / "golden_knnc.sig");
    CHECK(std::get<KnncSignature>(knnc).data[0].rows_n() == 3);
}
