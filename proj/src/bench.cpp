#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <numeric>
#include <sstream>

#include "covmon/attacks.hpp"
#include "covmon/grad.hpp"
#include "covmon/log.hpp"
#include "covmon/pipeline.hpp"

namespace covmon {

namespace fs = std::filesystem;

namespace {

std::string install_label(const TapSet& taps) {
    std::ostringstream ss;
    ss << '{';
    for (size_t i = 0; i < taps.size(); ++i) {
        if (i) ss << ',';
        ss << taps[i];
    }
    ss << '}';
    return ss.str();
}

// signature restricted to a subset of its taps (index surgery, no re-aggregation)
template <typename Sig>
Sig slice_taps(const Sig& sig, const TapSet& keep) {
    Sig out = sig;
    std::vector<size_t> idx;
    for (int id : keep)
        for (size_t t = 0; t < sig.taps.size(); ++t)
            if (sig.taps[t].tap_id == id) idx.push_back(t);
    out.taps.clear();
    for (size_t t : idx) out.taps.push_back(sig.taps[t]);
    if constexpr (requires { out.vmin; }) {
        for (int c = 0; c < sig.class_count; ++c) {
            std::vector<std::vector<float>> nv, nx;
            for (size_t t : idx) {
                nv.push_back(sig.vmin[c][t]);
                nx.push_back(sig.vmax[c][t]);
            }
            out.vmin[c] = std::move(nv);
            out.vmax[c] = std::move(nx);
        }
    }
    if constexpr (requires { out.lambda; }) {
        for (int c = 0; c < sig.class_count; ++c) {
            std::vector<std::vector<float>> nl;
            for (size_t t : idx) nl.push_back(sig.lambda[c][t]);
            out.lambda[c] = std::move(nl);
        }
    }
    return out;
}

struct Timer {
    std::chrono::steady_clock::time_point t0;
    void start() { t0 = std::chrono::steady_clock::now(); }
    double stop_us() const {
        return std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0)
            .count();
    }
};

double mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double p95(std::vector<double> v) {
    size_t k = static_cast<size_t>(0.95 * static_cast<double>(v.size() - 1));
    std::nth_element(v.begin(), v.begin() + static_cast<ptrdiff_t>(k), v.end());
    return v[k];
}

}  // namespace

BenchReport Pipeline::bench_latency() {
    const ExperimentConfig& cfg = config();
    const NetworkModel& net = model();
    const auto& test = test_split();
    const auto& pool = trusted_test();
    calibrate_thresholds();

    std::vector<const Tensor*> inputs;
    for (int i = 0; i < cfg.bench.inferences + cfg.bench.warmup; ++i)
        inputs.push_back(
            &test.images[static_cast<size_t>(pool[static_cast<size_t>(i) % pool.size()])].pixels);

    // capped in-memory kNNC signature for the timing runs
    std::vector<KnncTapData> bench_knnc;
    bool has_knnc = false;
    for (const auto& cam : cfg.monitor.cams) has_knnc |= cam == "knnc";
    if (has_knnc) {
        const auto& views = knnc_views();
        int64_t total = views.empty() ? 0 : views[0].rows_n;
        int64_t cap = std::min<int64_t>(static_cast<int64_t>(cfg.bench.knnc_rows_cap), total);
        for (const auto& view : views) {
            KnncTapData d;
            d.tap_id = view.tap_id;
            d.width = view.width;
            // proportional per-class prefix so every class stays represented
            int64_t taken = 0;
            int64_t row = 0;
            for (int c = 0; c < config().classes && row < view.rows_n; ++c) {
                int64_t class_rows = 0;
                int64_t begin = row;
                while (row < view.rows_n && view.labels[row] == c) {
                    ++class_rows;
                    ++row;
                }
                int64_t quota = cap * class_rows / total;
                for (int64_t r = begin; r < begin + quota && taken < cap; ++r, ++taken) {
                    d.rows.insert(d.rows.end(), view.rows + r * view.width,
                                  view.rows + (r + 1) * view.width);
                    d.labels.push_back(c);
                }
            }
            bench_knnc.push_back(std::move(d));
        }
    }

    BenchReport report;
    const double tau = 10.0;

    // bare inference baseline in the same process
    std::vector<double> bare(static_cast<size_t>(cfg.bench.inferences));
    {
        Timer timer;
        for (int i = 0; i < cfg.bench.warmup; ++i) (void)forward(net, *inputs[static_cast<size_t>(i)]);
        for (int i = 0; i < cfg.bench.inferences; ++i) {
            timer.start();
            ForwardResult res = forward(net, *inputs[static_cast<size_t>(cfg.bench.warmup + i)]);
            bare[static_cast<size_t>(i)] = timer.stop_us();
            (void)res;
        }
    }
    double bare_mean = mean(bare);

    for (const auto& cam : cfg.monitor.cams) {
        for (const TapSet& taps : cfg.bench.installations) {
            // monitored inference: forward with taps + confidence evaluation
            std::optional<SrcSignature> src_s;
            std::optional<MrcSignature> mrc_s;
            std::optional<NrcSignature> nrc_s;
            std::vector<KnncTapData> knnc_s;
            std::vector<KnncTapView> knnc_v;
            if (cam == "src") src_s = slice_taps(src_signature(), taps);
            else if (cam == "mrc16") mrc_s = slice_taps(mrc_signature(cfg.monitor.mrc16_sections), taps);
            else if (cam == "mrc32") mrc_s = slice_taps(mrc_signature(cfg.monitor.mrc32_sections), taps);
            else if (cam == "nrc") nrc_s = slice_taps(nrc_signature(), taps);
            else if (cam == "knnc") {
                for (const auto& d : bench_knnc)
                    for (int id : taps)
                        if (d.tap_id == id) knnc_s.push_back(d);
                for (auto& d : knnc_s) knnc_v.push_back(d.view());
                if (knnc_v.empty()) continue;
            }

            std::vector<double> samples(static_cast<size_t>(cfg.bench.inferences));
            Timer timer;
            volatile double sink = 0.0;
            for (int i = 0; i < cfg.bench.warmup; ++i)
                (void)forward(net, *inputs[static_cast<size_t>(i)], taps);
            for (int i = 0; i < cfg.bench.inferences; ++i) {
                const Tensor& x = *inputs[static_cast<size_t>(cfg.bench.warmup + i)];
                timer.start();
                ForwardResult res = forward(net, x, taps);
                Confidence c{};
                if (src_s) c = confidence_src(res.taps, *src_s, res.predicted, tau);
                else if (mrc_s) c = confidence_mrc(res.taps, *mrc_s, res.predicted, tau);
                else if (nrc_s) c = confidence_nrc(res.taps, *nrc_s, res.predicted, tau);
                else {
                    double eta = knnc_eta(res.taps, knnc_v, res.predicted, cfg.monitor.knnc_g,
                                          cfg.monitor.knnc_mode);
                    c = {cost_confidence(eta, tau), eta, res.predicted};
                }
                samples[static_cast<size_t>(i)] = timer.stop_us();
                sink = sink + c.c;
            }
            BenchLatencyRow row;
            row.cam = cam;
            row.installation = install_label(taps);
            row.bare_mean_us = bare_mean;
            row.mean_us = mean(samples);
            row.p95_us = p95(samples);
            row.overhead_pct = 100.0 * (row.mean_us - bare_mean) / bare_mean;
            report.latency.push_back(row);
        }
    }
    write_text_file(cfg.out_dir / "bench-latency.csv", bench_latency_csv(report));
    return report;
}

BenchReport Pipeline::bench_memory() {
    const ExperimentConfig& cfg = config();
    build_signatures();
    BenchReport report;
    fs::path dir = cfg.out_dir / "bench-signatures";
    fs::create_directories(dir);

    auto add_row = [&](const std::string& cam, const TapLayout& tap, const AnySignature& sliced,
                       uint32_t param) {
        fs::path path = dir / (cam + "-tap" + std::to_string(tap.tap_id) + ".cvsg");
        uint64_t file_bytes = write_signature(sliced, std::nullopt, path);
        BenchMemoryRow row;
        row.cam = cam;
        row.tap_id = tap.tap_id;
        uint64_t present = 0, rows = 0;
        for (uint64_t s : std::visit([](const auto& s2) { return s2.class_samples; }, sliced)) {
            present += s > 0;
            rows += s;
        }
        row.payload_bytes = analytic_tap_payload_bytes(signature_cam(sliced),
                                                       static_cast<uint64_t>(tap.width),
                                                       static_cast<uint32_t>(present), param, rows);
        row.file_bytes = file_bytes;
        report.memory.push_back(row);
    };

    for (const auto& cam : cfg.monitor.cams) {
        if (cam == "src") {
            for (const auto& tap : src_signature().taps)
                add_row(cam, tap, slice_taps(src_signature(), {tap.tap_id}), 0);
        } else if (cam == "mrc16" || cam == "mrc32") {
            const auto& sig = mrc_signature(cam == "mrc16" ? cfg.monitor.mrc16_sections
                                                           : cfg.monitor.mrc32_sections);
            for (const auto& tap : sig.taps)
                add_row(cam, tap, slice_taps(sig, {tap.tap_id}),
                        static_cast<uint32_t>(sig.sections));
        } else if (cam == "nrc") {
            for (const auto& tap : nrc_signature().taps)
                add_row(cam, tap, slice_taps(nrc_signature(), {tap.tap_id}), 0);
        } else if (cam == "knnc") {
            // stream one single-tap file per tap straight from the mapped rows
            const auto& views = knnc_views();
            std::vector<uint64_t> class_samples;
            {
                std::vector<uint64_t> counts(static_cast<size_t>(config().classes), 0);
                if (!views.empty())
                    for (int64_t r = 0; r < views[0].rows_n; ++r)
                        counts[static_cast<size_t>(views[0].labels[r])]++;
                class_samples = counts;
            }
            for (const auto& view : views) {
                TapLayout layout{view.tap_id, view.width, 1};
                fs::path path = dir / ("knnc-tap" + std::to_string(view.tap_id) + ".cvsg");
                KnncFileWriter writer(path, {layout}, class_samples);
                for (int64_t r = 0; r < view.rows_n; ++r) {
                    ActiveState state;
                    state.taps.push_back(
                        {view.tap_id, std::vector<float>(view.rows + r * view.width,
                                                         view.rows + (r + 1) * view.width)});
                    writer.append(view.labels[r], state);
                }
                uint64_t file_bytes = writer.finalize(std::nullopt);
                BenchMemoryRow row;
                row.cam = cam;
                row.tap_id = view.tap_id;
                row.payload_bytes = analytic_tap_payload_bytes(
                    CamKind::kKnnc, static_cast<uint64_t>(view.width), 0, 0,
                    static_cast<uint64_t>(view.rows_n));
                row.file_bytes = file_bytes;
                report.memory.push_back(row);
            }
        }
    }
    write_text_file(cfg.out_dir / "bench-memory.csv", bench_memory_csv(report));
    return report;
}

std::vector<SweepRow> Pipeline::epsilon_sweep() {
    const ExperimentConfig& cfg = config();
    const NetworkModel& net = model();
    const auto& test = test_split();
    const SrcSignature& sig = src_signature();
    const ThresholdSet& tau = thresholds("src");

    std::vector<SweepRow> rows;
    for (double eps : cfg.sweep.epsilons) {
        double sum_eta = 0.0, sum_c = 0.0;
        int64_t adversarial = 0;
        for (size_t i = 0; i < test.images.size(); ++i) {
            const auto& img = test.images[i];
            Tensor attacked = img.pixels;
            if (eps > 0.0) attacked = fgsm(net, img.pixels, img.label, eps).image;
            ForwardResult res = forward(net, attacked, cfg.monitor.taps);
            double eta = static_cast<double>(src_eta(res.taps, sig, res.predicted));
            sum_eta += eta;
            sum_c += cost_confidence(eta, tau.tau[static_cast<size_t>(res.predicted)]);
            adversarial += res.predicted != img.label && res.score > 0.8f;
        }
        SweepRow row;
        row.epsilon = eps;
        row.mean_eta = sum_eta / static_cast<double>(test.images.size());
        row.mean_confidence = sum_c / static_cast<double>(test.images.size());
        row.adversarial_fraction =
            static_cast<double>(adversarial) / static_cast<double>(test.images.size());
        rows.push_back(row);
        log_info("sweep eps=" + std::to_string(eps) + " mean_eta=" + std::to_string(row.mean_eta));
    }
    write_text_file(cfg.out_dir / "sweep.csv", sweep_csv(rows));
    return rows;
}

}  // namespace covmon
