#include "covmon/pipeline.hpp"

#include <Eigen/Core>
#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "covmon/attacks.hpp"
#include "covmon/grad.hpp"
#include "covmon/log.hpp"
#include "covmon/squeeze.hpp"
#include "covmon/threading.hpp"
#include "covmon/train.hpp"

namespace covmon {

namespace fs = std::filesystem;

namespace {

std::string hex16(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

CostSense cam_sense(const std::string& cam) {
    return cam == "nrc" ? CostSense::kSafetylike : CostSense::kCostlike;
}

// ---- adversarial record file ("CVAE"): simple flat records ---------------

constexpr uint32_t kAeMagic = 0x45415643u;  // "CVAE"

void put_u32(std::vector<uint8_t>& b, uint32_t v) { b.insert(b.end(), (uint8_t*)&v, (uint8_t*)&v + 4); }
void put_u64(std::vector<uint8_t>& b, uint64_t v) { b.insert(b.end(), (uint8_t*)&v, (uint8_t*)&v + 8); }

}  // namespace

void write_adversarial_set(const fs::path& path, const std::vector<AdversarialRecord>& records) {
    std::vector<uint8_t> b;
    put_u32(b, kAeMagic);
    put_u32(b, 1);  // version
    put_u64(b, records.size());
    for (const auto& r : records) {
        b.push_back(r.method);
        b.push_back(0);
        b.push_back(0);
        b.push_back(0);
        put_u64(b, r.config_hash);
        put_u32(b, static_cast<uint32_t>(r.source_index));
        put_u32(b, static_cast<uint32_t>(r.source_label));
        put_u32(b, static_cast<uint32_t>(r.predicted));
        put_u32(b, std::bit_cast<uint32_t>(r.score));
        put_u32(b, static_cast<uint32_t>(r.image.rank()));
        for (int64_t d : r.image.shape()) put_u64(b, static_cast<uint64_t>(d));
        const auto* p = reinterpret_cast<const uint8_t*>(r.image.data());
        b.insert(b.end(), p, p + r.image.numel() * 4);
    }
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, b.data(), static_cast<uInt>(b.size()));
    put_u32(b, static_cast<uint32_t>(crc));
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
        if (!out) throw StoreIoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::vector<AdversarialRecord> read_adversarial_set(const fs::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw StoreIoError("cannot open " + path.string());
    std::vector<uint8_t> b(static_cast<size_t>(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (b.size() < 20) throw ChecksumMismatchError("adversarial set file truncated");
    uint32_t stored;
    std::memcpy(&stored, b.data() + b.size() - 4, 4);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, b.data(), static_cast<uInt>(b.size() - 4));
    if (static_cast<uint32_t>(crc) != stored)
        throw ChecksumMismatchError("adversarial set checksum mismatch in " + path.string());
    size_t pos = 0;
    auto need = [&](size_t k) {
        if (pos + k > b.size() - 4) throw ChecksumMismatchError("adversarial set truncated");
    };
    auto u32 = [&] { uint32_t v; need(4); std::memcpy(&v, b.data() + pos, 4); pos += 4; return v; };
    auto u64 = [&] { uint64_t v; need(8); std::memcpy(&v, b.data() + pos, 8); pos += 8; return v; };
    if (u32() != kAeMagic) throw BadMagicError("not an adversarial set: " + path.string());
    if (u32() != 1) throw VersionSkewError(2, 1);
    uint64_t count = u64();
    std::vector<AdversarialRecord> records(count);
    for (auto& r : records) {
        need(4);
        r.method = b[pos];
        pos += 4;
        r.config_hash = u64();
        r.source_index = static_cast<int32_t>(u32());
        r.source_label = static_cast<int32_t>(u32());
        r.predicted = static_cast<int32_t>(u32());
        r.score = std::bit_cast<float>(u32());
        uint32_t rank = u32();
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) d = static_cast<int64_t>(u64());
        Tensor img(shape);
        need(static_cast<size_t>(img.numel()) * 4);
        std::memcpy(img.data(), b.data() + pos, static_cast<size_t>(img.numel()) * 4);
        pos += static_cast<size_t>(img.numel()) * 4;
        r.image = std::move(img);
    }
    return records;
}

// ---- batched kNNC cost ----------------------------------------------------

std::vector<double> knnc_eta_batch(const std::vector<KnncTapView>& taps,
                                   const std::vector<const float*>& row_sqnorms,
                                   const std::vector<const ActiveState*>& states,
                                   const std::vector<int>& predicted, int neighbors,
                                   KnncCount mode) {
    using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const size_t n = states.size();
    std::vector<double> eta(n, 0.0);
    const int64_t block = 512;
    std::vector<float> qbuf;
    std::vector<float> dists;
    std::vector<int32_t> order;
    for (size_t t = 0; t < taps.size(); ++t) {
        const KnncTapView& tap = taps[t];
        if (neighbors > tap.rows_n)
            throw std::invalid_argument("neighbor count exceeds stored rows");
        Eigen::Map<const RowMat> rows(tap.rows, tap.rows_n, tap.width);
        for (int64_t start = 0; start < static_cast<int64_t>(n); start += block) {
            int64_t bsz = std::min<int64_t>(block, static_cast<int64_t>(n) - start);
            qbuf.resize(static_cast<size_t>(bsz * tap.width));
            for (int64_t q = 0; q < bsz; ++q) {
                const auto* v = states[static_cast<size_t>(start + q)]->find(tap.tap_id);
                if (!v || static_cast<int64_t>(v->size()) != tap.width)
                    throw std::invalid_argument("active state does not match the kNNC layout");
                std::copy(v->begin(), v->end(), qbuf.begin() + q * tap.width);
            }
            Eigen::Map<const RowMat> queries(qbuf.data(), bsz, tap.width);
            RowMat prod = rows * queries.transpose();  // rows_n x bsz
            for (int64_t q = 0; q < bsz; ++q) {
                dists.resize(static_cast<size_t>(tap.rows_n));
                for (int64_t r = 0; r < tap.rows_n; ++r)
                    dists[static_cast<size_t>(r)] =
                        row_sqnorms[t][r] - 2.0f * prod(r, q);  // + |q|^2 constant, irrelevant
                order.resize(static_cast<size_t>(tap.rows_n));
                std::iota(order.begin(), order.end(), 0);
                std::nth_element(order.begin(), order.begin() + neighbors - 1, order.end(),
                                 [&](int32_t a, int32_t b2) {
                                     float da = dists[static_cast<size_t>(a)];
                                     float db = dists[static_cast<size_t>(b2)];
                                     return da < db || (da == db && a < b2);
                                 });
                int pred = predicted[static_cast<size_t>(start + q)];
                int64_t count = 0;
                for (int r = 0; r < neighbors; ++r) {
                    bool match = tap.labels[order[static_cast<size_t>(r)]] == pred;
                    count += (mode == KnncCount::kMismatch) ? !match : match;
                }
                eta[static_cast<size_t>(start + q)] += static_cast<double>(count);
            }
        }
    }
    return eta;
}

// ---- pipeline -------------------------------------------------------------

struct Pipeline::Impl {
    ExperimentConfig cfg;
    HttpTransport* transport = nullptr;
    std::unique_ptr<HttpTransport> owned_transport;

    std::optional<DatasetSplit> train_split, test_split;
    std::optional<NetworkModel> net;
    std::optional<TrustedSet> trusted_set;
    std::vector<int32_t> trusted_test_idx;

    std::optional<SrcSignature> src;
    std::optional<MrcSignature> mrc16, mrc32;
    std::optional<NrcSignature> nrc;
    std::optional<MappedKnncSignature> knnc;
    std::vector<KnncTapView> knnc_view_list;
    std::vector<std::vector<float>> knnc_sqnorms;
    std::vector<const float*> knnc_sqnorm_ptrs;

    std::map<std::string, ThresholdSet> taus;
    double vg_tau = 0.0, fs_tau = 0.0;
    bool calibrated = false;

    std::map<std::string, std::vector<AdversarialRecord>> attacks_by_name;

    fs::path cache_dir() const { return cfg.out_dir / "cache"; }
    fs::path model_path() const {
        return cache_dir() / ("model-" + hex16(cfg.stage_hash("train")) + ".cvsg");
    }
    fs::path trusted_path() const {
        return cache_dir() / ("trusted-" + hex16(cfg.stage_hash("trusted")) + ".bin");
    }
    fs::path sig_path(const std::string& cam) const {
        return cache_dir() / ("sig-" + cam + "-" + hex16(cfg.stage_hash("monitor")) + ".cvsg");
    }
    fs::path attack_path(const std::string& name) const {
        return cache_dir() / ("attack-" + name + "-" + hex16(cfg.stage_hash("roster")) + ".cvae");
    }
    fs::path thr_path(const std::string& cam) const {
        return cache_dir() / ("thr-" + cam + "-" + hex16(cfg.stage_hash("calibrate")) + ".cvsg");
    }
    fs::path baseline_thr_path() const {
        return cache_dir() / ("thr-baselines-" + hex16(cfg.stage_hash("calibrate")) + ".txt");
    }

    bool cam_enabled(const std::string& cam) const {
        return std::find(cfg.monitor.cams.begin(), cfg.monitor.cams.end(), cam) !=
               cfg.monitor.cams.end();
    }
    std::vector<std::string> eval_cams() const {
        return cfg.monitor.eval_cams.empty() ? cfg.monitor.cams : cfg.monitor.eval_cams;
    }

    // per-sample costs for every enabled CAM plus the baseline divergences
    struct EvalBlock {
        std::vector<int> predicted;
        std::map<std::string, std::vector<double>> eta;
        std::vector<double> vg, fs;
    };

    void ensure_dataset();
    void ensure_model();
    void ensure_trusted();
    void ensure_signatures();
    void ensure_attacks();
    void ensure_calibration();
    EvalBlock eval_costs(const std::vector<const Tensor*>& images,
                         const std::vector<std::string>& cams, bool with_baselines);
    double cam_param(const std::string& cam) const;
    CalibrationSet build_calibration_set(const std::string& cam,
                                         const std::vector<CalItem>& extra_unsafe);
    std::vector<CalItem> cached_safe_items;   // per cam? no: see cal_cache
    std::map<std::string, std::vector<CalItem>> cal_cache;  // cam -> safe+unsafe items
    std::vector<double> cal_vg, cal_fs;
    std::vector<bool> cal_unsafe_mask;

    DetectionReport evaluate_with(const std::map<std::string, ThresholdSet>& t, double vgt,
                                  double fst,
                                  const std::vector<std::pair<std::string,
                                                              std::vector<AdversarialRecord>>>& extra_rows,
                                  bool with_baselines, std::vector<std::string> cams = {});
    std::vector<AdversarialRecord> generate_one(const AttackEntry& entry);
};

Pipeline::Pipeline(ExperimentConfig cfg, HttpTransport* transport) : impl_(new Impl) {
    impl_->cfg = std::move(cfg);
    impl_->transport = transport;
    fs::create_directories(impl_->cache_dir());
}

Pipeline::~Pipeline() = default;

const ExperimentConfig& Pipeline::config() const { return impl_->cfg; }

void Pipeline::Impl::ensure_dataset() {
    if (train_split) return;
    HttpTransport* t = transport;
    if (!t) {
        bool cached = true;
        for (const DatasetFile* f : {&cfg.dataset_spec.train_images, &cfg.dataset_spec.train_labels,
                                     &cfg.dataset_spec.test_images, &cfg.dataset_spec.test_labels})
            cached &= fs::exists(cfg.cache_dir / cfg.dataset_spec.name / f->filename);
        if (!cached) {
            owned_transport = make_curl_transport();
            t = owned_transport.get();
        }
    }
    try {
        auto [train, test] = fetch_dataset(cfg.dataset_spec, cfg.cache_dir, t);
        train_split = std::move(train);
        test_split = std::move(test);
    } catch (const std::exception& e) {
        throw StageError("fetch", e.what());
    }
}

void Pipeline::Impl::ensure_model() {
    if (net) return;
    ensure_dataset();
    try {
        if (fs::exists(model_path())) {
            net = read_model(model_path());
            return;
        }
        log_info("training " + cfg.dataset + " model (" + std::to_string(cfg.train.epochs) +
                 " epochs, seed " + std::to_string(cfg.train.seed) + ")");
        TrainConfig tc = cfg.train;
        tc.verbose = true;
        net = train(build_lenet4(cfg.classes), *train_split, tc);
        write_model(*net, model_path());
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("train", e.what(), model_path().string());
    }
}

namespace {

void write_trusted_file(const fs::path& path, const TrustedSet& t,
                        const std::vector<int32_t>& test_idx) {
    std::vector<uint8_t> b;
    put_u32(b, 0x52545643u);  // "CVTR"
    put_u32(b, 1);
    put_u32(b, static_cast<uint32_t>(t.per_class.size()));
    for (const auto& cls : t.per_class) {
        put_u64(b, cls.size());
        const auto* p = reinterpret_cast<const uint8_t*>(cls.data());
        b.insert(b.end(), p, p + cls.size() * 4);
    }
    put_u64(b, test_idx.size());
    const auto* p = reinterpret_cast<const uint8_t*>(test_idx.data());
    b.insert(b.end(), p, p + test_idx.size() * 4);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, b.data(), static_cast<uInt>(b.size()));
    put_u32(b, static_cast<uint32_t>(crc));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

bool read_trusted_file(const fs::path& path, TrustedSet& t, std::vector<int32_t>& test_idx) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) return false;
    std::vector<uint8_t> b(static_cast<size_t>(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (b.size() < 16) return false;
    uint32_t stored;
    std::memcpy(&stored, b.data() + b.size() - 4, 4);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, b.data(), static_cast<uInt>(b.size() - 4));
    if (static_cast<uint32_t>(crc) != stored) return false;
    size_t pos = 8;
    uint32_t classes;
    std::memcpy(&classes, b.data() + pos, 4);
    pos += 4;
    t.per_class.assign(classes, {});
    for (auto& cls : t.per_class) {
        uint64_t n;
        std::memcpy(&n, b.data() + pos, 8);
        pos += 8;
        cls.resize(n);
        std::memcpy(cls.data(), b.data() + pos, n * 4);
        pos += n * 4;
    }
    uint64_t tn;
    std::memcpy(&tn, b.data() + pos, 8);
    pos += 8;
    test_idx.resize(tn);
    std::memcpy(test_idx.data(), b.data() + pos, tn * 4);
    return true;
}

}  // namespace

void Pipeline::Impl::ensure_trusted() {
    if (trusted_set) return;
    ensure_model();
    try {
        TrustedSet t;
        t.source = &*train_split;
        t.score_threshold = cfg.trusted_threshold;
        if (read_trusted_file(trusted_path(), t, trusted_test_idx)) {
            trusted_set = std::move(t);
            return;
        }
        log_info("selecting trusted set");
        trusted_set = select_trusted(*net, *train_split, cfg.trusted_threshold);
        trusted_test_idx =
            select_trusted_test(*net, *test_split, cfg.trusted_threshold, cfg.trusted_test_cap);
        write_trusted_file(trusted_path(), *trusted_set, trusted_test_idx);
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("trusted", e.what(), trusted_path().string());
    }
}

void Pipeline::Impl::ensure_signatures() {
    if (src || (!cam_enabled("src") && !cam_enabled("mrc16") && !cam_enabled("mrc32") &&
                !cam_enabled("nrc") && !cam_enabled("knnc")))
        if (src) return;
    ensure_trusted();
    const TapSet& taps = cfg.monitor.taps;
    auto layouts = tap_layouts(*net, taps);
    int classes = cfg.classes;
    try {
        bool have_all = true;
        for (const auto& cam : cfg.monitor.cams) have_all &= fs::exists(sig_path(cam));
        if (!have_all) {
            log_info("aggregating signatures over " + std::to_string(trusted_set->total()) +
                     " trusted samples");
            // pass A: SRC ranges + NRC counts + streamed kNNC rows
            SrcSignature ranges = SrcSignature::empty(layouts, classes);
            NrcPartial nrcp;
            nrcp.taps = layouts;
            nrcp.class_count = classes;
            nrcp.top_p = cfg.monitor.nrc_p;
            nrcp.class_samples.assign(static_cast<size_t>(classes), 0);
            nrcp.counts.resize(static_cast<size_t>(classes));
            for (int c = 0; c < classes; ++c) {
                nrcp.counts[c].resize(layouts.size());
                for (size_t t = 0; t < layouts.size(); ++t)
                    nrcp.counts[c][t].assign(static_cast<size_t>(layouts[t].width), 0);
            }
            std::unique_ptr<KnncFileWriter> knnc_writer;
            if (cam_enabled("knnc")) {
                std::vector<uint64_t> per_class;
                for (const auto& cls : trusted_set->per_class) per_class.push_back(cls.size());
                knnc_writer =
                    std::make_unique<KnncFileWriter>(sig_path("knnc"), layouts, per_class);
            }
            std::vector<int32_t> top;
            for (int c = 0; c < classes; ++c) {
                for (int32_t i : trusted_set->per_class[static_cast<size_t>(c)]) {
                    ForwardResult res =
                        forward(*net, train_split->images[static_cast<size_t>(i)].pixels, taps);
                    for (size_t t = 0; t < layouts.size(); ++t) {
                        const auto& v = *res.taps.find(layouts[t].tap_id);
                        auto& lo = ranges.vmin[c][t];
                        auto& hi = ranges.vmax[c][t];
                        for (size_t j = 0; j < v.size(); ++j) {
                            lo[j] = std::min(lo[j], v[j]);
                            hi[j] = std::max(hi[j], v[j]);
                        }
                        top_p_indices(v.data(), layouts[t].width, layouts[t].channels,
                                      cfg.monitor.nrc_p, top);
                        for (int32_t j : top) nrcp.counts[c][t][static_cast<size_t>(j)]++;
                    }
                    if (knnc_writer) knnc_writer->append(c, res.taps);
                }
                ranges.class_samples[c] = trusted_set->per_class[static_cast<size_t>(c)].size();
                nrcp.class_samples[c] = ranges.class_samples[c];
            }
            if (knnc_writer) knnc_writer->finalize(std::nullopt);
            if (cam_enabled("src")) write_signature(ranges, std::nullopt, sig_path("src"));
            if (cam_enabled("nrc")) write_signature(finalize_nrc(nrcp), std::nullopt, sig_path("nrc"));

            // pass B: MRC counts against the fixed ranges
            auto count_mrc = [&](int sections) {
                MrcPartial part;
                part.ranges = ranges;
                part.sections = sections;
                part.class_samples = ranges.class_samples;
                part.counts.resize(static_cast<size_t>(classes));
                for (int c = 0; c < classes; ++c) {
                    part.counts[c].resize(layouts.size());
                    for (size_t t = 0; t < layouts.size(); ++t)
                        part.counts[c][t].assign(
                            static_cast<size_t>(layouts[t].width) * sections, 0);
                }
                return part;
            };
            if (cam_enabled("mrc16") || cam_enabled("mrc32")) {
                MrcPartial p16 = count_mrc(cfg.monitor.mrc16_sections);
                MrcPartial p32 = count_mrc(cfg.monitor.mrc32_sections);
                for (int c = 0; c < classes; ++c) {
                    for (int32_t i : trusted_set->per_class[static_cast<size_t>(c)]) {
                        ForwardResult res =
                            forward(*net, train_split->images[static_cast<size_t>(i)].pixels, taps);
                        for (size_t t = 0; t < layouts.size(); ++t) {
                            const auto& v = *res.taps.find(layouts[t].tap_id);
                            const float* lo = ranges.vmin[c][t].data();
                            const float* hi = ranges.vmax[c][t].data();
                            if (cam_enabled("mrc16")) {
                                auto& counts = p16.counts[c][t];
                                const int qn = cfg.monitor.mrc16_sections;
                                for (size_t j = 0; j < v.size(); ++j)
                                    counts[j * qn + (mrc_subrange(v[j], lo[j], hi[j], qn) - 1)]++;
                            }
                            if (cam_enabled("mrc32")) {
                                auto& counts = p32.counts[c][t];
                                const int qn = cfg.monitor.mrc32_sections;
                                for (size_t j = 0; j < v.size(); ++j)
                                    counts[j * qn + (mrc_subrange(v[j], lo[j], hi[j], qn) - 1)]++;
                            }
                        }
                    }
                }
                if (cam_enabled("mrc16"))
                    write_signature(finalize_mrc(p16), std::nullopt, sig_path("mrc16"));
                if (cam_enabled("mrc32"))
                    write_signature(finalize_mrc(p32), std::nullopt, sig_path("mrc32"));
            }
        }
        // load into memory (kNNC stays mapped)
        if (cam_enabled("src")) src = std::get<SrcSignature>(read_signature(sig_path("src")).first);
        if (cam_enabled("mrc16"))
            mrc16 = std::get<MrcSignature>(read_signature(sig_path("mrc16")).first);
        if (cam_enabled("mrc32"))
            mrc32 = std::get<MrcSignature>(read_signature(sig_path("mrc32")).first);
        if (cam_enabled("nrc")) nrc = std::get<NrcSignature>(read_signature(sig_path("nrc")).first);
        if (cam_enabled("knnc")) {
            knnc.emplace(sig_path("knnc"), /*verify_checksum=*/false);
            knnc_view_list = knnc->views();
            knnc_sqnorms.clear();
            knnc_sqnorm_ptrs.clear();
            for (const auto& view : knnc_view_list) {
                std::vector<float> norms(static_cast<size_t>(view.rows_n));
                for (int64_t r = 0; r < view.rows_n; ++r)
                    norms[static_cast<size_t>(r)] =
                        Eigen::Map<const Eigen::VectorXf>(view.rows + r * view.width, view.width)
                            .squaredNorm();
                knnc_sqnorms.push_back(std::move(norms));
            }
            for (const auto& n2 : knnc_sqnorms) knnc_sqnorm_ptrs.push_back(n2.data());
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("sign", e.what(), cache_dir().string());
    }
}

double Pipeline::Impl::cam_param(const std::string& cam) const {
    if (cam == "mrc16") return cfg.monitor.mrc16_sections;
    if (cam == "mrc32") return cfg.monitor.mrc32_sections;
    if (cam == "nrc") return cfg.monitor.nrc_p;
    if (cam == "knnc") return cfg.monitor.knnc_g;
    return 0;
}

Pipeline::Impl::EvalBlock Pipeline::Impl::eval_costs(const std::vector<const Tensor*>& images,
                                                     const std::vector<std::string>& cams,
                                                     bool with_baselines) {
    EvalBlock out;
    const size_t n = images.size();
    out.predicted.resize(n);
    for (const auto& cam : cams) out.eta[cam].resize(n);
    if (with_baselines) {
        out.vg.resize(n);
        out.fs.resize(n);
    }
    bool want_knnc = std::find(cams.begin(), cams.end(), "knnc") != cams.end();

    const size_t block = 256;
    std::vector<ActiveState> states(std::min(block, n));
    for (size_t start = 0; start < n; start += block) {
        size_t bsz = std::min(block, n - start);
        auto worker = [&](int64_t q) {
            size_t i = start + static_cast<size_t>(q);
            ForwardResult res = forward(*net, *images[i], cfg.monitor.taps);
            out.predicted[i] = res.predicted;
            states[static_cast<size_t>(q)] = std::move(res.taps);
            for (const auto& cam : cams) {
                if (cam == "src")
                    out.eta[cam][i] = static_cast<double>(
                        src_eta(states[static_cast<size_t>(q)], *src, res.predicted));
                else if (cam == "mrc16")
                    out.eta[cam][i] = mrc_eta(states[static_cast<size_t>(q)], *mrc16, res.predicted);
                else if (cam == "mrc32")
                    out.eta[cam][i] = mrc_eta(states[static_cast<size_t>(q)], *mrc32, res.predicted);
                else if (cam == "nrc")
                    out.eta[cam][i] = nrc_eta(states[static_cast<size_t>(q)], *nrc, res.predicted);
            }
            if (with_baselines) {
                out.vg[i] = vision_guard_divergence(*net, *images[i], cfg.monitor.vg_quality);
                out.fs[i] = feature_squeezing_divergence(*net, *images[i], cfg.monitor.fs_bits,
                                                         cfg.monitor.fs_window);
            }
        };
        parallel_for(static_cast<int64_t>(bsz), cfg.workers, worker);
        if (want_knnc) {
            std::vector<const ActiveState*> sp;
            std::vector<int> preds;
            for (size_t q = 0; q < bsz; ++q) {
                sp.push_back(&states[q]);
                preds.push_back(out.predicted[start + q]);
            }
            auto etas = knnc_eta_batch(knnc_view_list, knnc_sqnorm_ptrs, sp, preds,
                                       cfg.monitor.knnc_g, cfg.monitor.knnc_mode);
            for (size_t q = 0; q < bsz; ++q) out.eta["knnc"][start + q] = etas[q];
        }
    }
    return out;
}

std::vector<AdversarialRecord> Pipeline::Impl::generate_one(const AttackEntry& entry) {
    const AttackConfig& ac = entry.config;
    size_t needed = entry.calibration_count + entry.evaluation_count;
    std::vector<AdversarialRecord> records;
    records.reserve(needed);
    uint64_t chash = cfg.stage_hash("roster");

    const bool from_train = ac.method == AttackMethod::kOod;
    const size_t pool =
        from_train ? train_split->images.size() : trusted_test_idx.size();
    size_t max_attempts = entry.max_attempts ? std::min(entry.max_attempts, pool) : pool;

    std::mt19937_64 target_rng(cfg.seed ^ 0x00dull);

    const size_t chunk = 128;
    std::vector<std::optional<AdversarialRecord>> results(chunk);
    for (size_t base = 0; base < max_attempts && records.size() < needed; base += chunk) {
        size_t cend = std::min(max_attempts, base + chunk);
        std::vector<int> targets(cend - base, -1);
        if (ac.method == AttackMethod::kOod)
            for (auto& t : targets) t = static_cast<int>(target_rng() % cfg.classes);
        auto worker = [&](int64_t k) {
            size_t attempt = base + static_cast<size_t>(k);
            results[static_cast<size_t>(k)].reset();
            int32_t src_index;
            const Tensor* x;
            int label;
            if (from_train) {
                src_index = static_cast<int32_t>(attempt);
                x = &train_split->images[attempt].pixels;
                label = train_split->images[attempt].label;
            } else {
                src_index = trusted_test_idx[attempt];
                x = &test_split->images[static_cast<size_t>(src_index)].pixels;
                label = test_split->images[static_cast<size_t>(src_index)].label;
            }
            AdversarialSample sample;
            switch (ac.method) {
                case AttackMethod::kFgsm:
                    sample = fgsm(*net, *x, label, ac.epsilon);
                    break;
                case AttackMethod::kPgd:
                    sample = pgd(*net, *x, label, ac.epsilon, ac.alpha, ac.iterations,
                                 ac.random_start, cfg.seed + attempt);
                    break;
                case AttackMethod::kBim:
                    sample = bim(*net, *x, label, ac.epsilon, ac.alpha, ac.iterations);
                    break;
                case AttackMethod::kCw:
                    sample = cw(*net, *x, label, ac.iterations, ac.cw_c, ac.cw_kappa, ac.cw_lr,
                                ac.cw_objective, ac.cw_keep_final);
                    break;
                case AttackMethod::kOod: {
                    int target = targets[static_cast<size_t>(k)];
                    if (target == label) target = (target + 1) % cfg.classes;
                    sample = ood_targeted(*net, *x, target, ac.epsilon, ac.iterations);
                    if (!sample.success) return;
                    sample.source_label = label;  // keep the true label for the wrong-class rule
                    break;
                }
                case AttackMethod::kPatch:
                    sample = patch_attack(*net, *x, label, ac.epsilon, ac.iterations, ac.patch);
                    break;
                case AttackMethod::kSignature:
                    sample = signature_attack(*net, *src, *x, ac.epsilon, ac.alpha, ac.iterations,
                                              ac.gamma);
                    break;
            }
            if (!sample.success) return;
            if (sample.predicted == label) return;
            if (sample.score <= ac.wrong_score_threshold) return;
            AdversarialRecord rec;
            rec.method = static_cast<uint8_t>(ac.method);
            rec.config_hash = chash;
            rec.source_index = src_index;
            rec.source_label = label;
            rec.predicted = sample.predicted;
            rec.score = sample.score;
            rec.image = std::move(sample.image);
            results[static_cast<size_t>(k)] = std::move(rec);
        };
        parallel_for(static_cast<int64_t>(cend - base), cfg.workers, worker);
        for (size_t k = 0; k < cend - base && records.size() < needed; ++k)
            if (results[k]) records.push_back(std::move(*results[k]));
    }
    if (records.size() < needed)
        log_warn("attack '" + entry.name + "' produced " + std::to_string(records.size()) + " of " +
                 std::to_string(needed) + " requested samples; counts shrink proportionally");
    return records;
}

void Pipeline::Impl::ensure_attacks() {
    if (!attacks_by_name.empty()) return;
    ensure_trusted();
    bool needs_signature = false;
    for (const auto& e : cfg.roster) needs_signature |= e.config.method == AttackMethod::kSignature;
    if (needs_signature) ensure_signatures();
    for (const auto& entry : cfg.roster) {
        try {
            fs::path path = attack_path(entry.name);
            if (fs::exists(path)) {
                attacks_by_name[entry.name] = read_adversarial_set(path);
                continue;
            }
            log_info("generating attack set '" + entry.name + "'");
            auto records = generate_one(entry);
            write_adversarial_set(path, records);
            attacks_by_name[entry.name] = std::move(records);
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError("attack", std::string(e.what()) + " in '" + entry.name + "'",
                             cache_dir().string());
        }
    }
}

CalibrationSet Pipeline::Impl::build_calibration_set(const std::string& cam,
                                                     const std::vector<CalItem>& extra_unsafe) {
    CalibrationSet cal;
    const auto& items = cal_cache.at(cam);
    for (size_t i = 0; i < items.size(); ++i) cal.items.push_back(items[i]);
    for (const auto& item : extra_unsafe) cal.items.push_back(item);
    return cal;
}

void Pipeline::Impl::ensure_calibration() {
    if (calibrated) return;
    ensure_signatures();
    ensure_attacks();
    try {
        // load cached thresholds when present
        bool have_all = fs::exists(baseline_thr_path()) || !cfg.monitor.baselines;
        for (const auto& cam : cfg.monitor.cams) have_all &= fs::exists(thr_path(cam));
        if (have_all) {
            for (const auto& cam : cfg.monitor.cams) taus[cam] = read_thresholds_file(thr_path(cam));
            if (cfg.monitor.baselines) {
                IniFile ini = IniFile::parse_file(baseline_thr_path());
                const auto* s = ini.find("baselines");
                vg_tau = s->get_num("vg_tau", 0.0);
                fs_tau = s->get_num("fs_tau", 0.0);
            }
            calibrated = true;
            return;
        }

        log_info("calibrating thresholds");
        // safe calibration items: leading part of the trusted test set
        size_t safe_n = std::min(cfg.calibration_safe, trusted_test_idx.size());
        std::vector<const Tensor*> images;
        std::vector<bool> unsafe_mask;
        for (size_t i = 0; i < safe_n; ++i) {
            images.push_back(
                &test_split->images[static_cast<size_t>(trusted_test_idx[i])].pixels);
            unsafe_mask.push_back(false);
        }
        // unsafe calibration items: leading part of each attack set
        for (const auto& entry : cfg.roster) {
            const auto& records = attacks_by_name.at(entry.name);
            size_t total = records.size();
            size_t want = entry.calibration_count + entry.evaluation_count;
            size_t cal_n = entry.calibration_count;
            if (total < want && want > 0)
                cal_n = total * entry.calibration_count / want;  // proportional shrink
            for (size_t i = 0; i < cal_n; ++i) {
                images.push_back(&records[i].image);
                unsafe_mask.push_back(true);
            }
        }
        EvalBlock costs = eval_costs(images, cfg.monitor.cams, cfg.monitor.baselines);

        for (const auto& cam : cfg.monitor.cams) {
            std::vector<CalItem> items(images.size());
            for (size_t i = 0; i < images.size(); ++i)
                items[i] = {costs.eta[cam][i], costs.predicted[i], static_cast<bool>(unsafe_mask[i])};
            cal_cache[cam] = std::move(items);
            ThresholdSet t =
                calibrate_all_classes(build_calibration_set(cam, {}), cfg.classes, cam_sense(cam));
            t.cam_id = static_cast<uint8_t>(cam_from_name(cam));
            t.fingerprint =
                config_fingerprint(cam_from_name(cam), static_cast<uint32_t>(cam_param(cam)),
                                   tap_layouts(*net, cfg.monitor.taps), cfg.classes);
            write_thresholds_file(t, thr_path(cam));
            if (cam != "knnc") rewrite_thresholds(sig_path(cam), t);  // kNNC keeps a sidecar
            taus[cam] = std::move(t);
        }
        if (cfg.monitor.baselines) {
            // single global threshold per baseline, as in their original form
            CalibrationSet vg_cal, fs_cal;
            for (size_t i = 0; i < images.size(); ++i) {
                (unsafe_mask[i] ? vg_cal.add_unsafe(costs.vg[i], 0)
                                : vg_cal.add_safe(costs.vg[i], 0));
                (unsafe_mask[i] ? fs_cal.add_unsafe(costs.fs[i], 0)
                                : fs_cal.add_safe(costs.fs[i], 0));
            }
            vg_tau = select_threshold(roc_curve(vg_cal, 0));
            fs_tau = select_threshold(roc_curve(fs_cal, 0));
            std::ostringstream ss;
            ss << "[baselines]\nvg_tau = " << std::setprecision(17) << vg_tau
               << "\nfs_tau = " << fs_tau << "\n";
            write_text_file(baseline_thr_path(), ss.str());
        }
        calibrated = true;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("calibrate", e.what(), cache_dir().string());
    }
}

DetectionReport Pipeline::Impl::evaluate_with(
    const std::map<std::string, ThresholdSet>& t, double vgt, double fst,
    const std::vector<std::pair<std::string, std::vector<AdversarialRecord>>>& extra_rows,
    bool with_baselines, std::vector<std::string> cams) {
    DetectionReport report;
    if (cams.empty()) cams = eval_cams();
    report.detectors = cams;
    if (with_baselines) {
        report.detectors.push_back("vg");
        report.detectors.push_back("fs");
    }

    struct RowInput {
        std::string name;
        std::vector<const Tensor*> images;
        bool safe_row;
    };
    std::vector<RowInput> rows;
    for (const auto& entry : cfg.roster) {
        if (entry.evaluation_count == 0) continue;
        const auto& records = attacks_by_name.at(entry.name);
        size_t total = records.size();
        size_t want = entry.calibration_count + entry.evaluation_count;
        size_t cal_n = entry.calibration_count;
        if (total < want && want > 0) cal_n = total * entry.calibration_count / want;
        RowInput row{entry.name, {}, false};
        for (size_t i = cal_n; i < total; ++i) row.images.push_back(&records[i].image);
        rows.push_back(std::move(row));
    }
    for (const auto& [name, records] : extra_rows) {
        RowInput row{name, {}, false};
        for (const auto& r : records) row.images.push_back(&r.image);
        rows.push_back(std::move(row));
    }
    {
        RowInput safe{"Safe Samples", {}, true};
        for (size_t i = std::min(cfg.calibration_safe, trusted_test_idx.size());
             i < trusted_test_idx.size(); ++i)
            safe.images.push_back(
                &test_split->images[static_cast<size_t>(trusted_test_idx[i])].pixels);
        rows.push_back(std::move(safe));
    }

    for (const auto& row : rows) {
        DetectionReport::Row out;
        out.input_type = row.name;
        out.total = static_cast<int64_t>(row.images.size());
        EvalBlock costs = eval_costs(row.images, cams, with_baselines);
        for (const auto& cam : cams) {
            int64_t accepted = 0, correct = 0;
            CostSense sense = cam_sense(cam);
            const auto& tset = t.at(cam);
            for (size_t i = 0; i < row.images.size(); ++i) {
                double tau = tset.tau[static_cast<size_t>(costs.predicted[i])];
                bool unsafe = sense == CostSense::kCostlike ? costs.eta[cam][i] > tau
                                                            : costs.eta[cam][i] < tau;
                accepted += !unsafe;
                correct += row.safe_row ? !unsafe : unsafe;
            }
            out.accuracy.push_back(out.total ? static_cast<double>(correct) / out.total : 0.0);
            out.accepted.push_back(accepted);
        }
        if (with_baselines) {
            for (const char* which : {"vg", "fs"}) {
                int64_t accepted = 0, correct = 0;
                for (size_t i = 0; i < row.images.size(); ++i) {
                    double j = which[0] == 'v' ? costs.vg[i] : costs.fs[i];
                    bool unsafe = j >= (which[0] == 'v' ? vgt : fst);
                    accepted += !unsafe;
                    correct += row.safe_row ? !unsafe : unsafe;
                }
                out.accuracy.push_back(out.total ? static_cast<double>(correct) / out.total : 0.0);
                out.accepted.push_back(accepted);
            }
        }
        report.rows.push_back(std::move(out));
    }
    return report;
}

void Pipeline::fetch() { impl_->ensure_dataset(); }
const NetworkModel& Pipeline::model() {
    impl_->ensure_model();
    return *impl_->net;
}
const TrustedSet& Pipeline::trusted() {
    impl_->ensure_trusted();
    return *impl_->trusted_set;
}
const std::vector<int32_t>& Pipeline::trusted_test() {
    impl_->ensure_trusted();
    return impl_->trusted_test_idx;
}
void Pipeline::build_signatures() { impl_->ensure_signatures(); }
void Pipeline::generate_attacks() { impl_->ensure_attacks(); }
void Pipeline::calibrate_thresholds() { impl_->ensure_calibration(); }

DetectionReport Pipeline::evaluate() {
    impl_->ensure_calibration();
    try {
        DetectionReport report = impl_->evaluate_with(impl_->taus, impl_->vg_tau, impl_->fs_tau,
                                                      {}, impl_->cfg.monitor.baselines);
        write_text_file(impl_->cfg.out_dir / "report-detection.csv", detection_report_csv(report));
        write_text_file(impl_->cfg.out_dir / "report-detection.txt",
                        detection_report_table(report));
        for (const auto& cam : impl_->cfg.monitor.cams)
            write_text_file(impl_->cfg.out_dir / ("thresholds-" + cam + ".txt"),
                            thresholds_text(cam, impl_->taus[cam].tau, impl_->taus[cam].youden_j));
        return report;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("evaluate", e.what(), impl_->cache_dir().string());
    }
}

const SrcSignature& Pipeline::src_signature() {
    impl_->ensure_signatures();
    return *impl_->src;
}
const MrcSignature& Pipeline::mrc_signature(int sections) {
    impl_->ensure_signatures();
    if (impl_->mrc16 && impl_->mrc16->sections == sections) return *impl_->mrc16;
    if (impl_->mrc32 && impl_->mrc32->sections == sections) return *impl_->mrc32;
    throw std::invalid_argument("no MRC signature with that section count");
}
const NrcSignature& Pipeline::nrc_signature() {
    impl_->ensure_signatures();
    return *impl_->nrc;
}
const std::vector<KnncTapView>& Pipeline::knnc_views() {
    impl_->ensure_signatures();
    return impl_->knnc_view_list;
}
const ThresholdSet& Pipeline::thresholds(const std::string& cam) {
    impl_->ensure_calibration();
    return impl_->taus.at(cam);
}
double Pipeline::baseline_tau(const std::string& which) {
    impl_->ensure_calibration();
    return which == "vg" ? impl_->vg_tau : impl_->fs_tau;
}
const DatasetSplit& Pipeline::train_split() {
    impl_->ensure_dataset();
    return *impl_->train_split;
}
const DatasetSplit& Pipeline::test_split() {
    impl_->ensure_dataset();
    return *impl_->test_split;
}
fs::path Pipeline::signature_path(const std::string& cam) const { return impl_->sig_path(cam); }

AdaptiveOutcome Pipeline::adaptive_roundtrip() {
    auto& im = *impl_;
    im.ensure_calibration();
    const AdaptiveConfig& ad = im.cfg.adaptive;
    try {
        // Signature-Attack sets per gamma: calibration portion first (only for
        // the recalibration gammas), evaluation portion after, disjoint sources
        uint64_t ahash = im.cfg.stage_hash("adaptive");
        std::vector<std::pair<std::string, std::vector<AdversarialRecord>>> eval_rows;
        std::map<std::string, std::vector<AdversarialRecord>> cal_sets;
        for (double gamma : ad.gammas) {
            std::ostringstream label;
            label << "Signature-Attack (gamma=" << gamma << ")";
            bool recal = std::find(ad.recalibration_gammas.begin(), ad.recalibration_gammas.end(),
                                   gamma) != ad.recalibration_gammas.end();
            size_t cal_n = recal ? ad.calibration_per_gamma : 0;
            AttackEntry entry;
            entry.name = "sig-gamma-" + std::to_string(gamma);
            entry.config.method = AttackMethod::kSignature;
            entry.config.epsilon = ad.epsilon;
            entry.config.alpha = ad.alpha;
            entry.config.iterations = ad.iterations;
            entry.config.gamma = gamma;
            entry.config.wrong_score_threshold = ad.wrong_score_threshold;
            entry.calibration_count = cal_n;
            entry.evaluation_count = ad.evaluation_per_gamma;
            fs::path path = im.cache_dir() / ("adaptive-" + hex16(ahash) + "-g" +
                                              std::to_string(gamma) + ".cvae");
            std::vector<AdversarialRecord> records;
            if (fs::exists(path)) {
                records = read_adversarial_set(path);
            } else {
                log_info("generating Signature-Attack set gamma=" + std::to_string(gamma));
                records = im.generate_one(entry);
                write_adversarial_set(path, records);
            }
            size_t want = cal_n + ad.evaluation_per_gamma;
            size_t have_cal = cal_n;
            if (records.size() < want && want > 0)
                have_cal = records.size() * cal_n / want;
            if (recal)
                cal_sets[entry.name] =
                    std::vector<AdversarialRecord>(records.begin(),
                                                   records.begin() + static_cast<ptrdiff_t>(have_cal));
            eval_rows.emplace_back(label.str(),
                                   std::vector<AdversarialRecord>(
                                       records.begin() + static_cast<ptrdiff_t>(have_cal),
                                       records.end()));
        }

        AdaptiveOutcome out;
        out.before = im.evaluate_with(im.taus, im.vg_tau, im.fs_tau, eval_rows, false, ad.cams);

        // recalibrate each CAM with the adaptive calibration samples appended
        std::map<std::string, ThresholdSet> recal = im.taus;
        std::vector<const Tensor*> cal_images;
        for (const auto& [name, records] : cal_sets)
            for (const auto& r : records) cal_images.push_back(&r.image);
        if (!cal_images.empty()) {
            auto costs = im.eval_costs(cal_images, ad.cams, false);
            for (const auto& cam : ad.cams) {
                std::vector<CalItem> extra(cal_images.size());
                for (size_t i = 0; i < cal_images.size(); ++i)
                    extra[i] = {costs.eta[cam][i], costs.predicted[i], true};
                ThresholdSet t = recalibrate_with_adaptive(im.build_calibration_set(cam, {}), extra,
                                                           im.cfg.classes, cam_sense(cam));
                t.cam_id = im.taus[cam].cam_id;
                t.fingerprint = im.taus[cam].fingerprint;
                write_thresholds_file(t, im.cache_dir() / ("thr-" + cam + "-recal-" +
                                                           hex16(ahash) + ".cvsg"));
                recal[cam] = std::move(t);
            }
        }
        for (const auto& cam : ad.cams) {
            double before_mean = 0, after_mean = 0;
            for (size_t c = 0; c < im.taus[cam].tau.size(); ++c) {
                before_mean += im.taus[cam].tau[c];
                after_mean += recal[cam].tau[c];
            }
            out.tau_shift.emplace_back(cam, before_mean > 0 ? after_mean / before_mean : 1.0);
        }

        out.after = im.evaluate_with(recal, im.vg_tau, im.fs_tau, eval_rows, false, ad.cams);
        write_text_file(im.cfg.out_dir / "adaptive-before.csv", detection_report_csv(out.before));
        write_text_file(im.cfg.out_dir / "adaptive-before.txt",
                        detection_report_table(out.before));
        write_text_file(im.cfg.out_dir / "adaptive-after.csv", detection_report_csv(out.after));
        write_text_file(im.cfg.out_dir / "adaptive-after.txt", detection_report_table(out.after));
        return out;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("adaptive", e.what(), im.cache_dir().string());
    }
}
std::vector<AdversarialRecord> Pipeline::attack_records(const std::string& name) {
    impl_->ensure_attacks();
    return impl_->attacks_by_name.at(name);
}

}  // namespace covmon
