#include "covmon/store.hpp"

#include <zlib.h>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstring>
#include <fstream>

namespace covmon {

namespace {

constexpr uint32_t kSectionModel = 1;
constexpr uint32_t kSectionSignature = 2;
constexpr uint32_t kSectionThresholds = 3;

constexpr size_t kFileHeaderBytes = 16;     // magic, version, section count, reserved
constexpr size_t kSectionHeaderBytes = 16;  // type, reserved, payload length

uint64_t pad8(uint64_t n) { return (n + 7) & ~7ull; }

struct ByteWriter {
    std::vector<uint8_t> buf;

    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u8(uint8_t v) { raw(&v, 1); }
    void u32(uint32_t v) { raw(&v, 4); }
    void i32(int32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void i64(int64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void f32s(const float* p, size_t n) { raw(p, n * 4); }
    void pad_to8() {
        while (buf.size() % 8) buf.push_back(0);
    }
};

struct ByteReader {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;

    void need(size_t k) const {
        if (pos + k > n) throw ChecksumMismatchError("section payload truncated");
    }
    void raw(void* out, size_t k) {
        need(k);
        std::memcpy(out, p + pos, k);
        pos += k;
    }
    uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    int32_t i32() { int32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    int64_t i64() { int64_t v; raw(&v, 8); return v; }
    float f32() { float v; raw(&v, 4); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    void f32s(float* out, size_t k) { raw(out, k * 4); }
    void skip_pad8() { pos = static_cast<size_t>(pad8(pos)); }
};

void atomic_write(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StoreIoError("cannot open " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out) throw StoreIoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::vector<uint8_t> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw StoreIoError("cannot open " + path.string());
    std::vector<uint8_t> bytes(static_cast<size_t>(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    return bytes;
}

uint32_t crc_of(const uint8_t* p, size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n) {
        uInt chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<uint32_t>(crc);
}

std::vector<uint8_t> frame_sections(
    const std::vector<std::pair<uint32_t, std::vector<uint8_t>>>& sections) {
    ByteWriter w;
    w.u32(kStoreMagic);
    w.u32(kStoreVersion);
    w.u32(static_cast<uint32_t>(sections.size()));
    w.u32(0);
    for (const auto& [type, payload] : sections) {
        w.u32(type);
        w.u32(0);
        w.u64(payload.size());
        w.raw(payload.data(), payload.size());
    }
    uint32_t crc = crc_of(w.buf.data(), w.buf.size());
    w.u32(crc);
    return std::move(w.buf);
}

struct ParsedFile {
    std::vector<uint8_t> bytes;
    std::vector<std::tuple<uint32_t, size_t, size_t>> sections;  // type, offset, length
};

ParsedFile parse_file(const std::filesystem::path& path) {
    ParsedFile f;
    f.bytes = read_all(path);
    const auto& b = f.bytes;
    if (b.size() < kFileHeaderBytes + 4) throw ChecksumMismatchError("file truncated");
    uint32_t magic, version, count;
    std::memcpy(&magic, b.data(), 4);
    std::memcpy(&version, b.data() + 4, 4);
    std::memcpy(&count, b.data() + 8, 4);
    if (magic != kStoreMagic) throw BadMagicError("not a covmon container: " + path.string());
    if (version != kStoreVersion) throw VersionSkewError(version, kStoreVersion);
    uint32_t stored_crc;
    std::memcpy(&stored_crc, b.data() + b.size() - 4, 4);
    if (crc_of(b.data(), b.size() - 4) != stored_crc)
        throw ChecksumMismatchError("checksum mismatch in " + path.string());
    size_t pos = kFileHeaderBytes;
    for (uint32_t s = 0; s < count; ++s) {
        if (pos + kSectionHeaderBytes > b.size() - 4)
            throw ChecksumMismatchError("section header out of bounds");
        uint32_t type;
        uint64_t len;
        std::memcpy(&type, b.data() + pos, 4);
        std::memcpy(&len, b.data() + pos + 8, 8);
        pos += kSectionHeaderBytes;
        if (pos + len > b.size() - 4) throw ChecksumMismatchError("section payload out of bounds");
        f.sections.emplace_back(type, pos, static_cast<size_t>(len));
        pos += static_cast<size_t>(len);
    }
    return f;
}

// ---- signature payload ------------------------------------------------

struct SigMeta {
    CamKind cam;
    uint32_t class_count;
    uint32_t param;
    std::vector<TapLayout> taps;
    std::vector<uint64_t> class_samples;
};

void write_sig_header(ByteWriter& w, const SigMeta& m) {
    w.u8(static_cast<uint8_t>(m.cam));
    w.u8(0);
    w.u8(0);
    w.u8(0);
    w.u32(m.class_count);
    w.u32(m.param);
    w.u32(static_cast<uint32_t>(m.taps.size()));
    for (const auto& t : m.taps) {
        w.i32(t.tap_id);
        w.u32(static_cast<uint32_t>(t.channels));
        w.u64(static_cast<uint64_t>(t.width));
    }
    for (uint32_t c = 0; c < m.class_count; ++c) w.u8(m.class_samples[c] > 0 ? 1 : 0);
    w.pad_to8();
    for (uint32_t c = 0; c < m.class_count; ++c) w.u64(m.class_samples[c]);
}

SigMeta read_sig_header(ByteReader& r) {
    SigMeta m;
    m.cam = static_cast<CamKind>(r.u8());
    r.u8();
    r.u8();
    r.u8();
    m.class_count = r.u32();
    m.param = r.u32();
    uint32_t tap_count = r.u32();
    m.taps.resize(tap_count);
    for (auto& t : m.taps) {
        t.tap_id = r.i32();
        t.channels = static_cast<int>(r.u32());
        t.width = static_cast<int64_t>(r.u64());
    }
    std::vector<uint8_t> present(m.class_count);
    for (auto& pr : present) pr = r.u8();
    r.skip_pad8();
    m.class_samples.resize(m.class_count);
    for (auto& s : m.class_samples) s = r.u64();
    for (uint32_t c = 0; c < m.class_count; ++c)
        if ((m.class_samples[c] > 0) != (present[c] != 0))
            throw ChecksumMismatchError("class presence flags disagree with sample counts");
    return m;
}

uint64_t sig_header_bytes(uint32_t class_count, size_t tap_count) {
    return 16 + 16 * tap_count + pad8(class_count) + 8ull * class_count;
}

uint64_t sig_payload_bytes(CamKind cam, const std::vector<TapLayout>& taps,
                           const std::vector<uint64_t>& class_samples, uint32_t param) {
    uint64_t present = 0, rows = 0;
    for (uint64_t s : class_samples) {
        present += s > 0;
        rows += s;
    }
    uint64_t total = sig_header_bytes(static_cast<uint32_t>(class_samples.size()), taps.size());
    for (const auto& t : taps) {
        total += analytic_tap_payload_bytes(cam, static_cast<uint64_t>(t.width),
                                            static_cast<uint32_t>(present), param, rows);
        if (cam == CamKind::kKnnc) total += 8 + 4 * rows;  // row count + labels
    }
    return total;
}

std::vector<uint8_t> encode_thresholds(const ThresholdSet& t) {
    ByteWriter w;
    w.u8(t.cam_id);
    w.u8(0);
    w.u8(0);
    w.u8(0);
    w.u32(static_cast<uint32_t>(t.tau.size()));
    w.u64(t.fingerprint);
    for (double v : t.tau) w.f64(v);
    for (size_t i = 0; i < t.tau.size(); ++i) w.f64(i < t.youden_j.size() ? t.youden_j[i] : 0.0);
    return std::move(w.buf);
}

ThresholdSet decode_thresholds(ByteReader r) {
    ThresholdSet t;
    t.cam_id = r.u8();
    r.u8();
    r.u8();
    r.u8();
    uint32_t classes = r.u32();
    t.fingerprint = r.u64();
    t.tau.resize(classes);
    for (auto& v : t.tau) v = r.f64();
    t.youden_j.resize(classes);
    for (auto& v : t.youden_j) v = r.f64();
    return t;
}

std::vector<uint8_t> encode_signature(const AnySignature& sig) {
    ByteWriter w;
    if (const auto* s = std::get_if<SrcSignature>(&sig)) {
        write_sig_header(w, {CamKind::kSrc, static_cast<uint32_t>(s->class_count), 0, s->taps,
                             s->class_samples});
        for (size_t t = 0; t < s->taps.size(); ++t)
            for (int c = 0; c < s->class_count; ++c) {
                if (!s->class_present(c)) continue;
                w.f32s(s->vmin[c][t].data(), s->vmin[c][t].size());
                w.f32s(s->vmax[c][t].data(), s->vmax[c][t].size());
            }
    } else if (const auto* m = std::get_if<MrcSignature>(&sig)) {
        write_sig_header(w, {CamKind::kMrc, static_cast<uint32_t>(m->class_count),
                             static_cast<uint32_t>(m->sections), m->taps, m->class_samples});
        for (size_t t = 0; t < m->taps.size(); ++t)
            for (int c = 0; c < m->class_count; ++c) {
                if (!m->class_present(c)) continue;
                w.f32s(m->vmin[c][t].data(), m->vmin[c][t].size());
                w.f32s(m->vmax[c][t].data(), m->vmax[c][t].size());
                w.f32s(m->lambda[c][t].data(), m->lambda[c][t].size());
            }
    } else if (const auto* n = std::get_if<NrcSignature>(&sig)) {
        write_sig_header(w, {CamKind::kNrc, static_cast<uint32_t>(n->class_count),
                             static_cast<uint32_t>(n->top_p), n->taps, n->class_samples});
        for (size_t t = 0; t < n->taps.size(); ++t)
            for (int c = 0; c < n->class_count; ++c) {
                if (!n->class_present(c)) continue;
                w.f32s(n->lambda[c][t].data(), n->lambda[c][t].size());
            }
    } else {
        const auto& k = std::get<KnncSignature>(sig);
        write_sig_header(w, {CamKind::kKnnc, static_cast<uint32_t>(k.class_count), 0, k.taps,
                             k.class_samples});
        for (size_t t = 0; t < k.taps.size(); ++t) {
            const auto& d = k.data[t];
            w.u64(static_cast<uint64_t>(d.rows_n()));
            w.f32s(d.rows.data(), d.rows.size());
            w.raw(d.labels.data(), d.labels.size() * 4);
        }
    }
    return std::move(w.buf);
}

AnySignature decode_signature(ByteReader r) {
    SigMeta m = read_sig_header(r);
    switch (m.cam) {
        case CamKind::kSrc: {
            SrcSignature s = SrcSignature::empty(m.taps, static_cast<int>(m.class_count));
            s.class_samples = m.class_samples;
            for (size_t t = 0; t < m.taps.size(); ++t)
                for (uint32_t c = 0; c < m.class_count; ++c) {
                    if (m.class_samples[c] == 0) continue;
                    r.f32s(s.vmin[c][t].data(), static_cast<size_t>(m.taps[t].width));
                    r.f32s(s.vmax[c][t].data(), static_cast<size_t>(m.taps[t].width));
                }
            return s;
        }
        case CamKind::kMrc: {
            MrcSignature s;
            s.taps = m.taps;
            s.class_count = static_cast<int>(m.class_count);
            s.sections = static_cast<int>(m.param);
            s.class_samples = m.class_samples;
            s.vmin.resize(m.class_count);
            s.vmax.resize(m.class_count);
            s.lambda.resize(m.class_count);
            for (uint32_t c = 0; c < m.class_count; ++c) {
                s.vmin[c].resize(m.taps.size());
                s.vmax[c].resize(m.taps.size());
                s.lambda[c].resize(m.taps.size());
                for (size_t t = 0; t < m.taps.size(); ++t) {
                    s.vmin[c][t].resize(static_cast<size_t>(m.taps[t].width));
                    s.vmax[c][t].resize(static_cast<size_t>(m.taps[t].width));
                    s.lambda[c][t].resize(static_cast<size_t>(m.taps[t].width) * m.param);
                }
            }
            for (size_t t = 0; t < m.taps.size(); ++t)
                for (uint32_t c = 0; c < m.class_count; ++c) {
                    if (m.class_samples[c] == 0) continue;
                    r.f32s(s.vmin[c][t].data(), s.vmin[c][t].size());
                    r.f32s(s.vmax[c][t].data(), s.vmax[c][t].size());
                    r.f32s(s.lambda[c][t].data(), s.lambda[c][t].size());
                }
            return s;
        }
        case CamKind::kNrc: {
            NrcSignature s;
            s.taps = m.taps;
            s.class_count = static_cast<int>(m.class_count);
            s.top_p = static_cast<int>(m.param);
            s.class_samples = m.class_samples;
            s.lambda.resize(m.class_count);
            for (uint32_t c = 0; c < m.class_count; ++c) {
                s.lambda[c].resize(m.taps.size());
                for (size_t t = 0; t < m.taps.size(); ++t)
                    s.lambda[c][t].resize(static_cast<size_t>(m.taps[t].width));
            }
            for (size_t t = 0; t < m.taps.size(); ++t)
                for (uint32_t c = 0; c < m.class_count; ++c) {
                    if (m.class_samples[c] == 0) continue;
                    r.f32s(s.lambda[c][t].data(), s.lambda[c][t].size());
                }
            return s;
        }
        case CamKind::kKnnc: {
            KnncSignature s;
            s.taps = m.taps;
            s.class_count = static_cast<int>(m.class_count);
            s.class_samples = m.class_samples;
            s.data.resize(m.taps.size());
            for (size_t t = 0; t < m.taps.size(); ++t) {
                auto& d = s.data[t];
                d.tap_id = m.taps[t].tap_id;
                d.width = m.taps[t].width;
                uint64_t rows_n = r.u64();
                d.rows.resize(rows_n * static_cast<uint64_t>(d.width));
                r.f32s(d.rows.data(), d.rows.size());
                d.labels.resize(rows_n);
                r.raw(d.labels.data(), rows_n * 4);
            }
            return s;
        }
    }
    throw ChecksumMismatchError("unknown CAM id in signature section");
}

}  // namespace

CamKind signature_cam(const AnySignature& sig) {
    if (std::holds_alternative<SrcSignature>(sig)) return CamKind::kSrc;
    if (std::holds_alternative<MrcSignature>(sig)) return CamKind::kMrc;
    if (std::holds_alternative<NrcSignature>(sig)) return CamKind::kNrc;
    return CamKind::kKnnc;
}

const std::vector<TapLayout>& signature_taps(const AnySignature& sig) {
    return std::visit([](const auto& s) -> const std::vector<TapLayout>& { return s.taps; }, sig);
}

uint64_t config_fingerprint(CamKind cam, uint32_t param, const std::vector<TapLayout>& taps,
                            int class_count) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ull;
    };
    mix(static_cast<uint64_t>(cam));
    mix(param);
    mix(static_cast<uint64_t>(class_count));
    for (const auto& t : taps) {
        mix(static_cast<uint64_t>(t.tap_id));
        mix(static_cast<uint64_t>(t.width));
        mix(static_cast<uint64_t>(t.channels));
    }
    return h;
}

uint64_t analytic_tap_payload_bytes(CamKind cam, uint64_t width, uint32_t present_classes,
                                    uint32_t param, uint64_t rows) {
    switch (cam) {
        case CamKind::kSrc: return present_classes * width * 2 * 4;
        case CamKind::kMrc: return present_classes * width * (2 + static_cast<uint64_t>(param)) * 4;
        case CamKind::kNrc: return present_classes * width * 4;
        case CamKind::kKnnc: return rows * width * 4;
    }
    return 0;
}

uint64_t analytic_file_bytes(CamKind cam, const std::vector<TapLayout>& taps,
                             const std::vector<uint64_t>& class_samples, uint32_t param,
                             bool with_thresholds) {
    uint64_t total = kFileHeaderBytes + 4;  // framing + trailing crc
    total += kSectionHeaderBytes + sig_payload_bytes(cam, taps, class_samples, param);
    if (with_thresholds) total += kSectionHeaderBytes + 16 + 16 * class_samples.size();
    return total;
}

uint64_t write_signature(const AnySignature& sig, const std::optional<ThresholdSet>& thresholds,
                         const std::filesystem::path& path) {
    std::vector<std::pair<uint32_t, std::vector<uint8_t>>> sections;
    sections.emplace_back(kSectionSignature, encode_signature(sig));
    if (thresholds) sections.emplace_back(kSectionThresholds, encode_thresholds(*thresholds));
    std::vector<uint8_t> bytes = frame_sections(sections);
    atomic_write(path, bytes);
    return bytes.size();
}

std::pair<AnySignature, std::optional<ThresholdSet>> read_signature(
    const std::filesystem::path& path) {
    ParsedFile f = parse_file(path);
    std::optional<AnySignature> sig;
    std::optional<ThresholdSet> thresholds;
    for (const auto& [type, off, len] : f.sections) {
        ByteReader r{f.bytes.data() + off, len};
        if (type == kSectionSignature) sig = decode_signature(r);
        else if (type == kSectionThresholds) thresholds = decode_thresholds(r);
    }
    if (!sig) throw ChecksumMismatchError("no signature section in " + path.string());
    return {std::move(*sig), std::move(thresholds)};
}

uint64_t write_thresholds_file(const ThresholdSet& thresholds,
                               const std::filesystem::path& path) {
    std::vector<uint8_t> bytes = frame_sections({{kSectionThresholds, encode_thresholds(thresholds)}});
    atomic_write(path, bytes);
    return bytes.size();
}

ThresholdSet read_thresholds_file(const std::filesystem::path& path) {
    ParsedFile f = parse_file(path);
    for (const auto& [type, off, len] : f.sections) {
        if (type != kSectionThresholds) continue;
        ByteReader r{f.bytes.data() + off, len};
        return decode_thresholds(r);
    }
    throw ChecksumMismatchError("no thresholds section in " + path.string());
}

void rewrite_thresholds(const std::filesystem::path& path, const ThresholdSet& thresholds) {
    ParsedFile f = parse_file(path);
    std::vector<std::pair<uint32_t, std::vector<uint8_t>>> sections;
    for (const auto& [type, off, len] : f.sections) {
        if (type == kSectionThresholds) continue;
        sections.emplace_back(
            type, std::vector<uint8_t>(f.bytes.begin() + static_cast<ptrdiff_t>(off),
                                       f.bytes.begin() + static_cast<ptrdiff_t>(off + len)));
    }
    sections.emplace_back(kSectionThresholds, encode_thresholds(thresholds));
    atomic_write(path, frame_sections(sections));
}

uint64_t write_model(const NetworkModel& model, const std::filesystem::path& path) {
    ByteWriter w;
    w.u32(static_cast<uint32_t>(model.class_count()));
    w.u32(static_cast<uint32_t>(model.input_shape().size()));
    for (int64_t d : model.input_shape()) w.i64(d);
    w.u32(static_cast<uint32_t>(model.layers().size()));
    for (const auto& l : model.layers()) {
        w.u8(static_cast<uint8_t>(l.kind));
        w.u8(0);
        w.u8(0);
        w.u8(0);
        w.i32(l.out_channels);
        w.i32(l.kernel);
        w.i32(l.stride);
        w.i32(l.window);
        w.i32(l.pool_stride);
        w.i32(l.units);
        w.i32(l.tap_id);
    }
    for (size_t i = 0; i < model.layers().size(); ++i) {
        w.u64(static_cast<uint64_t>(model.weight(i).numel()));
        w.u64(static_cast<uint64_t>(model.bias(i).numel()));
        if (model.weight(i).numel())
            w.f32s(model.weight(i).data(), static_cast<size_t>(model.weight(i).numel()));
        if (model.bias(i).numel())
            w.f32s(model.bias(i).data(), static_cast<size_t>(model.bias(i).numel()));
    }
    std::vector<uint8_t> bytes = frame_sections({{kSectionModel, std::move(w.buf)}});
    atomic_write(path, bytes);
    return bytes.size();
}

NetworkModel read_model(const std::filesystem::path& path) {
    ParsedFile f = parse_file(path);
    for (const auto& [type, off, len] : f.sections) {
        if (type != kSectionModel) continue;
        ByteReader r{f.bytes.data() + off, len};
        int class_count = static_cast<int>(r.u32());
        uint32_t ndim = r.u32();
        std::vector<int64_t> input_shape(ndim);
        for (auto& d : input_shape) d = r.i64();
        uint32_t layer_count = r.u32();
        std::vector<LayerSpec> layers(layer_count);
        for (auto& l : layers) {
            l.kind = static_cast<LayerKind>(r.u8());
            r.u8();
            r.u8();
            r.u8();
            l.out_channels = r.i32();
            l.kernel = r.i32();
            l.stride = r.i32();
            l.window = r.i32();
            l.pool_stride = r.i32();
            l.units = r.i32();
            l.tap_id = r.i32();
        }
        NetworkModel model(input_shape, layers, class_count);
        for (uint32_t i = 0; i < layer_count; ++i) {
            uint64_t wn = r.u64(), bn = r.u64();
            if (wn != static_cast<uint64_t>(model.weight(i).numel()) ||
                bn != static_cast<uint64_t>(model.bias(i).numel()))
                throw ChecksumMismatchError("model weight blocks do not match the layer graph");
            if (wn) r.f32s(model.weight(i).data(), wn);
            if (bn) r.f32s(model.bias(i).data(), bn);
        }
        return model;
    }
    throw ChecksumMismatchError("no model section in " + path.string());
}

// ---- streaming kNNC writer ----------------------------------------------

struct KnncFileWriter::Impl {
    std::filesystem::path final_path, tmp_path;
    std::vector<TapLayout> taps;
    std::vector<uint64_t> class_samples;
    uint64_t rows_total = 0;
    std::FILE* f = nullptr;
    std::vector<uint64_t> tap_rows_base;  // absolute offset of each tap's row block
    std::vector<uint64_t> class_row_base;
    std::vector<uint64_t> cursor;
    uint64_t payload_end = 0;

    uint64_t row_offset(size_t tap, uint64_t row_index) const {
        return tap_rows_base[tap] + row_index * static_cast<uint64_t>(taps[tap].width) * 4;
    }
};

KnncFileWriter::KnncFileWriter(const std::filesystem::path& path, std::vector<TapLayout> taps,
                               std::vector<uint64_t> class_samples)
    : impl_(new Impl) {
    impl_->final_path = path;
    impl_->tmp_path = path;
    impl_->tmp_path += ".tmp";
    impl_->taps = std::move(taps);
    impl_->class_samples = std::move(class_samples);
    for (uint64_t s : impl_->class_samples) impl_->rows_total += s;
    impl_->class_row_base.resize(impl_->class_samples.size() + 1, 0);
    for (size_t c = 0; c < impl_->class_samples.size(); ++c)
        impl_->class_row_base[c + 1] = impl_->class_row_base[c] + impl_->class_samples[c];
    impl_->cursor.assign(impl_->class_samples.size(), 0);

    ByteWriter w;
    w.u32(kStoreMagic);
    w.u32(kStoreVersion);
    w.u32(1);
    w.u32(0);
    w.u32(kSectionSignature);
    w.u32(0);
    w.u64(sig_payload_bytes(CamKind::kKnnc, impl_->taps, impl_->class_samples, 0));
    write_sig_header(w, {CamKind::kKnnc, static_cast<uint32_t>(impl_->class_samples.size()), 0,
                         impl_->taps, impl_->class_samples});

    impl_->f = std::fopen(impl_->tmp_path.c_str(), "wb+");
    if (!impl_->f) throw StoreIoError("cannot open " + impl_->tmp_path.string());
    std::fwrite(w.buf.data(), 1, w.buf.size(), impl_->f);

    uint64_t pos = w.buf.size();
    impl_->tap_rows_base.resize(impl_->taps.size());
    for (size_t t = 0; t < impl_->taps.size(); ++t) {
        pos += 8;  // row count
        impl_->tap_rows_base[t] = pos;
        pos += impl_->rows_total * static_cast<uint64_t>(impl_->taps[t].width) * 4;
        pos += impl_->rows_total * 4;  // labels
    }
    impl_->payload_end = pos;
}

KnncFileWriter::~KnncFileWriter() {
    if (impl_ && impl_->f) std::fclose(impl_->f);
}

void KnncFileWriter::append(int class_index, const ActiveState& state) {
    auto& im = *impl_;
    size_t ci = static_cast<size_t>(class_index);
    uint64_t row = im.class_row_base[ci] + im.cursor[ci];
    if (row >= im.class_row_base[ci + 1])
        throw StoreIoError("more rows appended than declared for class " +
                           std::to_string(class_index));
    for (size_t t = 0; t < im.taps.size(); ++t) {
        const auto* v = state.find(im.taps[t].tap_id);
        if (!v || static_cast<int64_t>(v->size()) != im.taps[t].width)
            throw StoreIoError("active state does not match tap layout");
        if (std::fseek(im.f, static_cast<long>(im.row_offset(t, row)), SEEK_SET) != 0)
            throw StoreIoError("seek failed");
        std::fwrite(v->data(), 4, v->size(), im.f);
    }
    im.cursor[ci]++;
}

uint64_t KnncFileWriter::finalize(const std::optional<ThresholdSet>& thresholds) {
    auto& im = *impl_;
    for (size_t c = 0; c < im.class_samples.size(); ++c)
        if (im.cursor[c] != im.class_samples[c])
            throw StoreIoError("class " + std::to_string(c) + " is missing rows");

    for (size_t t = 0; t < im.taps.size(); ++t) {
        std::fseek(im.f, static_cast<long>(im.tap_rows_base[t] - 8), SEEK_SET);
        uint64_t rows_n = im.rows_total;
        std::fwrite(&rows_n, 8, 1, im.f);
        std::fseek(im.f,
                   static_cast<long>(im.tap_rows_base[t] +
                                     im.rows_total * static_cast<uint64_t>(im.taps[t].width) * 4),
                   SEEK_SET);
        for (size_t c = 0; c < im.class_samples.size(); ++c) {
            std::vector<int32_t> block(static_cast<size_t>(im.class_samples[c]),
                                       static_cast<int32_t>(c));
            std::fwrite(block.data(), 4, block.size(), im.f);
        }
    }
    uint32_t section_count = 1;
    std::fseek(im.f, static_cast<long>(im.payload_end), SEEK_SET);
    if (thresholds) {
        section_count = 2;
        std::vector<uint8_t> payload = encode_thresholds(*thresholds);
        ByteWriter w;
        w.u32(kSectionThresholds);
        w.u32(0);
        w.u64(payload.size());
        w.raw(payload.data(), payload.size());
        std::fwrite(w.buf.data(), 1, w.buf.size(), im.f);
    }
    std::fseek(im.f, 8, SEEK_SET);
    std::fwrite(&section_count, 4, 1, im.f);
    std::fflush(im.f);

    std::fseek(im.f, 0, SEEK_END);
    uint64_t total = static_cast<uint64_t>(std::ftell(im.f));
    std::fseek(im.f, 0, SEEK_SET);
    uLong crc = crc32(0L, Z_NULL, 0);
    std::vector<uint8_t> buf(1 << 20);
    uint64_t left = total;
    while (left) {
        size_t chunk = static_cast<size_t>(std::min<uint64_t>(left, buf.size()));
        if (std::fread(buf.data(), 1, chunk, im.f) != chunk) throw StoreIoError("crc read failed");
        crc = crc32(crc, buf.data(), static_cast<uInt>(chunk));
        left -= chunk;
    }
    uint32_t crc32v = static_cast<uint32_t>(crc);
    std::fseek(im.f, 0, SEEK_END);
    std::fwrite(&crc32v, 4, 1, im.f);
    std::fclose(im.f);
    im.f = nullptr;
    std::filesystem::rename(im.tmp_path, im.final_path);
    return total + 4;
}

// ---- mapped kNNC reader ---------------------------------------------------

struct MappedKnncSignature::Impl {
    int fd = -1;
    size_t map_len = 0;
    const uint8_t* base = nullptr;
    std::vector<TapLayout> taps;
    int class_count = 0;
    std::vector<uint64_t> class_samples;
    std::vector<KnncTapView> views;
    std::optional<ThresholdSet> thresholds;

    ~Impl() {
        if (base) munmap(const_cast<uint8_t*>(base), map_len);
        if (fd >= 0) close(fd);
    }
};

MappedKnncSignature::MappedKnncSignature(const std::filesystem::path& path, bool verify_checksum)
    : impl_(new Impl) {
    impl_->fd = open(path.c_str(), O_RDONLY);
    if (impl_->fd < 0) throw StoreIoError("cannot open " + path.string());
    struct stat st {};
    fstat(impl_->fd, &st);
    impl_->map_len = static_cast<size_t>(st.st_size);
    void* p = mmap(nullptr, impl_->map_len, PROT_READ, MAP_PRIVATE, impl_->fd, 0);
    if (p == MAP_FAILED) throw StoreIoError("mmap failed for " + path.string());
    impl_->base = static_cast<const uint8_t*>(p);
    const uint8_t* b = impl_->base;
    size_t n = impl_->map_len;
    if (n < kFileHeaderBytes + 4) throw ChecksumMismatchError("file truncated");
    uint32_t magic, version, count;
    std::memcpy(&magic, b, 4);
    std::memcpy(&version, b + 4, 4);
    std::memcpy(&count, b + 8, 4);
    if (magic != kStoreMagic) throw BadMagicError("not a covmon container: " + path.string());
    if (version != kStoreVersion) throw VersionSkewError(version, kStoreVersion);
    if (verify_checksum) {
        uint32_t stored;
        std::memcpy(&stored, b + n - 4, 4);
        if (crc_of(b, n - 4) != stored)
            throw ChecksumMismatchError("checksum mismatch in " + path.string());
    }
    size_t pos = kFileHeaderBytes;
    for (uint32_t s = 0; s < count; ++s) {
        uint32_t type;
        uint64_t len;
        if (pos + kSectionHeaderBytes > n - 4)
            throw ChecksumMismatchError("section header out of bounds");
        std::memcpy(&type, b + pos, 4);
        std::memcpy(&len, b + pos + 8, 8);
        pos += kSectionHeaderBytes;
        if (pos + len > n - 4) throw ChecksumMismatchError("section payload out of bounds");
        if (type == kSectionThresholds) {
            ByteReader r{b + pos, static_cast<size_t>(len)};
            impl_->thresholds = decode_thresholds(r);
        } else if (type == kSectionSignature) {
            ByteReader r{b + pos, static_cast<size_t>(len)};
            SigMeta m = read_sig_header(r);
            if (m.cam != CamKind::kKnnc)
                throw ChecksumMismatchError("mapped reader expects a kNNC signature");
            impl_->taps = m.taps;
            impl_->class_count = static_cast<int>(m.class_count);
            impl_->class_samples = m.class_samples;
            for (size_t t = 0; t < m.taps.size(); ++t) {
                uint64_t rows_n = r.u64();
                KnncTapView view;
                view.tap_id = m.taps[t].tap_id;
                view.width = m.taps[t].width;
                view.rows_n = static_cast<int64_t>(rows_n);
                r.need(static_cast<size_t>(rows_n * static_cast<uint64_t>(m.taps[t].width) * 4 +
                                           rows_n * 4));
                view.rows = reinterpret_cast<const float*>(b + pos + r.pos);
                r.pos += static_cast<size_t>(rows_n * static_cast<uint64_t>(m.taps[t].width) * 4);
                view.labels = reinterpret_cast<const int32_t*>(b + pos + r.pos);
                r.pos += static_cast<size_t>(rows_n * 4);
                impl_->views.push_back(view);
            }
        }
        pos += static_cast<size_t>(len);
    }
    if (impl_->views.empty())
        throw ChecksumMismatchError("no signature section in " + path.string());
}

MappedKnncSignature::~MappedKnncSignature() = default;
MappedKnncSignature::MappedKnncSignature(MappedKnncSignature&&) noexcept = default;
MappedKnncSignature& MappedKnncSignature::operator=(MappedKnncSignature&&) noexcept = default;

const std::vector<TapLayout>& MappedKnncSignature::taps() const { return impl_->taps; }
int MappedKnncSignature::class_count() const { return impl_->class_count; }
const std::vector<uint64_t>& MappedKnncSignature::class_samples() const {
    return impl_->class_samples;
}
const std::vector<KnncTapView>& MappedKnncSignature::views() const { return impl_->views; }
const std::optional<ThresholdSet>& MappedKnncSignature::thresholds() const {
    return impl_->thresholds;
}

}  // namespace covmon
