#include "covmon/data.hpp"

#include <curl/curl.h>
#include <openssl/evp.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <mutex>

#include "covmon/log.hpp"

namespace covmon {

namespace {

uint32_t read_be32(const std::vector<uint8_t>& bytes, size_t offset) {
    if (offset + 4 > bytes.size()) throw IdxParseError("truncated IDX header", offset);
    return (static_cast<uint32_t>(bytes[offset]) << 24) |
           (static_cast<uint32_t>(bytes[offset + 1]) << 16) |
           (static_cast<uint32_t>(bytes[offset + 2]) << 8) | static_cast<uint32_t>(bytes[offset + 3]);
}

}  // namespace

IdxImages parse_idx_images(const std::vector<uint8_t>& bytes) {
    uint32_t magic = read_be32(bytes, 0);
    if (magic != 0x00000803u) throw IdxParseError("bad IDX image magic", 0);
    IdxImages out;
    out.count = read_be32(bytes, 4);
    out.rows = read_be32(bytes, 8);
    out.cols = read_be32(bytes, 12);
    size_t need = 16 + static_cast<size_t>(out.count) * out.rows * out.cols;
    if (bytes.size() < need) throw IdxParseError("truncated IDX image payload", bytes.size());
    out.pixels.assign(bytes.begin() + 16, bytes.begin() + static_cast<ptrdiff_t>(need));
    return out;
}

IdxLabels parse_idx_labels(const std::vector<uint8_t>& bytes) {
    uint32_t magic = read_be32(bytes, 0);
    if (magic != 0x00000801u) throw IdxParseError("bad IDX label magic", 0);
    uint32_t count = read_be32(bytes, 4);
    size_t need = 8 + count;
    if (bytes.size() < need) throw IdxParseError("truncated IDX label payload", bytes.size());
    IdxLabels out;
    out.labels.assign(bytes.begin() + 8, bytes.begin() + static_cast<ptrdiff_t>(need));
    return out;
}

DatasetSplit make_split(const IdxImages& images, const IdxLabels& labels, Provenance provenance) {
    if (images.count != static_cast<int64_t>(labels.labels.size()))
        throw IdxParseError("image/label count mismatch", 0);
    DatasetSplit split;
    split.provenance = provenance;
    split.images.resize(static_cast<size_t>(images.count));
    const int64_t plane = images.rows * images.cols;
    for (int64_t i = 0; i < images.count; ++i) {
        Tensor t({1, images.rows, images.cols});
        const uint8_t* src = images.pixels.data() + i * plane;
        for (int64_t j = 0; j < plane; ++j) t[j] = static_cast<float>(src[j]) / 255.0f;
        split.images[static_cast<size_t>(i)] = {std::move(t), static_cast<int>(labels.labels[static_cast<size_t>(i)])};
    }
    return split;
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FetchError("cannot open " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 20);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        EVP_DigestUpdate(ctx, buf.data(), static_cast<size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

namespace {

size_t curl_write_cb(char* ptr, size_t size, size_t nmemb, void* userdata) {
    auto* f = static_cast<std::FILE*>(userdata);
    return std::fwrite(ptr, size, nmemb, f);
}

class CurlTransport : public HttpTransport {
public:
    CurlTransport() {
        static std::once_flag once;
        std::call_once(once, [] { curl_global_init(CURL_GLOBAL_DEFAULT); });
    }

    void fetch(const std::string& url, const std::filesystem::path& dest) override {
        std::filesystem::path partial = dest;
        partial += ".partial";
        uint64_t resume_from = 0;
        if (std::filesystem::exists(partial)) resume_from = std::filesystem::file_size(partial);
        std::FILE* f = std::fopen(partial.c_str(), resume_from ? "ab" : "wb");
        if (!f) throw FetchError("cannot open " + partial.string());
        CURL* curl = curl_easy_init();
        curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
        curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, curl_write_cb);
        curl_easy_setopt(curl, CURLOPT_WRITEDATA, f);
        curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
        curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
        if (resume_from)
            curl_easy_setopt(curl, CURLOPT_RESUME_FROM_LARGE, static_cast<curl_off_t>(resume_from));
        CURLcode rc = curl_easy_perform(curl);
        curl_easy_cleanup(curl);
        std::fclose(f);
        if (rc != CURLE_OK) {
            if (rc != CURLE_RANGE_ERROR) std::filesystem::remove(partial);
            throw FetchError("download failed for " + url + ": " + curl_easy_strerror(rc));
        }
        std::filesystem::rename(partial, dest);
    }
};

void ensure_file(const DatasetFile& file, const std::filesystem::path& dir,
                 HttpTransport* transport) {
    std::filesystem::path path = dir / file.filename;
    if (!std::filesystem::exists(path)) {
        if (!transport) throw FetchError("no transport and no cached copy of " + file.filename);
        std::string last_error = "no mirror configured";
        bool ok = false;
        for (const auto& url : file.urls) {
            try {
                log_info("fetching " + url);
                transport->fetch(url, path);
                ok = true;
                break;
            } catch (const FetchError& e) {
                last_error = e.what();
            }
        }
        if (!ok) throw FetchError("all mirrors failed for " + file.filename + ": " + last_error);
    }
    if (file.byte_size && std::filesystem::file_size(path) != file.byte_size) {
        std::filesystem::path quarantine = path;
        quarantine += ".quarantine";
        std::filesystem::rename(path, quarantine);
        throw ChecksumError("size mismatch for " + file.filename + "; quarantined");
    }
    if (!file.sha256.empty()) {
        std::string got = sha256_file(path);
        if (got != file.sha256) {
            std::filesystem::path quarantine = path;
            quarantine += ".quarantine";
            std::filesystem::rename(path, quarantine);
            throw ChecksumError("checksum mismatch for " + file.filename + " (got " + got +
                                "); quarantined");
        }
    }
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw FetchError("cannot open " + path.string());
    std::vector<uint8_t> bytes(static_cast<size_t>(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    return bytes;
}

}  // namespace

std::unique_ptr<HttpTransport> make_curl_transport() { return std::make_unique<CurlTransport>(); }

std::pair<DatasetSplit, DatasetSplit> fetch_dataset(const DatasetSpec& spec,
                                                    const std::filesystem::path& cache_dir,
                                                    HttpTransport* transport) {
    std::filesystem::path dir = cache_dir / spec.name;
    std::filesystem::create_directories(dir);
    for (const DatasetFile* f :
         {&spec.train_images, &spec.train_labels, &spec.test_images, &spec.test_labels})
        ensure_file(*f, dir, transport);
    DatasetSplit train = make_split(parse_idx_images(read_file(dir / spec.train_images.filename)),
                                    parse_idx_labels(read_file(dir / spec.train_labels.filename)),
                                    Provenance::kTrain);
    DatasetSplit test = make_split(parse_idx_images(read_file(dir / spec.test_images.filename)),
                                   parse_idx_labels(read_file(dir / spec.test_labels.filename)),
                                   Provenance::kTest);
    return {std::move(train), std::move(test)};
}

size_t TrustedSet::total() const {
    size_t n = 0;
    for (const auto& c : per_class) n += c.size();
    return n;
}

TrustedSet select_trusted(const NetworkModel& model, const DatasetSplit& train_split,
                          float score_threshold) {
    TrustedSet out;
    out.source = &train_split;
    out.score_threshold = score_threshold;
    out.per_class.resize(static_cast<size_t>(model.class_count()));
    for (size_t i = 0; i < train_split.images.size(); ++i) {
        const auto& img = train_split.images[i];
        ForwardResult res = forward(model, img.pixels);
        if (res.predicted == img.label && res.score > score_threshold)
            out.per_class[static_cast<size_t>(img.label)].push_back(static_cast<int32_t>(i));
    }
    for (size_t c = 0; c < out.per_class.size(); ++c)
        if (out.per_class[c].empty())
            log_warn("trusted set: class " + std::to_string(c) + " is empty");
    return out;
}

std::vector<int32_t> select_trusted_test(const NetworkModel& model, const DatasetSplit& test_split,
                                         float score_threshold, size_t cap) {
    std::vector<int32_t> out;
    for (size_t i = 0; i < test_split.images.size() && out.size() < cap; ++i) {
        const auto& img = test_split.images[i];
        ForwardResult res = forward(model, img.pixels);
        if (res.predicted == img.label && res.score > score_threshold)
            out.push_back(static_cast<int32_t>(i));
    }
    return out;
}

std::vector<WrongPrediction> filter_wrong_high_score(const NetworkModel& model,
                                                     const std::vector<LabeledImage>& candidates,
                                                     float wrong_score_threshold) {
    std::vector<WrongPrediction> out;
    for (size_t i = 0; i < candidates.size(); ++i) {
        ForwardResult res = forward(model, candidates[i].pixels);
        if (res.predicted != candidates[i].label && res.score > wrong_score_threshold)
            out.push_back({static_cast<int32_t>(i), res.predicted, res.score});
    }
    return out;
}

double evaluate_accuracy(const NetworkModel& model, const DatasetSplit& split) {
    if (split.images.empty()) throw std::invalid_argument("cannot evaluate on an empty set");
    int64_t correct = 0;
    for (const auto& img : split.images) {
        ForwardResult res = forward(model, img.pixels);
        correct += res.predicted == img.label;
    }
    return static_cast<double>(correct) / static_cast<double>(split.images.size());
}

}  // namespace covmon
