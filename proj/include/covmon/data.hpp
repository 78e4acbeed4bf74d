#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "covmon/model.hpp"
#include "covmon/tensor.hpp"

namespace covmon {

struct LabeledImage {
    Tensor pixels;  // (1,28,28), values in [0,1]
    int label = -1;
};

enum class Provenance { kTrain, kTest };

struct DatasetSplit {
    std::vector<LabeledImage> images;
    Provenance provenance = Provenance::kTrain;
};

struct IdxParseError : std::runtime_error {
    IdxParseError(const std::string& what, size_t offset)
        : std::runtime_error(what + " (offset " + std::to_string(offset) + ")"), offset(offset) {}
    size_t offset;
};

// IDX container payloads (big-endian dims, unsigned-byte data).
struct IdxImages {
    int64_t count = 0, rows = 0, cols = 0;
    std::vector<uint8_t> pixels;
};
struct IdxLabels {
    std::vector<uint8_t> labels;
};

IdxImages parse_idx_images(const std::vector<uint8_t>& bytes);
IdxLabels parse_idx_labels(const std::vector<uint8_t>& bytes);

DatasetSplit make_split(const IdxImages& images, const IdxLabels& labels, Provenance provenance);

// Pluggable download transport so tests can run without network access.
class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    // Fetches url into dest; resumes a partial file when the server allows it.
    virtual void fetch(const std::string& url, const std::filesystem::path& dest) = 0;
};

std::unique_ptr<HttpTransport> make_curl_transport();

struct DatasetFile {
    std::string filename;
    std::vector<std::string> urls;  // mirrors, tried in order
    std::string sha256;             // lowercase hex
    uint64_t byte_size = 0;
};

struct DatasetSpec {
    std::string name;  // cache subdirectory, e.g. "mnist"
    DatasetFile train_images, train_labels, test_images, test_labels;
};

struct FetchError : std::runtime_error {
    explicit FetchError(const std::string& what) : std::runtime_error(what) {}
};
struct ChecksumError : std::runtime_error {
    explicit ChecksumError(const std::string& what) : std::runtime_error(what) {}
};

std::string sha256_file(const std::filesystem::path& path);

// Returns the dataset from <cache>/<name>/<file>, downloading files that are
// missing. Payload length and checksum are verified before parsing; a file
// failing verification is quarantined and reported.
std::pair<DatasetSplit, DatasetSplit> fetch_dataset(const DatasetSpec& spec,
                                                    const std::filesystem::path& cache_dir,
                                                    HttpTransport* transport = nullptr);

// ---- trusted-set construction -----------------------------------------

struct TrustedSet {
    const DatasetSplit* source = nullptr;
    float score_threshold = 0.9f;
    std::vector<std::vector<int32_t>> per_class;  // indices into source->images

    size_t total() const;
};

// Training samples the model classifies correctly with softmax score above
// the threshold, partitioned by true class.
TrustedSet select_trusted(const NetworkModel& model, const DatasetSplit& train_split,
                          float score_threshold = 0.9f);

// Same selection from the test split, truncated to `cap` in file order.
std::vector<int32_t> select_trusted_test(const NetworkModel& model, const DatasetSplit& test_split,
                                         float score_threshold = 0.9f, size_t cap = 9000);

struct WrongPrediction {
    int32_t index = -1;
    int predicted = -1;
    float score = 0.0f;
};

// Keeps samples predicted into a wrong class with score above the threshold.
std::vector<WrongPrediction> filter_wrong_high_score(const NetworkModel& model,
                                                     const std::vector<LabeledImage>& candidates,
                                                     float wrong_score_threshold);

double evaluate_accuracy(const NetworkModel& model, const DatasetSplit& split);

}  // namespace covmon
