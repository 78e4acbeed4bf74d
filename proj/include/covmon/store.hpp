#pragma once

#include <filesystem>
#include <optional>
#include <variant>

#include "covmon/calibrate.hpp"
#include "covmon/cam_types.hpp"
#include "covmon/model.hpp"

namespace covmon {

// Flat little-endian container (documented field by field in
// docs/signature_format.md): magic, format version, typed sections, and a
// trailing CRC-32 over everything before it.
inline constexpr uint32_t kStoreMagic = 0x47535643u;  // "CVSG"
inline constexpr uint32_t kStoreVersion = 1;

struct BadMagicError : std::runtime_error {
    explicit BadMagicError(const std::string& what) : std::runtime_error(what) {}
};
struct VersionSkewError : std::runtime_error {
    VersionSkewError(uint32_t found, uint32_t supported)
        : std::runtime_error("container version " + std::to_string(found) +
                             " not supported (reader supports " + std::to_string(supported) + ")"),
          found(found),
          supported(supported) {}
    uint32_t found, supported;
};
struct ChecksumMismatchError : std::runtime_error {
    explicit ChecksumMismatchError(const std::string& what) : std::runtime_error(what) {}
};
struct StoreIoError : std::runtime_error {
    explicit StoreIoError(const std::string& what) : std::runtime_error(what) {}
};

using AnySignature = std::variant<SrcSignature, MrcSignature, NrcSignature, KnncSignature>;

CamKind signature_cam(const AnySignature& sig);
const std::vector<TapLayout>& signature_taps(const AnySignature& sig);

// Fingerprint of (CAM, parameter, tap layout, class count); thresholds carry
// it so a ThresholdSet cannot be applied to a signature it was not
// calibrated for.
uint64_t config_fingerprint(CamKind cam, uint32_t param, const std::vector<TapLayout>& taps,
                            int class_count);

// ---- analytic sizes ----------------------------------------------------

// Data bytes a signature stores for one tap (ranges/frequencies/rows),
// excluding labels, descriptors and file framing.
uint64_t analytic_tap_payload_bytes(CamKind cam, uint64_t width, uint32_t present_classes,
                                    uint32_t param, uint64_t rows);

// Exact file size the writer will produce for a signature (+ optional
// thresholds); asserted byte-for-byte in tests.
uint64_t analytic_file_bytes(CamKind cam, const std::vector<TapLayout>& taps,
                             const std::vector<uint64_t>& class_samples, uint32_t param,
                             bool with_thresholds);

// ---- write / read --------------------------------------------------------

// Atomic (temp + rename); returns bytes written.
uint64_t write_signature(const AnySignature& sig, const std::optional<ThresholdSet>& thresholds,
                         const std::filesystem::path& path);

std::pair<AnySignature, std::optional<ThresholdSet>> read_signature(
    const std::filesystem::path& path);

// Replaces/attaches the thresholds section of an existing signature file.
void rewrite_thresholds(const std::filesystem::path& path, const ThresholdSet& thresholds);

// Thresholds-only container files (sidecars for signatures too large to rewrite).
uint64_t write_thresholds_file(const ThresholdSet& thresholds, const std::filesystem::path& path);
ThresholdSet read_thresholds_file(const std::filesystem::path& path);

uint64_t write_model(const NetworkModel& model, const std::filesystem::path& path);
NetworkModel read_model(const std::filesystem::path& path);

// ---- large kNNC signatures ------------------------------------------------

// Streams kNNC rows straight to the container so the full row matrix never
// has to be resident. Samples must be appended class-grouped ascending.
class KnncFileWriter {
public:
    KnncFileWriter(const std::filesystem::path& path, std::vector<TapLayout> taps,
                   std::vector<uint64_t> class_samples);
    ~KnncFileWriter();

    void append(int class_index, const ActiveState& state);
    // Writes label arrays and the checksum, then renames into place.
    uint64_t finalize(const std::optional<ThresholdSet>& thresholds);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Read-only mapped view of a kNNC signature file.
class MappedKnncSignature {
public:
    explicit MappedKnncSignature(const std::filesystem::path& path, bool verify_checksum = true);
    ~MappedKnncSignature();
    MappedKnncSignature(MappedKnncSignature&&) noexcept;
    MappedKnncSignature& operator=(MappedKnncSignature&&) noexcept;

    const std::vector<TapLayout>& taps() const;
    int class_count() const;
    const std::vector<uint64_t>& class_samples() const;
    const std::vector<KnncTapView>& views() const;
    const std::optional<ThresholdSet>& thresholds() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace covmon
