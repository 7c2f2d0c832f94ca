#pragma once

// Human-in-the-loop service: serves the review queue, records corrections in
// an append-only JSON-lines log, and folds them into a retraining manifest.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tcupgan/dataset.hpp"
#include "tcupgan/triage.hpp"

namespace httplib {
class Server;
}

namespace tcupgan {

inline constexpr const char* kApiVersionHeader = "tcupgan-api";
inline constexpr const char* kApiVersion = "1";

/// One line of the correction log.
struct CorrectionRecord {
    std::string correction_id;
    std::string cube_id;
    int slice_index = 0;
    std::string author;
    std::string submitted_at;
    /// PNG path relative to the state directory.
    std::string mask_path;
    std::string mask_sha256;
    std::optional<std::string> supersedes;

    nlohmann::json to_json() const;
    static CorrectionRecord from_json(const nlohmann::json& j);
};

using SliceKey = std::pair<std::string, int>;

/// Deterministic fold of the log: latest correction per slice plus the count
/// of log entries consumed.
struct LoopState {
    std::map<SliceKey, CorrectionRecord> latest;
    std::size_t log_length = 0;

    void apply(const CorrectionRecord& record);
    bool operator==(const LoopState& other) const;
};

std::vector<CorrectionRecord> read_correction_log(const std::filesystem::path& log_file);
LoopState replay(std::span<const CorrectionRecord> log);

struct CorrectionSubmission {
    std::string cube_id;
    int slice_index = 0;
    std::string author;
    std::vector<std::uint8_t> mask_png;
};

struct IngestResult {
    std::string correction_id;
    bool duplicate = false;
};

/// Request-level failure carrying an HTTP-style status code.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, const std::string& message)
        : std::runtime_error(message), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

struct ServiceOptions {
    /// Directory holding queue.jsonl and the assets it references.
    std::filesystem::path queue_dir;
    /// Source dataset manifest (read-only); needed for export.
    std::filesystem::path dataset_manifest;
    /// Where corrections.jsonl and masks/ live.
    std::filesystem::path state_dir;
    /// Where GET /api/export writes the retraining manifest.
    std::filesystem::path export_dir;
};

struct QueueItem {
    QueueRecord record;
    int height = 0;
    int width = 0;
    bool broken = false;
};

class ReviewService {
public:
    explicit ReviewService(ServiceOptions options);

    /// status: "", "pending", "corrected" or "broken"; limit 0 means unlimited.
    nlohmann::json queue(const std::string& status = "", std::size_t limit = 0) const;
    /// PNG bytes of "image", "heatmap", or "mask" (latest correction if any,
    /// otherwise the machine mask).
    std::vector<std::uint8_t> slice_asset(const std::string& cube_id, int slice_index,
                                          const std::string& kind) const;
    IngestResult ingest(const CorrectionSubmission& submission);
    DatasetManifest export_retrain() const;

    LoopState state() const;
    const ServiceOptions& options() const { return options_; }
    std::filesystem::path log_file() const { return options_.state_dir / "corrections.jsonl"; }

private:
    const QueueItem& item(const std::string& cube_id, int slice_index) const;
    std::string status_of(const QueueItem& item) const;

    ServiceOptions options_;
    std::vector<QueueItem> items_;
    std::map<SliceKey, std::size_t> index_;
    mutable std::mutex mutex_;
    LoopState state_;
};

/// Replaces masks of corrected slices with their latest correction; all other
/// paths point back at the untouched source files.
DatasetManifest export_retrain_manifest(const DatasetManifest& dataset, const LoopState& state,
                                        const std::filesystem::path& state_dir,
                                        const std::filesystem::path& out_dir);

/// Binds the HTTP API of `service` onto `server`.
void register_routes(httplib::Server& server, ReviewService& service);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);
std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace tcupgan
