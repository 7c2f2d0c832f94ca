#include "tcupgan/service.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <httplib.h>
#include <openssl/evp.h>
#include <openssl/sha.h>

namespace tcupgan {

namespace fs = std::filesystem;

namespace {

std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string correction_id(std::size_t seq) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "corr-%06zu", seq);
    return buf;
}

std::string relative_to(const fs::path& target, const fs::path& base) {
    return fs::relative(fs::absolute(target), fs::absolute(base)).generic_string();
}

nlohmann::json error_body(const std::string& message) { return {{"error", message}}; }

}  // namespace

// ---- encoding helpers ---------------------------------------------------------------

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    std::string clean;
    clean.reserve(text.size());
    for (char c : text) {
        if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
    }
    if (clean.size() % 4 != 0) throw ValidationError("base64 payload length is not a multiple of 4");
    std::vector<std::uint8_t> out(3 * clean.size() / 4);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                  static_cast<int>(clean.size()));
    if (n < 0) throw ValidationError("malformed base64 payload");
    std::size_t pad = 0;
    if (!clean.empty() && clean.back() == '=') ++pad;
    if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[SHA256_DIGEST_LENGTH];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return os.str();
}

// ---- log and state --------------------------------------------------------------

nlohmann::json CorrectionRecord::to_json() const {
    nlohmann::json j = {{"correction_id", correction_id}, {"cube_id", cube_id},
                        {"slice_index", slice_index},     {"author", author},
                        {"submitted_at", submitted_at},   {"mask_path", mask_path},
                        {"mask_sha256", mask_sha256}};
    j["supersedes"] = supersedes ? nlohmann::json(*supersedes) : nlohmann::json(nullptr);
    return j;
}

CorrectionRecord CorrectionRecord::from_json(const nlohmann::json& j) {
    CorrectionRecord r;
    r.correction_id = j.at("correction_id").get<std::string>();
    r.cube_id = j.at("cube_id").get<std::string>();
    r.slice_index = j.at("slice_index").get<int>();
    r.author = j.value("author", "");
    r.submitted_at = j.value("submitted_at", "");
    r.mask_path = j.at("mask_path").get<std::string>();
    r.mask_sha256 = j.value("mask_sha256", "");
    if (j.contains("supersedes") && !j["supersedes"].is_null()) {
        r.supersedes = j["supersedes"].get<std::string>();
    }
    return r;
}

void LoopState::apply(const CorrectionRecord& record) {
    latest[{record.cube_id, record.slice_index}] = record;
    ++log_length;
}

bool LoopState::operator==(const LoopState& other) const {
    if (log_length != other.log_length || latest.size() != other.latest.size()) return false;
    for (const auto& [key, rec] : latest) {
        auto it = other.latest.find(key);
        if (it == other.latest.end() || it->second.to_json() != rec.to_json()) return false;
    }
    return true;
}

std::vector<CorrectionRecord> read_correction_log(const fs::path& log_file) {
    std::vector<CorrectionRecord> out;
    std::ifstream in(log_file);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(CorrectionRecord::from_json(nlohmann::json::parse(line)));
    }
    return out;
}

LoopState replay(std::span<const CorrectionRecord> log) {
    LoopState state;
    for (const auto& r : log) state.apply(r);
    return state;
}

// ---- service ----------------------------------------------------------------------

ReviewService::ReviewService(ServiceOptions options) : options_(std::move(options)) {
    const fs::path queue_file = options_.queue_dir / "queue.jsonl";
    if (!fs::exists(queue_file)) throw ValidationError("no queue.jsonl in " + options_.queue_dir.string());
    for (auto& rec : read_queue(queue_file)) {
        QueueItem it;
        it.record = std::move(rec);
        const fs::path image = options_.queue_dir / it.record.image;
        it.broken = it.record.image.empty() || it.record.machine_mask.empty() ||
                    it.record.heatmap.empty() || !fs::exists(image) ||
                    !fs::exists(options_.queue_dir / it.record.machine_mask) ||
                    !fs::exists(options_.queue_dir / it.record.heatmap);
        if (!it.broken) {
            try {
                const GrayImage img = read_gray_png(image);
                it.height = img.height;
                it.width = img.width;
            } catch (const std::exception&) {
                it.broken = true;
            }
        }
        index_[{it.record.cube_id, it.record.slice_index}] = items_.size();
        items_.push_back(std::move(it));
    }
    fs::create_directories(options_.state_dir / "masks");
    state_ = replay(read_correction_log(log_file()));
}

const QueueItem& ReviewService::item(const std::string& cube_id, int slice_index) const {
    auto it = index_.find({cube_id, slice_index});
    if (it == index_.end()) {
        throw ServiceError(404, "slice " + cube_id + "/" + std::to_string(slice_index) +
                                    " is not in the review queue");
    }
    return items_[it->second];
}

std::string ReviewService::status_of(const QueueItem& item) const {
    if (state_.latest.contains({item.record.cube_id, item.record.slice_index})) return "corrected";
    return item.broken ? "broken" : "pending";
}

nlohmann::json ReviewService::queue(const std::string& status, std::size_t limit) const {
    if (!status.empty() && status != "pending" && status != "corrected" && status != "broken") {
        throw ServiceError(400, "unknown status filter '" + status + "'");
    }
    std::lock_guard lock(mutex_);
    nlohmann::json out = nlohmann::json::array();
    for (const auto& item : items_) {
        const std::string st = status_of(item);
        if (!status.empty() && st != status) continue;
        nlohmann::json j = item.record.to_json();
        j["status"] = st;
        j["height"] = item.height;
        j["width"] = item.width;
        auto c = state_.latest.find({item.record.cube_id, item.record.slice_index});
        j["correction_id"] = c != state_.latest.end() ? nlohmann::json(c->second.correction_id)
                                                      : nlohmann::json(nullptr);
        out.push_back(std::move(j));
        if (limit > 0 && out.size() >= limit) break;
    }
    return out;
}

std::vector<std::uint8_t> ReviewService::slice_asset(const std::string& cube_id, int slice_index,
                                                     const std::string& kind) const {
    const QueueItem& it = item(cube_id, slice_index);
    fs::path path;
    if (kind == "image") {
        path = options_.queue_dir / it.record.image;
    } else if (kind == "heatmap") {
        path = options_.queue_dir / it.record.heatmap;
    } else if (kind == "mask") {
        std::lock_guard lock(mutex_);
        auto c = state_.latest.find({cube_id, slice_index});
        path = c != state_.latest.end() ? options_.state_dir / c->second.mask_path
                                        : options_.queue_dir / it.record.machine_mask;
    } else {
        throw ServiceError(404, "unknown asset kind '" + kind + "'");
    }
    if (!fs::exists(path)) throw ServiceError(404, "asset missing for " + cube_id + "/" +
                                                       std::to_string(slice_index));
    return read_file_bytes(path);
}

IngestResult ReviewService::ingest(const CorrectionSubmission& sub) {
    const QueueItem& it = item(sub.cube_id, sub.slice_index);
    if (it.broken) throw ServiceError(409, "queue item has missing assets");
    GrayImage decoded;
    try {
        decoded = decode_png(sub.mask_png);
        gray_to_mask(decoded);
    } catch (const ValidationError& e) {
        throw ServiceError(400, std::string("invalid mask: ") + e.what());
    }
    if (decoded.height != it.height || decoded.width != it.width) {
        throw ServiceError(400, "mask is (" + std::to_string(decoded.height) + ", " +
                                    std::to_string(decoded.width) + "), expected (H, W) = (" +
                                    std::to_string(it.height) + ", " + std::to_string(it.width) +
                                    ")");
    }
    const std::string digest = sha256_hex(sub.mask_png);

    std::lock_guard lock(mutex_);
    const SliceKey key{sub.cube_id, sub.slice_index};
    std::optional<std::string> supersedes;
    if (auto prev = state_.latest.find(key); prev != state_.latest.end()) {
        if (prev->second.mask_sha256 == digest) return {prev->second.correction_id, true};
        supersedes = prev->second.correction_id;
    }
    CorrectionRecord rec;
    rec.correction_id = correction_id(state_.log_length + 1);
    rec.cube_id = sub.cube_id;
    rec.slice_index = sub.slice_index;
    rec.author = sub.author;
    rec.submitted_at = iso_now();
    rec.mask_path = "masks/" + rec.correction_id + ".png";
    rec.mask_sha256 = digest;
    rec.supersedes = supersedes;

    write_file_bytes(options_.state_dir / rec.mask_path, sub.mask_png);
    {
        std::ofstream log(log_file(), std::ios::app);
        if (!log) throw ServiceError(500, "cannot append to correction log");
        log << rec.to_json().dump() << "\n";
        log.flush();
        if (!log) throw ServiceError(500, "failed appending to correction log");
    }
    state_.apply(rec);
    return {rec.correction_id, false};
}

LoopState ReviewService::state() const {
    std::lock_guard lock(mutex_);
    return state_;
}

DatasetManifest ReviewService::export_retrain() const {
    if (options_.dataset_manifest.empty()) throw ServiceError(503, "service has no dataset configured");
    if (options_.export_dir.empty()) throw ServiceError(503, "service has no export directory");
    const DatasetManifest dataset = read_manifest(options_.dataset_manifest);
    const LoopState snapshot = state();
    if (snapshot.latest.empty()) throw ServiceError(409, "no corrections to export");
    return export_retrain_manifest(dataset, snapshot, options_.state_dir, options_.export_dir);
}

DatasetManifest export_retrain_manifest(const DatasetManifest& dataset, const LoopState& state,
                                        const fs::path& state_dir, const fs::path& out_dir) {
    if (state.latest.empty()) throw ValidationError("export needs at least one correction");
    fs::create_directories(out_dir);
    if (fs::equivalent(fs::absolute(out_dir), fs::absolute(dataset.root.empty() ? "." : dataset.root))) {
        throw ValidationError("export directory must differ from the source dataset directory");
    }
    DatasetManifest out;
    out.root = out_dir;
    out.version = dataset.version;
    out.slice_depth = dataset.slice_depth;
    out.notes = dataset.notes;
    for (const auto& entry : dataset.cubes) {
        ManifestEntry e = entry;
        for (std::size_t z = 0; z < entry.slices.size(); ++z) {
            e.slices[z] = relative_to(dataset.resolve(entry.slices[z]), out_dir);
            auto c = state.latest.find({entry.cube_id, static_cast<int>(z)});
            if (c == state.latest.end()) {
                e.masks[z] = relative_to(dataset.resolve(entry.masks[z]), out_dir);
                continue;
            }
            const std::string rel = "corrected_masks/" + entry.cube_id + "_" + std::to_string(z) + ".png";
            fs::create_directories((out_dir / rel).parent_path());
            fs::copy_file(state_dir / c->second.mask_path, out_dir / rel,
                          fs::copy_options::overwrite_existing);
            e.masks[z] = rel;
            out.notes.push_back("replaced mask " + entry.cube_id + "/" + std::to_string(z) +
                                " with correction " + c->second.correction_id);
        }
        out.cubes.push_back(std::move(e));
    }
    write_manifest(out, out_dir);
    return out;
}

// ---- HTTP ---------------------------------------------------------------------------

void register_routes(httplib::Server& server, ReviewService& service) {
    server.set_default_headers({{kApiVersionHeader, kApiVersion}});

    auto guarded = [](auto handler) {
        return [handler](const httplib::Request& req, httplib::Response& res) {
            try {
                handler(req, res);
            } catch (const ServiceError& e) {
                res.status = e.status();
                res.set_content(error_body(e.what()).dump(), "application/json");
            } catch (const ValidationError& e) {
                res.status = 400;
                res.set_content(error_body(e.what()).dump(), "application/json");
            } catch (const nlohmann::json::exception& e) {
                res.status = 400;
                res.set_content(error_body(std::string("bad request body: ") + e.what()).dump(),
                                "application/json");
            } catch (const std::exception& e) {
                res.status = 500;
                res.set_content(error_body(e.what()).dump(), "application/json");
            }
        };
    };

    server.Get("/api/health", guarded([](const httplib::Request&, httplib::Response& res) {
                   res.set_content(nlohmann::json{{"status", "ok"}}.dump(), "application/json");
               }));

    server.Get("/api/queue", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                   std::size_t limit = 0;
                   if (req.has_param("limit")) {
                       try {
                           limit = std::stoul(req.get_param_value("limit"));
                       } catch (const std::exception&) {
                           throw ServiceError(400, "limit must be a non-negative integer");
                       }
                   }
                   const std::string status = req.has_param("status") ? req.get_param_value("status") : "";
                   res.set_content(service.queue(status, limit).dump(), "application/json");
               }));

    server.Get(R"(/api/slices/([^/]+)/(\d+)/(image|mask|heatmap))",
               guarded([&service](const httplib::Request& req, httplib::Response& res) {
                   const auto bytes = service.slice_asset(req.matches[1], std::stoi(req.matches[2]),
                                                          req.matches[3]);
                   res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
               }));

    server.Post("/api/corrections",
                guarded([&service](const httplib::Request& req, httplib::Response& res) {
                    const auto body = nlohmann::json::parse(req.body);
                    CorrectionSubmission sub;
                    sub.cube_id = body.at("cube_id").get<std::string>();
                    sub.slice_index = body.at("slice_index").get<int>();
                    sub.author = body.value("author", "");
                    sub.mask_png = base64_decode(body.at("mask_png_base64").get<std::string>());
                    const IngestResult r = service.ingest(sub);
                    res.set_content(
                        nlohmann::json{{"correction_id", r.correction_id}, {"duplicate", r.duplicate}}.dump(),
                        "application/json");
                }));

    server.Get("/api/export", guarded([&service](const httplib::Request&, httplib::Response& res) {
                   const DatasetManifest m = service.export_retrain();
                   res.set_content(manifest_to_json(m).dump(), "application/json");
               }));
}

}  // namespace tcupgan
