#include "tcupgan/dataset.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <opencv2/imgproc.hpp>
#include <random>

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

std::mt19937_64 cube_rng(std::uint64_t seed, int index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), 0x7c0fu};
    return std::mt19937_64(seq);
}

cv::Mat smooth_field(int size, int cells, double sigma, std::mt19937_64& rng) {
    std::normal_distribution<float> dist(0.0f, static_cast<float>(sigma));
    cv::Mat coarse(cells, cells, CV_32FC1);
    for (int y = 0; y < cells; ++y) {
        for (int x = 0; x < cells; ++x) coarse.at<float>(y, x) = dist(rng);
    }
    cv::Mat fine;
    cv::resize(coarse, fine, cv::Size(size, size), 0, 0, cv::INTER_CUBIC);
    return fine;
}

std::string slice_file(const std::string& dir, const std::string& id, int z) {
    return dir + "/" + id + "_" + std::to_string(z) + ".png";
}

}  // namespace

// ---- manifest -----------------------------------------------------------------

void DatasetManifest::validate() const {
    if (slice_depth < 1) throw ValidationError("manifest slice_depth must be positive");
    for (const auto& c : cubes) {
        if (static_cast<int>(c.slices.size()) != slice_depth ||
            static_cast<int>(c.masks.size()) != slice_depth) {
            throw ValidationError("cube '" + c.cube_id + "' does not list exactly " +
                                  std::to_string(slice_depth) + " slices and masks");
        }
        for (const auto& p : c.slices) {
            if (!fs::exists(resolve(p))) throw ValidationError("missing slice file " + p);
        }
        for (const auto& p : c.masks) {
            if (!fs::exists(resolve(p))) throw ValidationError("missing mask file " + p);
        }
    }
}

nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json cubes = nlohmann::json::array();
    for (const auto& c : m.cubes) {
        nlohmann::json e = {{"cube_id", c.cube_id}, {"slices", c.slices}, {"masks", c.masks}};
        if (!c.source_id.empty() && c.source_id != c.cube_id) e["source_id"] = c.source_id;
        if (!c.extra.empty()) e["extra"] = c.extra;
        cubes.push_back(std::move(e));
    }
    return {{"version", m.version}, {"slice_depth", m.slice_depth}, {"cubes", cubes},
            {"notes", m.notes}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j, const fs::path& root) {
    DatasetManifest m;
    m.root = root;
    m.version = j.at("version").get<std::string>();
    if (m.version != "1") throw ValidationError("unsupported manifest version '" + m.version + "'");
    m.slice_depth = j.at("slice_depth").get<int>();
    m.notes = j.value("notes", std::vector<std::string>{});
    for (const auto& e : j.at("cubes")) {
        ManifestEntry c;
        c.cube_id = e.at("cube_id").get<std::string>();
        c.source_id = e.value("source_id", c.cube_id);
        c.slices = e.at("slices").get<std::vector<std::string>>();
        c.masks = e.at("masks").get<std::vector<std::string>>();
        c.extra = e.value("extra", nlohmann::json::object());
        m.cubes.push_back(std::move(c));
    }
    return m;
}

DatasetManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
    }
    try {
        return manifest_from_json(j, path.parent_path());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("invalid manifest " + path.string() + ": " + e.what());
    }
}

void write_manifest(const DatasetManifest& m, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest into " + dir.string());
    out << manifest_to_json(m).dump(2) << "\n";
}

CubePair load_cube(const DatasetManifest& m, std::size_t index) {
    const ManifestEntry& e = m.cubes.at(index);
    std::vector<GrayImage> slices;
    std::vector<Bitmap> masks;
    for (const auto& p : e.slices) slices.push_back(read_gray_png(m.resolve(p)));
    for (const auto& p : e.masks) masks.push_back(read_mask_png(m.resolve(p)));
    CubePair pair = stack_slices(slices, masks, e.cube_id);
    if (pair.image.volume.depth != m.slice_depth) {
        throw ValidationError("cube '" + e.cube_id + "' depth differs from manifest slice_depth");
    }
    return pair;
}

std::vector<CubePair> load_all(const DatasetManifest& m) {
    std::vector<CubePair> out;
    out.reserve(m.cubes.size());
    for (std::size_t i = 0; i < m.cubes.size(); ++i) out.push_back(load_cube(m, i));
    return out;
}

ManifestEntry write_cube(const CubePair& pair, const fs::path& root, const std::string& source_id) {
    ManifestEntry e;
    e.cube_id = pair.image.cube_id;
    e.source_id = source_id.empty() ? e.cube_id : source_id;
    const auto images = unstack_images(pair.image.volume);
    const auto masks = unstack_masks(pair.mask.volume);
    for (std::size_t z = 0; z < images.size(); ++z) {
        e.slices.push_back(slice_file("slices", e.cube_id, static_cast<int>(z)));
        e.masks.push_back(slice_file("masks", e.cube_id, static_cast<int>(z)));
        write_gray_png(root / e.slices.back(), images[z]);
        write_mask_png(root / e.masks.back(), masks[z]);
    }
    return e;
}

// ---- synthesis ------------------------------------------------------------------

void SynthConfig::validate() const {
    if (n_cubes < 0 || depth < 1 || size < 8) throw ValidationError("invalid synthetic dataset shape");
    if (droplets_min < 0 || droplets_max < droplets_min) {
        throw ValidationError("invalid droplet count range");
    }
    if (!(radius_min > 0.0) || radius_max < radius_min) throw ValidationError("invalid radius range");
    if (2.0 * radius_max >= size) {
        throw ValidationError("droplet radius " + std::to_string(radius_max) +
                              " does not fit in a " + std::to_string(size) + "-pixel slice");
    }
    if (!(depth_radius_min > 0.0) || depth_radius_max < depth_radius_min) {
        throw ValidationError("invalid depth radius range");
    }
    if (contrast_min < 0.0 || contrast_max > 1.0 || contrast_max < contrast_min) {
        throw ValidationError("contrast range must lie within [0, 1]");
    }
    if (noise_sigma < 0.0) throw ValidationError("noise sigma must be non-negative");
}

nlohmann::json SynthConfig::to_json() const {
    return {{"n_cubes", n_cubes},
            {"depth", depth},
            {"size", size},
            {"droplets_min", droplets_min},
            {"droplets_max", droplets_max},
            {"radius_min", radius_min},
            {"radius_max", radius_max},
            {"depth_radius_min", depth_radius_min},
            {"depth_radius_max", depth_radius_max},
            {"contrast_min", contrast_min},
            {"contrast_max", contrast_max},
            {"noise_sigma", noise_sigma},
            {"seed", seed},
            {"id_prefix", id_prefix}};
}

nlohmann::json Droplet::to_json() const {
    return {{"center", {cz, cy, cx}}, {"radii", {rz, ry, rx}}, {"contrast", contrast}};
}

Droplet Droplet::from_json(const nlohmann::json& j) {
    const auto c = j.at("center").get<std::vector<double>>();
    const auto r = j.at("radii").get<std::vector<double>>();
    return Droplet{c.at(0), c.at(1), c.at(2), r.at(0), r.at(1), r.at(2), j.value("contrast", 0.5)};
}

bool droplet_contains(const Droplet& d, double z, double y, double x) {
    const double dz = (z - d.cz) / d.rz;
    const double dy = (y - d.cy) / d.ry;
    const double dx = (x - d.cx) / d.rx;
    return dz * dz + dy * dy + dx * dx <= 1.0;
}

std::vector<SyntheticCube> synthesize_cubes(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SyntheticCube> out;
    out.reserve(cfg.n_cubes);
    const int s = cfg.size;
    for (int n = 0; n < cfg.n_cubes; ++n) {
        auto rng = cube_rng(cfg.seed, n);
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

        SyntheticCube cube;
        const int count = std::uniform_int_distribution<int>(cfg.droplets_min, cfg.droplets_max)(rng);
        for (int i = 0; i < count; ++i) {
            Droplet d;
            d.ry = uniform(cfg.radius_min, cfg.radius_max);
            d.rx = uniform(cfg.radius_min, cfg.radius_max);
            d.rz = uniform(cfg.depth_radius_min, cfg.depth_radius_max);
            d.cy = uniform(d.ry, s - 1 - d.ry);
            d.cx = uniform(d.rx, s - 1 - d.rx);
            d.cz = uniform(0.0, cfg.depth - 1);
            d.contrast = uniform(cfg.contrast_min, cfg.contrast_max);
            cube.droplets.push_back(d);
        }

        const std::string id = cfg.id_prefix + "_" + std::to_string(n);
        CubePair& pair = cube.pair;
        pair.image.cube_id = id;
        pair.image.slice_ids = default_slice_ids(id, cfg.depth);
        pair.image.volume = Volume(cfg.depth, s, s);
        pair.mask.volume = Volume(cfg.depth, s, s);

        const double base = uniform(0.6, 0.8);
        const cv::Mat shared = smooth_field(s, std::max(2, s / 32), 0.06, rng);
        std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.noise_sigma));
        for (int z = 0; z < cfg.depth; ++z) {
            const cv::Mat local = smooth_field(s, std::max(2, s / 16), 0.03, rng);
            auto img = pair.image.volume.slice(z);
            auto msk = pair.mask.volume.slice(z);
            for (int y = 0; y < s; ++y) {
                for (int x = 0; x < s; ++x) {
                    double v = base + shared.at<float>(y, x) + local.at<float>(y, x);
                    double darkening = 0.0;
                    for (const auto& d : cube.droplets) {
                        if (droplet_contains(d, z, y, x)) {
                            msk[y * s + x] = 1.0f;
                            darkening = std::max(darkening, d.contrast);
                        }
                    }
                    v = v * (1.0 - darkening) + noise(rng);
                    // Quantize to 8 bits so in-memory cubes equal their PNG round-trip.
                    img[y * s + x] =
                        static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
                }
            }
        }
        out.push_back(std::move(cube));
    }
    return out;
}

DatasetManifest synthesize_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
    const auto cubes = synthesize_cubes(cfg);
    DatasetManifest m;
    m.root = out_dir;
    m.slice_depth = cfg.depth;
    m.notes.push_back("synthetic droplets: " + cfg.to_json().dump());
    for (const auto& c : cubes) {
        ManifestEntry e = write_cube(c.pair, out_dir, c.pair.image.cube_id);
        nlohmann::json geom = nlohmann::json::array();
        for (const auto& d : c.droplets) geom.push_back(d.to_json());
        e.extra["droplets"] = geom;
        m.cubes.push_back(std::move(e));
    }
    write_manifest(m, out_dir);
    return m;
}

// ---- simulated volunteers --------------------------------------------------------------

std::vector<AnnotationRecord> simulate_volunteers(const Bitmap& mask, int k, VolunteerNoise noise,
                                                  std::uint64_t seed, const std::string& cube_id,
                                                  int slice_index) {
    if (k < 1) throw ValidationError("need at least one simulated volunteer");
    if (noise.jitter_px < 0 || noise.miss_probability < 0.0 || noise.miss_probability > 1.0) {
        throw ValidationError("invalid volunteer noise settings");
    }
    cv::Mat src(mask.height, mask.width, CV_8UC1, const_cast<std::uint8_t*>(mask.bits.data()));
    cv::Mat labels;
    const int n_labels = cv::connectedComponents(src, labels, 8, CV_32S);

    std::mt19937_64 rng(seed);
    std::bernoulli_distribution miss(noise.miss_probability);
    std::uniform_int_distribution<int> jitter(-noise.jitter_px, noise.jitter_px);
    const std::string stamp = iso_now();

    std::vector<AnnotationRecord> out;
    for (int v = 0; v < k; ++v) {
        cv::Mat result = cv::Mat::zeros(mask.height, mask.width, CV_8UC1);
        for (int label = 1; label < n_labels; ++label) {
            if (miss(rng)) continue;
            const int r = jitter(rng);
            cv::Mat component = (labels == label);
            if (r != 0) {
                const cv::Mat se = cv::getStructuringElement(
                    cv::MORPH_ELLIPSE, cv::Size(2 * std::abs(r) + 1, 2 * std::abs(r) + 1));
                if (r > 0) cv::dilate(component, component, se);
                else cv::erode(component, component, se);
            }
            result |= component;
        }
        AnnotationRecord rec{cube_id, slice_index, "volunteer_" + std::to_string(v),
                             Bitmap(mask.height, mask.width), stamp};
        for (int y = 0; y < mask.height; ++y) {
            for (int x = 0; x < mask.width; ++x) rec.mask.at(y, x) = result.at<std::uint8_t>(y, x) ? 1 : 0;
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// ---- raw ingestion --------------------------------------------------------------

DatasetManifest build_dataset(const fs::path& raw_path, const BuildOptions& options,
                              const fs::path& out_dir) {
    if (options.resize != 2 * options.crop) {
        throw ValidationError("TenCrop needs the resize target to be twice the crop size");
    }
    std::ifstream in(raw_path);
    if (!in) throw ValidationError("cannot open raw manifest " + raw_path.string());
    nlohmann::json raw;
    try {
        in >> raw;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed raw manifest: " + std::string(e.what()));
    }
    const fs::path base = raw_path.parent_path();

    DatasetManifest m;
    m.root = out_dir;
    m.notes.push_back("built from " + raw_path.filename().string() + ": consensus, stack, resize " +
                      std::to_string(options.resize) + ", ten-crop " +
                      std::to_string(options.crop));
    for (const auto& entry : raw.at("cubes")) {
        const std::string id = entry.at("cube_id").get<std::string>();
        const auto slice_paths = entry.at("slices").get<std::vector<std::string>>();
        const auto ann_paths = entry.at("annotations").get<std::vector<std::vector<std::string>>>();
        if (ann_paths.size() != slice_paths.size()) {
            throw ValidationError("cube '" + id + "' needs one annotation list per slice");
        }
        std::vector<GrayImage> slices;
        std::vector<Bitmap> masks;
        for (std::size_t z = 0; z < slice_paths.size(); ++z) {
            slices.push_back(read_gray_png(base / slice_paths[z]));
            std::vector<AnnotationRecord> records;
            for (std::size_t v = 0; v < ann_paths[z].size(); ++v) {
                records.push_back({id, static_cast<int>(z), "volunteer_" + std::to_string(v),
                                   read_mask_png(base / ann_paths[z][v]), ""});
            }
            masks.push_back(aggregate_consensus(records));
        }
        CubePair pair = stack_slices(slices, masks, id);
        CubePair resized{resize_cube(pair.image, options.resize), resize_cube(pair.mask, options.resize)};
        if (m.slice_depth == 0) m.slice_depth = resized.image.volume.depth;
        if (resized.image.volume.depth != m.slice_depth) {
            throw ValidationError("cube '" + id + "' depth differs from earlier cubes");
        }
        for (const auto& crop : ten_crop(resized, options.crop)) {
            m.cubes.push_back(write_cube(crop, out_dir, id));
        }
    }
    write_manifest(m, out_dir);
    return m;
}

}  // namespace tcupgan
