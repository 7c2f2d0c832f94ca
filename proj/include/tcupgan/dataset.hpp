#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tcupgan/pipeline.hpp"

namespace tcupgan {

struct ManifestEntry {
    std::string cube_id;
    /// Cube the entry was cropped from; train/validation splits group on it.
    std::string source_id;
    std::vector<std::string> slices;
    std::vector<std::string> masks;
    /// Optional extra data such as synthetic droplet geometry.
    nlohmann::json extra = nlohmann::json::object();
};

struct DatasetManifest {
    std::string version = "1";
    int slice_depth = 0;
    std::vector<ManifestEntry> cubes;
    std::vector<std::string> notes;
    /// Directory the relative paths resolve against (not serialized).
    std::filesystem::path root;

    std::filesystem::path resolve(const std::string& relative) const { return root / relative; }
    /// Depth consistency, presence of every file.
    void validate() const;
};

nlohmann::json manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root);

DatasetManifest read_manifest(const std::filesystem::path& path);
/// Writes `<dir>/manifest.json`.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir);

CubePair load_cube(const DatasetManifest& manifest, std::size_t index);
std::vector<CubePair> load_all(const DatasetManifest& manifest);

/// Writes slices/<id>_<z>.png and masks/<id>_<z>.png under `root`.
ManifestEntry write_cube(const CubePair& pair, const std::filesystem::path& root,
                         const std::string& source_id);

// ---- synthetic data ---------------------------------------------------------

struct SynthConfig {
    int n_cubes = 20;
    int depth = 10;
    int size = 256;
    int droplets_min = 3;
    int droplets_max = 8;
    double radius_min = 8.0;
    double radius_max = 22.0;
    /// Semi-axis along depth, in slices.
    double depth_radius_min = 1.5;
    double depth_radius_max = 4.0;
    /// Fractional darkening of droplet voxels relative to the background.
    double contrast_min = 0.35;
    double contrast_max = 0.6;
    double noise_sigma = 0.03;
    std::uint64_t seed = 0;
    std::string id_prefix = "synth";

    void validate() const;
    nlohmann::json to_json() const;
};

/// Axis-aligned ellipsoid in voxel coordinates (z, y, x).
struct Droplet {
    double cz = 0, cy = 0, cx = 0;
    double rz = 1, ry = 1, rx = 1;
    double contrast = 0.5;

    nlohmann::json to_json() const;
    static Droplet from_json(const nlohmann::json& j);
};

struct SyntheticCube {
    CubePair pair;
    std::vector<Droplet> droplets;
};

/// A voxel at integer (z, y, x) is inside when the normalized ellipsoid
/// radius is at most 1.
bool droplet_contains(const Droplet& d, double z, double y, double x);

std::vector<SyntheticCube> synthesize_cubes(const SynthConfig& config);
/// Synthesizes and writes PNGs plus manifest.json into `out_dir`.
DatasetManifest synthesize_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

struct VolunteerNoise {
    int jitter_px = 0;
    double miss_probability = 0.0;
};

/// k noisy copies of `mask`: each connected component is independently
/// dropped with the miss probability, otherwise dilated or eroded by a radius
/// drawn uniformly from [-jitter, jitter].
std::vector<AnnotationRecord> simulate_volunteers(const Bitmap& mask, int k, VolunteerNoise noise,
                                                  std::uint64_t seed,
                                                  const std::string& cube_id = "",
                                                  int slice_index = 0);

// ---- raw ingestion -------------------------------------------------------------

struct BuildOptions {
    int resize = 512;
    int crop = 256;
};

/// Raw layout: {"cubes": [{"cube_id", "slices": [png...], "annotations":
/// [[png per volunteer] per slice]}]}, paths relative to the raw file.
/// Runs consensus, stacking, resizing and TenCrop, writing into `out_dir`.
DatasetManifest build_dataset(const std::filesystem::path& raw_manifest, const BuildOptions& options,
                              const std::filesystem::path& out_dir);

}  // namespace tcupgan
