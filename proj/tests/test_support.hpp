#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "tcupgan/cube.hpp"
#include "tcupgan/model.hpp"
#include "tcupgan/pipeline.hpp"

namespace testing {

class TempDir {
public:
    TempDir() {
        std::string pattern = (std::filesystem::temp_directory_path() / "tcupgan-test-XXXXXX").string();
        if (!mkdtemp(pattern.data())) throw std::runtime_error("mkdtemp failed");
        path_ = pattern;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

inline tcupgan::Tensor random_tensor(tcupgan::Shape shape, std::mt19937_64& rng, float lo = -1.0f,
                                     float hi = 1.0f) {
    std::uniform_real_distribution<float> u(lo, hi);
    tcupgan::Tensor t(shape);
    for (float& v : t.values()) v = u(rng);
    return t;
}

inline tcupgan::ImageCube random_image(const std::string& id, int depth, int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> u(0, 255);
    tcupgan::ImageCube cube;
    cube.cube_id = id;
    cube.slice_ids = tcupgan::default_slice_ids(id, depth);
    cube.volume = tcupgan::Volume(depth, size, size);
    for (float& v : cube.volume.voxels) v = static_cast<float>(u(rng)) / 255.0f;
    return cube;
}

inline tcupgan::MaskCube random_mask(int depth, int size, std::uint64_t seed, double p = 0.3) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(p);
    tcupgan::MaskCube mask{tcupgan::Volume(depth, size, size)};
    for (float& v : mask.volume.voxels) v = b(rng) ? 1.0f : 0.0f;
    return mask;
}

inline tcupgan::GeneratorConfig tiny_generator() {
    tcupgan::GeneratorConfig c;
    c.encoder_widths = {2, 3};
    c.bottleneck_width = 4;
    return c;
}

inline tcupgan::DiscriminatorConfig tiny_discriminator() {
    tcupgan::DiscriminatorConfig c;
    c.widths = {2, 3, 1};
    return c;
}

}  // namespace testing
