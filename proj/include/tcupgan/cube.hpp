#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tcupgan/tensor.hpp"

namespace tcupgan {

/// Depth-ordered stack of single-channel slices, stored (D, H, W).
struct Volume {
    int depth = 0;
    int height = 0;
    int width = 0;
    std::vector<float> voxels;

    Volume() = default;
    Volume(int d, int h, int w, float fill = 0.0f);

    std::size_t slice_size() const { return static_cast<std::size_t>(height) * width; }
    std::span<float> slice(int d) { return {voxels.data() + d * slice_size(), slice_size()}; }
    std::span<const float> slice(int d) const {
        return {voxels.data() + d * slice_size(), slice_size()};
    }
    float& at(int d, int y, int x) { return voxels[d * slice_size() + y * width + x]; }
    float at(int d, int y, int x) const { return voxels[d * slice_size() + y * width + x]; }

    bool same_shape(const Volume& other) const {
        return depth == other.depth && height == other.height && width == other.width;
    }
    std::string shape_str() const;
    bool is_binary() const;
    bool in_unit_range() const;
};

struct ImageCube {
    std::string cube_id;
    std::vector<std::string> slice_ids;
    Volume volume;

    /// Throws ValidationError unless D >= 1, H == W, values in [0, 1] and ids match depth.
    void validate() const;
};

/// Binary ground-truth segmentation aligned to an ImageCube.
struct MaskCube {
    Volume volume;
    void validate_against(const ImageCube& image) const;
};

/// Soft machine segmentation in [0, 1] aligned to an ImageCube.
struct PredictionCube {
    Volume volume;
};

/// Discriminator realism probabilities, stored (D, rows, cols).
struct PatchScoreGrid {
    int depth = 0;
    int rows = 0;
    int cols = 0;
    std::vector<float> scores;

    std::size_t cells() const { return static_cast<std::size_t>(rows) * cols; }
    std::span<const float> slice(int d) const { return {scores.data() + d * cells(), cells()}; }
    std::span<float> slice(int d) { return {scores.data() + d * cells(), cells()}; }
};

/// Default per-slice identifiers "<cube_id>/<index>".
std::vector<std::string> default_slice_ids(const std::string& cube_id, int depth);

}  // namespace tcupgan
