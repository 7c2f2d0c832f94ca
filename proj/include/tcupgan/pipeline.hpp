#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tcupgan/cube.hpp"
#include "tcupgan/image_io.hpp"

namespace tcupgan {

struct AnnotationRecord {
    std::string cube_id;
    int slice_index = 0;
    std::string volunteer_id;
    Bitmap mask;
    std::string created_at;
};

/// Image cube with its aligned ground-truth mask.
struct CubePair {
    ImageCube image;
    MaskCube mask;
};

/// Per-pixel majority vote: a pixel is set when at least half of the
/// volunteers marked it (2 * votes >= k, so ties round up).
Bitmap aggregate_consensus(std::span<const AnnotationRecord> annotations);

/// Stacks slices along depth in the given order; images are scaled by 1/255.
CubePair stack_slices(std::span<const GrayImage> slices, std::span<const Bitmap> masks,
                      const std::string& cube_id);

std::vector<GrayImage> unstack_images(const Volume& volume);
std::vector<Bitmap> unstack_masks(const Volume& volume);

/// Bilinear, per slice, to target x target; depth unchanged.
ImageCube resize_cube(const ImageCube& cube, int target);
/// Bilinear followed by a 0.5 threshold, so the result stays binary.
MaskCube resize_cube(const MaskCube& mask, int target);

struct CropOffset {
    int row;
    int col;
};

/// Crop origins for a frame of 2 * crop: four corners, then the center.
std::vector<CropOffset> ten_crop_offsets(int crop);

/// Five crops (top-left, top-right, bottom-left, bottom-right, center) of a
/// (2 * crop)-sized pair followed by the row-reversed flip of each. Ids get a
/// "_c<k>" suffix, k = 0..9.
std::vector<CubePair> ten_crop(const CubePair& pair, int crop = 256);

/// Row-axis reversal of every slice.
Volume flip_rows(const Volume& v);
Volume crop_volume(const Volume& v, CropOffset origin, int size);

}  // namespace tcupgan
