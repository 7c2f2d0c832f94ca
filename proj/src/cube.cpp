#include "tcupgan/cube.hpp"

#include <sstream>

namespace tcupgan {

Volume::Volume(int d, int h, int w, float fill)
    : depth(d), height(h), width(w), voxels(static_cast<std::size_t>(d) * h * w, fill) {}

std::string Volume::shape_str() const {
    std::ostringstream os;
    os << "(" << depth << ", " << height << ", " << width << ")";
    return os.str();
}

bool Volume::is_binary() const {
    for (float v : voxels) {
        if (v != 0.0f && v != 1.0f) return false;
    }
    return true;
}

bool Volume::in_unit_range() const {
    for (float v : voxels) {
        if (!(v >= 0.0f && v <= 1.0f)) return false;
    }
    return true;
}

void ImageCube::validate() const {
    if (volume.depth < 1) throw ValidationError("image cube '" + cube_id + "' has no slices");
    if (volume.height != volume.width) {
        throw ValidationError("image cube '" + cube_id + "' slices must be square, got " +
                              volume.shape_str());
    }
    if (volume.voxels.size() != static_cast<std::size_t>(volume.depth) * volume.slice_size()) {
        throw ShapeError("image cube '" + cube_id + "' voxel buffer does not match its shape");
    }
    if (!volume.in_unit_range()) {
        throw ValidationError("image cube '" + cube_id + "' has voxel values outside [0, 1]");
    }
    if (!slice_ids.empty() && slice_ids.size() != static_cast<std::size_t>(volume.depth)) {
        throw ValidationError("image cube '" + cube_id + "' slice id count does not match depth");
    }
}

void MaskCube::validate_against(const ImageCube& image) const {
    if (!volume.same_shape(image.volume)) {
        throw ShapeError("mask " + volume.shape_str() + " does not match image " +
                         image.volume.shape_str());
    }
    if (!volume.is_binary()) throw ValidationError("ground-truth mask must contain only 0 and 1");
}

std::vector<std::string> default_slice_ids(const std::string& cube_id, int depth) {
    std::vector<std::string> ids;
    ids.reserve(depth);
    for (int d = 0; d < depth; ++d) ids.push_back(cube_id + "/" + std::to_string(d));
    return ids;
}

}  // namespace tcupgan
