#include "tcupgan/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/imgproc.hpp>

namespace tcupgan {

namespace {

cv::Mat resize_slice(std::span<const float> src, int h, int w, int target) {
    cv::Mat in(h, w, CV_32FC1, const_cast<float*>(src.data()));
    if (h == target && w == target) return in.clone();
    cv::Mat out;
    cv::resize(in, out, cv::Size(target, target), 0, 0, cv::INTER_LINEAR);
    return out;
}

}  // namespace

Bitmap aggregate_consensus(std::span<const AnnotationRecord> annotations) {
    if (annotations.empty()) throw ValidationError("consensus needs at least one annotation");
    const int h = annotations.front().mask.height;
    const int w = annotations.front().mask.width;
    std::vector<int> votes(static_cast<std::size_t>(h) * w, 0);
    for (const auto& a : annotations) {
        if (a.mask.height != h || a.mask.width != w) {
            throw ShapeError("annotation from '" + a.volunteer_id + "' is " +
                             std::to_string(a.mask.height) + "x" + std::to_string(a.mask.width) +
                             ", expected " + std::to_string(h) + "x" + std::to_string(w));
        }
        for (std::size_t i = 0; i < votes.size(); ++i) votes[i] += a.mask.bits[i] ? 1 : 0;
    }
    const int k = static_cast<int>(annotations.size());
    Bitmap out(h, w);
    for (std::size_t i = 0; i < votes.size(); ++i) out.bits[i] = 2 * votes[i] >= k ? 1 : 0;
    return out;
}

CubePair stack_slices(std::span<const GrayImage> slices, std::span<const Bitmap> masks,
                      const std::string& cube_id) {
    if (slices.empty()) throw ValidationError("cannot stack zero slices");
    if (slices.size() != masks.size()) {
        throw ValidationError("got " + std::to_string(slices.size()) + " slices but " +
                              std::to_string(masks.size()) + " masks");
    }
    const int h = slices.front().height;
    const int w = slices.front().width;
    const int d = static_cast<int>(slices.size());
    CubePair pair;
    pair.image.cube_id = cube_id;
    pair.image.slice_ids = default_slice_ids(cube_id, d);
    pair.image.volume = Volume(d, h, w);
    pair.mask.volume = Volume(d, h, w);
    for (int z = 0; z < d; ++z) {
        const auto& img = slices[z];
        const auto& msk = masks[z];
        if (img.height != h || img.width != w || msk.height != h || msk.width != w) {
            throw ShapeError("slice " + std::to_string(z) + " is not " + std::to_string(h) + "x" +
                             std::to_string(w) + " like slice 0");
        }
        auto iv = pair.image.volume.slice(z);
        auto mv = pair.mask.volume.slice(z);
        for (std::size_t i = 0; i < iv.size(); ++i) {
            iv[i] = static_cast<float>(img.pixels[i]) / 255.0f;
            mv[i] = msk.bits[i] ? 1.0f : 0.0f;
        }
    }
    return pair;
}

std::vector<GrayImage> unstack_images(const Volume& v) {
    std::vector<GrayImage> out;
    for (int z = 0; z < v.depth; ++z) {
        GrayImage img{v.height, v.width, std::vector<std::uint8_t>(v.slice_size())};
        auto s = v.slice(z);
        for (std::size_t i = 0; i < s.size(); ++i) {
            img.pixels[i] = static_cast<std::uint8_t>(
                std::lround(std::clamp(s[i], 0.0f, 1.0f) * 255.0f));
        }
        out.push_back(std::move(img));
    }
    return out;
}

std::vector<Bitmap> unstack_masks(const Volume& v) {
    std::vector<Bitmap> out;
    for (int z = 0; z < v.depth; ++z) {
        Bitmap m(v.height, v.width);
        auto s = v.slice(z);
        for (std::size_t i = 0; i < s.size(); ++i) m.bits[i] = s[i] >= 0.5f ? 1 : 0;
        out.push_back(std::move(m));
    }
    return out;
}

ImageCube resize_cube(const ImageCube& cube, int target) {
    if (target < 8) throw ValidationError("resize target must be at least 8");
    const Volume& v = cube.volume;
    ImageCube out{cube.cube_id, cube.slice_ids, Volume(v.depth, target, target)};
    for (int z = 0; z < v.depth; ++z) {
        cv::Mat r = resize_slice(v.slice(z), v.height, v.width, target);
        auto dst = out.volume.slice(z);
        for (int y = 0; y < target; ++y) {
            for (int x = 0; x < target; ++x) {
                dst[y * target + x] = std::clamp(r.at<float>(y, x), 0.0f, 1.0f);
            }
        }
    }
    return out;
}

MaskCube resize_cube(const MaskCube& mask, int target) {
    if (target < 8) throw ValidationError("resize target must be at least 8");
    const Volume& v = mask.volume;
    MaskCube out{Volume(v.depth, target, target)};
    for (int z = 0; z < v.depth; ++z) {
        cv::Mat r = resize_slice(v.slice(z), v.height, v.width, target);
        auto dst = out.volume.slice(z);
        for (int y = 0; y < target; ++y) {
            for (int x = 0; x < target; ++x) dst[y * target + x] = r.at<float>(y, x) >= 0.5f ? 1.0f : 0.0f;
        }
    }
    return out;
}

std::vector<CropOffset> ten_crop_offsets(int crop) {
    return {{0, 0}, {0, crop}, {crop, 0}, {crop, crop}, {crop / 2, crop / 2}};
}

Volume crop_volume(const Volume& v, CropOffset origin, int size) {
    if (origin.row < 0 || origin.col < 0 || origin.row + size > v.height ||
        origin.col + size > v.width) {
        throw ShapeError("crop outside volume " + v.shape_str());
    }
    Volume out(v.depth, size, size);
    for (int z = 0; z < v.depth; ++z) {
        for (int y = 0; y < size; ++y) {
            const float* src = &v.voxels[z * v.slice_size() +
                                         static_cast<std::size_t>(origin.row + y) * v.width +
                                         origin.col];
            std::copy(src, src + size, &out.voxels[z * out.slice_size() + y * size]);
        }
    }
    return out;
}

Volume flip_rows(const Volume& v) {
    Volume out(v.depth, v.height, v.width);
    for (int z = 0; z < v.depth; ++z) {
        for (int y = 0; y < v.height; ++y) {
            const float* src = &v.voxels[z * v.slice_size() + static_cast<std::size_t>(y) * v.width];
            std::copy(src, src + v.width,
                      &out.voxels[z * v.slice_size() +
                                  static_cast<std::size_t>(v.height - 1 - y) * v.width]);
        }
    }
    return out;
}

std::vector<CubePair> ten_crop(const CubePair& pair, int crop) {
    const Volume& iv = pair.image.volume;
    if (crop <= 0 || iv.height != 2 * crop || iv.width != 2 * crop) {
        throw ShapeError("ten_crop expects " + std::to_string(2 * crop) + "x" +
                         std::to_string(2 * crop) + " slices, got " + iv.shape_str());
    }
    if (!pair.mask.volume.same_shape(iv)) throw ShapeError("ten_crop: image/mask shapes differ");
    std::vector<CubePair> out;
    out.reserve(10);
    for (const auto& off : ten_crop_offsets(crop)) {
        CubePair c;
        c.image.volume = crop_volume(iv, off, crop);
        c.mask.volume = crop_volume(pair.mask.volume, off, crop);
        out.push_back(std::move(c));
    }
    for (int k = 0; k < 5; ++k) {
        CubePair f;
        f.image.volume = flip_rows(out[k].image.volume);
        f.mask.volume = flip_rows(out[k].mask.volume);
        out.push_back(std::move(f));
    }
    for (int k = 0; k < 10; ++k) {
        out[k].image.cube_id = pair.image.cube_id + "_c" + std::to_string(k);
        out[k].image.slice_ids = default_slice_ids(out[k].image.cube_id, iv.depth);
    }
    return out;
}

}  // namespace tcupgan
