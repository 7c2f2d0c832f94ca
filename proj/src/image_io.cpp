#include "tcupgan/image_io.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <opencv2/imgcodecs.hpp>

#include "tcupgan/tensor.hpp"

namespace tcupgan {

std::size_t Bitmap::count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::vector<std::uint8_t> encode_png(const GrayImage& image) {
    cv::Mat mat(image.height, image.width, CV_8UC1, const_cast<std::uint8_t*>(image.pixels.data()));
    std::vector<std::uint8_t> out;
    if (!cv::imencode(".png", mat, out)) throw std::runtime_error("PNG encoding failed");
    return out;
}

GrayImage decode_png(std::span<const std::uint8_t> bytes) {
    std::vector<std::uint8_t> buf(bytes.begin(), bytes.end());
    cv::Mat mat = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
    if (mat.empty()) throw ValidationError("data is not a decodable image");
    if (mat.channels() != 1 || mat.depth() != CV_8U) {
        throw ValidationError("image must be 8-bit single-channel (monochrome)");
    }
    GrayImage img{mat.rows, mat.cols, {}};
    img.pixels.resize(static_cast<std::size_t>(mat.rows) * mat.cols);
    for (int y = 0; y < mat.rows; ++y) {
        std::copy(mat.ptr<std::uint8_t>(y), mat.ptr<std::uint8_t>(y) + mat.cols,
                  img.pixels.begin() + static_cast<std::size_t>(y) * mat.cols);
    }
    return img;
}

GrayImage read_gray_png(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ValidationError("missing image file " + path.string());
    const auto bytes = read_file_bytes(path);
    try {
        return decode_png(bytes);
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void write_gray_png(const std::filesystem::path& path, const GrayImage& image) {
    write_file_bytes(path, encode_png(image));
}

GrayImage mask_to_gray(const Bitmap& mask) {
    GrayImage img{mask.height, mask.width, std::vector<std::uint8_t>(mask.bits.size())};
    for (std::size_t i = 0; i < mask.bits.size(); ++i) img.pixels[i] = mask.bits[i] ? 255 : 0;
    return img;
}

Bitmap gray_to_mask(const GrayImage& image) {
    const bool zero_one = std::all_of(image.pixels.begin(), image.pixels.end(),
                                      [](std::uint8_t v) { return v <= 1; });
    Bitmap mask(image.height, image.width);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        const std::uint8_t v = image.pixels[i];
        if (!zero_one && v != 0 && v != 255) {
            throw ValidationError("mask image is not binary (expected values 0 and 255)");
        }
        mask.bits[i] = v != 0 ? 1 : 0;
    }
    return mask;
}

Bitmap read_mask_png(const std::filesystem::path& path) {
    try {
        return gray_to_mask(read_gray_png(path));
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void write_mask_png(const std::filesystem::path& path, const Bitmap& mask) {
    write_gray_png(path, mask_to_gray(mask));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace tcupgan
