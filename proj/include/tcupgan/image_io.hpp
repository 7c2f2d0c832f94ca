#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tcupgan {

/// 8-bit single-channel image.
struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;

    bool operator==(const GrayImage&) const = default;
};

/// Binary 2D mask, one byte per pixel holding 0 or 1.
struct Bitmap {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    Bitmap() = default;
    Bitmap(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::size_t count() const;
    bool operator==(const Bitmap&) const = default;
};

std::vector<std::uint8_t> encode_png(const GrayImage& image);
GrayImage decode_png(std::span<const std::uint8_t> bytes);

GrayImage read_gray_png(const std::filesystem::path& path);
void write_gray_png(const std::filesystem::path& path, const GrayImage& image);

/// Masks live on disk as {0, 255}; {0, 1} files are accepted on read.
GrayImage mask_to_gray(const Bitmap& mask);
Bitmap gray_to_mask(const GrayImage& image);
Bitmap read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const Bitmap& mask);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace tcupgan
