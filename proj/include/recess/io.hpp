#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "recess/imaging.hpp"

namespace recess {

using json = nlohmann::json;

/// Loads an 8-bit grayscale PNG (RGB/palette/alpha inputs are converted to
/// luminance) and maps 0..255 to [0,1].
GrayImage load_png(const std::filesystem::path& path);

/// Writes an 8-bit grayscale PNG; intensities are clipped to [0,1] and rounded.
void save_png(const std::filesystem::path& path, const GrayImage& img);

/// 8-bit RGB raster used for overlays.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> rgb;  // width*height*3, row-major

    RgbImage() = default;
    explicit RgbImage(const GrayImage& gray);
    void put(int x, int y, unsigned char r, unsigned char g, unsigned char b);
};

void save_png(const std::filesystem::path& path, const RgbImage& img);

/// Round-trips an image through 8-bit quantization, as a PNG save/load would.
GrayImage quantize8(const GrayImage& img);

json box_to_json(const BBox& box);
/// Parses [x_min, y_min, x_max, y_max]; throws ValidationError on shape or ordering problems.
BBox box_from_json(const json& j);

/// Writes text atomically enough for our purposes: whole file, truncating.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace recess
