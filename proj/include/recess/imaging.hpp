#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace recess {

/// Single-channel intensity raster, row-major, values in [0,1].
class GrayImage {
public:
    GrayImage() = default;
    GrayImage(int width, int height, float fill = 0.0f);
    GrayImage(int width, int height, std::vector<float> pixels);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    bool empty() const noexcept { return pixels_.empty(); }

    float operator()(int x, int y) const { return pixels_[index(x, y)]; }
    float& operator()(int x, int y) { return pixels_[index(x, y)]; }

    /// Pixel with coordinates clamped to the image (border replication).
    float at_clamped(int x, int y) const;

    std::span<const float> pixels() const noexcept { return pixels_; }
    std::span<float> pixels() noexcept { return pixels_; }

    bool operator==(const GrayImage&) const = default;

private:
    std::size_t index(int x, int y) const noexcept {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<float> pixels_;
};

class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width, int height, bool fill = false);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }

    bool operator()(int x, int y) const { return bits_[index(x, y)] != 0; }
    void set(int x, int y, bool v) { bits_[index(x, y)] = v ? 1 : 0; }

    std::size_t count() const noexcept;
    bool any() const noexcept;
    /// True iff every set pixel of *this is also set in `other`.
    bool subset_of(const BinaryMask& other) const;

    bool operator==(const BinaryMask&) const = default;

private:
    std::size_t index(int x, int y) const noexcept {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<unsigned char> bits_;
};

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
/// A pixel (x, y) covers [x, x+1) x [y, y+1).
struct BBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double width() const noexcept { return x_max - x_min; }
    double height() const noexcept { return y_max - y_min; }
    double area() const noexcept { return width() * height(); }
    double center_x() const noexcept { return 0.5 * (x_min + x_max); }
    double center_y() const noexcept { return 0.5 * (y_min + y_max); }
    bool valid() const noexcept { return x_min < x_max && y_min < y_max; }
    bool inside(double w, double h) const noexcept {
        return x_min >= 0.0 && y_min >= 0.0 && x_max <= w && y_max <= h;
    }

    static BBox from_center(double cx, double cy, double w, double h) {
        return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    }

    bool operator==(const BBox&) const = default;
};

enum class Label { NonDistended, Distended, Recess };

std::string_view to_string(Label label) noexcept;
/// Throws ValidationError for anything other than the three label names.
Label parse_label(std::string_view text);

struct LabeledBox {
    BBox box;
    Label label = Label::Recess;
    double confidence = 0.0;
};

double iou(const BBox& a, const BBox& b) noexcept;

/// Bilinear resize using pixel-center alignment.
GrayImage resize(const GrayImage& img, int target_w, int target_h);

BBox scale_box(const BBox& box, int from_w, int from_h, int to_w, int to_h) noexcept;

/// Crops the pixels covered by `box` (outward-rounded, clipped to the image).
GrayImage crop(const GrayImage& img, const BBox& box);

/// Tight bounding box of all set pixels; an invalid (all-zero) box if the mask is empty.
BBox tight_box(const BinaryMask& mask) noexcept;

}  // namespace recess
