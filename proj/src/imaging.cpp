#include "recess/imaging.hpp"

#include <algorithm>
#include <cmath>

#include "recess/error.hpp"

namespace recess {

GrayImage::GrayImage(int width, int height, float fill)
    : width_(width), height_(height) {
    if (width < 1 || height < 1) throw ShapeError("image dimensions must be >= 1");
    pixels_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
}

GrayImage::GrayImage(int width, int height, std::vector<float> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width < 1 || height < 1) throw ShapeError("image dimensions must be >= 1");
    if (pixels_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
        throw ShapeError("pixel buffer does not match image dimensions");
}

float GrayImage::at_clamped(int x, int y) const {
    x = std::clamp(x, 0, width_ - 1);
    y = std::clamp(y, 0, height_ - 1);
    return pixels_[index(x, y)];
}

BinaryMask::BinaryMask(int width, int height, bool fill)
    : width_(width), height_(height),
      bits_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill ? 1 : 0) {
    if (width < 1 || height < 1) throw ShapeError("mask dimensions must be >= 1");
}

std::size_t BinaryMask::count() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
}

bool BinaryMask::any() const noexcept {
    return std::find(bits_.begin(), bits_.end(), 1) != bits_.end();
}

bool BinaryMask::subset_of(const BinaryMask& other) const {
    if (width_ != other.width_ || height_ != other.height_) return false;
    for (std::size_t i = 0; i < bits_.size(); ++i)
        if (bits_[i] && !other.bits_[i]) return false;
    return true;
}

std::string_view to_string(Label label) noexcept {
    switch (label) {
        case Label::NonDistended: return "NonDistended";
        case Label::Distended: return "Distended";
        case Label::Recess: return "Recess";
    }
    return "?";
}

Label parse_label(std::string_view text) {
    if (text == "NonDistended") return Label::NonDistended;
    if (text == "Distended") return Label::Distended;
    if (text == "Recess") return Label::Recess;
    throw ValidationError("unknown label '" + std::string(text) + "'");
}

double iou(const BBox& a, const BBox& b) noexcept {
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

GrayImage resize(const GrayImage& img, int target_w, int target_h) {
    if (target_w < 1 || target_h < 1) throw ShapeError("resize target must be >= 1");
    if (target_w == img.width() && target_h == img.height()) return img;

    const double sx = static_cast<double>(img.width()) / target_w;
    const double sy = static_cast<double>(img.height()) / target_h;

    struct Tap {
        int i0, i1;
        double w1;
    };
    auto taps = [](int n_out, int n_in, double scale) {
        std::vector<Tap> t(static_cast<std::size_t>(n_out));
        for (int o = 0; o < n_out; ++o) {
            double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(n_in - 1));
            int i0 = static_cast<int>(std::floor(src));
            int i1 = std::min(i0 + 1, n_in - 1);
            t[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
        }
        return t;
    };
    const auto tx = taps(target_w, img.width(), sx);
    const auto ty = taps(target_h, img.height(), sy);

    GrayImage out(target_w, target_h);
    for (int y = 0; y < target_h; ++y) {
        const Tap& v = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < target_w; ++x) {
            const Tap& h = tx[static_cast<std::size_t>(x)];
            const double top = (1.0 - h.w1) * img(h.i0, v.i0) + h.w1 * img(h.i1, v.i0);
            const double bot = (1.0 - h.w1) * img(h.i0, v.i1) + h.w1 * img(h.i1, v.i1);
            out(x, y) = static_cast<float>((1.0 - v.w1) * top + v.w1 * bot);
        }
    }
    return out;
}

BBox scale_box(const BBox& box, int from_w, int from_h, int to_w, int to_h) noexcept {
    const double fx = static_cast<double>(to_w) / from_w;
    const double fy = static_cast<double>(to_h) / from_h;
    return {box.x_min * fx, box.y_min * fy, box.x_max * fx, box.y_max * fy};
}

GrayImage crop(const GrayImage& img, const BBox& box) {
    const int x0 = std::clamp(static_cast<int>(std::floor(box.x_min)), 0, img.width() - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(box.y_min)), 0, img.height() - 1);
    const int x1 = std::clamp(static_cast<int>(std::ceil(box.x_max)), x0 + 1, img.width());
    const int y1 = std::clamp(static_cast<int>(std::ceil(box.y_max)), y0 + 1, img.height());
    GrayImage out(x1 - x0, y1 - y0);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) out(x - x0, y - y0) = img(x, y);
    return out;
}

BBox tight_box(const BinaryMask& mask) noexcept {
    int x0 = mask.width(), y0 = mask.height(), x1 = -1, y1 = -1;
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x)
            if (mask(x, y)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) return {};
    return {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 + 1),
            static_cast<double>(y1 + 1)};
}

}  // namespace recess
