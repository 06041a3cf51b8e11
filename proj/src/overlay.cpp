#include "recess/overlay.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <unordered_map>

namespace recess::overlay {

namespace {

// Rows top to bottom, low 5 bits, most significant bit leftmost.
const std::unordered_map<char, std::array<unsigned char, 7>>& font() {
    static const std::unordered_map<char, std::array<unsigned char, 7>> glyphs{
        {'0', {14, 17, 19, 21, 25, 17, 14}}, {'1', {4, 12, 4, 4, 4, 4, 14}},   {'2', {14, 17, 1, 2, 4, 8, 31}},
        {'3', {31, 2, 4, 2, 1, 17, 14}},     {'4', {2, 6, 10, 18, 31, 2, 2}},  {'5', {31, 16, 30, 1, 1, 17, 14}},
        {'6', {6, 8, 16, 30, 17, 17, 14}},   {'7', {31, 1, 2, 4, 8, 8, 8}},    {'8', {14, 17, 17, 14, 17, 17, 14}},
        {'9', {14, 17, 17, 15, 1, 2, 12}},   {'A', {14, 17, 17, 31, 17, 17, 17}}, {'B', {30, 17, 17, 30, 17, 17, 30}},
        {'C', {14, 17, 16, 16, 16, 17, 14}}, {'D', {28, 18, 17, 17, 17, 18, 28}}, {'E', {31, 16, 16, 30, 16, 16, 31}},
        {'F', {31, 16, 16, 30, 16, 16, 16}}, {'G', {14, 17, 16, 23, 17, 17, 15}}, {'H', {17, 17, 17, 31, 17, 17, 17}},
        {'I', {14, 4, 4, 4, 4, 4, 14}},      {'J', {7, 2, 2, 2, 2, 18, 12}},   {'K', {17, 18, 20, 24, 20, 18, 17}},
        {'L', {16, 16, 16, 16, 16, 16, 31}}, {'M', {17, 27, 21, 21, 17, 17, 17}}, {'N', {17, 17, 25, 21, 19, 17, 17}},
        {'O', {14, 17, 17, 17, 17, 17, 14}}, {'P', {30, 17, 17, 30, 16, 16, 16}}, {'Q', {14, 17, 17, 17, 21, 18, 13}},
        {'R', {30, 17, 17, 30, 20, 18, 17}}, {'S', {15, 16, 16, 14, 1, 1, 30}}, {'T', {31, 4, 4, 4, 4, 4, 4}},
        {'U', {17, 17, 17, 17, 17, 17, 14}}, {'V', {17, 17, 17, 17, 17, 10, 4}}, {'W', {17, 17, 17, 21, 21, 21, 10}},
        {'X', {17, 17, 10, 4, 10, 17, 17}},  {'Y', {17, 17, 10, 4, 4, 4, 4}},  {'Z', {31, 1, 2, 4, 8, 16, 31}},
        {'.', {0, 0, 0, 0, 0, 12, 12}},      {':', {0, 12, 12, 0, 12, 12, 0}}, {'-', {0, 0, 0, 31, 0, 0, 0}},
    };
    return glyphs;
}

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace

Color color_of(Source source) noexcept {
    switch (source) {
        case Source::GroundTruth: return {0, 200, 0};
        case Source::MultiTask: return {230, 0, 0};
        case Source::Detection: return {0, 80, 255};
    }
    return {255, 255, 255};
}

void draw_rect(RgbImage& img, const BBox& box, const Color& c) {
    const int x0 = static_cast<int>(std::floor(box.x_min)), y0 = static_cast<int>(std::floor(box.y_min));
    const int x1 = static_cast<int>(std::ceil(box.x_max)) - 1, y1 = static_cast<int>(std::ceil(box.y_max)) - 1;
    for (int x = x0; x <= x1; ++x) {
        img.put(x, y0, c[0], c[1], c[2]);
        img.put(x, y1, c[0], c[1], c[2]);
    }
    for (int y = y0; y <= y1; ++y) {
        img.put(x0, y, c[0], c[1], c[2]);
        img.put(x1, y, c[0], c[1], c[2]);
    }
}

void draw_text(RgbImage& img, int x, int y, const std::string& text, const Color& c, int scale) {
    const auto& glyphs = font();
    for (char ch : text) {
        auto it = glyphs.find(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
        if (it != glyphs.end())
            for (int row = 0; row < 7; ++row)
                for (int col = 0; col < 5; ++col)
                    if (it->second[static_cast<std::size_t>(row)] & (1 << (4 - col)))
                        for (int dy = 0; dy < scale; ++dy)
                            for (int dx = 0; dx < scale; ++dx)
                                img.put(x + col * scale + dx, y + row * scale + dy, c[0], c[1], c[2]);
        x += 6 * scale;
    }
}

RgbImage render_overlay(const GrayImage& image, const std::vector<Item>& predictions, const std::optional<BBox>& gt) {
    RgbImage out(image);
    if (gt) draw_rect(out, *gt, color_of(Source::GroundTruth));
    int line = 0;
    for (const auto& p : predictions) {
        const Color c = color_of(p.source);
        draw_rect(out, p.box.box, c);
        std::string text = std::string(to_string(p.box.label)) + " " + fmt2(p.box.confidence);
        if (gt) text += " IoU " + fmt2(iou(p.box.box, *gt));
        // Captions stack from the top-left corner so they never cover the boxes.
        draw_text(out, 2, 2 + 9 * line++, text, c);
    }
    return out;
}

}  // namespace recess::overlay
