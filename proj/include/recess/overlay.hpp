#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "recess/imaging.hpp"
#include "recess/io.hpp"

namespace recess::overlay {

/// Who produced a box; decides its colour.
enum class Source { GroundTruth, MultiTask, Detection };

using Color = std::array<unsigned char, 3>;

/// Ground truth green, multi-task red, detection blue.
Color color_of(Source source) noexcept;

struct Item {
    LabeledBox box;
    Source source = Source::MultiTask;
};

/// Draws each prediction with "<label> <confidence>" above it, the ground truth
/// (when given) in green, and "IoU x.xx" per prediction when ground truth is known.
RgbImage render_overlay(const GrayImage& image, const std::vector<Item>& predictions,
                        const std::optional<BBox>& gt = std::nullopt);

void draw_rect(RgbImage& img, const BBox& box, const Color& color);
/// 5x7 bitmap text, upper-cased; characters without a glyph render as blanks.
void draw_text(RgbImage& img, int x, int y, const std::string& text, const Color& color, int scale = 1);

}  // namespace recess::overlay
