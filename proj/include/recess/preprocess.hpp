#pragma once

#include <optional>

#include "recess/imaging.hpp"

namespace recess::preprocess {

/// Region of the raw device frame holding the actual scan.
struct CropRegion {
    BBox box;
};

enum class KernelShape { Rect, Ellipse };

struct MorphKernel {
    KernelShape shape = KernelShape::Rect;
    int width = 3;
    int height = 3;

    /// Throws ValidationError unless width/height are odd and >= 1.
    void validate() const;
};

/// True where the central-difference gradient magnitude exceeds `threshold`.
BinaryMask gradient_mask(const GrayImage& img, double threshold);

/// Clears every 8-connected component with fewer than `min_size` pixels.
BinaryMask remove_small_components(const BinaryMask& mask, std::size_t min_size = 1000);

BinaryMask dilate(const BinaryMask& mask, const MorphKernel& kernel);

/// Erosion; pixels outside the mask are ignored, so set regions touching the
/// border are not eaten from the outside.
BinaryMask erode(const BinaryMask& mask, const MorphKernel& kernel);

/// Erosion followed by dilation. Idempotent; result is a subset of the input.
BinaryMask opening(const BinaryMask& mask, const MorphKernel& kernel);

struct FrameConfig {
    double threshold = 0.04;
    std::size_t min_size = 1000;
    MorphKernel dilate_kernel{KernelShape::Rect, 15, 15};
    MorphKernel open_kernel{KernelShape::Rect, 31, 31};
    /// Intersect the opened mask with the pre-dilation mask so the crop is
    /// not inflated by the dilation radius.
    bool compensate_dilation = true;
    /// When set, the cropped image is resized to resize_to x resize_to.
    std::optional<int> resize_to;
};

struct FrameExtraction {
    GrayImage image;
    CropRegion region;
    BinaryMask final_mask;
};

/// Locates the scan inside a raw device frame and crops it out.
/// Throws NoFrameFound when nothing survives the mask pipeline.
FrameExtraction extract_scan_frame(const GrayImage& raw, const FrameConfig& cfg = {});

}  // namespace recess::preprocess
