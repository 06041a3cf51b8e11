#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "recess/dataset.hpp"
#include "recess/imaging.hpp"
#include "recess/preprocess.hpp"

namespace recess::phantom {

struct ThicknessRange {
    int lo = 4;
    int hi = 10;
};

/// Synthetic knee scan generator settings. Distension is rendered purely as
/// recess thickness.
struct PhantomParams {
    int image_size = 256;
    double p_distended = 0.5;
    ThicknessRange thickness_nondistended{4, 10};
    ThicknessRange thickness_distended{16, 40};
    double speckle_noise_sigma = 0.2;
    double clutter_level = 0.3;
    std::uint64_t seed = 0;
    /// Overlapping thickness ranges that mimic hard-to-classify scans.
    bool borderline = false;

    /// Throws ValidationError for out-of-range settings.
    void validate() const;
    /// Ranges actually used (the borderline ranges overlap).
    ThicknessRange range_for(bool distended) const;
};

/// Palette shared by the renderer and its tests.
struct Palette {
    static constexpr float tissue = 0.35f;
    static constexpr float skin = 0.6f;
    static constexpr float femur = 0.85f;
    static constexpr float femur_shadow = 0.28f;
    static constexpr float patella = 0.8f;
    static constexpr float patella_shadow = 0.28f;
    static constexpr float recess = 0.06f;
    static constexpr float spot = 0.7f;
    static constexpr float canvas = 0.0f;
    static constexpr float glyph = 0.9f;
};

/// Layout of one rendered phantom, in image pixels.
struct PhantomGeometry {
    double femur_y0 = 0.0;     // femur top at the image center column
    double femur_slope = 0.0;  // dy/dx of the femur top edge
    double femur_thickness = 0.0;
    double patella_cx = 0.0;
    double patella_cy = 0.0;
    double patella_radius = 0.0;
    double patella_thickness = 0.0;
    double recess_cx = 0.0;
    double recess_cy = 0.0;
    double recess_half_w = 0.0;
    double recess_half_h = 0.0;
    int thickness = 0;
    bool distended = false;

    double femur_top(double x, int size) const { return femur_y0 + femur_slope * (x - 0.5 * size); }
    double patella_left() const { return patella_cx - patella_radius - 0.5 * patella_thickness; }
};

struct Phantom {
    GrayImage image;
    dataset::Annotation annotation;
    PhantomGeometry geometry;
    BinaryMask recess_mask;
};

/// Deterministic in (params.seed, index).
Phantom render_phantom(const PhantomParams& params, std::uint64_t index,
                       std::optional<bool> force_distended = std::nullopt);

std::pair<GrayImage, dataset::Annotation> generate_phantom(const PhantomParams& params, std::uint64_t index);

struct RawCanvasParams {
    int canvas_width = 1024;
    int canvas_height = 780;
    int min_frame_width = 560;
    int max_frame_width = 900;
    int min_frame_height = 440;
    int max_frame_height = 700;
    /// Render the scan over the full canvas (no border, no clutter).
    bool fill_canvas = false;
};

struct RawCanvas {
    GrayImage raw;
    preprocess::CropRegion truth;
    /// Annotation in the coordinates of the cropped, image_size x image_size scan.
    dataset::Annotation annotation;
    /// Pixels belonging to the text-like clutter.
    BinaryMask clutter;
};

RawCanvas generate_raw_canvas(const PhantomParams& params, std::uint64_t index, const RawCanvasParams& canvas = {},
                              std::optional<bool> force_distended = std::nullopt);

using Sample = dataset::Sample;

/// In-memory dataset with synthetic patients of 1-4 images each. When
/// `n_distended` is set, exactly that many samples are Distended.
std::vector<Sample> generate_samples(const PhantomParams& params, std::size_t n,
                                     std::optional<std::size_t> n_distended = std::nullopt);

/// Writes out_dir/images/*.png and out_dir/manifest.jsonl.
dataset::DatasetManifest generate_dataset(const PhantomParams& params, std::size_t n,
                                          const std::filesystem::path& out_dir,
                                          std::optional<std::size_t> n_distended = std::nullopt,
                                          bool raw = false);

}  // namespace recess::phantom
