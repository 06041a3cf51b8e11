#include "recess/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "recess/error.hpp"
#include "recess/io.hpp"
#include "recess/random.hpp"

namespace recess::phantom {

namespace {

constexpr std::uint64_t kLabelStream = 0x1abe1;
constexpr std::uint64_t kPatientStream = 0x9a71e;
constexpr std::uint64_t kCanvasStream = 0xca9a5;

std::string numbered(const char* prefix, std::uint64_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05llu", prefix, static_cast<unsigned long long>(i));
    return buf;
}

void apply_speckle(GrayImage& img, double sigma, Rng& rng, const BBox* region = nullptr) {
    if (sigma <= 0.0) return;
    int x0 = 0, y0 = 0, x1 = img.width(), y1 = img.height();
    if (region) {
        x0 = static_cast<int>(region->x_min);
        y0 = static_cast<int>(region->y_min);
        x1 = static_cast<int>(region->x_max);
        y1 = static_cast<int>(region->y_max);
    }
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            const double v = img(x, y) * (1.0 + sigma * rng.normal());
            img(x, y) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
}

/// Renders everything except speckle.
Phantom render_clean(const PhantomParams& p, std::uint64_t index, std::optional<bool> force_distended, Rng& rng) {
    const int n = p.image_size;
    const double s = n / 256.0;

    PhantomGeometry g;
    g.distended = force_distended ? *force_distended : rng.bernoulli(p.p_distended);
    const ThicknessRange range = p.range_for(g.distended);
    g.thickness = static_cast<int>(std::lround(rng.uniform_int(range.lo, range.hi) * s));
    g.thickness = std::max(g.thickness, 2);

    g.femur_y0 = rng.uniform(0.64, 0.74) * n;
    g.femur_slope = rng.uniform(-0.06, 0.06);
    g.femur_thickness = rng.uniform(8.0, 14.0) * s;

    g.patella_radius = rng.uniform(0.16, 0.22) * n;
    g.patella_thickness = rng.uniform(6.0, 9.0) * s;
    g.patella_cx = n + 0.35 * g.patella_radius;
    g.patella_cy = rng.uniform(0.22, 0.40) * n;

    const double xr = g.patella_left() - rng.uniform(6.0, 14.0) * s;
    const double width = std::min(rng.uniform(0.30, 0.55) * n, xr - 0.06 * n);
    const double xl = xr - width;
    double femur_min = 1e9;
    for (int x = static_cast<int>(std::floor(xl)); x <= static_cast<int>(std::ceil(xr)); ++x)
        femur_min = std::min(femur_min, g.femur_top(x, n));
    const double bottom = femur_min - rng.uniform(3.0, 6.0) * s;
    g.recess_half_w = 0.5 * width;
    g.recess_half_h = 0.5 * g.thickness;
    g.recess_cx = 0.5 * (xl + xr);
    g.recess_cy = bottom - g.recess_half_h;

    GrayImage img(n, n, Palette::tissue);
    BinaryMask recess(n, n);

    // Skin line and a few faint tendon fibres in the upper third.
    const int skin_y = static_cast<int>(rng.uniform(0.02, 0.04) * n);
    for (int y = skin_y; y < skin_y + std::max(2, static_cast<int>(3 * s)); ++y)
        for (int x = 0; x < n; ++x) img(x, y) = Palette::skin;
    const int fibres = 2 + rng.uniform_int(0, 3);
    for (int f = 0; f < fibres; ++f) {
        const double y0 = rng.uniform(0.08, 0.30) * n;
        const double slope = rng.uniform(-0.04, 0.04);
        for (int x = 0; x < n; ++x) {
            const int y = static_cast<int>(std::lround(y0 + slope * (x - 0.5 * n)));
            if (y >= 0 && y < n) img(x, y) = 0.45f;
        }
    }

    // Femur band with its acoustic shadow.
    for (int x = 0; x < n; ++x) {
        const double top = g.femur_top(x + 0.5, n);
        for (int y = 0; y < n; ++y) {
            const double yc = y + 0.5;
            if (yc >= top + g.femur_thickness) img(x, y) = Palette::femur_shadow;
            else if (yc >= top) img(x, y) = Palette::femur;
        }
    }

    // Patella arc at the right border, upper half.
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double dx = x + 0.5 - g.patella_cx;
            const double dy = y + 0.5 - g.patella_cy;
            const double d = std::sqrt(dx * dx + dy * dy);
            if (std::abs(d - g.patella_radius) <= 0.5 * g.patella_thickness) img(x, y) = Palette::patella;
            else if (d < g.patella_radius) img(x, y) = Palette::patella_shadow;
        }

    // Echogenic spots away from the recess.
    const int spots = static_cast<int>(std::lround(p.clutter_level * 30.0));
    for (int k = 0; k < spots; ++k) {
        const double cx = rng.uniform(0.0, n);
        const double cy = rng.uniform(0.08 * n, g.femur_y0);
        const double r = rng.uniform(2.0, 5.0) * s;
        const double mx = (cx - g.recess_cx) / (g.recess_half_w + r + 4 * s);
        const double my = (cy - g.recess_cy) / (g.recess_half_h + r + 4 * s);
        if (mx * mx + my * my <= 1.0) continue;
        for (int y = std::max(0, static_cast<int>(cy - r)); y <= std::min(n - 1, static_cast<int>(cy + r)); ++y)
            for (int x = std::max(0, static_cast<int>(cx - r)); x <= std::min(n - 1, static_cast<int>(cx + r)); ++x) {
                const double ddx = x + 0.5 - cx, ddy = y + 0.5 - cy;
                if (ddx * ddx + ddy * ddy <= r * r && img(x, y) == Palette::tissue) img(x, y) = Palette::spot;
            }
    }

    // Recess last so its pixels are exactly the rasterized ellipse.
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double ex = (x + 0.5 - g.recess_cx) / g.recess_half_w;
            const double ey = (y + 0.5 - g.recess_cy) / g.recess_half_h;
            if (ex * ex + ey * ey <= 1.0) {
                img(x, y) = Palette::recess;
                recess.set(x, y, true);
            }
        }

    Phantom out;
    out.image = std::move(img);
    out.geometry = g;
    out.annotation.image_id = numbered("phantom", index);
    out.annotation.image_path = "images/" + out.annotation.image_id + ".png";
    out.annotation.patient_id = "P0000";
    out.annotation.label = g.distended ? Label::Distended : Label::NonDistended;
    out.annotation.sqr_box = tight_box(recess);
    out.annotation.image_width = n;
    out.annotation.image_height = n;
    out.recess_mask = std::move(recess);
    return out;
}

/// Random 5x7 pseudo-characters drawn at 2x scale, separated by 4 px gaps.
void draw_glyph_string(GrayImage& img, BinaryMask& clutter, int x, int y, int chars, Rng& rng) {
    constexpr int scale = 2;
    for (int c = 0; c < chars; ++c) {
        const int gx = x + c * (5 * scale + 4);
        for (int row = 0; row < 7; ++row)
            for (int col = 0; col < 5; ++col) {
                if (!rng.bernoulli(0.55)) continue;
                for (int sy = 0; sy < scale; ++sy)
                    for (int sx = 0; sx < scale; ++sx) {
                        const int px = gx + col * scale + sx;
                        const int py = y + row * scale + sy;
                        if (px < 0 || py < 0 || px >= img.width() || py >= img.height()) continue;
                        img(px, py) = Palette::glyph;
                        clutter.set(px, py, true);
                    }
            }
    }
}

}  // namespace

void PhantomParams::validate() const {
    if (image_size < 32) throw ValidationError("phantom image_size must be >= 32");
    if (p_distended < 0.0 || p_distended > 1.0) throw ValidationError("p_distended must lie in [0,1]");
    if (clutter_level < 0.0 || clutter_level > 1.0) throw ValidationError("clutter_level must lie in [0,1]");
    if (speckle_noise_sigma < 0.0) throw ValidationError("speckle_noise_sigma must be >= 0");
    for (auto r : {thickness_nondistended, thickness_distended})
        if (r.lo < 1 || r.hi < r.lo) throw ValidationError("invalid thickness range");
    if (!borderline && thickness_nondistended.hi >= thickness_distended.lo)
        throw ValidationError("thickness ranges must be disjoint unless borderline mode is on");
}

ThicknessRange PhantomParams::range_for(bool distended) const {
    if (borderline) return distended ? ThicknessRange{14, 40} : ThicknessRange{4, 20};
    return distended ? thickness_distended : thickness_nondistended;
}

Phantom render_phantom(const PhantomParams& params, std::uint64_t index, std::optional<bool> force_distended) {
    params.validate();
    Rng rng(Rng::mix(params.seed, index));
    Phantom ph = render_clean(params, index, force_distended, rng);
    apply_speckle(ph.image, params.speckle_noise_sigma, rng);
    return ph;
}

std::pair<GrayImage, dataset::Annotation> generate_phantom(const PhantomParams& params, std::uint64_t index) {
    Phantom ph = render_phantom(params, index);
    return {std::move(ph.image), std::move(ph.annotation)};
}

RawCanvas generate_raw_canvas(const PhantomParams& params, std::uint64_t index, const RawCanvasParams& cp,
                              std::optional<bool> force_distended) {
    params.validate();
    Rng rng(Rng::mix(params.seed, index, kCanvasStream));
    Rng scan_rng(Rng::mix(params.seed, index));
    Phantom ph = render_clean(params, index, force_distended, scan_rng);

    RawCanvas out;
    out.raw = GrayImage(cp.canvas_width, cp.canvas_height, Palette::canvas);
    out.clutter = BinaryMask(cp.canvas_width, cp.canvas_height);

    int fw = cp.canvas_width, fh = cp.canvas_height, fx = 0, fy = 0;
    if (!cp.fill_canvas) {
        const int margin = 8;
        fw = std::min(rng.uniform_int(cp.min_frame_width, cp.max_frame_width), cp.canvas_width - 2 * margin);
        fh = std::min(rng.uniform_int(cp.min_frame_height, cp.max_frame_height), cp.canvas_height - 2 * margin);
        fx = rng.uniform_int(margin, cp.canvas_width - margin - fw);
        fy = rng.uniform_int(margin, cp.canvas_height - margin - fh);
    }
    out.truth.box = {static_cast<double>(fx), static_cast<double>(fy), static_cast<double>(fx + fw),
                     static_cast<double>(fy + fh)};

    const GrayImage scan = resize(ph.image, fw, fh);
    for (int y = 0; y < fh; ++y)
        for (int x = 0; x < fw; ++x) out.raw(fx + x, fy + y) = scan(x, y);
    apply_speckle(out.raw, params.speckle_noise_sigma, rng, &out.truth.box);

    if (!cp.fill_canvas) {
        // Acquisition-parameter text, kept well away from the scan.
        const int strings = 4 + static_cast<int>(std::lround(params.clutter_level * 12.0));
        const BBox keep_out{out.truth.box.x_min - 40, out.truth.box.y_min - 40, out.truth.box.x_max + 40,
                            out.truth.box.y_max + 40};
        std::vector<BBox> placed;
        for (int s = 0, attempts = 0; s < strings && attempts < 200; ++attempts) {
            const int chars = rng.uniform_int(3, 10);
            const int w = chars * 14;
            const int x = rng.uniform_int(0, cp.canvas_width - w);
            const int y = rng.uniform_int(0, cp.canvas_height - 14);
            const BBox box{static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w),
                           static_cast<double>(y + 14)};
            if (iou(box, keep_out) > 0.0) continue;
            // Separate strings so their glyphs never fuse into one large blob.
            const BBox spaced{box.x_min - 6, box.y_min - 6, box.x_max + 6, box.y_max + 6};
            if (std::any_of(placed.begin(), placed.end(), [&](const BBox& b) { return iou(spaced, b) > 0.0; }))
                continue;
            placed.push_back(box);
            draw_glyph_string(out.raw, out.clutter, x, y, chars, rng);
            ++s;
        }
    }

    out.annotation = ph.annotation;
    out.annotation.image_id = numbered("raw", index);
    out.annotation.image_path = "raw/" + out.annotation.image_id + ".png";
    return out;
}

std::vector<Sample> generate_samples(const PhantomParams& params, std::size_t n,
                                     std::optional<std::size_t> n_distended) {
    params.validate();
    if (n < 1) throw ValidationError("dataset size must be >= 1");

    std::vector<std::optional<bool>> forced(n);
    if (n_distended) {
        if (*n_distended > n) throw ValidationError("n_distended exceeds dataset size");
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng lrng(Rng::mix(params.seed, kLabelStream));
        lrng.shuffle(order);
        for (std::size_t i = 0; i < n; ++i) forced[order[i]] = i < *n_distended;
    }

    // Patients own 1-4 consecutive images: two knees per visit, up to two visits.
    Rng prng(Rng::mix(params.seed, kPatientStream));
    std::vector<Sample> out;
    out.reserve(n);
    std::size_t patient = 0;
    for (std::size_t i = 0; i < n;) {
        const double u = prng.uniform();
        const std::size_t images = u < 0.25 ? 1 : u < 0.60 ? 2 : u < 0.70 ? 3 : 4;
        const bool right_first = prng.bernoulli(0.5);
        for (std::size_t j = 0; j < images && i < n; ++j, ++i) {
            Phantom ph = render_phantom(params, i, forced[i]);
            ph.annotation.patient_id = numbered("P", patient);
            ph.annotation.visit = static_cast<int>(j / 2) + 1;
            ph.annotation.side = ((j % 2 == 0) == right_first) ? dataset::Side::Right : dataset::Side::Left;
            out.push_back({std::move(ph.image), std::move(ph.annotation)});
        }
        ++patient;
    }
    return out;
}

dataset::DatasetManifest generate_dataset(const PhantomParams& params, std::size_t n,
                                          const std::filesystem::path& out_dir,
                                          std::optional<std::size_t> n_distended, bool raw) {
    auto samples = generate_samples(params, n, n_distended);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

    std::vector<dataset::Annotation> entries;
    entries.reserve(samples.size());
    for (auto& s : samples) {
        save_png(out_dir / s.annotation.image_path, s.image);
        entries.push_back(s.annotation);
    }
    dataset::DatasetManifest manifest(std::move(entries));
    write_text(out_dir / "manifest.jsonl", manifest.to_jsonl());

    if (raw) {
        std::filesystem::create_directories(out_dir / "raw", ec);
        if (ec) throw IoError("cannot create " + (out_dir / "raw").string() + ": " + ec.message());
        json truth = json::object();
        for (std::size_t i = 0; i < n; ++i) {
            const auto& entry = manifest.entries()[i];
            RawCanvas rc = generate_raw_canvas(params, i, {}, entry.label == Label::Distended);
            const auto& id = entry.image_id;
            save_png(out_dir / "raw" / (id + ".png"), rc.raw);
            truth[id] = box_to_json(rc.truth.box);
        }
        write_text(out_dir / "raw_truth.json", truth.dump(2) + "\n");
    }
    return manifest;
}

}  // namespace recess::phantom
