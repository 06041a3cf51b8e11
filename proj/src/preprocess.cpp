#include "recess/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "recess/error.hpp"

namespace recess::preprocess {

namespace {

/// Horizontal half-width of the structuring element for every row offset
/// dy in [-ry, ry], indexed by dy + ry.
std::vector<int> kernel_rows(const MorphKernel& k) {
    k.validate();
    const int rx = k.width / 2;
    const int ry = k.height / 2;
    std::vector<int> hw(static_cast<std::size_t>(2 * ry + 1), rx);
    if (k.shape == KernelShape::Ellipse) {
        const double ax = rx + 0.5;
        const double ay = ry + 0.5;
        for (int dy = -ry; dy <= ry; ++dy) {
            const double t = static_cast<double>(dy) / ay;
            const int w = static_cast<int>(std::floor(ax * std::sqrt(std::max(0.0, 1.0 - t * t))));
            hw[static_cast<std::size_t>(dy + ry)] = std::min(rx, w);
        }
    }
    return hw;
}

/// Row-wise prefix counts: P[y*(W+1) + x] = set pixels in row y, columns [0, x).
std::vector<int> row_prefix(const BinaryMask& m) {
    const int w = m.width();
    std::vector<int> p(static_cast<std::size_t>(m.height()) * static_cast<std::size_t>(w + 1), 0);
    for (int y = 0; y < m.height(); ++y) {
        int* row = p.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(w + 1);
        for (int x = 0; x < w; ++x) row[x + 1] = row[x] + (m(x, y) ? 1 : 0);
    }
    return p;
}

enum class Op { Dilate, Erode };

BinaryMask morph(const BinaryMask& m, const MorphKernel& k, Op op) {
    const auto hw = kernel_rows(k);
    const int ry = k.height / 2;
    const int w = m.width();
    const int h = m.height();
    const auto p = row_prefix(m);
    BinaryMask out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            bool result = (op == Op::Erode);
            for (int dy = -ry; dy <= ry; ++dy) {
                const int sy = y + dy;
                if (sy < 0 || sy >= h) continue;
                const int r = hw[static_cast<std::size_t>(dy + ry)];
                const int x0 = std::max(0, x - r);
                const int x1 = std::min(w, x + r + 1);
                const int* row = p.data() + static_cast<std::size_t>(sy) * static_cast<std::size_t>(w + 1);
                const int ones = row[x1] - row[x0];
                if (op == Op::Dilate && ones > 0) {
                    result = true;
                    break;
                }
                if (op == Op::Erode && ones < x1 - x0) {
                    result = false;
                    break;
                }
            }
            out.set(x, y, result);
        }
    }
    return out;
}

BinaryMask pad(const BinaryMask& m, int px, int py, bool value) {
    BinaryMask out(m.width() + 2 * px, m.height() + 2 * py, value);
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) out.set(x + px, y + py, m(x, y));
    return out;
}

BinaryMask unpad(const BinaryMask& m, int px, int py) {
    BinaryMask out(m.width() - 2 * px, m.height() - 2 * py);
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x) out.set(x, y, m(x + px, y + py));
    return out;
}

}  // namespace

void MorphKernel::validate() const {
    if (width < 1 || height < 1 || width % 2 == 0 || height % 2 == 0)
        throw ValidationError("morphology kernel dimensions must be odd and >= 1");
}

BinaryMask gradient_mask(const GrayImage& img, double threshold) {
    if (threshold < 0.0 || threshold > 1.0) throw ValidationError("gradient threshold must lie in [0,1]");
    BinaryMask out(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const double gx = 0.5 * (static_cast<double>(img.at_clamped(x + 1, y)) - img.at_clamped(x - 1, y));
            const double gy = 0.5 * (static_cast<double>(img.at_clamped(x, y + 1)) - img.at_clamped(x, y - 1));
            out.set(x, y, std::sqrt(gx * gx + gy * gy) > threshold);
        }
    }
    return out;
}

BinaryMask remove_small_components(const BinaryMask& mask, std::size_t min_size) {
    if (min_size < 1) throw ValidationError("min_size must be >= 1");
    const int w = mask.width();
    const int h = mask.height();
    BinaryMask out = mask;
    std::vector<unsigned char> seen(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0);
    std::vector<int> component;
    std::vector<int> stack;
    for (int start = 0; start < w * h; ++start) {
        if (seen[static_cast<std::size_t>(start)] || !mask(start % w, start / w)) continue;
        component.clear();
        stack.assign(1, start);
        seen[static_cast<std::size_t>(start)] = 1;
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            component.push_back(cur);
            const int cx = cur % w;
            const int cy = cur / w;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int nx = cx + dx;
                    const int ny = cy + dy;
                    if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                    const int ni = ny * w + nx;
                    if (seen[static_cast<std::size_t>(ni)] || !mask(nx, ny)) continue;
                    seen[static_cast<std::size_t>(ni)] = 1;
                    stack.push_back(ni);
                }
        }
        if (component.size() < min_size)
            for (int idx : component) out.set(idx % w, idx / w, false);
    }
    return out;
}

BinaryMask dilate(const BinaryMask& mask, const MorphKernel& kernel) {
    return morph(mask, kernel, Op::Dilate);
}

BinaryMask erode(const BinaryMask& mask, const MorphKernel& kernel) {
    return morph(mask, kernel, Op::Erode);
}

BinaryMask opening(const BinaryMask& mask, const MorphKernel& kernel) {
    kernel.validate();
    // Evaluate on a frame padded with set pixels so the outside behaves like an
    // unbounded set region; this keeps the operator idempotent at the border.
    const int px = kernel.width / 2;
    const int py = kernel.height / 2;
    const BinaryMask padded = pad(mask, px, py, true);
    return unpad(morph(morph(padded, kernel, Op::Erode), kernel, Op::Dilate), px, py);
}

FrameExtraction extract_scan_frame(const GrayImage& raw, const FrameConfig& cfg) {
    if (raw.width() < 64 || raw.height() < 64) throw ShapeError("raw image must be at least 64x64");
    BinaryMask m = gradient_mask(raw, cfg.threshold);
    m = remove_small_components(m, cfg.min_size);
    const BinaryMask cleaned = m;
    m = dilate(m, cfg.dilate_kernel);
    m = opening(m, cfg.open_kernel);
    if (cfg.compensate_dilation) {
        // Keep only pixels that were edges before dilation. Eroding instead
        // leaves the dilation margin wherever it reached the image border.
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x)
                if (!cleaned(x, y)) m.set(x, y, false);
    }
    if (!m.any()) throw NoFrameFound("no scan frame found; crop this image manually");

    FrameExtraction result;
    result.region.box = tight_box(m);
    result.image = crop(raw, result.region.box);
    if (cfg.resize_to) result.image = resize(result.image, *cfg.resize_to, *cfg.resize_to);
    result.final_mask = std::move(m);
    return result;
}

}  // namespace recess::preprocess
