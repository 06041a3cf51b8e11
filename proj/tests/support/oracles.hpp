#pragma once

// Naive reference implementations the tests compare the library against.
// They share no code with the library beyond the plain data types.

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "recess/imaging.hpp"
#include "recess/metrics.hpp"
#include "recess/random.hpp"

namespace oracle {

using recess::BBox;
using recess::BinaryMask;

/// IoU by counting lattice cells of side 1/res inside each box. Exact when
/// every corner lies on the lattice.
inline double raster_iou(const BBox& a, const BBox& b, int res) {
    const double x0 = std::min(a.x_min, b.x_min), y0 = std::min(a.y_min, b.y_min);
    const double x1 = std::max(a.x_max, b.x_max), y1 = std::max(a.y_max, b.y_max);
    const long nx = std::lround((x1 - x0) * res), ny = std::lround((y1 - y0) * res);
    long in_a = 0, in_b = 0, both = 0;
    for (long j = 0; j < ny; ++j)
        for (long i = 0; i < nx; ++i) {
            const double cx = x0 + (i + 0.5) / res, cy = y0 + (j + 0.5) / res;
            const bool ia = cx > a.x_min && cx < a.x_max && cy > a.y_min && cy < a.y_max;
            const bool ib = cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max;
            in_a += ia;
            in_b += ib;
            both += ia && ib;
        }
    const long uni = in_a + in_b - both;
    return uni == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(uni);
}

/// Random box with corners on the integer lattice inside [0, extent].
inline BBox lattice_box(recess::Rng& rng, int extent) {
    int x0 = rng.uniform_int(0, extent - 1), x1 = rng.uniform_int(0, extent - 1);
    int y0 = rng.uniform_int(0, extent - 1), y1 = rng.uniform_int(0, extent - 1);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    return {double(x0), double(y0), double(x1 + 1), double(y1 + 1)};
}

/// AP at one IoU threshold by enumerating confidence thresholds. Relies on
/// distinct confidences. For each cut t: tp(t) = images whose best-scoring
/// qualifying detection (right class, IoU >= thr) scores >= t; ndet(t) =
/// detections scoring >= t. Precision envelope on a 101-point recall grid,
/// averaged over the classes present in the ground truth.
inline double threshold_ap(const std::vector<recess::metrics::Detection>& dets,
                           const std::vector<recess::metrics::GroundTruth>& gts, double thr) {
    std::set<recess::Label> classes;
    for (const auto& g : gts) classes.insert(g.label);
    if (classes.empty()) return 0.0;
    double total = 0.0;
    for (auto cls : classes) {
        std::map<std::string, BBox> gt_box;
        for (const auto& g : gts)
            if (g.label == cls) gt_box[g.image_id] = g.box;
        const long n_gt = static_cast<long>(gt_box.size());
        std::map<std::string, double> best_hit;
        std::vector<double> confs;
        for (const auto& d : dets) {
            if (d.box.label != cls) continue;
            confs.push_back(d.box.confidence);
            auto it = gt_box.find(d.image_id);
            if (it != gt_box.end() && recess::iou(d.box.box, it->second) >= thr) {
                auto [pos, fresh] = best_hit.emplace(d.image_id, d.box.confidence);
                if (!fresh) pos->second = std::max(pos->second, d.box.confidence);
            }
        }
        std::vector<std::pair<long, double>> points;  // (tp, precision)
        for (double t : confs) {
            long tp = 0, nd = 0;
            for (const auto& [id, c] : best_hit) tp += c >= t;
            for (double c : confs) nd += c >= t;
            points.push_back({tp, static_cast<double>(tp) / static_cast<double>(nd)});
        }
        double sum = 0.0;
        for (long k = 0; k <= 100; ++k) {
            double best = 0.0;
            bool any = false;
            for (const auto& [tp, prec] : points)
                if (tp * 100 >= k * n_gt) {
                    best = any ? std::max(best, prec) : prec;
                    any = true;
                }
            sum += best;
        }
        total += sum / 101.0;
    }
    return total / static_cast<double>(classes.size());
}

/// Sizes of 8-connected components, by breadth-first flood fill.
inline std::vector<std::size_t> component_sizes(const BinaryMask& m) {
    std::vector<char> seen(static_cast<std::size_t>(m.width()) * m.height(), 0);
    std::vector<std::size_t> sizes;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) {
            if (!m(x, y) || seen[std::size_t(y) * m.width() + x]) continue;
            std::deque<std::pair<int, int>> q{{x, y}};
            seen[std::size_t(y) * m.width() + x] = 1;
            std::size_t n = 0;
            while (!q.empty()) {
                auto [cx, cy] = q.front();
                q.pop_front();
                ++n;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = cx + dx, ny = cy + dy;
                        if (nx < 0 || ny < 0 || nx >= m.width() || ny >= m.height() || !m(nx, ny)) continue;
                        char& s = seen[std::size_t(ny) * m.width() + nx];
                        if (!s) {
                            s = 1;
                            q.push_back({nx, ny});
                        }
                    }
            }
            sizes.push_back(n);
        }
    return sizes;
}

/// CIoU straight from its definition.
inline double ciou(const BBox& p, const BBox& g) {
    const double iw = std::max(0.0, std::min(p.x_max, g.x_max) - std::max(p.x_min, g.x_min));
    const double ih = std::max(0.0, std::min(p.y_max, g.y_max) - std::max(p.y_min, g.y_min));
    const double inter = iw * ih;
    const double u = p.area() + g.area() - inter;
    const double io = inter / u;
    const double dx = p.center_x() - g.center_x(), dy = p.center_y() - g.center_y();
    const double cw = std::max(p.x_max, g.x_max) - std::min(p.x_min, g.x_min);
    const double ch = std::max(p.y_max, g.y_max) - std::min(p.y_min, g.y_min);
    const double rho2 = dx * dx + dy * dy, c2 = cw * cw + ch * ch;
    const double dv = std::atan(g.width() / g.height()) - std::atan(p.width() / p.height());
    const double v = 4.0 / (std::numbers::pi * std::numbers::pi) * dv * dv;
    const double a = v == 0.0 ? 0.0 : v / ((1.0 - io) + v);
    return 1.0 - io + rho2 / c2 + a * v;
}

/// Central difference of f at x along coordinate i.
inline double central_diff(const std::function<double()>& f, double& x, double h) {
    const double orig = x;
    x = orig + h;
    const double fp = f();
    x = orig - h;
    const double fm = f();
    x = orig;
    return (fp - fm) / (2.0 * h);
}

/// |a - b| relative to their magnitudes, with an absolute floor for values near zero.
inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max(floor, std::abs(a) + std::abs(b));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("recess_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace oracle
