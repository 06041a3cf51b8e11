#include "recess/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "recess/error.hpp"

namespace recess::losses {

namespace {

/// Forward-mode dual number carrying derivatives for the four box parameters.
struct Dual {
    double v = 0.0;
    std::array<double, 4> d{};

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly
    static Dual var(double value, int i) {
        Dual x(value);
        x.d[static_cast<std::size_t>(i)] = 1.0;
        return x;
    }
};

Dual operator+(const Dual& a, const Dual& b) {
    Dual r(a.v + b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
}
Dual operator-(const Dual& a, const Dual& b) {
    Dual r(a.v - b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
}
Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
}
Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
}
Dual chain(const Dual& a, double value, double slope) {
    Dual r(value);
    for (int i = 0; i < 4; ++i) r.d[i] = slope * a.d[i];
    return r;
}
Dual exp(const Dual& a) {
    const double e = std::exp(a.v);
    return chain(a, e, e);
}
Dual atan(const Dual& a) { return chain(a, std::atan(a.v), 1.0 / (1.0 + a.v * a.v)); }
Dual sigmoid(const Dual& a) {
    const double s = 1.0 / (1.0 + std::exp(-a.v));
    return chain(a, s, s * (1.0 - s));
}
const Dual& max(const Dual& a, const Dual& b) { return a.v >= b.v ? a : b; }
const Dual& min(const Dual& a, const Dual& b) { return a.v <= b.v ? a : b; }

double value_of(double x) { return x; }
double value_of(const Dual& x) { return x.v; }

/// CIoU between (x1,y1,x2,y2) corner boxes; T is double or Dual.
template <typename T>
T ciou(const T& px1, const T& py1, const T& px2, const T& py2, const BBox& gt) {
    using std::atan, std::max, std::min;
    const T pw = px2 - px1, ph = py2 - py1;
    const double gw = gt.width(), gh = gt.height();

    T iw = min(px2, T(gt.x_max)) - max(px1, T(gt.x_min));
    T ih = min(py2, T(gt.y_max)) - max(py1, T(gt.y_min));
    if (value_of(iw) < 0.0) iw = T(0.0);
    if (value_of(ih) < 0.0) ih = T(0.0);
    const T inter = iw * ih;
    const T uni = pw * ph + T(gw * gh) - inter;
    const T iou = inter / (uni + T(1e-12));

    const T cw = max(px2, T(gt.x_max)) - min(px1, T(gt.x_min));
    const T ch = max(py2, T(gt.y_max)) - min(py1, T(gt.y_min));
    const T c2 = cw * cw + ch * ch + T(1e-12);
    const T dx = (px1 + px2 - T(gt.x_min + gt.x_max)) * T(0.5);
    const T dy = (py1 + py2 - T(gt.y_min + gt.y_max)) * T(0.5);
    const T rho2 = dx * dx + dy * dy;

    const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
    const T da = T(std::atan(gw / gh)) - atan(pw / ph);
    const T v = T(k) * da * da;
    const T a = v / (T(1.0) - iou + v + T(1e-12));
    return T(1.0) - iou + rho2 / c2 + a * v;
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// BCE of p = sigmoid(z) against y, with dL/dz (zero where the clamp is active).
double bce_logit(double z, double y, double* grad) {
    const double p = sigmoid_d(z);
    if (grad) *grad = (p > kProbEps && p < 1.0 - kProbEps) ? p - y : 0.0;
    return bce(p, y);
}

}  // namespace

void LossWeights::validate() const {
    for (double x : {alpha, beta, gamma, delta})
        if (!(x >= 0.0) || !std::isfinite(x)) throw ValidationError("loss weights must be finite and >= 0");
}

double ciou_loss(const BBox& pred, const BBox& gt) {
    if (pred == gt) return 0.0;
    return std::max(0.0, ciou<double>(pred.x_min, pred.y_min, pred.x_max, pred.y_max, gt));
}

double bce(double p, double y) {
    p = std::clamp(p, kProbEps, 1.0 - kProbEps);
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

double bce_grad(double p, double y) {
    if (p <= kProbEps || p >= 1.0 - kProbEps) return 0.0;
    return -y / p + (1.0 - y) / (1.0 - p);
}

double weighted_cls_loss(double p_distended, Label label, double w_pos) {
    const bool pos = label == Label::Distended;
    return (pos ? w_pos : 1.0) * bce(p_distended, pos ? 1.0 : 0.0);
}

ImageLoss image_loss(const model::RawPrediction& raw, int b, const model::ClassProbs& probs,
                     const model::Targets& target, Label label, const model::ModelConfig& cfg, const LossWeights& w,
                     double w_pos, bool want_grad) {
    ImageLoss out;
    if (want_grad) out.d_raw.assign(raw.per_image(), 0.0);
    const std::size_t base = raw.index(b, 0, 0, 0, 0);
    auto grad_at = [&](int row, int col, int a, int k) -> double& {
        return out.d_raw[raw.index(b, row, col, a, k) - base];
    };

    // Box term at the positive anchor, through the decode transform.
    const int row = target.row, col = target.col, a = target.anchor;
    const auto& prior = cfg.anchor_priors[static_cast<std::size_t>(a)];
    const double stride = cfg.stride();
    {
        const Dual tx = Dual::var(raw.at(b, row, col, a, 0), 0);
        const Dual ty = Dual::var(raw.at(b, row, col, a, 1), 1);
        const Dual tw = Dual::var(raw.at(b, row, col, a, 2), 2);
        const Dual th = Dual::var(raw.at(b, row, col, a, 3), 3);
        const Dual cx = (Dual(col) + sigmoid(tx)) * Dual(stride);
        const Dual cy = (Dual(row) + sigmoid(ty)) * Dual(stride);
        const Dual hw = exp(tw) * Dual(0.5 * prior.w);
        const Dual hh = exp(th) * Dual(0.5 * prior.h);
        const Dual loss = ciou<Dual>(cx - hw, cy - hh, cx + hw, cy + hh, target.box);
        out.parts.l_box = loss.v;
        if (want_grad)
            for (int i = 0; i < 4; ++i) grad_at(row, col, a, i) = w.alpha * loss.d[static_cast<std::size_t>(i)];
    }

    // Objectness over every anchor.
    const double n_anchors = static_cast<double>(raw.grid) * raw.grid * raw.anchors;
    double obj = 0.0;
    for (int r = 0; r < raw.grid; ++r)
        for (int c = 0; c < raw.grid; ++c)
            for (int k = 0; k < raw.anchors; ++k) {
                const double y = (r == row && c == col && k == a) ? 1.0 : 0.0;
                double g = 0.0;
                obj += bce_logit(raw.at(b, r, c, k, 4), y, want_grad ? &g : nullptr);
                if (want_grad) grad_at(r, c, k, 4) = w.beta * g / n_anchors;
            }
    out.parts.l_obj = obj / n_anchors;

    if (cfg.mode == model::Mode::DetectionTwoClass) {
        const double z0 = raw.at(b, row, col, a, 5), z1 = raw.at(b, row, col, a, 6);
        const double mx = std::max(z0, z1);
        const double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
        const std::array<double, 2> p{e0 / (e0 + e1), e1 / (e0 + e1)};
        const std::array<double, 2> y{target.class_index == 0 ? 1.0 : 0.0, target.class_index == 1 ? 1.0 : 0.0};
        out.parts.l_c = 0.5 * (bce(p[0], y[0]) + bce(p[1], y[1]));
        if (want_grad) {
            const std::array<double, 2> dp{0.5 * bce_grad(p[0], y[0]), 0.5 * bce_grad(p[1], y[1])};
            const double dot = p[0] * dp[0] + p[1] * dp[1];
            grad_at(row, col, a, 5) = w.gamma * p[0] * (dp[0] - dot);
            grad_at(row, col, a, 6) = w.gamma * p[1] * (dp[1] - dot);
        }
        out.parts.total = w.alpha * out.parts.l_box + w.beta * out.parts.l_obj + w.gamma * out.parts.l_c;
    } else {
        const bool pos = label == Label::Distended;
        out.parts.l_cls = weighted_cls_loss(probs[1], label, w_pos);
        if (want_grad) out.d_probs[1] = w.delta * (pos ? w_pos : 1.0) * bce_grad(probs[1], pos ? 1.0 : 0.0);
        out.parts.total = w.alpha * out.parts.l_box + w.beta * out.parts.l_obj + w.delta * out.parts.l_cls;
    }
    return out;
}

namespace {

void accumulate(LossBreakdown& sum, const LossBreakdown& x) {
    sum.l_box += x.l_box;
    sum.l_obj += x.l_obj;
    sum.l_c += x.l_c;
    sum.l_cls += x.l_cls;
    sum.total += x.total;
}

LossBreakdown scaled(LossBreakdown x, double s) {
    x.l_box *= s;
    x.l_obj *= s;
    x.l_c *= s;
    x.l_cls *= s;
    x.total *= s;
    return x;
}

}  // namespace

LossBreakdown detection_loss(const model::RawPrediction& raw, const std::vector<model::Targets>& targets,
                             const model::ModelConfig& cfg, const LossWeights& w) {
    if (cfg.mode != model::Mode::DetectionTwoClass) throw ModeError("detection_loss needs DetectionTwoClass mode");
    if (static_cast<int>(targets.size()) != raw.batch) throw LengthMismatch("one target per image required");
    LossBreakdown sum;
    for (int b = 0; b < raw.batch; ++b) {
        const auto& t = targets[static_cast<std::size_t>(b)];
        const Label label = t.class_index == 1 ? Label::Distended : Label::NonDistended;
        accumulate(sum, image_loss(raw, b, {0.0, 0.0}, t, label, cfg, w, 1.0, false).parts);
    }
    return raw.batch > 0 ? scaled(sum, 1.0 / raw.batch) : sum;
}

LossBreakdown multitask_loss(const model::RawPrediction& raw, const std::vector<model::ClassProbs>& cls_probs,
                             const std::vector<model::Targets>& targets, const std::vector<Label>& labels,
                             const model::ModelConfig& cfg, const LossWeights& w, double w_pos) {
    if (cfg.mode != model::Mode::MultiTask) throw ModeError("multitask_loss needs MultiTask mode");
    if (static_cast<int>(targets.size()) != raw.batch || cls_probs.size() != targets.size() ||
        labels.size() != targets.size())
        throw LengthMismatch("one target, probability pair and label per image required");
    LossBreakdown sum;
    for (int b = 0; b < raw.batch; ++b) {
        const auto i = static_cast<std::size_t>(b);
        accumulate(sum, image_loss(raw, b, cls_probs[i], targets[i], labels[i], cfg, w, w_pos, false).parts);
    }
    return raw.batch > 0 ? scaled(sum, 1.0 / raw.batch) : sum;
}

}  // namespace recess::losses
