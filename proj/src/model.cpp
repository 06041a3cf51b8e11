#include "recess/model.hpp"

#include <algorithm>
#include <cmath>

#include "recess/error.hpp"

namespace recess::model {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double logit(double p) {
    p = std::clamp(p, 1e-6, 1.0 - 1e-6);
    return std::log(p / (1.0 - p));
}

}  // namespace

std::string_view to_string(Mode mode) noexcept {
    return mode == Mode::DetectionTwoClass ? "detection" : "multitask";
}

Mode parse_mode(std::string_view text) {
    if (text == "detection" || text == "DetectionTwoClass") return Mode::DetectionTwoClass;
    if (text == "multitask" || text == "MultiTask") return Mode::MultiTask;
    throw ValidationError("unknown mode '" + std::string(text) + "' (expected detection or multitask)");
}

void ModelConfig::validate() const {
    if (input_size < 8) throw ShapeError("input_size must be >= 8");
    if (backbone_channels.empty()) throw ValidationError("backbone_channels must not be empty");
    for (int c : backbone_channels)
        if (c < 1) throw ValidationError("backbone channel counts must be >= 1");
    if (grid_size < 1 || input_size % grid_size != 0) throw ShapeError("grid_size must divide input_size");
    // Every stage halves the resolution.
    if ((input_size >> backbone_channels.size()) != grid_size || (grid_size << backbone_channels.size()) != input_size)
        throw ShapeError("input_size / 2^stages must equal grid_size");
    if (anchors_per_cell < 1) throw ValidationError("anchors_per_cell must be >= 1");
    if (static_cast<int>(anchor_priors.size()) != anchors_per_cell)
        throw ValidationError("need exactly anchors_per_cell anchor priors");
    for (const auto& p : anchor_priors)
        if (!(p.w > 0.0 && p.h > 0.0)) throw ValidationError("anchor priors must be positive");
    if (classifier_hidden[0] < 1 || classifier_hidden[1] < 1) throw ValidationError("classifier_hidden must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout_rate must lie in [0,1)");
    if (pooled_size[0] < 1 || pooled_size[1] < 1 || pooled_size[0] > grid_size || pooled_size[1] > grid_size)
        throw ValidationError("pooled_size must lie in [1, grid_size]");
}

ModelConfig ModelConfig::tiny(Mode mode) {
    ModelConfig cfg;
    cfg.mode = mode;
    cfg.backbone_channels = {8, 16, 32, 64};
    cfg.classifier_hidden = {128, 64};
    cfg.pooled_size = {4, 4};
    return cfg;
}

json to_json(const ModelConfig& cfg) {
    json priors = json::array();
    for (const auto& p : cfg.anchor_priors) priors.push_back({p.w, p.h});
    return json{{"mode", std::string(to_string(cfg.mode))},
                {"input_size", cfg.input_size},
                {"backbone_channels", cfg.backbone_channels},
                {"grid_size", cfg.grid_size},
                {"anchors_per_cell", cfg.anchors_per_cell},
                {"anchor_priors", priors},
                {"classifier_hidden", cfg.classifier_hidden},
                {"dropout_rate", cfg.dropout_rate},
                {"pooled_size", cfg.pooled_size}};
}

ModelConfig model_config_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("model config must be a JSON object");
    ModelConfig cfg;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "mode") cfg.mode = parse_mode(value.get<std::string>());
            else if (key == "input_size") cfg.input_size = value.get<int>();
            else if (key == "backbone_channels") cfg.backbone_channels = value.get<std::vector<int>>();
            else if (key == "grid_size") cfg.grid_size = value.get<int>();
            else if (key == "anchors_per_cell") cfg.anchors_per_cell = value.get<int>();
            else if (key == "anchor_priors") {
                cfg.anchor_priors.clear();
                for (const auto& p : value) cfg.anchor_priors.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
            } else if (key == "classifier_hidden") cfg.classifier_hidden = value.get<std::array<int, 2>>();
            else if (key == "dropout_rate") cfg.dropout_rate = value.get<double>();
            else if (key == "pooled_size") cfg.pooled_size = value.get<std::array<int, 2>>();
            else throw ValidationError("unknown model config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

BBox decode_box(double tx, double ty, double tw, double th, int row, int col, const AnchorPrior& prior, int stride) {
    const double cx = (col + sigmoid(tx)) * stride;
    const double cy = (row + sigmoid(ty)) * stride;
    return BBox::from_center(cx, cy, prior.w * std::exp(tw), prior.h * std::exp(th));
}

std::vector<std::vector<LabeledBox>> decode_predictions(const RawPrediction& raw, const ModelConfig& cfg,
                                                        double conf_threshold) {
    const double size = cfg.input_size;
    const int n_cls = cfg.num_classes();
    std::vector<std::vector<LabeledBox>> out(static_cast<std::size_t>(raw.batch));
    for (int b = 0; b < raw.batch; ++b) {
        auto& dets = out[static_cast<std::size_t>(b)];
        for (int row = 0; row < raw.grid; ++row)
            for (int col = 0; col < raw.grid; ++col)
                for (int a = 0; a < raw.anchors; ++a) {
                    const double* v = &raw.data[raw.index(b, row, col, a, 0)];
                    double cls_prob = 1.0;
                    Label label = Label::Recess;
                    if (n_cls == 2) {
                        const double mx = std::max(v[5], v[6]);
                        const double e0 = std::exp(v[5] - mx), e1 = std::exp(v[6] - mx);
                        const double p1 = e1 / (e0 + e1);
                        label = p1 > 0.5 ? Label::Distended : Label::NonDistended;
                        cls_prob = std::max(p1, 1.0 - p1);
                    }
                    const double conf = sigmoid(v[4]) * cls_prob;
                    if (conf < conf_threshold) continue;
                    BBox box = decode_box(v[0], v[1], v[2], v[3], row, col,
                                          cfg.anchor_priors[static_cast<std::size_t>(a)], cfg.stride());
                    box.x_min = std::clamp(box.x_min, 0.0, size);
                    box.y_min = std::clamp(box.y_min, 0.0, size);
                    box.x_max = std::clamp(box.x_max, 0.0, size);
                    box.y_max = std::clamp(box.y_max, 0.0, size);
                    dets.push_back({box, label, conf});
                }
        std::stable_sort(dets.begin(), dets.end(),
                         [](const LabeledBox& x, const LabeledBox& y) { return x.confidence > y.confidence; });
    }
    return out;
}

LabeledBox select_top(const std::vector<LabeledBox>& detections) {
    if (detections.empty()) throw NoDetection();
    const LabeledBox* best = &detections.front();
    for (const auto& d : detections)
        if (d.confidence > best->confidence) best = &d;
    return *best;
}

double shape_iou(double w1, double h1, double w2, double h2) noexcept {
    const double inter = std::min(w1, w2) * std::min(h1, h2);
    const double uni = w1 * h1 + w2 * h2 - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

Targets target_assignment(const BBox& gt, Label label, const ModelConfig& cfg) {
    const double cx = gt.center_x(), cy = gt.center_y();
    const double stride = cfg.stride();
    Targets t;
    t.box = gt;
    t.col = std::clamp(static_cast<int>(std::floor(cx / stride)), 0, cfg.grid_size - 1);
    t.row = std::clamp(static_cast<int>(std::floor(cy / stride)), 0, cfg.grid_size - 1);
    double best = -1.0;
    for (int a = 0; a < cfg.anchors_per_cell; ++a) {
        const auto& p = cfg.anchor_priors[static_cast<std::size_t>(a)];
        const double s = shape_iou(gt.width(), gt.height(), p.w, p.h);
        if (s > best) {
            best = s;
            t.anchor = a;
        }
    }
    const auto& p = cfg.anchor_priors[static_cast<std::size_t>(t.anchor)];
    t.tx = logit(cx / stride - t.col);
    t.ty = logit(cy / stride - t.row);
    t.tw = std::log(std::max(gt.width(), 1e-9) / p.w);
    t.th = std::log(std::max(gt.height(), 1e-9) / p.h);
    t.class_index = (cfg.mode == Mode::DetectionTwoClass && label == Label::Distended) ? 1 : 0;
    return t;
}

}  // namespace recess::model
