#include "recess/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>

#include "recess/error.hpp"

namespace recess::metrics {

ConfusionMatrix confusion(const std::vector<Label>& preds, const std::vector<Label>& gts) {
    if (preds.size() != gts.size())
        throw LengthMismatch("predictions (" + std::to_string(preds.size()) + ") and ground truths (" +
                             std::to_string(gts.size()) + ") differ in length");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const bool p = preds[i] == Label::Distended;
        const bool g = gts[i] == Label::Distended;
        if (p && g) ++cm.tp;
        else if (p) ++cm.fp;
        else if (g) ++cm.fn;
        else ++cm.tn;
    }
    return cm;
}

ClassificationMetrics classification_metrics(const ConfusionMatrix& cm) {
    if (cm.tp + cm.fn == 0) throw UndefinedMetric("no Distended ground truths: sensitivity undefined");
    if (cm.tn + cm.fp == 0) throw UndefinedMetric("no NonDistended ground truths: specificity undefined");
    ClassificationMetrics m;
    m.sensitivity = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
    m.specificity = static_cast<double>(cm.tn) / static_cast<double>(cm.tn + cm.fp);
    m.balanced_accuracy = 0.5 * (m.sensitivity + m.specificity);
    return m;
}

DetectionMetrics detection_metrics(const std::vector<BoxPair>& pairs) {
    if (pairs.empty()) throw EmptySet("no images to score");
    double sum = 0.0;
    std::size_t hits = 0;
    for (const auto& p : pairs) {
        const double v = p.pred ? iou(*p.pred, p.gt) : 0.0;
        sum += v;
        if (v >= 0.5) ++hits;
    }
    const auto n = static_cast<double>(pairs.size());
    return {sum / n, static_cast<double>(hits) / n};
}

double interpolated_ap(const std::vector<bool>& is_tp, std::size_t n_gt) {
    if (n_gt == 0) return 0.0;
    std::vector<double> recall, precision;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < is_tp.size(); ++i) {
        if (is_tp[i]) ++tp;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    // Precision envelope: best precision at any recall at or beyond this point.
    for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    std::size_t j = 0;
    for (int k = 0; k <= 100; ++k) {
        const double r = k / 100.0;
        while (j < recall.size() && recall[j] < r - 1e-12) ++j;
        if (j < recall.size()) sum += precision[j];
    }
    return sum / 101.0;
}

namespace {

double class_ap(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gts, Label cls,
                double threshold) {
    std::unordered_map<std::string, const GroundTruth*> gt_of;
    std::size_t n_gt = 0;
    for (const auto& g : gts)
        if (g.label == cls) {
            gt_of[g.image_id] = &g;
            ++n_gt;
        }
    std::vector<const Detection*> dets;
    for (const auto& d : detections)
        if (d.box.label == cls) dets.push_back(&d);
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection* a, const Detection* b) { return a->box.confidence > b->box.confidence; });

    std::set<std::string> matched;
    std::vector<bool> is_tp;
    for (const auto* d : dets) {
        auto it = gt_of.find(d->image_id);
        const bool tp = it != gt_of.end() && !matched.count(d->image_id) && iou(d->box.box, it->second->box) >= threshold;
        if (tp) matched.insert(d->image_id);
        is_tp.push_back(tp);
    }
    return interpolated_ap(is_tp, n_gt);
}

}  // namespace

double average_precision(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gts,
                         double iou_threshold) {
    std::set<Label> classes;
    for (const auto& g : gts) classes.insert(g.label);
    if (classes.empty()) return 0.0;
    double sum = 0.0;
    for (Label c : classes) sum += class_ap(detections, gts, c, iou_threshold);
    return sum / static_cast<double>(classes.size());
}

MapPair map_range(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gts) {
    MapPair m;
    double sum = 0.0;
    for (int i = 0; i < 10; ++i) {
        const double ap = average_precision(detections, gts, (50.0 + 5.0 * i) / 100.0);
        if (i == 0) m.map50 = ap;
        sum += ap;
    }
    m.map5095 = sum / 10.0;
    return m;
}

double detection_fitness(double map50, double map5095) noexcept { return 0.1 * map50 + 0.9 * map5095; }

double multitask_fitness(double balanced_accuracy, double map50) noexcept {
    return 0.7 * balanced_accuracy + 0.3 * map50;
}

json to_json(const EvalReport& r, bool with_images) {
    json j{{"balanced_accuracy", r.balanced_accuracy},
           {"sensitivity", r.sensitivity},
           {"specificity", r.specificity},
           {"mean_iou", r.mean_iou},
           {"frac_iou_ge_05", r.frac_iou_ge_05},
           {"map50", r.map50},
           {"map5095", r.map5095},
           {"fitness", r.fitness},
           {"confusion", {{"tp", r.confusion.tp}, {"tn", r.confusion.tn}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn}}}};
    if (with_images) {
        json imgs = json::array();
        for (const auto& p : r.per_image) {
            imgs.push_back({{"image_id", p.image_id},
                            {"gt_label", std::string(to_string(p.gt_label))},
                            {"predicted", std::string(to_string(p.predicted))},
                            {"confidence", p.confidence},
                            {"box", p.box ? box_to_json(*p.box) : json()},
                            {"iou", p.iou}});
        }
        j["per_image"] = imgs;
    }
    return j;
}

EvalReport eval_report_from_json(const json& j) {
    try {
        EvalReport r;
        r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
        r.sensitivity = j.at("sensitivity").get<double>();
        r.specificity = j.at("specificity").get<double>();
        r.mean_iou = j.at("mean_iou").get<double>();
        r.frac_iou_ge_05 = j.at("frac_iou_ge_05").get<double>();
        r.map50 = j.at("map50").get<double>();
        r.map5095 = j.at("map5095").get<double>();
        r.fitness = j.value("fitness", 0.0);
        const auto& c = j.at("confusion");
        r.confusion = {c.at("tp").get<long>(), c.at("tn").get<long>(), c.at("fp").get<long>(), c.at("fn").get<long>()};
        if (j.contains("per_image"))
            for (const auto& p : j["per_image"]) {
                PerImageResult x;
                x.image_id = p.at("image_id").get<std::string>();
                x.gt_label = parse_label(p.at("gt_label").get<std::string>());
                x.predicted = parse_label(p.at("predicted").get<std::string>());
                x.confidence = p.at("confidence").get<double>();
                if (!p.at("box").is_null()) x.box = box_from_json(p["box"]);
                x.iou = p.at("iou").get<double>();
                r.per_image.push_back(std::move(x));
            }
        return r;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid evaluation report: ") + e.what());
    }
}

MeanStd mean_std(const std::vector<double>& values) {
    if (values.empty()) throw EmptySet("no values to summarize");
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    if (values.size() == 1) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

CvSummary summarize(const std::vector<EvalReport>& folds) {
    auto pick = [&](double EvalReport::*field) {
        std::vector<double> v;
        for (const auto& f : folds) v.push_back(f.*field);
        return mean_std(v);
    };
    CvSummary s;
    s.balanced_accuracy = pick(&EvalReport::balanced_accuracy);
    s.specificity = pick(&EvalReport::specificity);
    s.sensitivity = pick(&EvalReport::sensitivity);
    s.mean_iou = pick(&EvalReport::mean_iou);
    s.frac_iou_ge_05 = pick(&EvalReport::frac_iou_ge_05);
    s.map50 = pick(&EvalReport::map50);
    s.map5095 = pick(&EvalReport::map5095);
    for (const auto& f : folds) {
        s.confusion.tp += f.confusion.tp;
        s.confusion.tn += f.confusion.tn;
        s.confusion.fp += f.confusion.fp;
        s.confusion.fn += f.confusion.fn;
    }
    return s;
}

json to_json(const CvSummary& s) {
    auto ms = [](const MeanStd& m) { return json{{"mean", m.mean}, {"std", m.std}}; };
    return json{{"balanced_accuracy", ms(s.balanced_accuracy)},
                {"specificity", ms(s.specificity)},
                {"sensitivity", ms(s.sensitivity)},
                {"mean_iou", ms(s.mean_iou)},
                {"frac_iou_ge_05", ms(s.frac_iou_ge_05)},
                {"map50", ms(s.map50)},
                {"map5095", ms(s.map5095)},
                {"confusion",
                 {{"tp", s.confusion.tp}, {"tn", s.confusion.tn}, {"fp", s.confusion.fp}, {"fn", s.confusion.fn}}}};
}

namespace {

std::string cell(const MeanStd& m) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", m.mean, m.std);
    return buf;
}

// "±" is two bytes but one column.
std::size_t columns(const std::string& s) {
    std::size_t cols = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++cols;
    return cols;
}

std::string pad(const std::string& s, std::size_t width) {
    const std::size_t cols = columns(s);
    return s + std::string(width > cols ? width - cols : 0, ' ');
}

}  // namespace

std::string render_table(const std::vector<std::pair<std::string, CvSummary>>& rows) {
    const std::vector<std::string> head{"Approach", "Balanced accuracy", "Specificity", "Sensitivity", "IoU"};
    std::vector<std::vector<std::string>> body;
    for (const auto& [name, s] : rows)
        body.push_back({name, cell(s.balanced_accuracy), cell(s.specificity), cell(s.sensitivity), cell(s.mean_iou)});
    std::vector<std::size_t> width;
    for (const auto& h : head) width.push_back(h.size());
    for (const auto& r : body)
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], columns(r[i]));

    std::string out;
    auto line = [&](const std::vector<std::string>& r) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            out += i ? " | " : "";
            out += pad(r[i], width[i]);
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += '\n';
    };
    line(head);
    for (std::size_t i = 0; i < head.size(); ++i) {
        out += i ? "-|-" : "";
        out += std::string(width[i], '-');
    }
    out += '\n';
    for (const auto& r : body) line(r);
    return out;
}

std::string render_confusion(const std::string& title, const ConfusionMatrix& cm) {
    const double pos = static_cast<double>(cm.tp + cm.fn), neg = static_cast<double>(cm.tn + cm.fp);
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "%s\n"
                  "                 pred Distended  pred NonDistended\n"
                  "gt Distended     %5ld (%.2f)    %5ld (%.2f)\n"
                  "gt NonDistended  %5ld (%.2f)    %5ld (%.2f)\n",
                  title.c_str(), cm.tp, pos > 0 ? cm.tp / pos : 0.0, cm.fn, pos > 0 ? cm.fn / pos : 0.0, cm.fp,
                  neg > 0 ? cm.fp / neg : 0.0, cm.tn, neg > 0 ? cm.tn / neg : 0.0);
    return buf;
}

}  // namespace recess::metrics
