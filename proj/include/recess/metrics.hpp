#pragma once

#include <optional>
#include <string>
#include <vector>

#include "recess/imaging.hpp"
#include "recess/io.hpp"

namespace recess::metrics {

/// Positive class is Distended.
struct ConfusionMatrix {
    long tp = 0;
    long tn = 0;
    long fp = 0;
    long fn = 0;
    bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion(const std::vector<Label>& preds, const std::vector<Label>& gts);

struct ClassificationMetrics {
    double sensitivity = 0.0;
    double specificity = 0.0;
    double balanced_accuracy = 0.0;
};

/// Throws UndefinedMetric when either class is absent.
ClassificationMetrics classification_metrics(const ConfusionMatrix& cm);

/// `pred` is empty when nothing was detected; such images score IoU 0.
struct BoxPair {
    std::optional<BBox> pred;
    BBox gt;
};

struct DetectionMetrics {
    double mean_iou = 0.0;
    double frac_iou_ge_05 = 0.0;
};

/// Throws EmptySet on an empty list.
DetectionMetrics detection_metrics(const std::vector<BoxPair>& pairs);

struct Detection {
    std::string image_id;
    LabeledBox box;
};

struct GroundTruth {
    std::string image_id;
    BBox box;
    Label label = Label::Recess;
};

/// 101-point interpolated AP from detections already marked TP/FP in
/// descending-confidence order.
double interpolated_ap(const std::vector<bool>& is_tp, std::size_t n_gt);

/// Class-averaged AP at one IoU threshold, over the classes present in `gts`.
double average_precision(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gts,
                         double iou_threshold);

struct MapPair {
    double map50 = 0.0;
    double map5095 = 0.0;
};

MapPair map_range(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gts);

double detection_fitness(double map50, double map5095) noexcept;
double multitask_fitness(double balanced_accuracy, double map50) noexcept;

struct PerImageResult {
    std::string image_id;
    Label gt_label = Label::NonDistended;
    Label predicted = Label::NonDistended;
    double confidence = 0.0;
    std::optional<BBox> box;
    double iou = 0.0;
};

struct EvalReport {
    double balanced_accuracy = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double mean_iou = 0.0;
    double frac_iou_ge_05 = 0.0;
    double map50 = 0.0;
    double map5095 = 0.0;
    double fitness = 0.0;
    ConfusionMatrix confusion;
    std::vector<PerImageResult> per_image;
};

json to_json(const EvalReport& r, bool with_images = true);
EvalReport eval_report_from_json(const json& j);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Mean and sample standard deviation (0 for a single value).
MeanStd mean_std(const std::vector<double>& values);

struct CvSummary {
    MeanStd balanced_accuracy, specificity, sensitivity, mean_iou, frac_iou_ge_05, map50, map5095;
    ConfusionMatrix confusion;  // summed over folds
};

CvSummary summarize(const std::vector<EvalReport>& folds);
json to_json(const CvSummary& s);

/// Text table with the columns Approach | Balanced accuracy | Specificity | Sensitivity | IoU.
std::string render_table(const std::vector<std::pair<std::string, CvSummary>>& rows);

/// Confusion-matrix block: counts and row-normalized rates.
std::string render_confusion(const std::string& title, const ConfusionMatrix& cm);

}  // namespace recess::metrics
