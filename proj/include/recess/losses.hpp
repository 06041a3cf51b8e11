#pragma once

#include <vector>

#include "recess/model.hpp"

namespace recess::losses {

inline constexpr double kProbEps = 1e-7;

struct LossWeights {
    double alpha = 0.05;  // box
    double beta = 0.5;    // objectness
    double gamma = 0.25;  // detection class (DetectionTwoClass only)
    double delta = 0.4;   // classifier (MultiTask only)

    /// Throws ValidationError for negative or non-finite weights.
    void validate() const;
};

struct LossBreakdown {
    double l_box = 0.0;
    double l_obj = 0.0;
    double l_c = 0.0;
    double l_cls = 0.0;
    double total = 0.0;
};

double ciou_loss(const BBox& pred, const BBox& gt);

/// Binary cross-entropy with p clamped to [eps, 1-eps].
double bce(double p, double y);
/// dBCE/dp; zero where the clamp is active.
double bce_grad(double p, double y);

double weighted_cls_loss(double p_distended, Label label, double w_pos);

/// Loss of one image plus its gradients with respect to the raw head output
/// (one image, RawPrediction layout) and the class probabilities.
struct ImageLoss {
    LossBreakdown parts;
    std::vector<double> d_raw;
    model::ClassProbs d_probs{0.0, 0.0};
};

/// `probs` is used only in MultiTask mode. Gradients are filled when `want_grad` is set.
ImageLoss image_loss(const model::RawPrediction& raw, int b, const model::ClassProbs& probs,
                     const model::Targets& target, Label label, const model::ModelConfig& cfg, const LossWeights& w,
                     double w_pos, bool want_grad);

/// Batch means of the per-image losses.
LossBreakdown detection_loss(const model::RawPrediction& raw, const std::vector<model::Targets>& targets,
                             const model::ModelConfig& cfg, const LossWeights& w);

LossBreakdown multitask_loss(const model::RawPrediction& raw, const std::vector<model::ClassProbs>& cls_probs,
                             const std::vector<model::Targets>& targets, const std::vector<Label>& labels,
                             const model::ModelConfig& cfg, const LossWeights& w, double w_pos);

}  // namespace recess::losses
