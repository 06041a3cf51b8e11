#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "recess/aligned.hpp"
#include "recess/imaging.hpp"
#include "recess/io.hpp"

namespace recess::model {

/// DetectionTwoClass: the detector predicts Distended/NonDistended boxes.
/// MultiTask: single-class detector plus a whole-image classifier.
enum class Mode { DetectionTwoClass, MultiTask };

std::string_view to_string(Mode mode) noexcept;
/// Accepts "detection" / "multitask" (and the enum spellings).
Mode parse_mode(std::string_view text);

struct AnchorPrior {
    double w = 0.0;
    double h = 0.0;
    bool operator==(const AnchorPrior&) const = default;
};

struct ModelConfig {
    Mode mode = Mode::MultiTask;
    int input_size = 256;
    std::vector<int> backbone_channels{16, 32, 64, 128};
    int grid_size = 16;
    int anchors_per_cell = 3;
    std::vector<AnchorPrior> anchor_priors{{90.0, 8.0}, {110.0, 18.0}, {120.0, 32.0}};
    std::array<int, 2> classifier_hidden{1024, 512};
    double dropout_rate = 0.11008;
    std::array<int, 2> pooled_size{8, 8};

    /// Detection classes: 2 in DetectionTwoClass mode, 1 in MultiTask mode.
    int num_classes() const noexcept { return mode == Mode::DetectionTwoClass ? 2 : 1; }
    /// 5 + C values per anchor.
    int values_per_anchor() const noexcept { return 5 + num_classes(); }
    int stride() const noexcept { return input_size / grid_size; }
    bool has_classifier() const noexcept { return mode == Mode::MultiTask; }

    /// Throws ShapeError / ValidationError on inconsistent settings.
    void validate() const;

    /// The reduced configuration used for desk-scale training runs.
    static ModelConfig tiny(Mode mode);

    bool operator==(const ModelConfig&) const = default;
};

json to_json(const ModelConfig& cfg);
/// Rejects unknown keys.
ModelConfig model_config_from_json(const json& j);

/// Final backbone stage for a batch, laid out (batch, channels, S, S).
struct FeatureMaps {
    int batch = 0;
    int channels = 0;
    int size = 0;
    std::vector<double> data;

    double at(int b, int c, int y, int x) const {
        return data[((static_cast<std::size_t>(b) * channels + c) * size + y) * size + x];
    }
};

/// Raw head output laid out (batch, S, S, A, 5+C); per anchor tx, ty, tw, th,
/// objectness logit, then C class logits. Row index first, then column.
struct RawPrediction {
    int batch = 0;
    int grid = 0;
    int anchors = 0;
    int values = 0;
    std::vector<double> data;

    RawPrediction() = default;
    RawPrediction(int batch, int grid, int anchors, int values)
        : batch(batch), grid(grid), anchors(anchors), values(values),
          data(static_cast<std::size_t>(batch) * grid * grid * anchors * values, 0.0) {}

    std::size_t index(int b, int row, int col, int a, int k) const {
        return (((static_cast<std::size_t>(b) * grid + row) * grid + col) * anchors + a) * values + k;
    }
    double& at(int b, int row, int col, int a, int k) { return data[index(b, row, col, a, k)]; }
    double at(int b, int row, int col, int a, int k) const { return data[index(b, row, col, a, k)]; }
    std::size_t per_image() const { return static_cast<std::size_t>(grid) * grid * anchors * values; }
};

/// Class probabilities (p_nondistended, p_distended) from the classifier branch.
using ClassProbs = std::array<double, 2>;

struct ParamSlot {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t count = 0;
};

template <typename Real>
class Network {
public:
    class Workspace;
    struct WorkspaceDeleter {
        void operator()(Workspace* ws) const noexcept;
    };
    using WorkspacePtr = std::unique_ptr<Workspace, WorkspaceDeleter>;

    /// Builds the network and initializes weights deterministically from `seed`.
    explicit Network(ModelConfig cfg, std::uint64_t seed = 0);
    ~Network();
    Network(const Network&);
    Network& operator=(const Network&);
    Network(Network&&) noexcept;
    Network& operator=(Network&&) noexcept;

    const ModelConfig& config() const noexcept { return cfg_; }
    const std::vector<ParamSlot>& slots() const noexcept;
    std::span<Real> weights() noexcept { return weights_; }
    std::span<const Real> weights() const noexcept { return weights_; }
    std::size_t num_weights() const noexcept { return weights_.size(); }

    /// Sets every weight and bias to zero.
    void zero_weights();

    WorkspacePtr make_workspace() const;

    /// Single-image forward pass. `image` holds input_size^2 intensities.
    /// Dropout is active only when `training` is set, with masks drawn from `dropout_seed`.
    void forward(std::span<const float> image, Workspace& ws, bool training, std::uint64_t dropout_seed) const;

    /// Back-propagates dL/d(raw head output) (one image, RawPrediction layout)
    /// and dL/d(class probabilities) into `grads` (accumulated).
    void backward(Workspace& ws, std::span<const double> d_raw, std::span<const double> d_probs,
                  std::span<Real> grads) const;

    /// Outputs of the last forward() call.
    static RawPrediction raw_of(const Workspace& ws);
    static ClassProbs probs_of(const Workspace& ws);

    /// Batch operations.
    FeatureMaps backbone_forward(const std::vector<GrayImage>& images) const;
    RawPrediction detection_head_forward(const FeatureMaps& features) const;
    /// Throws ModeError in DetectionTwoClass mode.
    std::vector<ClassProbs> classifier_forward(const FeatureMaps& features, bool training,
                                               std::uint64_t dropout_seed = 0) const;

    /// Inference on one image: raw prediction and (MultiTask) class probabilities.
    std::pair<RawPrediction, ClassProbs> predict(const GrayImage& image) const;

    template <typename Other>
    void copy_weights_from(const Network<Other>& other) {
        auto src = other.weights();
        for (std::size_t i = 0; i < weights_.size(); ++i) weights_[i] = static_cast<Real>(src[i]);
    }

private:
    struct Impl;
    ModelConfig cfg_;
    AlignedVector<Real> weights_;
    std::unique_ptr<Impl> impl_;
};

extern template class Network<float>;
extern template class Network<double>;

/// Decoded box in image pixels from raw head values of one anchor (no clamping).
BBox decode_box(double tx, double ty, double tw, double th, int row, int col, const AnchorPrior& prior, int stride);

/// Decodes every anchor of every image; drops confidences below `conf_threshold`
/// and sorts each image's list by confidence (descending, stable).
std::vector<std::vector<LabeledBox>> decode_predictions(const RawPrediction& raw, const ModelConfig& cfg,
                                                        double conf_threshold);

/// Highest-confidence detection; earliest wins ties. Throws NoDetection when empty.
LabeledBox select_top(const std::vector<LabeledBox>& detections);

/// Training target for one image: exactly one positive anchor.
struct Targets {
    int row = 0;
    int col = 0;
    int anchor = 0;
    double tx = 0.0, ty = 0.0, tw = 0.0, th = 0.0;
    BBox box;
    /// 0 = NonDistended, 1 = Distended (DetectionTwoClass); 0 in MultiTask mode.
    int class_index = 0;
};

/// IoU of two boxes of the given sizes sharing a center.
double shape_iou(double w1, double h1, double w2, double h2) noexcept;

Targets target_assignment(const BBox& gt, Label label, const ModelConfig& cfg);

}  // namespace recess::model
