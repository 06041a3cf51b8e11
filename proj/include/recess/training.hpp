#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "recess/dataset.hpp"
#include "recess/losses.hpp"
#include "recess/metrics.hpp"
#include "recess/model.hpp"

namespace recess::training {

struct TrainConfig {
    int max_epochs = 300;
    int batch_size = 16;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;
    int patience = 100;
    std::uint64_t seed = 0;
    losses::LossWeights loss_weights;
    /// Set from the training split by the drivers; must be > 0.
    double w_pos = 1.0;
    /// Detections below this confidence are discarded during evaluation.
    double conf_threshold = 0.001;
    /// Worker threads; 0 reads RECESS_CAD_THREADS, falling back to the hardware count.
    int threads = 0;

    void validate() const;
};

json to_json(const TrainConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
TrainConfig train_config_from_json(const json& j, TrainConfig base = {});

int resolve_threads(int requested);

template <typename Real>
void sgd_momentum_step(std::span<Real> weights, std::span<const Real> gradients, std::span<Real> velocity,
                       double lr, double momentum);

extern template void sgd_momentum_step<float>(std::span<float>, std::span<const float>, std::span<float>, double,
                                              double);
extern template void sgd_momentum_step<double>(std::span<double>, std::span<const double>, std::span<double>, double,
                                               double);

struct StopDecision {
    bool stop = false;
    /// First index of the maximum; -1 for an empty history.
    int best_epoch = -1;
    /// Index at which the stop triggered (-1 if it never did).
    int stop_epoch = -1;
};

/// Replays `fitness_history` through the stopping rule: stop once
/// (epoch - best_epoch) >= patience, improvement meaning a strictly greater value.
StopDecision early_stopper(const std::vector<double>& fitness_history, int patience);

/// Incremental form of the same rule.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience);
    /// Records the fitness of the next epoch; returns true when training should stop.
    bool update(double fitness);
    bool improved() const noexcept { return improved_; }
    int best_epoch() const noexcept { return best_epoch_; }
    double best_fitness() const noexcept { return best_; }
    int epochs_seen() const noexcept { return epoch_ + 1; }

private:
    int patience_;
    int epoch_ = -1;
    int best_epoch_ = -1;
    double best_ = 0.0;
    bool improved_ = false;
};

struct EpochRecord {
    int epoch = 0;
    losses::LossBreakdown train_loss;
    double val_fitness = 0.0;
    metrics::EvalReport val_metrics;
};

json to_json(const EpochRecord& r);

/// Something the generic loop can optimize: one epoch of updates, a validation
/// pass, and a way to remember the current state as the best so far.
class Trainee {
public:
    virtual ~Trainee() = default;
    virtual losses::LossBreakdown train_epoch(int epoch) = 0;
    virtual metrics::EvalReport validate() = 0;
    virtual void keep_best() = 0;
};

struct TrainResult {
    int best_epoch = -1;
    double best_fitness = 0.0;
    int epochs_run = 0;
    std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs epochs until max_epochs or the early stopper fires. keep_best() is
/// called whenever validation fitness strictly improves.
TrainResult train_loop(Trainee& trainee, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

struct ImagePrediction {
    /// Highest-confidence detection; empty when nothing clears the threshold.
    std::optional<LabeledBox> top;
    /// Top detection's class in detection mode, the classifier's in multi-task
    /// mode; NonDistended when detection mode finds nothing.
    Label label = Label::NonDistended;
    /// Classifier probabilities (multi-task mode only).
    std::optional<std::array<double, 2>> probs;
};

ImagePrediction predict_image(const model::Network<float>& net, const GrayImage& image,
                              typename model::Network<float>::Workspace& ws, double conf_threshold = 0.001);
ImagePrediction predict_image(const model::Network<float>& net, const GrayImage& image,
                              double conf_threshold = 0.001);

/// Evaluates on `samples`; fitness is the mode's composite score.
metrics::EvalReport evaluate(const model::Network<float>& net, const std::vector<dataset::Sample>& samples,
                             double conf_threshold = 0.001, int threads = 0);

/// Deterministic shuffle of sample order for an epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

/// Trains `net` in place; on return it holds the best-epoch weights.
TrainResult train(model::Network<float>& net, const std::vector<dataset::Sample>& train_set,
                  const std::vector<dataset::Sample>& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

struct FoldResult {
    int fold_index = 0;
    double w_pos = 0.0;
    TrainResult training;
    metrics::EvalReport test_report;
    std::vector<std::string> test_ids;
    /// Best-epoch network of this fold.
    std::optional<model::Network<float>> network;
};

struct CvResult {
    std::vector<FoldResult> folds;
    metrics::CvSummary summary;
};

struct CvOptions {
    int k = 5;
    double train_ratio = 0.8;
    std::uint64_t split_seed = 0;
    /// Use these folds instead of computing them from the manifest.
    std::optional<std::vector<dataset::FoldSplit>> folds;
    /// Run only these fold indices (all when empty).
    std::vector<int> only_folds;
    /// Called after each fold finishes.
    std::function<void(const FoldResult&)> on_fold;
    /// Called after each epoch with the fold index.
    std::function<void(int, const EpochRecord&)> on_epoch;
};

/// Full patient-grouped cross-validation: split, per-fold validation carve-out,
/// class weight from the fold's training ids, training, and test evaluation.
CvResult cross_validate(const dataset::DatasetManifest& manifest, const std::vector<dataset::Sample>& samples,
                        const model::ModelConfig& model_cfg, const TrainConfig& cfg, const CvOptions& opts = {});

}  // namespace recess::training
