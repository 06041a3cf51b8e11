#include "recess/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "recess/error.hpp"
#include "recess/parallel.hpp"
#include "recess/random.hpp"

namespace recess::training {

using model::Network;

void TrainConfig::validate() const {
    if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
    if (patience < 1) throw ValidationError("patience must be >= 1");
    if (patience > max_epochs) throw ValidationError("patience must not exceed max_epochs");
    if (!(w_pos > 0.0) || !std::isfinite(w_pos)) throw ValidationError("w_pos must be > 0");
    if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) throw ValidationError("conf_threshold must lie in [0,1]");
    if (threads < 0) throw ValidationError("threads must be >= 0");
    loss_weights.validate();
}

json to_json(const TrainConfig& c) {
    return json{{"max_epochs", c.max_epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"momentum", c.momentum},
                {"weight_decay", c.weight_decay},
                {"patience", c.patience},
                {"seed", c.seed},
                {"loss_weights",
                 {{"alpha", c.loss_weights.alpha},
                  {"beta", c.loss_weights.beta},
                  {"gamma", c.loss_weights.gamma},
                  {"delta", c.loss_weights.delta}}},
                {"w_pos", c.w_pos},
                {"conf_threshold", c.conf_threshold},
                {"threads", c.threads}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    if (!j.is_object()) throw ValidationError("train config must be a JSON object");
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "max_epochs") c.max_epochs = v.get<int>();
            else if (key == "batch_size") c.batch_size = v.get<int>();
            else if (key == "learning_rate") c.learning_rate = v.get<double>();
            else if (key == "momentum") c.momentum = v.get<double>();
            else if (key == "weight_decay") c.weight_decay = v.get<double>();
            else if (key == "patience") c.patience = v.get<int>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "w_pos") c.w_pos = v.get<double>();
            else if (key == "conf_threshold") c.conf_threshold = v.get<double>();
            else if (key == "threads") c.threads = v.get<int>();
            else if (key == "loss_weights") {
                for (const auto& [k2, w] : v.items()) {
                    if (k2 == "alpha") c.loss_weights.alpha = w.get<double>();
                    else if (k2 == "beta") c.loss_weights.beta = w.get<double>();
                    else if (k2 == "gamma") c.loss_weights.gamma = w.get<double>();
                    else if (k2 == "delta") c.loss_weights.delta = w.get<double>();
                    else throw ValidationError("unknown loss weight '" + k2 + "'");
                }
            } else throw ValidationError("unknown train config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid train config: ") + e.what());
    }
    return c;
}

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("RECESS_CAD_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<int>(std::min<long>(v, 256));
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

template <typename Real>
void sgd_momentum_step(std::span<Real> weights, std::span<const Real> gradients, std::span<Real> velocity,
                       double lr, double momentum) {
    if (weights.size() != gradients.size() || weights.size() != velocity.size())
        throw ShapeError("weights, gradients and velocity must have the same length");
    const Real m = static_cast<Real>(momentum), r = static_cast<Real>(lr);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        velocity[i] = m * velocity[i] + gradients[i];
        weights[i] -= r * velocity[i];
    }
}

template void sgd_momentum_step<float>(std::span<float>, std::span<const float>, std::span<float>, double, double);
template void sgd_momentum_step<double>(std::span<double>, std::span<const double>, std::span<double>, double,
                                        double);

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw ValidationError("patience must be >= 1");
}

bool EarlyStopper::update(double fitness) {
    ++epoch_;
    improved_ = best_epoch_ < 0 || fitness > best_;
    if (improved_) {
        best_ = fitness;
        best_epoch_ = epoch_;
    }
    return epoch_ - best_epoch_ >= patience_;
}

StopDecision early_stopper(const std::vector<double>& fitness_history, int patience) {
    EarlyStopper s(patience);
    StopDecision d;
    for (std::size_t i = 0; i < fitness_history.size(); ++i) {
        if (s.update(fitness_history[i])) {
            d.stop = true;
            d.stop_epoch = static_cast<int>(i);
            break;
        }
    }
    d.best_epoch = s.best_epoch();
    return d;
}

json to_json(const EpochRecord& r) {
    return json{{"epoch", r.epoch},
                {"train_loss",
                 {{"l_box", r.train_loss.l_box},
                  {"l_obj", r.train_loss.l_obj},
                  {"l_c", r.train_loss.l_c},
                  {"l_cls", r.train_loss.l_cls},
                  {"total", r.train_loss.total}}},
                {"val_fitness", r.val_fitness},
                {"val_metrics", metrics::to_json(r.val_metrics, false)}};
}

TrainResult train_loop(Trainee& trainee, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    if (cfg.max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
    EarlyStopper stopper(cfg.patience);
    TrainResult result;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = trainee.train_epoch(epoch);
        rec.val_metrics = trainee.validate();
        rec.val_fitness = rec.val_metrics.fitness;
        const bool stop = stopper.update(rec.val_fitness);
        if (stopper.improved()) trainee.keep_best();
        result.history.push_back(rec);
        result.epochs_run = epoch + 1;
        if (on_epoch) on_epoch(rec);
        if (stop) break;
    }
    result.best_epoch = stopper.best_epoch();
    result.best_fitness = stopper.best_fitness();
    return result;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(Rng::mix(seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

namespace {

bool is_detection(const model::ModelConfig& cfg) { return cfg.mode == model::Mode::DetectionTwoClass; }

}  // namespace

ImagePrediction predict_image(const Network<float>& net, const GrayImage& image,
                              typename Network<float>::Workspace& ws, double conf_threshold) {
    const auto& cfg = net.config();
    if (image.width() != cfg.input_size || image.height() != cfg.input_size)
        throw ShapeError("image is " + std::to_string(image.width()) + "x" + std::to_string(image.height()) +
                         " but the model expects " + std::to_string(cfg.input_size) + "x" +
                         std::to_string(cfg.input_size));
    net.forward(image.pixels(), ws, false, 0);
    const auto dets = model::decode_predictions(Network<float>::raw_of(ws), cfg, conf_threshold);
    ImagePrediction out;
    if (!dets[0].empty()) {
        out.top = model::select_top(dets[0]);
        if (is_detection(cfg)) out.label = out.top->label;
    }
    if (!is_detection(cfg)) {
        const auto p = Network<float>::probs_of(ws);
        out.probs = std::array<double, 2>{p[0], p[1]};
        out.label = p[1] > p[0] ? Label::Distended : Label::NonDistended;
    }
    return out;
}

ImagePrediction predict_image(const Network<float>& net, const GrayImage& image, double conf_threshold) {
    auto ws = net.make_workspace();
    return predict_image(net, image, *ws, conf_threshold);
}

namespace {

metrics::PerImageResult score_image(const Network<float>& net, const dataset::Sample& s, double conf_threshold,
                                    typename Network<float>::Workspace& ws) {
    const auto p = predict_image(net, s.image, ws, conf_threshold);
    metrics::PerImageResult r;
    r.image_id = s.annotation.image_id;
    r.gt_label = s.annotation.label;
    r.predicted = p.label;
    if (p.top) {
        r.box = p.top->box;
        r.confidence = p.top->confidence;
        r.iou = iou(p.top->box, s.annotation.sqr_box);
    }
    return r;
}

}  // namespace

metrics::EvalReport evaluate(const Network<float>& net, const std::vector<dataset::Sample>& samples,
                             double conf_threshold, int threads) {
    if (samples.empty()) throw EmptySet("no images to evaluate");
    const int workers = std::min<int>(resolve_threads(threads), static_cast<int>(samples.size()));
    std::vector<metrics::PerImageResult> per(samples.size());
    std::vector<Network<float>::WorkspacePtr> ws;
    for (int w = 0; w < workers; ++w) ws.push_back(net.make_workspace());
    parallel_for(static_cast<std::size_t>(workers), workers, [&](std::size_t w) {
        for (std::size_t i = w; i < samples.size(); i += static_cast<std::size_t>(workers))
            per[i] = score_image(net, samples[i], conf_threshold, *ws[w]);
    });

    metrics::EvalReport rep;
    const bool det_mode = is_detection(net.config());
    std::vector<Label> preds, gts;
    std::vector<metrics::BoxPair> pairs;
    std::vector<metrics::Detection> dets;
    std::vector<metrics::GroundTruth> truths;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& a = samples[i].annotation;
        const auto& p = per[i];
        preds.push_back(p.predicted);
        gts.push_back(a.label);
        pairs.push_back({p.box, a.sqr_box});
        truths.push_back({a.image_id, a.sqr_box, det_mode ? a.label : Label::Recess});
        if (p.box) dets.push_back({a.image_id, {*p.box, det_mode ? p.predicted : Label::Recess, p.confidence}});
    }
    rep.confusion = metrics::confusion(preds, gts);
    const auto& cm = rep.confusion;
    const bool has_pos = cm.tp + cm.fn > 0, has_neg = cm.tn + cm.fp > 0;
    if (has_pos && has_neg) {
        const auto m = metrics::classification_metrics(cm);
        rep.sensitivity = m.sensitivity;
        rep.specificity = m.specificity;
        rep.balanced_accuracy = m.balanced_accuracy;
    } else {
        // One class absent: its rate is undefined and BA falls back to the defined rate.
        const double nan = std::numeric_limits<double>::quiet_NaN();
        rep.sensitivity = has_pos ? static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn) : nan;
        rep.specificity = has_neg ? static_cast<double>(cm.tn) / static_cast<double>(cm.tn + cm.fp) : nan;
        rep.balanced_accuracy = has_pos ? rep.sensitivity : rep.specificity;
    }
    const auto dm = metrics::detection_metrics(pairs);
    rep.mean_iou = dm.mean_iou;
    rep.frac_iou_ge_05 = dm.frac_iou_ge_05;
    const auto mp = metrics::map_range(dets, truths);
    rep.map50 = mp.map50;
    rep.map5095 = mp.map5095;
    rep.fitness = det_mode ? metrics::detection_fitness(rep.map50, rep.map5095)
                           : metrics::multitask_fitness(rep.balanced_accuracy, rep.map50);
    rep.per_image = std::move(per);
    return rep;
}

namespace {

/// Gradient lanes: a batch is split over a fixed number of lanes, each with
/// its own gradient buffer, summed in lane order. The result does not depend on
/// how many threads serve the lanes.
constexpr int kLanes = 4;

class NetworkTrainee : public Trainee {
public:
    NetworkTrainee(Network<float>& net, const std::vector<dataset::Sample>& train_set,
                   const std::vector<dataset::Sample>& val_set, const TrainConfig& cfg)
        : net_(net), train_(train_set), val_(val_set), cfg_(cfg), best_(net.weights().begin(), net.weights().end()),
          velocity_(net.num_weights(), 0.0f), threads_(resolve_threads(cfg.threads)) {
        const auto& mc = net.config();
        for (const auto& s : train_) {
            if (s.image.width() != mc.input_size || s.image.height() != mc.input_size)
                throw ShapeError(s.annotation.image_id + " does not match the model input size");
            targets_.push_back(model::target_assignment(s.annotation.sqr_box, s.annotation.label, mc));
        }
        for (int l = 0; l < kLanes; ++l) {
            lane_grads_.emplace_back(net.num_weights(), 0.0f);
            lane_ws_.push_back(net.make_workspace());
        }
        grads_.assign(net.num_weights(), 0.0f);
    }

    losses::LossBreakdown train_epoch(int epoch) override {
        const auto order = epoch_order(train_.size(), cfg_.seed, epoch);
        const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
        losses::LossBreakdown sum;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += bs, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + bs);
            const std::size_t n = end - start;
            std::vector<losses::LossBreakdown> parts(n);
            const int lanes = static_cast<int>(std::min<std::size_t>(kLanes, n));
            parallel_for(static_cast<std::size_t>(lanes), threads_, [&](std::size_t lane) {
                auto& g = lane_grads_[lane];
                std::fill(g.begin(), g.end(), 0.0f);
                for (std::size_t i = lane; i < n; i += static_cast<std::size_t>(lanes)) {
                    const std::size_t idx = order[start + i];
                    parts[i] = run_sample(idx, epoch, 1.0 / static_cast<double>(n), *lane_ws_[lane], g);
                }
            });
            std::fill(grads_.begin(), grads_.end(), 0.0f);
            for (int l = 0; l < lanes; ++l)
                for (std::size_t k = 0; k < grads_.size(); ++k) grads_[k] += lane_grads_[l][k];
            losses::LossBreakdown batch;
            for (const auto& p : parts) {
                batch.l_box += p.l_box;
                batch.l_obj += p.l_obj;
                batch.l_c += p.l_c;
                batch.l_cls += p.l_cls;
                batch.total += p.total;
            }
            if (!std::isfinite(batch.total))
                throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_index) + " (l_box " + std::to_string(batch.l_box) +
                                    ", l_obj " + std::to_string(batch.l_obj) + ", l_c " + std::to_string(batch.l_c) +
                                    ", l_cls " + std::to_string(batch.l_cls) + ")");
            auto w = net_.weights();
            if (cfg_.weight_decay > 0.0)
                for (std::size_t k = 0; k < grads_.size(); ++k)
                    grads_[k] += static_cast<float>(cfg_.weight_decay) * w[k];
            for (float g : grads_)
                if (!std::isfinite(g))
                    throw NonFiniteLoss("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                                        std::to_string(batch_index));
            sgd_momentum_step<float>(w, grads_, velocity_, cfg_.learning_rate, cfg_.momentum);
            sum.l_box += batch.l_box;
            sum.l_obj += batch.l_obj;
            sum.l_c += batch.l_c;
            sum.l_cls += batch.l_cls;
            sum.total += batch.total;
        }
        const double n = static_cast<double>(train_.size());
        sum.l_box /= n;
        sum.l_obj /= n;
        sum.l_c /= n;
        sum.l_cls /= n;
        sum.total /= n;
        return sum;
    }

    metrics::EvalReport validate() override { return evaluate(net_, val_, cfg_.conf_threshold, threads_); }

    void keep_best() override { best_.assign(net_.weights().begin(), net_.weights().end()); }

    void restore_best() { std::copy(best_.begin(), best_.end(), net_.weights().begin()); }

private:
    losses::LossBreakdown run_sample(std::size_t idx, int epoch, double scale, Network<float>::Workspace& ws,
                                     AlignedVector<float>& grads) {
        const auto& s = train_[idx];
        const auto seed = Rng::mix(Rng::mix(cfg_.seed, static_cast<std::uint64_t>(epoch)), idx);
        net_.forward(s.image.pixels(), ws, true, seed);
        auto loss = losses::image_loss(Network<float>::raw_of(ws), 0, Network<float>::probs_of(ws), targets_[idx],
                                       s.annotation.label, net_.config(), cfg_.loss_weights, cfg_.w_pos, true);
        for (double& d : loss.d_raw) d *= scale;
        for (double& d : loss.d_probs) d *= scale;
        net_.backward(ws, loss.d_raw, loss.d_probs, grads);
        return loss.parts;
    }

    Network<float>& net_;
    const std::vector<dataset::Sample>& train_;
    const std::vector<dataset::Sample>& val_;
    TrainConfig cfg_;
    std::vector<model::Targets> targets_;
    AlignedVector<float> best_;
    AlignedVector<float> velocity_;
    AlignedVector<float> grads_;
    std::vector<AlignedVector<float>> lane_grads_;
    std::vector<Network<float>::WorkspacePtr> lane_ws_;
    int threads_;
};

}  // namespace

TrainResult train(Network<float>& net, const std::vector<dataset::Sample>& train_set,
                  const std::vector<dataset::Sample>& val_set, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (train_set.empty()) throw EmptySet("empty training set");
    if (val_set.empty()) throw EmptySet("empty validation set");
    std::unordered_set<std::string> train_ids;
    for (const auto& s : train_set) train_ids.insert(s.annotation.image_id);
    for (const auto& s : val_set)
        if (train_ids.count(s.annotation.image_id))
            throw ValidationError("image '" + s.annotation.image_id + "' is in both the training and validation sets");

    NetworkTrainee trainee(net, train_set, val_set, cfg);
    TrainResult result = train_loop(trainee, cfg, on_epoch);
    trainee.restore_best();
    return result;
}

CvResult cross_validate(const dataset::DatasetManifest& manifest, const std::vector<dataset::Sample>& samples,
                        const model::ModelConfig& model_cfg, const TrainConfig& cfg, const CvOptions& opts) {
    if (samples.size() != manifest.entries().size())
        throw LengthMismatch("samples and manifest differ in length");
    const auto folds = opts.folds ? *opts.folds : dataset::grouped_kfold(manifest, opts.k, opts.split_seed);
    CvResult out;
    std::vector<metrics::EvalReport> reports;
    for (const auto& fold : folds) {
        if (!opts.only_folds.empty() &&
            std::find(opts.only_folds.begin(), opts.only_folds.end(), fold.fold_index) == opts.only_folds.end())
            continue;
        const auto split = dataset::train_val_split(fold, manifest, opts.train_ratio, opts.split_seed);
        std::unordered_set<std::string> test(split.test_ids.begin(), split.test_ids.end());
        for (const auto& id : split.train_ids)
            if (test.count(id)) throw std::logic_error("training id '" + id + "' leaked into the test split");

        TrainConfig fold_cfg = cfg;
        fold_cfg.w_pos = dataset::class_weight(split.train_ids, manifest);
        fold_cfg.seed = Rng::mix(cfg.seed, static_cast<std::uint64_t>(fold.fold_index));

        model::Network<float> net(model_cfg, fold_cfg.seed);
        const auto train_set = dataset::select(samples, manifest, split.train_ids);
        const auto val_set = dataset::select(samples, manifest, split.val_ids);
        const auto test_set = dataset::select(samples, manifest, split.test_ids);

        FoldResult fr;
        fr.fold_index = fold.fold_index;
        fr.w_pos = fold_cfg.w_pos;
        fr.training = train(net, train_set, val_set, fold_cfg, [&](const EpochRecord& r) {
            if (opts.on_epoch) opts.on_epoch(fold.fold_index, r);
        });
        fr.test_report = evaluate(net, test_set, cfg.conf_threshold, cfg.threads);
        fr.test_ids = split.test_ids;
        fr.network = std::move(net);
        reports.push_back(fr.test_report);
        if (opts.on_fold) opts.on_fold(fr);
        out.folds.push_back(std::move(fr));
    }
    if (reports.empty()) throw ValidationError("no folds selected");
    out.summary = metrics::summarize(reports);
    return out;
}

}  // namespace recess::training
