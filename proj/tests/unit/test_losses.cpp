#include <doctest.h>

#include "../support/oracles.hpp"
#include "recess/error.hpp"
#include "recess/losses.hpp"

using namespace recess;
using namespace recess::losses;
using model::ModelConfig;
using model::Mode;
using model::RawPrediction;

namespace {

ModelConfig micro(Mode mode) {
    ModelConfig c;
    c.mode = mode;
    c.input_size = 8;
    c.backbone_channels = {4, 8};
    c.grid_size = 2;
    c.anchors_per_cell = 2;
    c.anchor_priors = {{4.0, 2.0}, {3.0, 5.0}};
    c.classifier_hidden = {6, 5};
    c.pooled_size = {2, 2};
    c.dropout_rate = 0.0;
    return c;
}

BBox random_box(Rng& rng, double extent) {
    const double w = rng.uniform(0.5, extent * 0.6), h = rng.uniform(0.5, extent * 0.6);
    return BBox::from_center(rng.uniform(w / 2, extent - w / 2), rng.uniform(h / 2, extent - h / 2), w, h);
}

RawPrediction random_raw(Rng& rng, const ModelConfig& c, int batch = 1) {
    RawPrediction r(batch, c.grid_size, c.anchors_per_cell, c.values_per_anchor());
    for (double& v : r.data) v = rng.normal();
    return r;
}

LossWeights random_weights(Rng& rng) { return {rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2)}; }

/// Raw values whose decode is exactly `t` with saturated objectness and class.
RawPrediction perfect_raw(const model::Targets& t, const ModelConfig& c) {
    RawPrediction r(1, c.grid_size, c.anchors_per_cell, c.values_per_anchor());
    for (int row = 0; row < c.grid_size; ++row)
        for (int col = 0; col < c.grid_size; ++col)
            for (int a = 0; a < c.anchors_per_cell; ++a) r.at(0, row, col, a, 4) = -40;
    r.at(0, t.row, t.col, t.anchor, 0) = t.tx;
    r.at(0, t.row, t.col, t.anchor, 1) = t.ty;
    r.at(0, t.row, t.col, t.anchor, 2) = t.tw;
    r.at(0, t.row, t.col, t.anchor, 3) = t.th;
    r.at(0, t.row, t.col, t.anchor, 4) = 40;
    if (c.num_classes() == 2) {
        r.at(0, t.row, t.col, t.anchor, 5 + t.class_index) = 40;
        r.at(0, t.row, t.col, t.anchor, 6 - t.class_index) = -40;
    }
    return r;
}

}  // namespace

TEST_CASE("ciou_loss") {
    const BBox g{10, 10, 30, 30};
    CHECK(ciou_loss(g, g) == 0.0);
    // Half-side concentric square: IoU 1/4, no centre or aspect penalty.
    const BBox half = BBox::from_center(20, 20, 10, 10);
    CHECK(ciou_loss(half, g) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(ciou_loss({100, 100, 110, 130}, g) > 1.0);

    Rng rng(31);
    for (int i = 0; i < 2000; ++i) {
        const BBox a = random_box(rng, 100), b = random_box(rng, 100);
        const double l = ciou_loss(a, b);
        CHECK(l == doctest::Approx(oracle::ciou(a, b)).epsilon(1e-10));
        CHECK(l >= 1.0 - iou(a, b) - 1e-12);
        CHECK(l > 0.0);
    }
}

TEST_CASE("bce") {
    CHECK(bce(1.0, 1.0) <= 1e-6);
    CHECK(bce(0.0, 0.0) <= 1e-6);
    CHECK(bce(0.5, 1.0) == doctest::Approx(std::log(2.0)));
    CHECK(bce(0.5, 0.0) == doctest::Approx(0.6931).epsilon(1e-4));
    CHECK(bce(0.9, 0.0) == doctest::Approx(-std::log(0.1)));
    CHECK(bce(0.9, 0.0) == doctest::Approx(2.3026).epsilon(1e-4));
    CHECK(std::isfinite(bce(0.0, 1.0)));
    CHECK(bce(0.0, 1.0) == doctest::Approx(-std::log(kProbEps)));

    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        double p = rng.uniform(0.01, 0.99);
        const double y = rng.bernoulli(0.5) ? 1.0 : 0.0;
        CHECK(bce_grad(p, y) == doctest::Approx(oracle::central_diff([&] { return bce(p, y); }, p, 1e-7)).epsilon(1e-5));
    }
}

TEST_CASE("weighted_cls_loss") {
    CHECK(weighted_cls_loss(0.3, Label::NonDistended, 5.0) == doctest::Approx(bce(0.3, 0.0)));
    CHECK(weighted_cls_loss(0.5, Label::Distended, 3.0) == doctest::Approx(3.0 * std::log(2.0)));
    CHECK(weighted_cls_loss(0.5, Label::Distended, 3.0) == doctest::Approx(2.0794).epsilon(1e-4));
    CHECK(weighted_cls_loss(1.0, Label::Distended, 7.0) <= 1e-5);
    CHECK(weighted_cls_loss(0.0, Label::NonDistended, 7.0) <= 1e-5);
    const double w = 289.0 / 97.0;
    CHECK(weighted_cls_loss(0.37, Label::Distended, w) == doctest::Approx(w * bce(0.37, 1.0)).epsilon(1e-12));
}

TEST_CASE("batch losses") {
    Rng rng(5);
    const ModelConfig det = micro(Mode::DetectionTwoClass), mt = micro(Mode::MultiTask);

    SUBCASE("perfect predictions vanish") {
        for (int i = 0; i < 20; ++i) {
            const BBox gt = random_box(rng, 8);
            const auto t = model::target_assignment(gt, Label::Distended, det);
            CHECK(detection_loss(perfect_raw(t, det), {t}, det, random_weights(rng)).total <= 1e-5);
            const auto tm = model::target_assignment(gt, Label::Distended, mt);
            const auto lm = multitask_loss(perfect_raw(tm, mt), {{1e-9, 1 - 1e-9}}, {tm}, {Label::Distended}, mt,
                                           random_weights(rng), 3.0);
            CHECK(lm.total <= 1e-5);
        }
    }

    for (int i = 0; i < 50; ++i) {
        const int batch = rng.uniform_int(1, 3);
        const RawPrediction rd = random_raw(rng, det, batch);
        std::vector<model::Targets> td, tm;
        std::vector<Label> labels;
        std::vector<model::ClassProbs> probs;
        for (int b = 0; b < batch; ++b) {
            const BBox gt = random_box(rng, 8);
            labels.push_back(rng.bernoulli(0.5) ? Label::Distended : Label::NonDistended);
            td.push_back(model::target_assignment(gt, labels.back(), det));
            tm.push_back(model::target_assignment(gt, labels.back(), mt));
            const double p = rng.uniform(0.02, 0.98);
            probs.push_back({1 - p, p});
        }
        LossWeights w = random_weights(rng);
        const double w_pos = rng.uniform(1, 4);
        const auto ld = detection_loss(rd, td, det, w);
        CHECK(ld.total == doctest::Approx(w.alpha * ld.l_box + w.beta * ld.l_obj + w.gamma * ld.l_c));
        CHECK(ld.l_cls == 0.0);
        for (double v : {ld.l_box, ld.l_obj, ld.l_c}) CHECK(v >= 0.0);

        LossWeights w2 = w;
        w2.alpha *= 2;
        const auto ld2 = detection_loss(rd, td, det, w2);
        CHECK(ld2.total - w.beta * ld2.l_obj - w.gamma * ld2.l_c ==
              doctest::Approx(2 * (ld.total - w.beta * ld.l_obj - w.gamma * ld.l_c)));

        // Same box/objectness values in a single-class layout.
        RawPrediction rm(batch, mt.grid_size, mt.anchors_per_cell, mt.values_per_anchor());
        for (int b = 0; b < batch; ++b)
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 2; ++c)
                    for (int a = 0; a < 2; ++a)
                        for (int k = 0; k < 6; ++k) rm.at(b, r, c, a, k) = k < 5 ? rd.at(b, r, c, a, k) : rng.normal();
        const auto lm = multitask_loss(rm, probs, tm, labels, mt, w, w_pos);
        CHECK(lm.l_c == 0.0);
        CHECK(lm.total == doctest::Approx(w.alpha * lm.l_box + w.beta * lm.l_obj + w.delta * lm.l_cls));
        double cls = 0;
        for (int b = 0; b < batch; ++b) cls += weighted_cls_loss(probs[b][1], labels[b], w_pos);
        CHECK(lm.l_cls == doctest::Approx(cls / batch));

        LossWeights wg = w, wd = w;
        wg.gamma = 0;
        wd.delta = 0;
        CHECK(multitask_loss(rm, probs, tm, labels, mt, wd, w_pos).total ==
              doctest::Approx(detection_loss(rd, td, det, wg).total).epsilon(1e-12));
    }
    CHECK_THROWS_AS((LossWeights{-1, 1, 1, 1}.validate()), ValidationError);
}

TEST_CASE("image_loss gradients match finite differences") {
    Rng rng(99);
    for (Mode mode : {Mode::DetectionTwoClass, Mode::MultiTask}) {
        const ModelConfig c = micro(mode);
        int bad = 0;
        for (int i = 0; i < 50; ++i) {
            RawPrediction raw = random_raw(rng, c);
            const Label label = rng.bernoulli(0.5) ? Label::Distended : Label::NonDistended;
            const auto t = model::target_assignment(random_box(rng, 8), label, c);
            const double p = rng.uniform(0.05, 0.95);
            model::ClassProbs probs{1 - p, p};
            const LossWeights w = random_weights(rng);
            const double w_pos = rng.uniform(1, 4);
            auto f = [&] { return image_loss(raw, 0, probs, t, label, c, w, w_pos, false).parts.total; };
            const auto g = image_loss(raw, 0, probs, t, label, c, w, w_pos, true);
            for (std::size_t k = 0; k < raw.data.size(); ++k) {
                const double fd = oracle::central_diff(f, raw.data[k], 1e-6);
                if (oracle::rel_err(fd, g.d_raw[k], 1e-6) >= 1e-3) {
                    ++bad;
                    MESSAGE("raw " << k << ": " << g.d_raw[k] << " vs " << fd);
                }
            }
            if (mode == Mode::MultiTask)
                for (int k = 0; k < 2; ++k) {
                    const double fd = oracle::central_diff(f, probs[static_cast<std::size_t>(k)], 1e-6);
                    if (oracle::rel_err(fd, g.d_probs[static_cast<std::size_t>(k)], 1e-6) >= 1e-3) ++bad;
                }
        }
        CHECK(bad == 0);
    }
}

TEST_CASE("total loss gradient through the network") {
    for (Mode mode : {Mode::DetectionTwoClass, Mode::MultiTask}) {
        ModelConfig c = micro(mode);
        c.anchors_per_cell = 1;
        c.anchor_priors = {{4.0, 3.0}};
        model::Network<double> net(c, 5);
        Rng rng(8);
        std::vector<float> image(64);
        for (float& v : image) v = static_cast<float>(rng.uniform());
        const Label label = Label::Distended;
        const auto t = model::target_assignment({1.5, 2.0, 6.0, 4.5}, label, c);
        const LossWeights w{0.7, 1.3, 0.6, 0.9};
        auto ws = net.make_workspace();
        auto f = [&] {
            net.forward(image, *ws, false, 0);
            const auto raw = model::Network<double>::raw_of(*ws);
            const auto probs = model::Network<double>::probs_of(*ws);
            return image_loss(raw, 0, probs, t, label, c, w, 2.5, false).parts.total;
        };
        net.forward(image, *ws, false, 0);
        const auto g = image_loss(model::Network<double>::raw_of(*ws), 0, model::Network<double>::probs_of(*ws), t,
                                  label, c, w, 2.5, true);
        std::vector<double> grads(net.num_weights(), 0.0);
        net.backward(*ws, g.d_raw, g.d_probs, grads);
        auto wt = net.weights();
        int bad = 0;
        for (std::size_t i = 0; i < wt.size(); ++i)
            if (oracle::rel_err(oracle::central_diff(f, wt[i], 1e-6), grads[i], 1e-6) >= 1e-3) ++bad;
        CHECK(bad == 0);
    }
}
