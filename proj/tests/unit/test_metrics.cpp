#include <doctest.h>

#include "../support/oracles.hpp"
#include "recess/error.hpp"
#include "recess/metrics.hpp"

using namespace recess;
using namespace recess::metrics;

namespace {

std::vector<Label> repeat(Label l, int n) { return std::vector<Label>(static_cast<std::size_t>(n), l); }

std::vector<Label> concat(std::vector<Label> a, const std::vector<Label>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

/// Box with IoU exactly `v` against {0,0,10,10}: same height, shorter width.
BBox box_with_iou(double v) { return {0, 0, 10 * v, 10}; }

struct Instance {
    std::vector<Detection> dets;
    std::vector<GroundTruth> gts;
};

Instance random_instance(Rng& rng, bool two_class) {
    Instance in;
    const int n_img = rng.uniform_int(1, 5);
    const Label classes[2] = {Label::NonDistended, Label::Distended};
    for (int i = 0; i < n_img; ++i) {
        const std::string id = "im" + std::to_string(i);
        const Label l = two_class ? classes[rng.uniform_int(0, 1)] : Label::Recess;
        in.gts.push_back({id, oracle::lattice_box(rng, 12), l});
    }
    // Distinct confidences, shuffled.
    const int n_det = rng.uniform_int(0, 10);
    std::vector<double> confs;
    for (int k = 0; k < n_det; ++k) confs.push_back(0.05 + 0.09 * k);
    rng.shuffle(confs);
    for (int k = 0; k < n_det; ++k) {
        const auto& g = in.gts[static_cast<std::size_t>(rng.index(in.gts.size()))];
        const Label l = two_class ? classes[rng.uniform_int(0, 1)] : Label::Recess;
        // Half the time jitter the true box so some detections match.
        BBox b = rng.bernoulli(0.5) ? g.box : oracle::lattice_box(rng, 12);
        in.dets.push_back({g.image_id, {b, l, confs[static_cast<std::size_t>(k)]}});
    }
    return in;
}

}  // namespace

TEST_CASE("confusion") {
    const auto gts = concat(repeat(Label::Distended, 123), repeat(Label::NonDistended, 360));
    CHECK(confusion(gts, gts) == ConfusionMatrix{123, 360, 0, 0});
    CHECK(confusion(repeat(Label::NonDistended, 483), gts) == ConfusionMatrix{0, 360, 0, 123});
    CHECK(confusion({Label::Distended}, {Label::NonDistended}).fp == 1);
    CHECK_THROWS_AS(confusion({Label::Distended}, {}), LengthMismatch);
}

TEST_CASE("classification_metrics") {
    // Multi-task counts: 44 FN and 29 FP over 123 / 360.
    const auto mt = classification_metrics({79, 331, 29, 44});
    CHECK(mt.sensitivity == doctest::Approx(79.0 / 123.0));
    CHECK(mt.specificity == doctest::Approx(331.0 / 360.0));
    CHECK(std::abs(mt.sensitivity - 0.642) < 5e-4);
    CHECK(std::abs(mt.specificity - 0.919) < 5e-4);
    CHECK(std::abs(mt.balanced_accuracy - 0.781) < 5e-4);
    CHECK(std::abs(mt.balanced_accuracy - 0.78) < 5e-3);

    // Detection counts: 59 FN and 11 FP.
    const auto det = classification_metrics({64, 349, 11, 59});
    CHECK(std::abs(det.sensitivity - 0.520) < 5e-4);
    CHECK(std::abs(det.specificity - 0.969) < 5e-4);
    CHECK(std::abs(det.balanced_accuracy - 0.745) < 5e-4);

    const auto perfect = classification_metrics({5, 7, 0, 0});
    CHECK(perfect.balanced_accuracy == 1.0);
    CHECK(perfect.sensitivity == 1.0);
    CHECK(perfect.specificity == 1.0);

    CHECK_THROWS_AS(classification_metrics({0, 5, 0, 0}), UndefinedMetric);
    CHECK_THROWS_AS(classification_metrics({3, 0, 0, 1}), UndefinedMetric);

    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        const int np = rng.uniform_int(1, 50), nn = rng.uniform_int(1, 50);
        auto gts = concat(repeat(Label::Distended, np), repeat(Label::NonDistended, nn));
        for (Label c : {Label::Distended, Label::NonDistended})
            CHECK(classification_metrics(confusion(repeat(c, np + nn), gts)).balanced_accuracy == 0.5);
        std::vector<Label> preds;
        for (std::size_t k = 0; k < gts.size(); ++k) preds.push_back(rng.bernoulli(0.5) ? Label::Distended : Label::NonDistended);
        const auto m = classification_metrics(confusion(preds, gts));
        CHECK(m.balanced_accuracy == (m.sensitivity + m.specificity) / 2);
        // Order invariance.
        std::vector<std::size_t> order(gts.size());
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
        rng.shuffle(order);
        std::vector<Label> p2, g2;
        for (auto k : order) {
            p2.push_back(preds[k]);
            g2.push_back(gts[k]);
        }
        CHECK(confusion(p2, g2) == confusion(preds, gts));
    }
}

TEST_CASE("detection_metrics") {
    const BBox g{0, 0, 10, 10};
    auto dm = detection_metrics({{g, g}, {g, g}});
    CHECK(dm.mean_iou == 1.0);
    CHECK(dm.frac_iou_ge_05 == 1.0);

    dm = detection_metrics({{box_with_iou(0.2), g}, {box_with_iou(0.8), g}});
    CHECK(dm.mean_iou == doctest::Approx(0.5));
    CHECK(dm.frac_iou_ge_05 == doctest::Approx(0.5));

    dm = detection_metrics({{std::nullopt, g}, {box_with_iou(0.5), g}, {box_with_iou(0.55), g}});
    CHECK(dm.mean_iou == doctest::Approx(0.35));
    CHECK(dm.frac_iou_ge_05 == doctest::Approx(2.0 / 3.0));

    CHECK_THROWS_AS(detection_metrics({}), EmptySet);
}

TEST_CASE("average precision examples") {
    // Envelope 1 for recall 0..0.5 (51 grid points), 2/3 above (50 points).
    const double hand = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    CHECK(interpolated_ap({true, false, true}, 2) == doctest::Approx(hand).epsilon(1e-12));
    CHECK(std::abs(interpolated_ap({true, false, true}, 2) - 0.833) < 0.005);
    CHECK(interpolated_ap({}, 3) == 0.0);
    CHECK(interpolated_ap({true, true}, 2) == doctest::Approx(1.0));

    const BBox g{0, 0, 10, 10};
    std::vector<GroundTruth> gts{{"a", g, Label::Recess}, {"b", g, Label::Recess}};
    std::vector<Detection> good{{"a", {g, Label::Recess, 0.9}}, {"b", {g, Label::Recess, 0.8}}};
    CHECK(average_precision(good, gts, 0.5) == doctest::Approx(1.0));
    std::vector<Detection> miss{{"a", {box_with_iou(0.3), Label::Recess, 0.9}}};
    CHECK(average_precision(miss, gts, 0.5) == 0.0);

    // Same example through the matcher: TP, FP (duplicate on a), TP.
    std::vector<Detection> mixed{{"a", {g, Label::Recess, 0.9}},
                                 {"a", {g, Label::Recess, 0.8}},
                                 {"b", {g, Label::Recess, 0.7}}};
    CHECK(average_precision(mixed, gts, 0.5) == doctest::Approx(hand).epsilon(1e-12));
}

TEST_CASE("map_range") {
    const BBox g{0, 0, 10, 10};
    std::vector<GroundTruth> gts;
    std::vector<Detection> perfect, at06;
    for (int i = 0; i < 6; ++i) {
        const std::string id = "i" + std::to_string(i);
        gts.push_back({id, g, Label::Recess});
        perfect.push_back({id, {g, Label::Recess, 0.5 + 0.05 * i}});
        at06.push_back({id, {box_with_iou(0.6), Label::Recess, 0.5 + 0.05 * i}});
    }
    auto m = map_range(perfect, gts);
    CHECK(m.map50 == doctest::Approx(1.0));
    CHECK(m.map5095 == doctest::Approx(1.0));
    m = map_range(at06, gts);
    CHECK(m.map50 == doctest::Approx(1.0));
    CHECK(m.map5095 == doctest::Approx(0.3));
    m = map_range({}, gts);
    CHECK(m.map50 == 0.0);
    CHECK(m.map5095 == 0.0);
}

TEST_CASE("fitness") {
    CHECK(detection_fitness(1, 1) == doctest::Approx(1.0));
    CHECK(detection_fitness(1, 0) == doctest::Approx(0.1));
    CHECK(detection_fitness(0.8, 0.4) == doctest::Approx(0.44));
    CHECK(multitask_fitness(1, 1) == doctest::Approx(1.0));
    CHECK(multitask_fitness(1, 0) == doctest::Approx(0.7));
    CHECK(multitask_fitness(0.78, 0.82) == doctest::Approx(0.792));
}

TEST_CASE("AP against the threshold-enumeration oracle") {
    Rng rng(123);
    for (int t = 0; t < 600; ++t) {
        const bool two = t % 2 == 1;
        const auto in = random_instance(rng, two);
        for (double thr : {0.3, 0.5, 0.75}) {
            CAPTURE(t);
            CHECK(average_precision(in.dets, in.gts, thr) ==
                  doctest::Approx(oracle::threshold_ap(in.dets, in.gts, thr)).epsilon(1e-12));
        }
    }
}

TEST_CASE("AP depends only on confidence ranks") {
    Rng rng(9);
    for (int t = 0; t < 200; ++t) {
        const auto in = random_instance(rng, t % 2 == 1);
        auto scaled = in.dets;
        const double s = rng.uniform(0.01, 1.0);
        for (auto& d : scaled) d.box.confidence = std::pow(d.box.confidence, 3.0) * s;
        CHECK(average_precision(scaled, in.gts, 0.5) == doctest::Approx(average_precision(in.dets, in.gts, 0.5)));
        rng.shuffle(scaled);
        CHECK(average_precision(scaled, in.gts, 0.5) == doctest::Approx(average_precision(in.dets, in.gts, 0.5)));
    }
}

TEST_CASE("reports") {
    CHECK(mean_std({0.8}).std == 0.0);
    const auto ms = mean_std({1, 2, 3, 4});
    CHECK(ms.mean == doctest::Approx(2.5));
    CHECK(ms.std == doctest::Approx(std::sqrt(5.0 / 3.0)));

    EvalReport r;
    r.balanced_accuracy = 0.75;
    r.confusion = {1, 2, 3, 4};
    r.per_image.push_back({"x", Label::Distended, Label::NonDistended, 0.4, BBox{1, 2, 3, 4}, 0.2});
    const auto back = eval_report_from_json(to_json(r));
    CHECK(to_json(back) == to_json(r));

    const auto s = summarize({r, r});
    CHECK(s.confusion == ConfusionMatrix{2, 4, 6, 8});
    const std::string table = render_table({{"Multi-task", s}});
    CHECK(table.find("Balanced accuracy") != std::string::npos);
    CHECK(table.find("Multi-task") != std::string::npos);
    CHECK(render_confusion("x", s.confusion).find("8") != std::string::npos);
}
