#include <doctest.h>

#include <fstream>

#include "../support/oracles.hpp"
#include "recess/checkpoint.hpp"
#include "recess/error.hpp"
#include "recess/model.hpp"

using namespace recess;
using namespace recess::model;

namespace {

GrayImage random_image(Rng& rng, int n) {
    GrayImage img(n, n);
    for (float& v : img.pixels()) v = static_cast<float>(rng.uniform());
    return img;
}

ModelConfig micro(Mode mode) {
    ModelConfig c;
    c.mode = mode;
    c.input_size = 8;
    c.backbone_channels = {4, 8};
    c.grid_size = 2;
    c.anchors_per_cell = 1;
    c.anchor_priors = {{4.0, 3.0}};
    c.classifier_hidden = {6, 5};
    c.pooled_size = {2, 2};
    c.dropout_rate = 0.25;
    return c;
}

}  // namespace

TEST_CASE("shape contracts") {
    Rng rng(1);
    SUBCASE("default config") {
        const Network<float> net(ModelConfig{}, 3);
        std::vector<GrayImage> batch;
        for (int i = 0; i < 4; ++i) batch.push_back(random_image(rng, 256));
        const auto f = net.backbone_forward(batch);
        CHECK(f.batch == 4);
        CHECK(f.channels == 128);
        CHECK(f.size == 16);
        const auto raw = net.detection_head_forward(f);
        CHECK(raw.batch == 4);
        CHECK(raw.grid == 16);
        CHECK(raw.anchors == 3);
        CHECK(raw.values == 6);
        const auto probs = net.classifier_forward(f, false);
        REQUIRE(probs.size() == 4);
        for (const auto& p : probs) CHECK(std::abs(p[0] + p[1] - 1.0) < 1e-6);
    }
    SUBCASE("tiny detection config") {
        ModelConfig cfg = ModelConfig::tiny(Mode::DetectionTwoClass);
        const Network<float> net(cfg, 3);
        const GrayImage img = random_image(rng, 256);
        const auto f = net.backbone_forward({img, img});
        const auto raw = net.detection_head_forward(f);
        CHECK(raw.values == 7);
        CHECK(raw.per_image() * 2 == raw.data.size());
        // The same image twice gives identical rows.
        for (std::size_t i = 0; i < raw.per_image(); ++i) CHECK(raw.data[i] == raw.data[i + raw.per_image()]);
        CHECK_THROWS_AS(net.classifier_forward(f, false), ModeError);
        CHECK(net.detection_head_forward(net.backbone_forward({img})).batch == 1);
    }
    SUBCASE("zero weights give zero features") {
        Network<float> net(ModelConfig::tiny(Mode::MultiTask), 3);
        net.zero_weights();
        const auto f = net.backbone_forward({GrayImage(256, 256)});
        for (double v : f.data) CHECK(v == 0.0);
    }
    SUBCASE("dropout is inactive at inference") {
        const Network<float> net(ModelConfig::tiny(Mode::MultiTask), 3);
        const auto f = net.backbone_forward({random_image(rng, 256)});
        const auto a = net.classifier_forward(f, false, 1), b = net.classifier_forward(f, false, 2);
        CHECK(a[0] == b[0]);
    }
    CHECK_THROWS_AS(Network<float>(ModelConfig{}).backbone_forward({GrayImage(128, 128)}), ShapeError);

    ModelConfig bad;
    bad.grid_size = 15;
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    ModelConfig bad2;
    bad2.anchors_per_cell = 2;
    CHECK_THROWS_AS(bad2.validate(), ValidationError);
}

TEST_CASE("decode_predictions") {
    ModelConfig cfg;
    cfg.anchors_per_cell = 1;
    cfg.anchor_priors = {{32, 32}};
    RawPrediction raw(1, 16, 1, 6);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) raw.at(0, r, c, 0, 4) = -1e4;

    CHECK(decode_predictions(raw, cfg, 1e-9)[0].empty());
    CHECK(decode_predictions(raw, cfg, 0.0)[0].size() == 16 * 16 * 1);

    raw.at(0, 3, 5, 0, 4) = 3.0;
    const auto dets = decode_predictions(raw, cfg, 0.5)[0];
    REQUIRE(dets.size() == 1);
    // Centre ((5 + 1/2) * 16, (3 + 1/2) * 16), size 32 * e^0.
    CHECK(dets[0].box.center_x() == doctest::Approx(88.0));
    CHECK(dets[0].box.center_y() == doctest::Approx(56.0));
    CHECK(dets[0].box.width() == doctest::Approx(32.0));
    CHECK(dets[0].box.height() == doctest::Approx(32.0));
    CHECK(dets[0].label == Label::Recess);
    CHECK(dets[0].confidence == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))));

    SUBCASE("two-class confidence and label") {
        ModelConfig c2 = cfg;
        c2.mode = Mode::DetectionTwoClass;
        RawPrediction r2(1, 16, 1, 7);
        for (int r = 0; r < 16; ++r)
            for (int c = 0; c < 16; ++c) r2.at(0, r, c, 0, 4) = -1e4;
        r2.at(0, 0, 0, 0, 4) = 0.0;
        r2.at(0, 0, 0, 0, 5) = 0.0;
        r2.at(0, 0, 0, 0, 6) = std::log(3.0);
        const auto d = decode_predictions(r2, c2, 0.1)[0];
        REQUIRE(d.size() == 1);
        CHECK(d[0].label == Label::Distended);
        CHECK(d[0].confidence == doctest::Approx(0.5 * 0.75));
    }
    SUBCASE("sorted and clamped") {
        Rng rng(2);
        for (double& v : raw.data) v = rng.normal() * 3;
        const auto all = decode_predictions(raw, cfg, 0.0)[0];
        for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].confidence >= all[i].confidence);
        for (const auto& d : all) {
            CHECK(d.box.x_min >= 0);
            CHECK(d.box.y_max <= 256);
        }
    }
}

TEST_CASE("select_top") {
    const std::vector<LabeledBox> d{{{0, 0, 1, 1}, Label::Recess, 0.2},
                                    {{1, 1, 2, 2}, Label::Recess, 0.9},
                                    {{2, 2, 3, 3}, Label::Recess, 0.5}};
    CHECK(select_top(d).confidence == 0.9);
    CHECK(select_top({d[0]}).box == d[0].box);
    const std::vector<LabeledBox> tie{{{0, 0, 1, 1}, Label::Recess, 0.7}, {{5, 5, 6, 6}, Label::Recess, 0.7}};
    CHECK(select_top(tie).box == tie[0].box);
    CHECK_THROWS_AS(select_top({}), NoDetection);
}

TEST_CASE("target_assignment") {
    ModelConfig cfg;
    cfg.anchor_priors = {{16, 16}, {32, 32}, {64, 64}};
    CHECK(shape_iou(32, 32, 16, 16) == doctest::Approx(0.25));
    CHECK(shape_iou(32, 32, 64, 64) == doctest::Approx(0.25));
    const auto t = target_assignment(BBox::from_center(88, 56, 32, 32), Label::Recess, cfg);
    CHECK(t.row == 3);
    CHECK(t.col == 5);
    CHECK(t.anchor == 1);
    CHECK(std::abs(t.tx) < 1e-12);
    CHECK(std::abs(t.tw) < 1e-12);

    ModelConfig c2 = ModelConfig::tiny(Mode::DetectionTwoClass);
    CHECK(target_assignment({10, 10, 50, 30}, Label::Distended, c2).class_index == 1);
    CHECK(target_assignment({10, 10, 50, 30}, Label::NonDistended, c2).class_index == 0);

    Rng rng(5);
    const ModelConfig d{};
    for (int i = 0; i < 1000; ++i) {
        const double w = rng.uniform(4, 200), h = rng.uniform(4, 120);
        const BBox gt = BBox::from_center(rng.uniform(w / 2, 256 - w / 2), rng.uniform(h / 2, 256 - h / 2), w, h);
        const auto tg = target_assignment(gt, Label::Recess, d);
        const BBox back = decode_box(tg.tx, tg.ty, tg.tw, tg.th, tg.row, tg.col,
                                     d.anchor_priors[static_cast<std::size_t>(tg.anchor)], d.stride());
        CHECK(std::abs(back.x_min - gt.x_min) < 1e-6);
        CHECK(std::abs(back.y_min - gt.y_min) < 1e-6);
        CHECK(std::abs(back.x_max - gt.x_max) < 1e-6);
        CHECK(std::abs(back.y_max - gt.y_max) < 1e-6);
    }
}

TEST_CASE("backprop matches finite differences") {
    for (Mode mode : {Mode::MultiTask, Mode::DetectionTwoClass}) {
        CAPTURE(to_string(mode));
        Network<double> net(micro(mode), 17);
        Rng rng(23);
        std::vector<float> image(64);
        for (float& v : image) v = static_cast<float>(rng.uniform());
        auto ws = net.make_workspace();

        // L = <c, raw> + <d, probs> with fixed random c, d.
        net.forward(image, *ws, true, 99);
        const RawPrediction raw0 = Network<double>::raw_of(*ws);
        std::vector<double> c(raw0.data.size()), d(2);
        for (double& v : c) v = rng.normal();
        d = {rng.normal(), rng.normal()};
        if (mode == Mode::DetectionTwoClass) d = {0.0, 0.0};
        auto loss = [&] {
            net.forward(image, *ws, true, 99);
            const auto raw = Network<double>::raw_of(*ws);
            double l = 0;
            for (std::size_t i = 0; i < c.size(); ++i) l += c[i] * raw.data[i];
            if (mode == Mode::MultiTask) {
                const auto p = Network<double>::probs_of(*ws);
                l += d[0] * p[0] + d[1] * p[1];
            }
            return l;
        };

        loss();
        std::vector<double> grads(net.num_weights(), 0.0);
        net.backward(*ws, c, d, grads);

        auto w = net.weights();
        int bad = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double fd = oracle::central_diff(loss, w[i], 1e-6);
            if (oracle::rel_err(fd, grads[i], 1e-5) >= 1e-3) {
                ++bad;
                MESSAGE("weight " << i << " analytic " << grads[i] << " numeric " << fd);
            }
        }
        CHECK(bad == 0);
    }
}

TEST_CASE("checkpoint round trip") {
    const auto dir = oracle::scratch_dir("ckpt");
    const Network<float> net(ModelConfig::tiny(Mode::MultiTask), 8);
    save_checkpoint(net, dir / "a.ckpt", json{{"fold", 2}});
    const auto back = load_checkpoint(dir / "a.ckpt");
    CHECK(back.network.config() == net.config());
    CHECK(std::equal(net.weights().begin(), net.weights().end(), back.network.weights().begin()));
    CHECK(back.extra["fold"] == 2);

    Rng rng(3);
    const GrayImage img = random_image(rng, 256);
    CHECK(net.predict(img).first.data == back.network.predict(img).first.data);

    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), ValidationError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("config json") {
    const ModelConfig c = ModelConfig::tiny(Mode::DetectionTwoClass);
    CHECK(model_config_from_json(to_json(c)) == c);
    json j = to_json(c);
    j["bogus"] = 1;
    CHECK_THROWS_AS(model_config_from_json(j), ValidationError);
    CHECK(parse_mode("detection") == Mode::DetectionTwoClass);
    CHECK(parse_mode("multitask") == Mode::MultiTask);
    CHECK_THROWS_AS(parse_mode("both"), ValidationError);
}
