#include <doctest.h>

#include "../support/oracles.hpp"
#include "recess/error.hpp"
#include "recess/imaging.hpp"
#include "recess/io.hpp"

using namespace recess;

TEST_CASE("iou basic cases") {
    CHECK(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0);
    CHECK(iou({0, 0, 1, 1}, {5, 5, 6, 6}) == 0.0);
    // Overlap of one unit square out of 4 + 4 - 1 covered cells.
    const BBox a{0, 0, 2, 2}, b{1, 1, 3, 3};
    CHECK(oracle::raster_iou(a, b, 16) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    CHECK(iou(a, b) == doctest::Approx(oracle::raster_iou(a, b, 16)).epsilon(1e-12));
    // Touching edges share no area.
    CHECK(iou({0, 0, 1, 1}, {1, 0, 2, 1}) == 0.0);
}

TEST_CASE("iou matches the raster oracle on lattice boxes") {
    Rng rng(11);
    for (int i = 0; i < 300; ++i) {
        const BBox a = oracle::lattice_box(rng, 24), b = oracle::lattice_box(rng, 24);
        CHECK(std::abs(iou(a, b) - oracle::raster_iou(a, b, 1)) < 1e-12);
    }
}

TEST_CASE("iou properties") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        auto rand_box = [&] {
            const double x = rng.uniform(0, 100), y = rng.uniform(0, 100);
            return BBox{x, y, x + rng.uniform(0.1, 50), y + rng.uniform(0.1, 50)};
        };
        const BBox a = rand_box(), b = rand_box();
        const double v = iou(a, b);
        CHECK(v == iou(b, a));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-15));
    }
}

TEST_CASE("resize") {
    SUBCASE("constant image stays constant") {
        const GrayImage img(512, 512, 0.5f);
        const GrayImage r = resize(img, 256, 256);
        CHECK(r.width() == 256);
        CHECK(r.height() == 256);
        for (float v : r.pixels()) CHECK(v == 0.5f);
    }
    SUBCASE("same size is the identity") {
        GrayImage img(256, 256);
        Rng rng(1);
        for (float& v : img.pixels()) v = static_cast<float>(rng.uniform());
        CHECK(resize(img, 256, 256) == img);
    }
    SUBCASE("4x4 checkerboard to 2x2 averages each block") {
        GrayImage img(4, 4);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) img(x, y) = static_cast<float>((x + y) % 2);
        // Output pixel centres land midway between source pixels 2k and 2k+1,
        // so every bilinear weight is 1/4 over one 2x2 block.
        const GrayImage r = resize(img, 2, 2);
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) {
                const double block = (img(2 * x, 2 * y) + img(2 * x + 1, 2 * y) + img(2 * x, 2 * y + 1) +
                                      img(2 * x + 1, 2 * y + 1)) /
                                     4.0;
                CHECK(r(x, y) == doctest::Approx(block).epsilon(1e-7));
            }
    }
    SUBCASE("output stays within the input range") {
        Rng rng(9);
        for (int t = 0; t < 20; ++t) {
            GrayImage img(rng.uniform_int(2, 40), rng.uniform_int(2, 40));
            for (float& v : img.pixels()) v = static_cast<float>(rng.uniform(0.2, 0.7));
            const auto [lo, hi] = std::minmax_element(img.pixels().begin(), img.pixels().end());
            const GrayImage r = resize(img, rng.uniform_int(1, 60), rng.uniform_int(1, 60));
            for (float v : r.pixels()) {
                CHECK(v >= *lo - 1e-6);
                CHECK(v <= *hi + 1e-6);
            }
        }
    }
    CHECK_THROWS_AS(resize(GrayImage(4, 4), 0, 3), ShapeError);
}

TEST_CASE("scale_box") {
    const BBox b{10, 10, 20, 20};
    CHECK(scale_box(b, 100, 100, 100, 100) == b);
    CHECK(scale_box(b, 100, 100, 200, 200) == BBox{20, 20, 40, 40});
    const BBox s = scale_box({0, 0, 50, 39}, 1024, 780, 256, 256);
    CHECK(s.x_max == doctest::Approx(50.0 * 256 / 1024));
    CHECK(s.y_max == doctest::Approx(39.0 * 256 / 780));
    CHECK(s.x_max == doctest::Approx(12.5));
    CHECK(s.y_max == doctest::Approx(12.8));
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        const BBox r{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(60, 300), rng.uniform(60, 300)};
        const int w0 = rng.uniform_int(1, 2000), h0 = rng.uniform_int(1, 2000);
        const int w1 = rng.uniform_int(1, 2000), h1 = rng.uniform_int(1, 2000);
        const BBox back = scale_box(scale_box(r, w0, h0, w1, h1), w1, h1, w0, h0);
        CHECK(std::abs(back.x_min - r.x_min) < 1e-9);
        CHECK(std::abs(back.y_min - r.y_min) < 1e-9);
        CHECK(std::abs(back.x_max - r.x_max) < 1e-9);
        CHECK(std::abs(back.y_max - r.y_max) < 1e-9);
    }
}

TEST_CASE("crop and tight_box") {
    GrayImage img(10, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 10; ++x) img(x, y) = static_cast<float>(x + 10 * y) / 100.0f;
    const GrayImage c = crop(img, {2, 3, 5, 7});
    CHECK(c.width() == 3);
    CHECK(c.height() == 4);
    CHECK(c(0, 0) == img(2, 3));
    CHECK(c(2, 3) == img(4, 6));

    BinaryMask m(10, 8);
    CHECK_FALSE(tight_box(m).valid());
    m.set(3, 2, true);
    m.set(6, 5, true);
    CHECK(tight_box(m) == BBox{3, 2, 7, 6});
}

TEST_CASE("labels") {
    for (Label l : {Label::NonDistended, Label::Distended, Label::Recess}) CHECK(parse_label(to_string(l)) == l);
    CHECK_THROWS_AS(parse_label("Maybe"), ValidationError);
}

TEST_CASE("png round trip") {
    const auto dir = oracle::scratch_dir("png");
    GrayImage img(7, 5);
    Rng rng(2);
    for (float& v : img.pixels()) v = static_cast<float>(rng.uniform());
    save_png(dir / "a.png", img);
    const GrayImage back = load_png(dir / "a.png");
    CHECK(back == quantize8(img));
    CHECK_THROWS_AS(load_png(dir / "missing.png"), IoError);
}

TEST_CASE("box json") {
    const BBox b{1.5, 2, 3, 4.25};
    CHECK(box_from_json(box_to_json(b)) == b);
    CHECK_THROWS_AS(box_from_json(json::array({1, 2, 3})), ValidationError);
    CHECK_THROWS_AS(box_from_json(json::array({3, 2, 1, 4})), ValidationError);
}
