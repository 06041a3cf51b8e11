#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include "../support/oracles.hpp"
#include "recess/dataset.hpp"
#include "recess/error.hpp"

using namespace recess;
using namespace recess::dataset;

namespace {

Annotation entry(const std::string& id, const std::string& patient, Label label) {
    Annotation a;
    a.image_id = id;
    a.image_path = "images/" + id + ".png";
    a.patient_id = patient;
    a.label = label;
    a.sqr_box = {60, 80, 190, 120};
    return a;
}

/// `images_per_patient[p]` images for patient p; each image Distended with probability p_dist.
DatasetManifest make_manifest(const std::vector<int>& images_per_patient, Rng& rng, double p_dist = 0.25) {
    std::vector<Annotation> out;
    for (std::size_t p = 0; p < images_per_patient.size(); ++p)
        for (int i = 0; i < images_per_patient[p]; ++i)
            out.push_back(entry("img" + std::to_string(out.size()), "P" + std::to_string(p),
                                rng.bernoulli(p_dist) ? Label::Distended : Label::NonDistended));
    return DatasetManifest(std::move(out));
}

std::vector<int> random_sizes(Rng& rng, int patients) {
    std::vector<int> s(static_cast<std::size_t>(patients));
    for (int& v : s) v = rng.uniform_int(1, 4);
    return s;
}

/// 483 images over 208 patients, 1-4 each.
std::vector<int> clinical_sizes(Rng& rng) {
    std::vector<int> s(208, 1);
    int total = 208;
    while (total < 483) {
        int& v = s[static_cast<std::size_t>(rng.index(s.size()))];
        if (v < 4) {
            ++v;
            ++total;
        }
    }
    return s;
}

std::string line_of(const Annotation& a) { return to_json(a).dump() + "\n"; }

}  // namespace

TEST_CASE("manifest parsing") {
    CHECK(parse_manifest("").entries().empty());
    CHECK(parse_manifest("\n\n").counts() == ManifestCounts{});

    std::string text;
    for (int i = 0; i < 483; ++i)
        text += line_of(entry("i" + std::to_string(i), "P" + std::to_string(i / 3),
                              i < 123 ? Label::Distended : Label::NonDistended));
    const auto m = parse_manifest(text);
    CHECK(m.counts().n_total == 483);
    CHECK(m.counts().n_distended == 123);
    CHECK(m.counts().n_nondistended == 360);
    CHECK(m.counts().n_patients == 161);
    CHECK(m.find("i7").patient_id == "P2");

    const std::string good = line_of(entry("a", "P1", Label::Distended));
    SUBCASE("unknown label names its line") {
        json j = to_json(entry("b", "P1", Label::Distended));
        j["label"] = "Maybe";
        try {
            parse_manifest(good + j.dump() + "\n");
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(e.line() == 2);
            CHECK(std::string(e.what()).find("Maybe") != std::string::npos);
        }
    }
    SUBCASE("malformed json") {
        try {
            parse_manifest(good + good.substr(0, 20) + "\n");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 2);
        }
    }
    CHECK_THROWS_AS(parse_manifest(good + good), ValidationError);
    SUBCASE("box outside the image") {
        auto a = entry("b", "P1", Label::Distended);
        a.sqr_box = {200, 10, 300, 40};
        CHECK_THROWS_AS(parse_manifest(line_of(a)), ValidationError);
    }
    SUBCASE("missing field") {
        json j = to_json(entry("b", "P1", Label::Distended));
        j.erase("patient_id");
        CHECK_THROWS_AS(parse_manifest(j.dump()), ValidationError);
    }
    SUBCASE("file round trip") {
        const auto dir = oracle::scratch_dir("manifest");
        std::ofstream(dir / "m.jsonl") << m.to_jsonl();
        CHECK(load_manifest(dir / "m.jsonl").to_jsonl() == m.to_jsonl());
        CHECK_THROWS_AS(load_manifest(dir / "nope.jsonl"), IoError);
    }
}

TEST_CASE("grouped_kfold examples") {
    Rng rng(1);
    SUBCASE("one image per patient") {
        const auto m = make_manifest({1, 1, 1, 1, 1}, rng);
        const auto folds = grouped_kfold(m, 5, 3);
        REQUIRE(folds.size() == 5);
        for (const auto& f : folds) {
            CHECK(f.test_ids.size() == 1);
            CHECK(f.train_ids.size() == 4);
        }
    }
    SUBCASE("a four-image patient never straddles") {
        const auto m = make_manifest({4, 1, 2, 1, 3, 1, 1, 2}, rng);
        for (const auto& f : grouped_kfold(m, 5, 9)) {
            int in_test = 0;
            for (const auto& id : f.test_ids) in_test += m.find(id).patient_id == "P0";
            CHECK((in_test == 0 || in_test == 4));
        }
    }
    SUBCASE("clinical-sized manifest") {
        const auto m = make_manifest(clinical_sizes(rng), rng);
        REQUIRE(m.counts().n_total == 483);
        REQUIRE(m.counts().n_patients == 208);
        for (std::uint64_t seed : {0, 1, 2}) {
            for (const auto& f : grouped_kfold(m, 5, seed)) {
                CHECK(std::abs(double(f.test_ids.size()) - 483.0 / 5) <= 0.15 * 483.0 / 5);
                CHECK(f.train_ids.size() + f.test_ids.size() == 483);
            }
        }
    }
    CHECK_THROWS_AS(grouped_kfold(make_manifest({2, 2, 2}, rng), 5, 0), TooFewPatients);
    CHECK_THROWS_AS(grouped_kfold(make_manifest({2, 2, 2}, rng), 1, 0), ValidationError);
}

TEST_CASE("grouped_kfold properties over random manifests") {
    Rng rng(77);
    for (int t = 0; t < 100; ++t) {
        const int k = rng.uniform_int(2, 6);
        const auto m = make_manifest(random_sizes(rng, rng.uniform_int(k, 60)), rng);
        const std::uint64_t seed = rng.uniform_int(0, 1000);
        const auto folds = grouped_kfold(m, k, seed);
        REQUIRE(folds.size() == static_cast<std::size_t>(k));

        std::map<std::string, int> test_hits;
        for (const auto& f : folds) {
            std::set<std::string> test_patients, train_patients;
            for (const auto& id : f.test_ids) {
                ++test_hits[id];
                test_patients.insert(m.find(id).patient_id);
            }
            for (const auto& id : f.train_ids) train_patients.insert(m.find(id).patient_id);
            for (const auto& p : test_patients) CHECK(train_patients.count(p) == 0);
            CHECK(f.train_ids.size() + f.test_ids.size() == m.entries().size());
        }
        CHECK(test_hits.size() == m.entries().size());
        for (const auto& [id, n] : test_hits) CHECK(n == 1);
        CHECK(folds_to_json(grouped_kfold(m, k, seed)).dump() == folds_to_json(folds).dump());
    }
}

TEST_CASE("train_val_split") {
    Rng rng(4);
    SUBCASE("ten single-image patients") {
        const auto m = make_manifest(std::vector<int>(10, 1), rng);
        FoldSplit f;
        for (const auto& a : m.entries()) f.train_ids.push_back(a.image_id);
        const auto s = train_val_split(f, m, 0.8, 5);
        CHECK(s.train_ids.size() == 8);
        CHECK(s.val_ids.size() == 2);
    }
    SUBCASE("clinical fold: val share and grouping") {
        const auto m = make_manifest(clinical_sizes(rng), rng);
        for (const auto& f : grouped_kfold(m, 5, 11)) {
            const auto s = train_val_split(f, m, 0.8, 12);
            const double n = double(f.train_ids.size());
            // 20% of ~386 with up to 4 images of patient slack either side.
            CHECK(std::abs(double(s.val_ids.size()) - 0.2 * n) <= 4.0);
            if (f.train_ids.size() >= 380 && f.train_ids.size() <= 392) {
                CHECK(s.val_ids.size() >= 62);
                CHECK(s.val_ids.size() <= 93);
            }
            std::set<std::string> tp, vp;
            for (const auto& id : s.train_ids) tp.insert(m.find(id).patient_id);
            for (const auto& id : s.val_ids) vp.insert(m.find(id).patient_id);
            for (const auto& p : vp) CHECK(tp.count(p) == 0);
            CHECK(s.test_ids == f.test_ids);
            CHECK(s.train_ids.size() + s.val_ids.size() == f.train_ids.size());
            CHECK(to_json(train_val_split(f, m, 0.8, 12)).dump() == to_json(s).dump());
        }
    }
    SUBCASE("already split") {
        const auto m = make_manifest({1, 1, 1}, rng);
        FoldSplit f;
        f.train_ids = {"img0", "img1"};
        f.val_ids = {"img2"};
        CHECK_THROWS_AS(train_val_split(f, m, 0.8, 0), ValidationError);
    }
}

TEST_CASE("class_weight") {
    std::vector<Annotation> entries;
    std::vector<std::string> ids;
    for (int i = 0; i < 386; ++i) {
        entries.push_back(entry("t" + std::to_string(i), "P" + std::to_string(i), i < 97 ? Label::Distended : Label::NonDistended));
        ids.push_back(entries.back().image_id);
    }
    const DatasetManifest m(entries);
    CHECK(class_weight(ids, m) == doctest::Approx(289.0 / 97.0).epsilon(1e-12));
    CHECK(std::abs(class_weight(ids, m) - 2.9794) < 1e-4);

    CHECK(class_weight({"t0", "t100"}, m) == 1.0);
    CHECK_THROWS_AS(class_weight({"t100", "t101"}, m), NoPositiveSamples);
}

TEST_CASE("fold json round trip") {
    Rng rng(6);
    const auto m = make_manifest(random_sizes(rng, 20), rng);
    const auto folds = grouped_kfold(m, 4, 2);
    CHECK(folds_to_json(folds_from_json(folds_to_json(folds))).dump() == folds_to_json(folds).dump());
    CHECK_THROWS_AS(folds_from_json(json::object()), ValidationError);
}
