#include "recess/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "recess/error.hpp"
#include "recess/random.hpp"

namespace recess::dataset {

namespace {

Side parse_side(std::string_view s, long line) {
    if (s == "Left") return Side::Left;
    if (s == "Right") return Side::Right;
    if (s == "Unknown") return Side::Unknown;
    throw ValidationError("unknown side '" + std::string(s) + "'", line);
}

template <typename T>
T field(const json& j, const char* key, long line) {
    auto it = j.find(key);
    if (it == j.end()) throw ValidationError(std::string("missing field '") + key + "'", line);
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw ValidationError(std::string("field '") + key + "' has the wrong type", line);
    }
}

/// Patients in order of first appearance among `ids`, with their image ids.
std::vector<std::pair<std::string, std::vector<std::string>>> group_by_patient(
    const std::vector<std::string>& ids, const DatasetManifest& manifest) {
    std::vector<std::pair<std::string, std::vector<std::string>>> groups;
    std::unordered_map<std::string, std::size_t> where;
    for (const auto& id : ids) {
        const auto& pid = manifest.find(id).patient_id;
        auto [it, inserted] = where.try_emplace(pid, groups.size());
        if (inserted) groups.emplace_back(pid, std::vector<std::string>{});
        groups[it->second].second.push_back(id);
    }
    return groups;
}

}  // namespace

std::string_view to_string(Side side) noexcept {
    switch (side) {
        case Side::Left: return "Left";
        case Side::Right: return "Right";
        case Side::Unknown: return "Unknown";
    }
    return "Unknown";
}

json to_json(const Annotation& a) {
    json j;
    j["image_id"] = a.image_id;
    j["image_path"] = a.image_path;
    j["patient_id"] = a.patient_id;
    j["side"] = std::string(to_string(a.side));
    j["visit"] = a.visit;
    j["label"] = std::string(recess::to_string(a.label));
    j["sqr_box"] = box_to_json(a.sqr_box);
    j["image_width"] = a.image_width;
    j["image_height"] = a.image_height;
    return j;
}

Annotation annotation_from_json(const json& j, long line) {
    if (!j.is_object()) throw ValidationError("annotation must be a JSON object", line);
    Annotation a;
    a.image_id = field<std::string>(j, "image_id", line);
    a.image_path = field<std::string>(j, "image_path", line);
    a.patient_id = field<std::string>(j, "patient_id", line);
    if (a.image_id.empty()) throw ValidationError("empty image_id", line);
    if (a.patient_id.empty()) throw ValidationError("empty patient_id", line);
    a.side = j.contains("side") ? parse_side(field<std::string>(j, "side", line), line) : Side::Unknown;
    a.visit = j.contains("visit") ? field<int>(j, "visit", line) : 1;
    if (a.visit < 1) throw ValidationError("visit must be >= 1", line);

    const auto label = field<std::string>(j, "label", line);
    if (label == "Distended") a.label = Label::Distended;
    else if (label == "NonDistended") a.label = Label::NonDistended;
    else throw ValidationError("unknown label '" + label + "'", line);

    if (j.contains("image_width")) a.image_width = field<int>(j, "image_width", line);
    if (j.contains("image_height")) a.image_height = field<int>(j, "image_height", line);
    if (a.image_width < 1 || a.image_height < 1) throw ValidationError("image dimensions must be >= 1", line);

    if (!j.contains("sqr_box")) throw ValidationError("missing field 'sqr_box'", line);
    try {
        a.sqr_box = box_from_json(j["sqr_box"]);
    } catch (const ValidationError& e) {
        throw ValidationError(e.what(), line);
    }
    if (!a.sqr_box.inside(a.image_width, a.image_height))
        throw ValidationError("sqr_box lies outside the image bounds", line);
    return a;
}

DatasetManifest::DatasetManifest(std::vector<Annotation> entries) : entries_(std::move(entries)) {
    std::unordered_set<std::string> patients;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& a = entries_[i];
        if (!index_.try_emplace(a.image_id, i).second)
            throw ValidationError("duplicate image_id '" + a.image_id + "'");
        patients.insert(a.patient_id);
        if (a.label == Label::Distended) ++counts_.n_distended;
        else ++counts_.n_nondistended;
    }
    counts_.n_total = entries_.size();
    counts_.n_patients = patients.size();
}

const Annotation& DatasetManifest::find(const std::string& image_id) const {
    return entries_[index_of(image_id)];
}

std::size_t DatasetManifest::index_of(const std::string& image_id) const {
    auto it = index_.find(image_id);
    if (it != index_.end()) return it->second;
    throw ValidationError("unknown image_id '" + image_id + "'");
}

std::string DatasetManifest::to_jsonl() const {
    std::string out;
    for (const auto& a : entries_) {
        out += to_json(a).dump();
        out += '\n';
    }
    return out;
}

DatasetManifest parse_manifest(const std::string& text) {
    std::vector<Annotation> entries;
    std::unordered_set<std::string> ids;
    std::istringstream in(text);
    std::string line;
    long number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), number);
        }
        Annotation a = annotation_from_json(j, number);
        if (!ids.insert(a.image_id).second)
            throw ValidationError("duplicate image_id '" + a.image_id + "'", number);
        entries.push_back(std::move(a));
    }
    return DatasetManifest(std::move(entries));
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    return parse_manifest(read_text(path));
}

json to_json(const FoldSplit& split) {
    return json{{"fold_index", split.fold_index},
                {"train_ids", split.train_ids},
                {"val_ids", split.val_ids},
                {"test_ids", split.test_ids}};
}

FoldSplit fold_from_json(const json& j) {
    try {
        FoldSplit s;
        s.fold_index = j.at("fold_index").get<int>();
        s.train_ids = j.at("train_ids").get<std::vector<std::string>>();
        s.val_ids = j.value("val_ids", std::vector<std::string>{});
        s.test_ids = j.at("test_ids").get<std::vector<std::string>>();
        return s;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid fold split: ") + e.what());
    }
}

json folds_to_json(const std::vector<FoldSplit>& folds) {
    json arr = json::array();
    for (const auto& f : folds) arr.push_back(to_json(f));
    return json{{"k", folds.size()}, {"folds", arr}};
}

std::vector<FoldSplit> folds_from_json(const json& j) {
    if (!j.contains("folds") || !j["folds"].is_array()) throw ValidationError("folds file must contain a 'folds' array");
    std::vector<FoldSplit> out;
    for (const auto& f : j["folds"]) out.push_back(fold_from_json(f));
    return out;
}

std::vector<FoldSplit> grouped_kfold(const DatasetManifest& manifest, int k, std::uint64_t seed) {
    if (k < 2) throw ValidationError("k must be >= 2");
    if (manifest.counts().n_patients < static_cast<std::size_t>(k))
        throw TooFewPatients("need at least " + std::to_string(k) + " patients, have " +
                             std::to_string(manifest.counts().n_patients));

    std::vector<std::string> all_ids;
    for (const auto& a : manifest.entries()) all_ids.push_back(a.image_id);
    auto groups = group_by_patient(all_ids, manifest);
    Rng rng(seed);
    rng.shuffle(groups);

    std::vector<std::size_t> fold_size(static_cast<std::size_t>(k), 0);
    std::vector<std::unordered_set<std::string>> fold_ids(static_cast<std::size_t>(k));
    for (const auto& [pid, ids] : groups) {
        const auto smallest = static_cast<std::size_t>(
            std::min_element(fold_size.begin(), fold_size.end()) - fold_size.begin());
        fold_size[smallest] += ids.size();
        fold_ids[smallest].insert(ids.begin(), ids.end());
    }

    std::vector<FoldSplit> folds;
    for (int f = 0; f < k; ++f) {
        FoldSplit s;
        s.fold_index = f;
        for (const auto& a : manifest.entries()) {
            if (fold_ids[static_cast<std::size_t>(f)].count(a.image_id)) s.test_ids.push_back(a.image_id);
            else s.train_ids.push_back(a.image_id);
        }
        folds.push_back(std::move(s));
    }
    return folds;
}

FoldSplit train_val_split(const FoldSplit& split, const DatasetManifest& manifest, double ratio,
                          std::uint64_t seed) {
    if (!split.val_ids.empty()) throw ValidationError("split already has validation ids");
    if (ratio <= 0.0 || ratio >= 1.0) throw ValidationError("train ratio must lie in (0,1)");

    auto groups = group_by_patient(split.train_ids, manifest);
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(split.fold_index)));
    rng.shuffle(groups);

    const auto target = static_cast<std::size_t>(
        std::llround((1.0 - ratio) * static_cast<double>(split.train_ids.size())));
    std::unordered_set<std::string> val;
    std::size_t val_count = 0;
    for (const auto& [pid, ids] : groups) {
        if (val_count + ids.size() <= target) {
            val.insert(ids.begin(), ids.end());
            val_count += ids.size();
        }
    }
    if (val.empty() && groups.size() >= 2) val.insert(groups.front().second.begin(), groups.front().second.end());

    FoldSplit out;
    out.fold_index = split.fold_index;
    out.test_ids = split.test_ids;
    for (const auto& id : split.train_ids) {
        if (val.count(id)) out.val_ids.push_back(id);
        else out.train_ids.push_back(id);
    }
    return out;
}

std::vector<Sample> load_samples(const DatasetManifest& manifest, const std::filesystem::path& root) {
    std::vector<Sample> out;
    out.reserve(manifest.entries().size());
    for (const auto& a : manifest.entries()) {
        std::filesystem::path p = a.image_path;
        if (p.is_relative()) p = root / p;
        GrayImage img = load_png(p);
        if (img.width() != a.image_width || img.height() != a.image_height)
            throw ShapeError(p.string() + " is " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                             " but the manifest says " + std::to_string(a.image_width) + "x" +
                             std::to_string(a.image_height));
        out.push_back({std::move(img), a});
    }
    return out;
}

std::vector<Sample> select(const std::vector<Sample>& samples, const DatasetManifest& manifest,
                           const std::vector<std::string>& ids) {
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(samples.at(manifest.index_of(id)));
    return out;
}

double class_weight(const std::vector<std::string>& train_ids, const DatasetManifest& manifest) {
    std::size_t pos = 0, neg = 0;
    for (const auto& id : train_ids) {
        if (manifest.find(id).label == Label::Distended) ++pos;
        else ++neg;
    }
    if (pos == 0) throw NoPositiveSamples("training split has no Distended samples");
    return static_cast<double>(neg) / static_cast<double>(pos);
}

}  // namespace recess::dataset
