#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "recess/imaging.hpp"
#include "recess/io.hpp"

namespace recess::dataset {

enum class Side { Left, Right, Unknown };

std::string_view to_string(Side side) noexcept;

/// Ground truth for one stored (cropped, resized) image.
struct Annotation {
    std::string image_id;
    std::string image_path;
    std::string patient_id;
    Side side = Side::Unknown;
    int visit = 1;
    Label label = Label::NonDistended;
    BBox sqr_box;
    int image_width = 256;
    int image_height = 256;
};

json to_json(const Annotation& a);
/// Validates every field; `line` is used in error messages.
Annotation annotation_from_json(const json& j, long line = -1);

struct ManifestCounts {
    std::size_t n_total = 0;
    std::size_t n_distended = 0;
    std::size_t n_nondistended = 0;
    std::size_t n_patients = 0;

    bool operator==(const ManifestCounts&) const = default;
};

class DatasetManifest {
public:
    DatasetManifest() = default;
    /// Throws ValidationError on duplicate image ids.
    explicit DatasetManifest(std::vector<Annotation> entries);

    const std::vector<Annotation>& entries() const noexcept { return entries_; }
    const ManifestCounts& counts() const noexcept { return counts_; }

    /// Throws ValidationError for an unknown id.
    const Annotation& find(const std::string& image_id) const;
    std::size_t index_of(const std::string& image_id) const;

    /// JSON-lines text, one annotation per line.
    std::string to_jsonl() const;

private:
    std::vector<Annotation> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    ManifestCounts counts_;
};

/// Reads a JSON-lines manifest. Blank lines are skipped.
/// ParseError for malformed JSON, ValidationError for contract violations.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(const std::string& text);

struct FoldSplit {
    int fold_index = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;
};

json to_json(const FoldSplit& split);
FoldSplit fold_from_json(const json& j);
json folds_to_json(const std::vector<FoldSplit>& folds);
std::vector<FoldSplit> folds_from_json(const json& j);

/// Patient-grouped k-fold: patients are shuffled by `seed` and assigned one by
/// one to the fold with the fewest images so far. Fold i uses group i as test.
std::vector<FoldSplit> grouped_kfold(const DatasetManifest& manifest, int k, std::uint64_t seed);

/// Moves whole patients from the training portion into validation until the
/// validation share is as close as possible to 1 - ratio of the images.
FoldSplit train_val_split(const FoldSplit& split, const DatasetManifest& manifest, double ratio,
                          std::uint64_t seed);

/// An image paired with its annotation.
struct Sample {
    GrayImage image;
    Annotation annotation;
};

/// Loads every manifest image, resolving relative paths against `root`.
/// Images must match the annotated size.
std::vector<Sample> load_samples(const DatasetManifest& manifest, const std::filesystem::path& root);

/// Subset of `samples` (manifest order) with the given ids, in the order of `ids`.
std::vector<Sample> select(const std::vector<Sample>& samples, const DatasetManifest& manifest,
                           const std::vector<std::string>& ids);

/// n_nondistended / n_distended over `train_ids`. Throws NoPositiveSamples.
double class_weight(const std::vector<std::string>& train_ids, const DatasetManifest& manifest);

}  // namespace recess::dataset
