#pragma once

#include <filesystem>
#include <string>

#include "recess/evolve.hpp"
#include "recess/model.hpp"
#include "recess/training.hpp"

namespace recess {

struct RunPaths {
    std::string manifest;
    std::string folds;
    std::string out;
    bool operator==(const RunPaths&) const = default;
};

/// Everything a training run needs, loaded from one JSON file. Hyperparameter
/// genomes are folded into the model and training settings on load.
struct RunConfig {
    model::ModelConfig model;
    training::TrainConfig train;
    double train_ratio = 0.8;
    std::uint64_t split_seed = 0;
    int k = 5;
    RunPaths paths;

    /// Desk-scale defaults for a mode: tiny model and the synthetic-data training settings.
    static RunConfig defaults(model::Mode mode);
    void validate() const;
    /// Throws ValidationError naming the first configured path that does not exist.
    void check_paths() const;
};

json to_json(const RunConfig& c);
/// Missing keys keep the values of `base`; unknown keys are rejected.
RunConfig run_config_from_json(const json& j, RunConfig base);
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base);

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace recess
