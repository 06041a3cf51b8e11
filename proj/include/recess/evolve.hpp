#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "recess/error.hpp"
#include "recess/io.hpp"
#include "recess/model.hpp"
#include "recess/random.hpp"
#include "recess/training.hpp"

namespace recess::evolve {

struct Gene {
    std::string name;
    double value = 0.0;
    double lo = 0.0;
    double hi = 1.0;
    bool operator==(const Gene&) const = default;
};

/// Genome of searchable hyperparameters. Which genes exist depends on the mode:
/// gamma only for detection, dropout and delta only for multi-task.
struct HyperParams {
    std::vector<Gene> genes;

    bool has(const std::string& name) const;
    double get(const std::string& name) const;
    void set(const std::string& name, double value);
    /// Throws ValidationError when a gene leaves its bounds.
    void validate() const;
    bool operator==(const HyperParams&) const = default;

    /// Genome with the best values found by the reference search, default bounds.
    static HyperParams reference(model::Mode mode);
    /// Genome holding the current settings; bounds are the reference ones,
    /// widened where a setting lies outside them.
    static HyperParams from_settings(const training::TrainConfig& train, const model::ModelConfig& model);
    /// Copies the genes into the training and model settings.
    void apply(training::TrainConfig& train, model::ModelConfig& model) const;
};

json to_json(const HyperParams& h);
/// Rejects genes that do not belong to the mode.
HyperParams hyperparams_from_json(const json& j, model::Mode mode);
/// Same, starting from `base` (its genes, values and bounds) instead of the reference genome.
HyperParams hyperparams_from_json(const json& j, const HyperParams& base);

struct GenerationRecord {
    int generation = 0;
    HyperParams genome;
    double fitness = 0.0;
};

json to_json(const GenerationRecord& r);
/// `like` supplies the gene set and bounds the records are checked against.
GenerationRecord generation_from_json(const json& j, const HyperParams& like);
std::vector<GenerationRecord> load_history(const std::filesystem::path& path, const HyperParams& like);

struct MutationParams {
    double probability = 0.9;
    double variance = 0.04;
    double scale = 0.2;
};

/// Each gene mutates with the given probability by a factor 1 + scale*g,
/// g ~ N(0, variance), redrawn until the factor differs from 1 and stays
/// positive; the result is clipped to the gene's bounds. G needs uniform()
/// and normal().
template <typename G>
HyperParams mutate(const HyperParams& parent, G& rng, const MutationParams& p = {}) {
    HyperParams child = parent;
    const double sd = std::sqrt(p.variance);
    for (auto& gene : child.genes) {
        if (!(rng.uniform() < p.probability)) continue;
        double factor = 1.0;
        for (int tries = 0; factor == 1.0 || factor <= 0.0; ++tries) {
            if (tries > 1000) throw std::logic_error("mutation factor draw does not terminate");
            factor = 1.0 + p.scale * sd * rng.normal();
        }
        gene.value = std::clamp(gene.value * factor, gene.lo, gene.hi);
    }
    return child;
}

/// Fitness-weighted random convex combination of the top `n_keep` genomes.
/// Weights are (f - min f + eps) times independent Exp(1) draws, normalized.
/// G needs exponential().
template <typename G>
HyperParams select_parent(const std::vector<GenerationRecord>& history, G& rng, int n_keep = 5, double eps = 1e-6) {
    if (history.empty()) throw EmptyHistory("no generations recorded yet");
    std::vector<const GenerationRecord*> top;
    for (const auto& r : history) top.push_back(&r);
    std::stable_sort(top.begin(), top.end(),
                     [](const GenerationRecord* a, const GenerationRecord* b) { return a->fitness > b->fitness; });
    top.resize(std::min<std::size_t>(top.size(), static_cast<std::size_t>(std::max(1, n_keep))));
    if (top.size() == 1) return top.front()->genome;

    double f_min = top.front()->fitness;
    for (const auto* r : top) f_min = std::min(f_min, r->fitness);
    std::vector<double> w;
    double total = 0.0;
    for (const auto* r : top) {
        w.push_back((r->fitness - f_min + eps) * rng.exponential());
        total += w.back();
    }
    HyperParams out = top.front()->genome;
    for (auto& gene : out.genes) {
        double v = 0.0;
        for (std::size_t i = 0; i < top.size(); ++i) v += w[i] / total * top[i]->genome.get(gene.name);
        gene.value = std::clamp(v, gene.lo, gene.hi);
    }
    return out;
}

struct EvolveResult {
    HyperParams best;
    double best_fitness = 0.0;
    int best_generation = 0;
    std::vector<GenerationRecord> history;
};

using FitnessFn = std::function<double(const HyperParams&)>;

/// Generation 0 evaluates `initial`; every later generation evaluates
/// mutate(select_parent(history)). Randomness for generation g comes from
/// (seed, g) only, so a resumed run continues exactly where it stopped.
/// `resume` supplies already-evaluated records; `on_record` sees each new one.
EvolveResult evolve(const FitnessFn& fitness_fn, const HyperParams& initial, int generations, std::uint64_t seed,
                    std::vector<GenerationRecord> resume = {},
                    const std::function<void(const GenerationRecord&)>& on_record = {});

}  // namespace recess::evolve
