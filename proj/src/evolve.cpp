#include "recess/evolve.hpp"

#include <sstream>

namespace recess::evolve {

bool HyperParams::has(const std::string& name) const {
    return std::any_of(genes.begin(), genes.end(), [&](const Gene& g) { return g.name == name; });
}

double HyperParams::get(const std::string& name) const {
    for (const auto& g : genes)
        if (g.name == name) return g.value;
    throw ValidationError("genome has no gene '" + name + "'");
}

void HyperParams::set(const std::string& name, double value) {
    for (auto& g : genes)
        if (g.name == name) {
            g.value = value;
            return;
        }
    throw ValidationError("genome has no gene '" + name + "'");
}

void HyperParams::validate() const {
    for (const auto& g : genes)
        if (!(g.value >= g.lo && g.value <= g.hi))
            throw ValidationError("gene '" + g.name + "' = " + std::to_string(g.value) + " outside [" +
                                  std::to_string(g.lo) + ", " + std::to_string(g.hi) + "]");
}

HyperParams HyperParams::reference(model::Mode mode) {
    HyperParams h;
    if (mode == model::Mode::DetectionTwoClass) {
        h.genes = {{"learning_rate", 0.00369, 1e-5, 1e-1},
                   {"sgd_momentum", 0.77628, 0.6, 0.98},
                   {"alpha", 0.06868, 0.02, 1.0},
                   {"beta", 0.49062, 0.02, 1.0},
                   {"gamma", 0.2343, 0.02, 1.0}};
    } else {
        h.genes = {{"learning_rate", 0.0018, 1e-5, 1e-1},
                   {"sgd_momentum", 0.62403, 0.6, 0.98},
                   {"dropout", 0.11008, 0.0, 0.5},
                   {"alpha", 0.05427, 0.02, 1.0},
                   {"beta", 0.67598, 0.02, 1.0},
                   {"delta", 0.41855, 0.02, 1.0}};
    }
    return h;
}

HyperParams HyperParams::from_settings(const training::TrainConfig& train, const model::ModelConfig& model) {
    HyperParams h = reference(model.mode);
    for (auto& g : h.genes) {
        if (g.name == "learning_rate") g.value = train.learning_rate;
        else if (g.name == "sgd_momentum") g.value = train.momentum;
        else if (g.name == "dropout") g.value = model.dropout_rate;
        else if (g.name == "alpha") g.value = train.loss_weights.alpha;
        else if (g.name == "beta") g.value = train.loss_weights.beta;
        else if (g.name == "gamma") g.value = train.loss_weights.gamma;
        else if (g.name == "delta") g.value = train.loss_weights.delta;
        g.lo = std::min(g.lo, g.value);
        g.hi = std::max(g.hi, g.value);
    }
    return h;
}

void HyperParams::apply(training::TrainConfig& train, model::ModelConfig& model) const {
    for (const auto& g : genes) {
        if (g.name == "learning_rate") train.learning_rate = g.value;
        else if (g.name == "sgd_momentum") train.momentum = g.value;
        else if (g.name == "dropout") model.dropout_rate = g.value;
        else if (g.name == "alpha") train.loss_weights.alpha = g.value;
        else if (g.name == "beta") train.loss_weights.beta = g.value;
        else if (g.name == "gamma") train.loss_weights.gamma = g.value;
        else if (g.name == "delta") train.loss_weights.delta = g.value;
    }
}

json to_json(const HyperParams& h) {
    json j = json::object();
    for (const auto& g : h.genes) j[g.name] = {{"value", g.value}, {"lo", g.lo}, {"hi", g.hi}};
    return j;
}

HyperParams hyperparams_from_json(const json& j, model::Mode mode) {
    return hyperparams_from_json(j, HyperParams::reference(mode));
}

HyperParams hyperparams_from_json(const json& j, const HyperParams& base) {
    if (!j.is_object()) throw ValidationError("genome must be a JSON object");
    HyperParams h = base;
    try {
        for (const auto& [name, v] : j.items()) {
            auto it = std::find_if(h.genes.begin(), h.genes.end(), [&](const Gene& g) { return g.name == name; });
            if (it == h.genes.end()) throw ValidationError("gene '" + name + "' does not apply to this mode");
            if (v.is_number()) {
                it->value = v.get<double>();
            } else {
                it->value = v.at("value").get<double>();
                it->lo = v.value("lo", it->lo);
                it->hi = v.value("hi", it->hi);
            }
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid genome: ") + e.what());
    }
    h.validate();
    return h;
}

json to_json(const GenerationRecord& r) {
    json genome = json::object();
    for (const auto& g : r.genome.genes) genome[g.name] = g.value;
    return json{{"generation", r.generation}, {"genome", genome}, {"fitness", r.fitness}};
}

GenerationRecord generation_from_json(const json& j, const HyperParams& like) {
    try {
        GenerationRecord r;
        r.generation = j.at("generation").get<int>();
        r.genome = hyperparams_from_json(j.at("genome"), like);
        r.fitness = j.at("fitness").get<double>();
        return r;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid generation record: ") + e.what());
    }
}

std::vector<GenerationRecord> load_history(const std::filesystem::path& path, const HyperParams& like) {
    std::istringstream in(read_text(path));
    std::vector<GenerationRecord> out;
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
        out.push_back(generation_from_json(j, like));
        if (out.back().generation != static_cast<int>(out.size()) - 1)
            throw ValidationError("generations must be consecutive from 0", number);
    }
    return out;
}

EvolveResult evolve(const FitnessFn& fitness_fn, const HyperParams& initial, int generations, std::uint64_t seed,
                    std::vector<GenerationRecord> resume, const std::function<void(const GenerationRecord&)>& on_record) {
    if (generations < 0) throw ValidationError("generations must be >= 0");
    initial.validate();
    EvolveResult res;
    res.history = std::move(resume);
    for (int g = static_cast<int>(res.history.size()); g <= generations; ++g) {
        GenerationRecord rec;
        rec.generation = g;
        if (g == 0) {
            rec.genome = initial;
        } else {
            Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(g)));
            rec.genome = mutate(select_parent(res.history, rng), rng);
        }
        rec.fitness = fitness_fn(rec.genome);
        res.history.push_back(rec);
        if (on_record) on_record(rec);
    }
    if (res.history.empty()) throw EmptyHistory("nothing evaluated");
    std::size_t best = 0;
    for (std::size_t i = 1; i < res.history.size(); ++i)
        if (res.history[i].fitness > res.history[best].fitness) best = i;
    res.best = res.history[best].genome;
    res.best_fitness = res.history[best].fitness;
    res.best_generation = res.history[best].generation;
    return res;
}

}  // namespace recess::evolve
