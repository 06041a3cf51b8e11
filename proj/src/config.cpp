#include "recess/config.hpp"

#include "recess/error.hpp"

namespace recess {

RunConfig RunConfig::defaults(model::Mode mode) {
    RunConfig c;
    c.model = model::ModelConfig::tiny(mode);
    // Tuned on synthetic phantoms. Objectness is averaged over every anchor, so
    // its weight has to be large for the single positive to register.
    auto& t = c.train;
    t.max_epochs = mode == model::Mode::DetectionTwoClass ? 24 : 16;
    t.patience = t.max_epochs;
    t.learning_rate = 0.05;
    t.momentum = 0.9;
    t.loss_weights = {0.5, 30.0, 0.5, 0.2};
    return c;
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw ValidationError("train_ratio must lie in (0,1)");
    if (k < 2) throw ValidationError("k must be >= 2");
}

void RunConfig::check_paths() const {
    for (const auto* p : {&paths.manifest, &paths.folds})
        if (!p->empty() && !std::filesystem::exists(*p)) throw ValidationError("path does not exist: " + *p);
}

json to_json(const RunConfig& c) {
    return json{{"model", model::to_json(c.model)},
                {"train", training::to_json(c.train)},
                {"train_ratio", c.train_ratio},
                {"split_seed", c.split_seed},
                {"k", c.k},
                {"paths", {{"manifest", c.paths.manifest}, {"folds", c.paths.folds}, {"out", c.paths.out}}}};
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    try {
        // Mode first: it decides which genes and defaults apply.
        if (j.contains("model") && j["model"].contains("mode")) c.model.mode = model::parse_mode(j["model"]["mode"].get<std::string>());
        for (const auto& [key, v] : j.items()) {
            if (key == "model") {
                json merged = model::to_json(c.model);
                for (const auto& [mk, mv] : v.items()) merged[mk] = mv;
                c.model = model::model_config_from_json(merged);
            } else if (key == "train") {
                c.train = training::train_config_from_json(v, c.train);
            } else if (key == "train_ratio") {
                c.train_ratio = v.get<double>();
            } else if (key == "split_seed") {
                c.split_seed = v.get<std::uint64_t>();
            } else if (key == "k") {
                c.k = v.get<int>();
            } else if (key == "paths") {
                for (const auto& [pk, pv] : v.items()) {
                    if (pk == "manifest") c.paths.manifest = pv.get<std::string>();
                    else if (pk == "folds") c.paths.folds = pv.get<std::string>();
                    else if (pk == "out") c.paths.out = pv.get<std::string>();
                    else throw ValidationError("unknown path key '" + pk + "'");
                }
            } else if (key != "hyperparams") {
                throw ValidationError("unknown config key '" + key + "'");
            }
        }
        if (j.contains("hyperparams")) {
            // Genes override the plain settings they map onto.
            const auto genome = evolve::hyperparams_from_json(j["hyperparams"], c.model.mode);
            genome.apply(c.train, c.model);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("invalid config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j, std::move(base));
}

bool operator==(const RunConfig& a, const RunConfig& b) { return to_json(a) == to_json(b); }

}  // namespace recess
