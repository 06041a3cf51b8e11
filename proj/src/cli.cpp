#include "recess/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "recess/checkpoint.hpp"
#include "recess/config.hpp"
#include "recess/dataset.hpp"
#include "recess/error.hpp"
#include "recess/evolve.hpp"
#include "recess/io.hpp"
#include "recess/metrics.hpp"
#include "recess/overlay.hpp"
#include "recess/phantom.hpp"
#include "recess/preprocess.hpp"
#include "recess/training.hpp"

namespace recess::cli {

namespace fs = std::filesystem;

namespace {

struct Context {
    std::ostream& out;
    std::ostream& err;
    bool quiet = false;
    int threads = 0;

    void log(const std::string& line) const {
        if (!quiet) err << line << '\n' << std::flush;
    }
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void require_exists(const std::string& path, const std::string& flag) {
    if (path.empty()) throw ValidationError(flag + " is required");
    if (!fs::exists(path)) throw ValidationError(flag + ": no such file or directory: " + path);
}

void make_dirs(const fs::path& dir) {
    if (dir.empty()) return;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

json read_json(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Flushes after every record so an interrupted run leaves a usable file.
class JsonlWriter {
public:
    JsonlWriter(fs::path path, bool append)
        : path_(std::move(path)), f_(path_, append ? std::ios::app : std::ios::trunc) {
        if (!f_) throw IoError("cannot open " + path_.string() + " for writing");
    }
    void write(const json& j) {
        f_ << j.dump() << '\n';
        f_.flush();
        if (!f_) throw IoError("write failed: " + path_.string());
    }

private:
    fs::path path_;
    std::ofstream f_;
};

struct Data {
    dataset::DatasetManifest manifest;
    std::vector<dataset::Sample> samples;
};

void check_image_size(const dataset::DatasetManifest& m, const model::ModelConfig& cfg) {
    for (const auto& a : m.entries())
        if (a.image_width != cfg.input_size || a.image_height != cfg.input_size)
            throw ShapeError("image " + a.image_id + " is " + std::to_string(a.image_width) + "x" +
                             std::to_string(a.image_height) + " but the model expects " +
                             std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size));
}

Data load_data(const std::string& manifest_path, const model::ModelConfig& cfg) {
    Data d;
    d.manifest = dataset::load_manifest(manifest_path);
    check_image_size(d.manifest, cfg);
    d.samples = dataset::load_samples(d.manifest, fs::path(manifest_path).parent_path());
    return d;
}

std::vector<dataset::FoldSplit> get_folds(const std::string& folds_path, const dataset::DatasetManifest& m, int k,
                                          std::uint64_t seed) {
    if (!folds_path.empty()) {
        auto folds = dataset::folds_from_json(read_json(folds_path));
        for (const auto& f : folds)
            for (const auto& id : f.test_ids) (void)m.find(id);
        return folds;
    }
    return dataset::grouped_kfold(m, k, seed);
}

const dataset::FoldSplit& fold_at(const std::vector<dataset::FoldSplit>& folds, int index) {
    for (const auto& f : folds)
        if (f.fold_index == index) return f;
    throw ValidationError("no fold " + std::to_string(index) + " (have " + std::to_string(folds.size()) + ")");
}

std::string approach_name(model::Mode mode) {
    return mode == model::Mode::MultiTask ? "Multi-task" : "Detection";
}

std::string report_text(const std::string& title, const metrics::EvalReport& r) {
    std::string s = title + "\n";
    s += fmt("  balanced accuracy %.3f  specificity %.3f  sensitivity %.3f\n", r.balanced_accuracy, r.specificity,
             r.sensitivity);
    s += fmt("  mean IoU %.3f  IoU>=0.5 %.3f  mAP@0.5 %.3f  mAP@0.5:0.95 %.3f\n", r.mean_iou, r.frac_iou_ge_05,
             r.map50, r.map5095);
    s += metrics::render_confusion("Confusion matrix", r.confusion);
    return s;
}

void log_epoch(const Context& c, int fold, const training::EpochRecord& r) {
    const auto& m = r.val_metrics;
    c.log(fmt("fold %d epoch %3d  loss %.4f  val fitness %.4f  BA %.3f  IoU %.3f", fold, r.epoch, r.train_loss.total,
              r.val_fitness, m.balanced_accuracy, m.mean_iou));
}

BBox parse_box(const std::string& text) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stod(part, &used));
            if (part.find_first_not_of(" ", used) != std::string::npos) throw std::invalid_argument(part);
        } catch (const std::logic_error&) {
            throw ValidationError("--gt: '" + part + "' is not a number");
        }
    }
    if (v.size() != 4) throw ValidationError("--gt expects x_min,y_min,x_max,y_max");
    BBox b{v[0], v[1], v[2], v[3]};
    if (!(b.x_max > b.x_min && b.y_max > b.y_min)) throw ValidationError("--gt box must have positive area");
    return b;
}

// ---- synth ----

struct SynthOpts {
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::string out;
    bool raw = false;
    bool borderline = false;
    std::size_t n_distended = 0;
    double p_distended = phantom::PhantomParams{}.p_distended;
    int size = 256;
    double speckle = phantom::PhantomParams{}.speckle_noise_sigma;
    double clutter = phantom::PhantomParams{}.clutter_level;
    CLI::Option* n_distended_opt = nullptr;
};

void add_synth(CLI::App& app, SynthOpts& o) {
    auto* s = app.add_subcommand("synth", "Generate a labeled synthetic phantom dataset");
    s->add_option("--n", o.n, "Number of images")->required()->check(CLI::PositiveNumber);
    s->add_option("--seed", o.seed, "Random seed");
    s->add_option("--out", o.out, "Output directory (images/ and manifest.jsonl)")->required();
    s->add_flag("--raw", o.raw, "Also write 1024x780 device-style canvases to raw/ with raw_truth.json");
    s->add_flag("--borderline", o.borderline, "Overlapping thickness ranges for hard cases");
    o.n_distended_opt = s->add_option("--n-distended", o.n_distended, "Exact number of Distended images");
    s->add_option("--p-distended", o.p_distended, "Probability of Distended when --n-distended is absent")
        ->check(CLI::Range(0.0, 1.0));
    s->add_option("--size", o.size, "Image side length")->check(CLI::Range(32, 4096));
    s->add_option("--speckle", o.speckle, "Speckle noise sigma")->check(CLI::NonNegativeNumber);
    s->add_option("--clutter", o.clutter, "Clutter level")->check(CLI::Range(0.0, 1.0));
}

int run_synth(const Context& c, const SynthOpts& o) {
    phantom::PhantomParams p;
    p.image_size = o.size;
    p.p_distended = o.p_distended;
    p.speckle_noise_sigma = o.speckle;
    p.clutter_level = o.clutter;
    p.seed = o.seed;
    p.borderline = o.borderline;
    p.validate();
    std::optional<std::size_t> nd;
    if (o.n_distended_opt->count()) {
        if (o.n_distended > o.n) throw ValidationError("--n-distended exceeds --n");
        nd = o.n_distended;
    }
    const auto m = phantom::generate_dataset(p, o.n, o.out, nd, o.raw);
    const auto& k = m.counts();
    c.out << json{{"images", k.n_total},
                  {"distended", k.n_distended},
                  {"non_distended", k.n_nondistended},
                  {"patients", k.n_patients}}
                 .dump()
          << '\n';
    return 0;
}

// ---- preprocess ----

struct PreprocessOpts {
    std::string in;
    std::string out;
    std::string report;
    int size = 256;
    double threshold = preprocess::FrameConfig{}.threshold;
    std::size_t min_size = preprocess::FrameConfig{}.min_size;
    int dilate = 15;
    int open = 31;
    bool no_compensate = false;
};

void add_preprocess(CLI::App& app, PreprocessOpts& o) {
    auto* s = app.add_subcommand("preprocess", "Crop the scan area out of raw device frames");
    s->add_option("--in", o.in, "PNG file or directory of PNGs")->required();
    s->add_option("--out", o.out, "Output directory for the cropped images")->required();
    s->add_option("--report", o.report, "JSON report of crop regions (default: OUT/report.json)");
    s->add_option("--size", o.size, "Resize crops to SIZE x SIZE; 0 keeps the crop size")
        ->check(CLI::Range(0, 4096));
    s->add_option("--threshold", o.threshold, "Gradient magnitude threshold")->check(CLI::NonNegativeNumber);
    s->add_option("--min-size", o.min_size, "Smallest connected component kept");
    s->add_option("--dilate", o.dilate, "Dilation kernel side")->check(CLI::PositiveNumber);
    s->add_option("--open", o.open, "Opening kernel side")->check(CLI::PositiveNumber);
    s->add_flag("--no-compensate", o.no_compensate, "Do not erode back the dilation margin");
}

int run_preprocess(const Context& c, const PreprocessOpts& o) {
    require_exists(o.in, "--in");
    preprocess::FrameConfig fc;
    fc.threshold = o.threshold;
    fc.min_size = o.min_size;
    fc.dilate_kernel = {preprocess::KernelShape::Rect, o.dilate, o.dilate};
    fc.open_kernel = {preprocess::KernelShape::Rect, o.open, o.open};
    fc.compensate_dilation = !o.no_compensate;
    if (o.size > 0) fc.resize_to = o.size;

    std::vector<fs::path> files;
    if (fs::is_directory(o.in)) {
        for (const auto& e : fs::directory_iterator(o.in))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(o.in);
    }
    if (files.empty()) throw ValidationError("--in: no PNG files in " + o.in);

    make_dirs(o.out);
    json report = json::object();
    std::size_t failed = 0;
    for (const auto& f : files) {
        const auto name = f.filename().string();
        const GrayImage raw = load_png(f);
        try {
            const auto ex = preprocess::extract_scan_frame(raw, fc);
            save_png(fs::path(o.out) / name, ex.image);
            report[name] = {{"crop_box", box_to_json(ex.region.box)},
                            {"source_size", {raw.width(), raw.height()}},
                            {"output_size", {ex.image.width(), ex.image.height()}}};
        } catch (const NoFrameFound& e) {
            ++failed;
            report[name] = {{"error", e.what()}};
            c.log(name + ": " + e.what());
        }
    }
    const fs::path report_path = o.report.empty() ? fs::path(o.out) / "report.json" : fs::path(o.report);
    make_dirs(report_path.parent_path());
    write_json(report_path, report);
    c.out << json{{"processed", files.size() - failed}, {"failed", failed}}.dump() << '\n';
    if (failed > 0)
        throw NoFrameFound(std::to_string(failed) + " of " + std::to_string(files.size()) +
                           " images had no detectable scan frame");
    return 0;
}

// ---- split ----

struct SplitOpts {
    std::string manifest;
    int k = 5;
    std::uint64_t seed = 0;
    std::string out;
};

void add_split(CLI::App& app, SplitOpts& o) {
    auto* s = app.add_subcommand("split", "Patient-grouped k-fold split of a manifest");
    s->add_option("--manifest", o.manifest, "Manifest (JSON lines)")->required();
    s->add_option("--k", o.k, "Number of folds")->check(CLI::Range(2, 1000));
    s->add_option("--seed", o.seed, "Random seed");
    s->add_option("--out", o.out, "Output folds file")->required();
}

int run_split(const Context& c, const SplitOpts& o) {
    require_exists(o.manifest, "--manifest");
    const auto m = dataset::load_manifest(o.manifest);
    const auto folds = dataset::grouped_kfold(m, o.k, o.seed);
    make_dirs(fs::path(o.out).parent_path());
    write_json(o.out, dataset::folds_to_json(folds));
    for (const auto& f : folds) c.out << "fold " << f.fold_index << ": " << f.test_ids.size() << " test images\n";
    return 0;
}

// ---- shared run configuration ----

struct RunOpts {
    std::string mode;
    std::string config;
    std::string manifest;
    std::string folds;
    std::string out;
    std::uint64_t seed = 0;
    int max_epochs = 0;
    int patience = 0;
    bool dump_config = false;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* max_epochs_opt = nullptr;
    CLI::Option* patience_opt = nullptr;
};

void add_run_options(CLI::App* s, RunOpts& o, bool out_required) {
    s->add_option("--mode", o.mode, "detection or multitask")
        ->check(CLI::IsMember({"detection", "multitask", "DetectionTwoClass", "MultiTask"}));
    s->add_option("--config", o.config, "JSON run configuration");
    s->add_option("--manifest", o.manifest, "Manifest (JSON lines)");
    s->add_option("--folds", o.folds, "Folds file from `split` (computed when absent)");
    auto* out = s->add_option("--out", o.out, "Output location");
    if (out_required) out->required();
    o.seed_opt = s->add_option("--seed", o.seed, "Training seed");
    o.max_epochs_opt = s->add_option("--max-epochs", o.max_epochs, "Override max_epochs")->check(CLI::PositiveNumber);
    o.patience_opt = s->add_option("--patience", o.patience, "Override patience")->check(CLI::PositiveNumber);
    s->add_flag("--dump-config", o.dump_config, "Print the effective configuration as JSON and exit");
}

RunConfig effective_config(const Context& c, const RunOpts& o) {
    json file;
    std::optional<model::Mode> mode;
    if (!o.mode.empty()) mode = model::parse_mode(o.mode);
    if (!o.config.empty()) {
        require_exists(o.config, "--config");
        file = read_json(o.config);
        if (!file.is_object()) throw ValidationError("--config must hold a JSON object");
        if (file.contains("model") && file["model"].is_object() && file["model"].contains("mode")) {
            if (!file["model"]["mode"].is_string()) throw ValidationError("model.mode must be a string");
            const auto file_mode = model::parse_mode(file["model"]["mode"].get<std::string>());
            if (mode && *mode != file_mode)
                throw ValidationError("--mode " + o.mode + " conflicts with the config's mode " +
                                      std::string(model::to_string(file_mode)));
            mode = file_mode;
        }
    }
    if (!mode) throw ValidationError("--mode is required (or a config with model.mode)");
    RunConfig cfg = RunConfig::defaults(*mode);
    if (!file.is_null()) cfg = run_config_from_json(file, cfg);
    if (!o.manifest.empty()) cfg.paths.manifest = o.manifest;
    if (!o.folds.empty()) cfg.paths.folds = o.folds;
    if (!o.out.empty()) cfg.paths.out = o.out;
    if (o.seed_opt->count()) cfg.train.seed = o.seed;
    if (o.max_epochs_opt->count()) {
        cfg.train.max_epochs = o.max_epochs;
        cfg.train.patience = std::min(cfg.train.patience, o.max_epochs);
    }
    if (o.patience_opt->count()) cfg.train.patience = o.patience;
    if (c.threads > 0) cfg.train.threads = c.threads;
    cfg.validate();
    return cfg;
}

// ---- train ----

struct TrainOpts {
    RunOpts run;
    std::string fold = "0";
};

void add_train(CLI::App& app, TrainOpts& o) {
    auto* s = app.add_subcommand("train", "Train on one fold (or all folds) and evaluate on the test split");
    add_run_options(s, o.run, false);
    s->add_option("--fold", o.fold, "Fold index, or `all` for full cross-validation");
}

int run_train(const Context& c, const TrainOpts& o) {
    const RunConfig cfg = effective_config(c, o.run);
    if (o.run.dump_config) {
        c.out << to_json(cfg).dump(2) << '\n';
        return 0;
    }
    if (cfg.paths.out.empty()) throw ValidationError("--out is required");
    require_exists(cfg.paths.manifest, "--manifest");
    if (!cfg.paths.folds.empty()) require_exists(cfg.paths.folds, "--folds");
    cfg.check_paths();

    const bool all = o.fold == "all";
    int fold_index = 0;
    if (!all) {
        try {
            std::size_t used = 0;
            fold_index = std::stoi(o.fold, &used);
            if (used != o.fold.size()) throw std::invalid_argument(o.fold);
        } catch (const std::logic_error&) {
            throw ValidationError("--fold must be an integer or `all`");
        }
    }

    const Data data = load_data(cfg.paths.manifest, cfg.model);
    training::CvOptions opts;
    opts.k = cfg.k;
    opts.train_ratio = cfg.train_ratio;
    opts.split_seed = cfg.split_seed;
    opts.folds = get_folds(cfg.paths.folds, data.manifest, cfg.k, cfg.split_seed);
    if (!all) {
        (void)fold_at(*opts.folds, fold_index);
        opts.only_folds = {fold_index};
    }

    const fs::path out = cfg.paths.out;
    make_dirs(out);
    write_json(out / "config.json", to_json(cfg));
    auto dir_of = [&](int fold) { return all ? out / ("fold_" + std::to_string(fold)) : out; };

    std::map<int, std::unique_ptr<JsonlWriter>> histories;
    opts.on_epoch = [&](int fold, const training::EpochRecord& r) {
        auto& w = histories[fold];
        if (!w) {
            make_dirs(dir_of(fold));
            w = std::make_unique<JsonlWriter>(dir_of(fold) / "history.jsonl", false);
        }
        w->write(training::to_json(r));
        log_epoch(c, fold, r);
    };
    opts.on_fold = [&](const training::FoldResult& fr) {
        const auto dir = dir_of(fr.fold_index);
        make_dirs(dir);
        const json extra{{"fold", fr.fold_index},
                         {"best_epoch", fr.training.best_epoch},
                         {"best_val_fitness", fr.training.best_fitness},
                         {"w_pos", fr.w_pos}};
        model::save_checkpoint(*fr.network, dir / "best.ckpt", extra);
        json rep = metrics::to_json(fr.test_report);
        write_json(dir / "report.json", rep);
        c.log(fmt("fold %d done: best epoch %d, test BA %.3f, IoU %.3f", fr.fold_index, fr.training.best_epoch,
                  fr.test_report.balanced_accuracy, fr.test_report.mean_iou));
    };

    const auto cv = training::cross_validate(data.manifest, data.samples, cfg.model, cfg.train, opts);

    const std::string name = approach_name(cfg.model.mode);
    if (all) {
        json folds = json::array();
        for (const auto& fr : cv.folds)
            folds.push_back({{"fold", fr.fold_index},
                             {"best_epoch", fr.training.best_epoch},
                             {"epochs_run", fr.training.epochs_run},
                             {"w_pos", fr.w_pos},
                             {"test", metrics::to_json(fr.test_report, false)}});
        write_json(out / "summary.json",
                   {{"mode", std::string(model::to_string(cfg.model.mode))},
                    {"summary", metrics::to_json(cv.summary)},
                    {"folds", folds}});
        const std::string table = metrics::render_table({{name, cv.summary}}) + "\n" +
                                  metrics::render_confusion(name + " (summed over folds)", cv.summary.confusion);
        write_text(out / "table.txt", table);
        c.out << table;
    } else {
        const auto& fr = cv.folds.front();
        c.out << report_text(name + ", fold " + std::to_string(fr.fold_index) + " test split", fr.test_report);
    }
    return 0;
}

// ---- eval ----

struct EvalOpts {
    std::string checkpoint;
    std::string manifest;
    std::string folds;
    int fold = 0;
    std::string split = "test";
    int k = 5;
    std::uint64_t split_seed = 0;
    double train_ratio = 0.8;
    double conf_threshold = training::TrainConfig{}.conf_threshold;
    std::string out;
};

void add_eval(CLI::App& app, EvalOpts& o) {
    auto* s = app.add_subcommand("eval", "Evaluate a checkpoint on a split of a manifest");
    s->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
    s->add_option("--manifest", o.manifest, "Manifest (JSON lines)")->required();
    s->add_option("--folds", o.folds, "Folds file from `split` (computed when absent)");
    s->add_option("--fold", o.fold, "Fold index");
    s->add_option("--split", o.split, "Which images: test, val, train or all")
        ->check(CLI::IsMember({"test", "val", "train", "all"}));
    s->add_option("--k", o.k, "Folds to compute when --folds is absent")->check(CLI::Range(2, 1000));
    s->add_option("--split-seed", o.split_seed, "Seed for computed folds and the train/val carve-out");
    s->add_option("--train-ratio", o.train_ratio, "Train share of the non-test images")->check(CLI::Range(0.0, 1.0));
    s->add_option("--conf-threshold", o.conf_threshold, "Minimum detection confidence")->check(CLI::Range(0.0, 1.0));
    s->add_option("--out", o.out, "Write the full report (with per-image results) here");
}

int run_eval(const Context& c, const EvalOpts& o) {
    require_exists(o.checkpoint, "--checkpoint");
    require_exists(o.manifest, "--manifest");
    if (!o.folds.empty()) require_exists(o.folds, "--folds");
    const auto ck = model::load_checkpoint(o.checkpoint);
    const Data data = load_data(o.manifest, ck.network.config());

    std::vector<dataset::Sample> chosen;
    if (o.split == "all") {
        chosen = data.samples;
    } else {
        const auto folds = get_folds(o.folds, data.manifest, o.k, o.split_seed);
        const auto split = dataset::train_val_split(fold_at(folds, o.fold), data.manifest, o.train_ratio, o.split_seed);
        const auto& ids = o.split == "test" ? split.test_ids : o.split == "val" ? split.val_ids : split.train_ids;
        chosen = dataset::select(data.samples, data.manifest, ids);
    }
    const auto rep = training::evaluate(ck.network, chosen, o.conf_threshold, c.threads);
    if (!o.out.empty()) {
        make_dirs(fs::path(o.out).parent_path());
        write_json(o.out, metrics::to_json(rep));
    }
    c.out << report_text(approach_name(ck.network.config().mode) + ", " + o.split + " split (" +
                             std::to_string(chosen.size()) + " images)",
                         rep);
    return 0;
}

// ---- evolve ----

struct EvolveOpts {
    RunOpts run;
    int generations = 300;
    int fold = 0;
    bool resume = false;
    int budget_epochs = 0;
    bool from_reference = false;
    std::uint64_t evolve_seed = 0;
};

void add_evolve(CLI::App& app, EvolveOpts& o) {
    auto* s = app.add_subcommand("evolve", "Mutation-only evolutionary hyperparameter search on one fold");
    add_run_options(s, o.run, false);
    s->add_option("--generations", o.generations, "Generations after the initial one")->check(CLI::NonNegativeNumber);
    s->add_option("--fold", o.fold, "Fold whose validation split scores each genome");
    s->add_flag("--resume", o.resume, "Continue from the records already in --out");
    s->add_option("--budget-epochs", o.budget_epochs, "Cap on epochs per fitness evaluation")
        ->check(CLI::PositiveNumber);
    s->add_flag("--from-reference", o.from_reference,
                "Start from the reference genome instead of the configured settings");
    s->add_option("--evolve-seed", o.evolve_seed, "Seed of the mutation and selection draws");
}

int run_evolve(const Context& c, const EvolveOpts& o) {
    const RunConfig cfg = effective_config(c, o.run);
    if (o.run.dump_config) {
        c.out << to_json(cfg).dump(2) << '\n';
        return 0;
    }
    const fs::path out = cfg.paths.out.empty() ? fs::path("evolve.jsonl") : fs::path(cfg.paths.out);
    require_exists(cfg.paths.manifest, "--manifest");
    if (!cfg.paths.folds.empty()) require_exists(cfg.paths.folds, "--folds");

    const evolve::HyperParams initial = o.from_reference ? evolve::HyperParams::reference(cfg.model.mode)
                                                         : evolve::HyperParams::from_settings(cfg.train, cfg.model);
    std::vector<evolve::GenerationRecord> resume;
    if (o.resume && fs::exists(out)) resume = evolve::load_history(out, initial);
    if (!resume.empty() && !(resume.front().genome == initial))
        throw ValidationError("--resume: generation 0 in " + out.string() + " does not match the initial genome");

    const Data data = load_data(cfg.paths.manifest, cfg.model);
    const auto folds = get_folds(cfg.paths.folds, data.manifest, cfg.k, cfg.split_seed);
    const auto split = dataset::train_val_split(fold_at(folds, o.fold), data.manifest, cfg.train_ratio, cfg.split_seed);
    const auto train_set = dataset::select(data.samples, data.manifest, split.train_ids);
    const auto val_set = dataset::select(data.samples, data.manifest, split.val_ids);
    const double w_pos = dataset::class_weight(split.train_ids, data.manifest);

    auto fitness = [&](const evolve::HyperParams& h) {
        training::TrainConfig t = cfg.train;
        model::ModelConfig m = cfg.model;
        h.apply(t, m);
        t.w_pos = w_pos;
        if (o.budget_epochs > 0) {
            t.max_epochs = std::min(t.max_epochs, o.budget_epochs);
            t.patience = std::min(t.patience, t.max_epochs);
        }
        t.seed = Rng::mix(cfg.train.seed, static_cast<std::uint64_t>(o.fold));
        model::Network<float> net(m, t.seed);
        return training::train(net, train_set, val_set, t).best_fitness;
    };

    make_dirs(out.parent_path());
    // Without --resume a fresh run replaces whatever was there.
    JsonlWriter writer(out, o.resume);
    const auto res = evolve::evolve(fitness, initial, o.generations, o.evolve_seed, resume,
                                    [&](const evolve::GenerationRecord& r) {
                                        writer.write(evolve::to_json(r));
                                        c.log(fmt("generation %d fitness %.4f", r.generation, r.fitness));
                                    });
    json genome = json::object();
    for (const auto& g : res.best.genes) genome[g.name] = g.value;
    c.out << json{{"best_generation", res.best_generation}, {"best_fitness", res.best_fitness}, {"genome", genome}}
                 .dump()
          << '\n';
    return 0;
}

// ---- infer ----

struct InferOpts {
    std::string checkpoint;
    std::string compare;
    std::string image;
    std::string gt;
    std::string out;
    double conf_threshold = training::TrainConfig{}.conf_threshold;
    bool crop = false;
};

void add_infer(CLI::App& app, InferOpts& o) {
    auto* s = app.add_subcommand("infer", "Locate and classify the recess in one image and draw an overlay");
    s->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
    s->add_option("--compare", o.compare, "Second checkpoint (other mode) drawn on the same overlay");
    s->add_option("--image", o.image, "Input PNG")->required();
    s->add_option("--gt", o.gt, "Ground-truth box x_min,y_min,x_max,y_max");
    s->add_option("--out", o.out, "Overlay PNG")->required();
    s->add_option("--conf-threshold", o.conf_threshold, "Minimum detection confidence")->check(CLI::Range(0.0, 1.0));
    s->add_flag("--crop", o.crop, "Crop the scan frame out of a raw device image first");
}

int run_infer(const Context& c, const InferOpts& o) {
    require_exists(o.checkpoint, "--checkpoint");
    require_exists(o.image, "--image");
    if (!o.compare.empty()) require_exists(o.compare, "--compare");
    std::optional<BBox> gt;
    if (!o.gt.empty()) gt = parse_box(o.gt);

    std::vector<model::LoadedCheckpoint> nets;
    nets.push_back(model::load_checkpoint(o.checkpoint));
    if (!o.compare.empty()) nets.push_back(model::load_checkpoint(o.compare));

    GrayImage image = load_png(o.image);
    if (o.crop) {
        preprocess::FrameConfig fc;
        fc.resize_to = nets.front().network.config().input_size;
        image = preprocess::extract_scan_frame(image, fc).image;
    }

    std::vector<overlay::Item> items;
    json preds = json::array();
    for (std::size_t i = 0; i < nets.size(); ++i) {
        const auto& net = nets[i].network;
        const auto p = training::predict_image(net, image, o.conf_threshold);
        if (!p.top) throw NoDetection();
        const bool mt = net.config().mode == model::Mode::MultiTask;
        LabeledBox shown = *p.top;
        shown.label = p.label;
        items.push_back({shown, mt ? overlay::Source::MultiTask : overlay::Source::Detection});
        json j{{"checkpoint", i == 0 ? o.checkpoint : o.compare},
               {"mode", std::string(model::to_string(net.config().mode))},
               {"label", std::string(to_string(p.label))},
               {"confidence", p.top->confidence},
               {"box", box_to_json(p.top->box)}};
        if (p.probs) j["p_distended"] = (*p.probs)[1];
        if (gt) j["iou"] = iou(p.top->box, *gt);
        preds.push_back(j);
    }
    make_dirs(fs::path(o.out).parent_path());
    save_png(o.out, overlay::render_overlay(image, items, gt));
    c.out << json{{"image", o.image}, {"predictions", preds}}.dump() << '\n';
    return 0;
}

// ---- errors ----

template <typename T>
bool is_a(const std::exception& e) {
    return dynamic_cast<const T*>(&e) != nullptr;
}

std::string kind_of(const std::exception& e) {
    if (is_a<ParseError>(e)) return "ParseError";
    if (is_a<ValidationError>(e)) return "ValidationError";
    if (is_a<ShapeError>(e)) return "ShapeError";
    if (is_a<ModeError>(e)) return "ModeError";
    if (is_a<LengthMismatch>(e)) return "LengthMismatch";
    if (is_a<TooFewPatients>(e)) return "TooFewPatients";
    if (is_a<NoPositiveSamples>(e)) return "NoPositiveSamples";
    if (is_a<NoFrameFound>(e)) return "NoFrameFound";
    if (is_a<NoDetection>(e)) return "NoDetection";
    if (is_a<UndefinedMetric>(e)) return "UndefinedMetric";
    if (is_a<EmptySet>(e)) return "EmptySet";
    if (is_a<EmptyHistory>(e)) return "EmptyHistory";
    if (is_a<NonFiniteLoss>(e)) return "NonFiniteLoss";
    if (is_a<IoError>(e)) return "IoError";
    if (is_a<UserError>(e)) return "UserError";
    if (is_a<Error>(e)) return "Error";
    return "InternalError";
}

int fail(const Context& c, bool json_errors, const std::string& kind, const std::string& message, int code) {
    c.err << "error: " << message << '\n';
    if (json_errors)
        c.err << json{{"error", {{"type", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
    return code;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Context ctx{out, err};
    const bool json_errors = std::find(args.begin(), args.end(), "--json-errors") != args.end();

    CLI::App app{"Knee subquadricipital recess detection and distension classification in ultrasound images",
                 "recess-cad"};
    app.require_subcommand(1);
    app.footer("Environment: RECESS_CAD_THREADS caps worker threads when --threads is not given.");
    bool json_flag = false;
    app.add_flag("--json-errors", json_flag, "Append a machine-readable JSON line to error output");
    app.add_flag("--quiet", ctx.quiet, "No progress output");
    app.add_option("--threads", ctx.threads, "Worker threads (0: RECESS_CAD_THREADS or all cores)")
        ->check(CLI::NonNegativeNumber);

    SynthOpts synth;
    PreprocessOpts pre;
    SplitOpts split;
    TrainOpts train;
    EvalOpts eval;
    EvolveOpts evo;
    InferOpts infer;
    add_preprocess(app, pre);
    add_synth(app, synth);
    add_split(app, split);
    add_train(app, train);
    add_eval(app, eval);
    add_evolve(app, evo);
    add_infer(app, infer);

    // First word after the global options names the subcommand.
    std::size_t first = 0;
    while (first < args.size() && args[first].starts_with("-")) first += args[first] == "--threads" ? 2 : 1;
    if (first < args.size()) {
        const auto subs = app.get_subcommands([](CLI::App*) { return true; });
        if (std::none_of(subs.begin(), subs.end(), [&](CLI::App* a) { return a->get_name() == args[first]; })) {
            const int code = fail(ctx, json_errors, "UsageError", "unknown subcommand '" + args[first] + "'", 1);
            err << app.help();
            return code;
        }
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << (app.get_subcommands().empty() ? app.help("", CLI::AppFormatMode::All) : app.help());
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int code = fail(ctx, json_errors, "UsageError", e.what(), 1);
        err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().back()->help());
        return code;
    }

    try {
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "synth") return run_synth(ctx, synth);
        if (name == "preprocess") return run_preprocess(ctx, pre);
        if (name == "split") return run_split(ctx, split);
        if (name == "train") return run_train(ctx, train);
        if (name == "eval") return run_eval(ctx, eval);
        if (name == "evolve") return run_evolve(ctx, evo);
        if (name == "infer") return run_infer(ctx, infer);
        return fail(ctx, json_errors, "UsageError", "unknown subcommand " + name, 1);
    } catch (const UserError& e) {
        return fail(ctx, json_errors, kind_of(e), e.what(), 1);
    } catch (const std::exception& e) {
        return fail(ctx, json_errors, kind_of(e), e.what(), 2);
    }
}

}  // namespace recess::cli
