#include "deltascope/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

#include "deltascope/dataset.hpp"
#include "deltascope/evaluation.hpp"
#include "deltascope/raster_io.hpp"
#include "deltascope/rng.hpp"
#include "deltascope/scene_mapper.hpp"
#include "deltascope/trainer.hpp"

namespace deltascope {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code(ErrorCategory category) {
    switch (category) {
        case ErrorCategory::usage: return 2;
        case ErrorCategory::data: return 3;
        case ErrorCategory::numerical: return 4;
    }
    return 1;
}

const std::vector<std::string>& architecture_names() {
    static const std::vector<std::string> names{"EF-bce", "Siam-bce", "EF-wbced", "Siam-wbced", "EF-CNN"};
    return names;
}

std::pair<ModelKind, LossKind> parse_architecture_name(const std::string& name) {
    if (name == "EF-bce") return {ModelKind::ef_unet, LossKind::bce};
    if (name == "Siam-bce") return {ModelKind::siam_unet, LossKind::bce};
    if (name == "EF-wbced") return {ModelKind::ef_unet, LossKind::wbced};
    if (name == "Siam-wbced") return {ModelKind::siam_unet, LossKind::wbced};
    if (name == "EF-CNN") return {ModelKind::ef_cnn, LossKind::bce};
    std::string valid;
    for (const auto& n : architecture_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw UsageError("unknown model '" + name + "'; valid models: " + valid);
}

namespace {

std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write " + path.string());
}

void require_file(const fs::path& path, const std::string& what) {
    if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path.string());
}

json read_json(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

fs::path with_suffix(const fs::path& base, const std::string& suffix) { return fs::path(base.string() + suffix); }

std::size_t default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------

struct BuildOptions {
    fs::path scenes, out;
    std::size_t crop = 128, crops = 500, k = 5, jobs = 1;
    double ratio = 0.1;
    std::uint64_t seed = 0;
};

/// Scene list: {"scenes": [{"id", "pre", "post", "gt"}]}, paths relative to the list.
std::vector<ScenePair> load_scene_list(const fs::path& list, std::vector<fs::path>& inputs) {
    const json j = read_json(list);
    if (!j.contains("scenes") || !j["scenes"].is_array()) throw FormatError(list.string() + ": missing scenes array");
    std::vector<ScenePair> scenes;
    for (const json& entry : j["scenes"]) {
        ScenePair s;
        s.region_id = entry.at("id").get<std::string>();
        fs::path paths[3];
        const char* keys[3] = {"pre", "post", "gt"};
        for (int i = 0; i < 3; ++i) {
            paths[i] = list.parent_path() / entry.at(keys[i]).get<std::string>();
            require_file(paths[i], "scene file");
            inputs.push_back(paths[i]);
        }
        s.pre = load_raster(paths[0]);
        s.post = load_raster(paths[1]);
        const ChangeMap gt = load_change_map(paths[2], ChangeMapKind::binary);
        s.gt = Plane{gt.width, gt.height, gt.values};
        scenes.push_back(std::move(s));
    }
    return scenes;
}

int cmd_build_dataset(const BuildOptions& o, std::ostream& out) {
    require_file(o.scenes, "scene list");
    RunManifest manifest{"build-dataset", {}, o.seed, {o.scenes}, {}};
    const std::vector<ScenePair> scenes = load_scene_list(o.scenes, manifest.inputs);

    PatchExtractionConfig cfg{o.crop, o.crops, o.ratio, o.seed};
    cfg.validate();
    const Dataset dataset = build_dataset(scenes, cfg, o.jobs);
    write_dataset(dataset, o.out);
    const FoldAssignment folds = kfold_split(dataset.samples.size(), o.k, o.seed);
    write_folds(folds, o.seed, o.out / "folds.json");

    manifest.config = {{"crop_size", o.crop}, {"crops_per_region", o.crops}, {"ratio_threshold", o.ratio},
                       {"k", o.k}};
    manifest.outputs = {o.out / "manifest.json", o.out / "patches", o.out / "folds.json"};
    manifest.write(o.out / "run_manifest.json");
    out << dataset.samples.size() << " samples from " << scenes.size() << " scenes in " << o.k << " folds\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
    fs::path dataset, folds, out;
    std::string model;
    std::optional<std::string> loss;
    std::optional<double> threshold;
    std::string weighting = "inverse";
    std::size_t k = 5, epochs = 50, batch = 8, depth = 4, width = 16, jobs = 1;
    double lr = 1e-3, dropout = 0.2;
    std::uint64_t seed = 0;
};

FoldAssignment load_or_split(const fs::path& folds_path, std::size_t n, std::size_t k, std::uint64_t seed,
                             std::vector<fs::path>& inputs) {
    if (folds_path.empty()) return kfold_split(n, k, seed);
    require_file(folds_path, "fold assignment");
    inputs.push_back(folds_path);
    FoldAssignment folds = read_folds(folds_path);
    if (folds.fold_of.size() != n) {
        throw ValidationError(folds_path.string() + " assigns " + std::to_string(folds.fold_of.size()) +
                              " samples, dataset has " + std::to_string(n));
    }
    return folds;
}

int cmd_train(const TrainOptions& o, std::ostream& out) {
    auto [kind, loss] = parse_architecture_name(o.model);
    if (o.loss) loss = parse_loss_kind(*o.loss);
    if (kind == ModelKind::ef_cnn && loss != LossKind::bce) {
        throw ConfigError("EF-CNN is trained with the bce loss only");
    }
    if (o.weighting != "inverse" && o.weighting != "uniform") {
        throw UsageError("--weighting must be inverse or uniform");
    }
    require_file(o.dataset, "dataset manifest");
    RunManifest manifest{"train", {}, o.seed, {o.dataset}, {}};
    const Dataset dataset = read_dataset(o.dataset);
    const FoldAssignment folds = load_or_split(o.folds, dataset.samples.size(), o.k, o.seed, manifest.inputs);

    TrainConfig cfg;
    cfg.model.kind = kind;
    cfg.model.depth = o.depth;
    cfg.model.base_width = o.width;
    cfg.model.dropout_rate = o.dropout;
    cfg.model.patch_size = dataset.config.crop_size;
    cfg.model.input_channels = dataset.bands.size();
    cfg.loss = loss;
    cfg.weighting = o.weighting == "uniform" ? ClassWeighting::uniform : ClassWeighting::inverse_population;
    cfg.k = folds.k;
    cfg.epochs = o.epochs;
    cfg.batch_size = o.batch;
    cfg.learning_rate = o.lr;
    cfg.seed = o.seed;
    cfg.threshold = o.threshold;
    cfg.validate();

    const CrossValidationResult cv = cross_validate(dataset, folds, cfg, o.jobs);
    const std::string name = architecture_loss_name(kind, loss);
    const std::string hash = config_hash(cfg);
    json per_fold = json::array();
    for (std::size_t f = 0; f < cv.folds.size(); ++f) {
        const fs::path base = o.out / (name + "_fold" + std::to_string(f));
        save_checkpoint(cv.folds[f].training.model, {name, hash, f, cfg.epochs, cv.threshold}, base);
        write_text(with_suffix(base, "_history.csv"), history_csv(cv.folds[f].training.history));
        manifest.outputs.insert(manifest.outputs.end(), {with_suffix(base, ".json"), with_suffix(base, ".bin"),
                                                         with_suffix(base, "_history.csv")});
        per_fold.push_back({{"fold", f}, {"metrics", to_json(cv.reports[f])}});
    }
    const json summary = {{"model", name},        {"config", to_json(cfg)},  {"config_hash", hash},
                          {"threshold", cv.threshold}, {"folds", per_fold}, {"summary", to_json(cv.summary)}};
    write_text(o.out / "summary.json", summary.dump(2) + "\n");
    manifest.outputs.push_back(o.out / "summary.json");
    manifest.config = to_json(cfg);
    manifest.write(o.out / "run_manifest.json");
    out << name << ": " << cv.folds.size() << " folds, threshold " << cv.threshold << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalOptions {
    fs::path dataset, folds, out;
    std::vector<fs::path> checkpoints;
    double threshold = 0.3;
    std::size_t batch = 8;
};

// Held-out indices for a checkpoint: its fold's members, or every sample without folds.
std::vector<std::size_t> held_out(const std::optional<FoldAssignment>& folds, std::size_t fold, std::size_t n) {
    if (!folds) {
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        return all;
    }
    if (fold >= folds->k) throw ValidationError("checkpoint fold " + std::to_string(fold) + " is not in the fold file");
    return folds->members(fold);
}

struct EvalInputs {
    Dataset dataset;
    std::optional<FoldAssignment> folds;
    std::vector<LoadedCheckpoint> models;
};

EvalInputs load_eval_inputs(const EvalOptions& o, RunManifest& manifest) {
    if (o.checkpoints.empty()) throw UsageError("at least one --checkpoint is required");
    for (const auto& c : o.checkpoints) require_file(c, "checkpoint");
    require_file(o.dataset, "dataset manifest");
    EvalInputs in;
    manifest.inputs.push_back(o.dataset);
    in.dataset = read_dataset(o.dataset);
    if (!o.folds.empty()) {
        require_file(o.folds, "fold assignment");
        manifest.inputs.push_back(o.folds);
        in.folds = read_folds(o.folds);
    }
    for (const auto& c : o.checkpoints) {
        manifest.inputs.push_back(c);
        manifest.inputs.push_back(with_suffix(fs::path(c).replace_extension(), ".bin"));
        in.models.push_back(load_checkpoint(c));
    }
    return in;
}

int cmd_evaluate(const EvalOptions& o, std::ostream& out) {
    RunManifest manifest{"evaluate", {{"threshold", o.threshold}}, 0, {}, {}};
    EvalInputs in = load_eval_inputs(o, manifest);
    json per_fold = json::array();
    std::vector<MetricsReport> reports;
    for (std::size_t i = 0; i < in.models.size(); ++i) {
        LoadedCheckpoint& ck = in.models[i];
        const auto idx = held_out(in.folds, ck.meta.fold, in.dataset.samples.size());
        reports.push_back(evaluate_sweep(ck.model, in.dataset, idx, {o.threshold}, o.batch).front());
        per_fold.push_back({{"checkpoint", o.checkpoints[i].string()}, {"fold", ck.meta.fold},
                            {"metrics", to_json(reports.back())}});
    }
    json result = {{"threshold", o.threshold}, {"folds", per_fold}};
    if (reports.size() >= 2) result["summary"] = to_json(cross_fold_summary(reports));
    write_text(o.out, result.dump(2) + "\n");
    manifest.outputs = {o.out};
    manifest.write(with_suffix(o.out, ".manifest.json"));
    out << "evaluated " << reports.size() << " checkpoint(s) at threshold " << o.threshold << "\n";
    return 0;
}

int cmd_roc(const EvalOptions& o, std::ostream& out) {
    RunManifest manifest{"roc", {}, 0, {}, {}};
    EvalInputs in = load_eval_inputs(o, manifest);
    for (std::size_t i = 0; i < in.models.size(); ++i) {
        LoadedCheckpoint& ck = in.models[i];
        const auto idx = held_out(in.folds, ck.meta.fold, in.dataset.samples.size());
        const ScoredSamples s = collect_scores(ck.model, in.dataset, idx, o.batch);
        const RocCurve curve = roc_curve(s.scores, s.labels);
        const fs::path csv = o.out / (fs::path(o.checkpoints[i]).stem().string() + "_roc.csv");
        write_text(csv, roc_to_csv(curve));
        manifest.outputs.push_back(csv);
        out << csv.string() << ": auc " << curve.auc << "\n";
    }
    manifest.write(o.out / "roc_manifest.json");
    return 0;
}

// ---------------------------------------------------------------------------

struct PredictOptions {
    fs::path checkpoint, pre, post, out;
    double threshold = 0.3;
    std::size_t jobs = 1;
};

int cmd_predict(const PredictOptions& o, std::ostream& out) {
    for (const auto& p : {o.checkpoint, o.pre, o.post}) require_file(p, "input");
    RunManifest manifest{"predict", {{"threshold", o.threshold}}, 0, {o.checkpoint, o.pre, o.post}, {}};
    LoadedCheckpoint ck = load_checkpoint(o.checkpoint);
    const MultibandRaster pre = load_raster(o.pre), post = load_raster(o.post);
    const ChangeMap map = predict_scene(ck.model, pre, post, o.jobs);
    if (ck.model.spec().segmentation()) {
        const ChangeMapFiles prob = save_change_map(map, with_suffix(o.out, "_probability"));
        const ChangeMapFiles bin = save_change_map(binarize(map, o.threshold), with_suffix(o.out, "_binary"));
        manifest.outputs = {prob.pgm, *prob.sidecar, with_suffix(o.out, "_probability.f32"), bin.pgm};
    } else {
        manifest.outputs = {save_change_map(map, with_suffix(o.out, "_coarse")).pgm};
    }
    manifest.write(with_suffix(o.out, "_manifest.json"));
    out << "wrote " << manifest.outputs.front().string() << "\n";
    return 0;
}

struct FilterOptions {
    fs::path map, reference, out;
    double threshold = 0.3;
    std::size_t min_area = 16;
};

int cmd_filter(const FilterOptions& o, std::ostream& out) {
    require_file(o.map, "change map");
    RunManifest manifest{"filter", {{"threshold", o.threshold}, {"min_area", o.min_area}}, 0, {o.map}, {}};
    const ChangeMap input = load_change_map(o.map, ChangeMapKind::probabilistic);
    const ComponentLabeling all = label_components(binarize(input, o.threshold));
    const ChangeMap kept = min_area_filter(all, o.min_area);
    const ComponentLabeling components = label_components(kept);
    manifest.outputs.push_back(save_change_map(kept, o.out).pgm);
    write_text(with_suffix(o.out, "_components.json"), components_json(components).dump(2) + "\n");
    manifest.outputs.push_back(with_suffix(o.out, "_components.json"));
    if (!o.reference.empty()) {
        require_file(o.reference, "reference map");
        manifest.inputs.push_back(o.reference);
        const ChangeMap truth = load_change_map(o.reference, ChangeMapKind::binary);
        const ConfusionCounts counts = detect_changes_report(kept, truth);
        json report = to_json(component_metrics(counts));
        report["counts"].erase("tn");
        write_text(with_suffix(o.out, "_report.json"), report.dump(2) + "\n");
        manifest.outputs.push_back(with_suffix(o.out, "_report.json"));
    }
    manifest.write(with_suffix(o.out, "_manifest.json"));
    out << components.count() << " of " << all.count() << " components kept\n";
    return 0;
}

}  // namespace

std::string file_hash(const fs::path& path) { return hex16(fnv1a64(read_text(path))); }

json RunManifest::to_json() const {
    json in = json::array();
    for (const auto& p : inputs) {
        in.push_back({{"path", p.generic_string()}, {"fnv1a64", fs::is_regular_file(p) ? file_hash(p) : ""}});
    }
    json outs = json::array();
    for (const auto& p : outputs) outs.push_back(p.generic_string());
    return {{"command", command}, {"config", config},  {"seed", seed},
            {"inputs", in},       {"outputs", outs}, {"tool_version", kToolVersion}};
}

void RunManifest::write(const fs::path& path) const { write_text(path, to_json().dump(2) + "\n"); }

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Bitemporal Sentinel-2 change detection", "deltascope"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    std::uint64_t seed = 0;
    std::size_t jobs = default_jobs();
    const auto add_seed = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Random seed")->envname("DELTASCOPE_SEED");
    };
    const auto add_jobs = [&](CLI::App* sub) {
        sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    };

    BuildOptions build;
    auto* b = app.add_subcommand("build-dataset", "Extract augmented patch pairs and fold assignments");
    b->add_option("--scenes", build.scenes, "Scene list JSON")->required();
    b->add_option("--out", build.out, "Output directory")->required();
    b->add_option("--crop-size", build.crop, "Patch side in pixels")->capture_default_str();
    b->add_option("--crops", build.crops, "Random crops per region")->capture_default_str();
    b->add_option("--ratio-threshold", build.ratio, "Change ratio above which all six transforms are kept")
        ->capture_default_str();
    b->add_option("--kfold", build.k, "Number of folds")->capture_default_str();
    add_seed(b);
    add_jobs(b);

    TrainOptions train;
    auto* t = app.add_subcommand("train", "Cross-validate one architecture");
    t->add_option("--dataset", train.dataset, "Dataset manifest.json")->required();
    t->add_option("--folds", train.folds, "Fold assignment JSON (default: split with --k)");
    t->add_option("--model", train.model, "EF-bce, Siam-bce, EF-wbced, Siam-wbced or EF-CNN")->required();
    t->add_option("--loss", train.loss, "Override the loss named by --model (bce or wbced)");
    t->add_option("--out", train.out, "Output directory")->required();
    t->add_option("--k", train.k, "Folds when no fold file is given")->capture_default_str();
    t->add_option("--epochs", train.epochs)->capture_default_str();
    t->add_option("--batch-size", train.batch)->capture_default_str();
    t->add_option("--lr", train.lr, "Learning rate")->capture_default_str();
    t->add_option("--depth", train.depth, "Encoder levels")->capture_default_str();
    t->add_option("--base-width", train.width, "Kernels in the first level")->capture_default_str();
    t->add_option("--dropout", train.dropout)->capture_default_str();
    t->add_option("--weighting", train.weighting, "Class weights: inverse or uniform")->capture_default_str();
    t->add_option("--threshold", train.threshold, "Fixed threshold instead of the recall working point");
    add_seed(t);
    add_jobs(t);

    EvalOptions eval;
    auto* e = app.add_subcommand("evaluate", "Metrics of checkpoints on their held-out folds");
    auto* r = app.add_subcommand("roc", "ROC curves of checkpoints on their held-out folds");
    for (auto* sub : {e, r}) {
        sub->add_option("--checkpoint", eval.checkpoints, "Checkpoint JSON (repeatable)")->required();
        sub->add_option("--dataset", eval.dataset, "Dataset manifest.json")->required();
        sub->add_option("--folds", eval.folds, "Fold assignment JSON (default: all samples)");
        sub->add_option("--batch-size", eval.batch)->capture_default_str();
    }
    e->add_option("--threshold", eval.threshold)->capture_default_str();
    e->add_option("--out", eval.out, "Metrics JSON")->required();
    r->add_option("--out", eval.out, "Output directory")->required();

    PredictOptions predict;
    auto* p = app.add_subcommand("predict", "Change map of a full scene pair");
    p->add_option("--checkpoint", predict.checkpoint)->required();
    p->add_option("--pre", predict.pre, "Pre-change raster header")->required();
    p->add_option("--post", predict.post, "Post-change raster header")->required();
    p->add_option("--out", predict.out, "Output path prefix")->required();
    p->add_option("--threshold", predict.threshold)->capture_default_str();
    add_jobs(p);

    FilterOptions filter;
    auto* f = app.add_subcommand("filter", "Minimum-area filter and component report");
    f->add_option("--map", filter.map, "Change map (.json sidecar or .pgm)")->required();
    f->add_option("--out", filter.out, "Output path prefix")->required();
    f->add_option("--threshold", filter.threshold)->capture_default_str();
    f->add_option("--min-area", filter.min_area, "Smallest component kept, in pixels")->capture_default_str();
    f->add_option("--reference", filter.reference, "Reference change map for a component-level report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*b) {
            build.seed = seed;
            build.jobs = jobs;
            return cmd_build_dataset(build, out);
        }
        if (*t) {
            train.seed = seed;
            train.jobs = jobs;
            return cmd_train(train, out);
        }
        if (*e) return cmd_evaluate(eval, out);
        if (*r) return cmd_roc(eval, out);
        if (*p) {
            predict.jobs = jobs;
            return cmd_predict(predict, out);
        }
        return cmd_filter(filter, out);
    } catch (const Error& ex) {
        err << "error: " << ex.what() << "\n";
        return exit_code(ex.category());
    } catch (const fs::filesystem_error& ex) {
        err << "error: " << ex.what() << "\n";
        return 3;
    } catch (const json::exception& ex) {
        err << "error: malformed input: " << ex.what() << "\n";
        return 3;
    }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"deltascope"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace deltascope
