#include "deltascope/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "deltascope/parallel.hpp"
#include "deltascope/rng.hpp"

namespace deltascope {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
    model.validate();
    if (k < 2) throw ConfigError("k-fold training needs k >= 2, got " + std::to_string(k));
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(learning_rate > 0.0 && std::isfinite(learning_rate))) {
        throw ConfigError("learning rate must be positive, got " + std::to_string(learning_rate));
    }
    if (!model.segmentation() && loss != LossKind::bce) {
        throw ConfigError("the classification model only supports the bce loss, got " +
                          std::string(loss_kind_name(loss)));
    }
    if (threshold_grid.empty()) throw ConfigError("threshold grid is empty");
    for (double t : threshold_grid) {
        if (!(t >= 0.0 && t < 1.0)) throw ConfigError("grid thresholds must lie in [0, 1)");
    }
    if (threshold && !(*threshold >= 0.0 && *threshold < 1.0)) {
        throw ConfigError("threshold must lie in [0, 1), got " + std::to_string(*threshold));
    }
}

json to_json(const TrainConfig& c) {
    return {{"model", to_json(c.model)},
            {"loss", loss_kind_name(c.loss)},
            {"weighting", c.weighting == ClassWeighting::uniform ? "uniform" : "inverse_population"},
            {"k", c.k},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"seed", c.seed},
            {"threshold_grid", c.threshold_grid},
            {"threshold", c.threshold ? json(*c.threshold) : json(nullptr)}};
}

TrainConfig train_config_from_json(const json& j) {
    try {
        TrainConfig c;
        c.model = model_spec_from_json(j.at("model"));
        c.loss = parse_loss_kind(j.at("loss").get<std::string>());
        const std::string weighting = j.value("weighting", "inverse_population");
        if (weighting == "uniform") {
            c.weighting = ClassWeighting::uniform;
        } else if (weighting != "inverse_population") {
            throw FormatError("unknown class weighting '" + weighting + "'");
        }
        c.k = j.at("k").get<std::size_t>();
        c.epochs = j.at("epochs").get<std::size_t>();
        c.batch_size = j.at("batch_size").get<std::size_t>();
        c.learning_rate = j.at("learning_rate").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.threshold_grid = j.at("threshold_grid").get<std::vector<double>>();
        if (j.contains("threshold") && !j.at("threshold").is_null()) c.threshold = j.at("threshold").get<double>();
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("training config: ") + e.what());
    }
}

std::string config_hash(const TrainConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(cfg).dump())));
    return buf;
}

std::string architecture_loss_name(ModelKind kind, LossKind loss) {
    switch (kind) {
        case ModelKind::ef_unet: return std::string("EF-") + loss_kind_name(loss);
        case ModelKind::siam_unet: return std::string("Siam-") + loss_kind_name(loss);
        case ModelKind::ef_cnn: return "EF-CNN";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Optimizer

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
}

void Adam::step(std::vector<NamedParameter>& params) {
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.value.numel(), 0.0);
            v_.emplace_back(p.value.numel(), 0.0);
        }
    }
    if (m_.size() != params.size()) {
        throw UsageError("optimizer was set up for " + std::to_string(m_.size()) + " parameters, got " +
                         std::to_string(params.size()));
    }
    for (const auto& p : params) {
        for (double g : p.value.grad()) {
            if (!std::isfinite(g)) throw NumericalError("non-finite gradient in " + p.name);
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& value = params[i].value;
        const std::span<const double> grad = value.grad();
        const std::span<double> data = value.mutable_data();
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = grad.empty() ? 0.0 : grad[j];
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
            data[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
}

// ---------------------------------------------------------------------------
// Batches and class weights

namespace {

void check_sample(const PatchSample& s, const ModelSpec& spec) {
    if (s.patch.size != spec.patch_size || s.patch.channels != spec.input_channels) {
        throw DimensionError("sample from region " + s.region_id + " is " + std::to_string(s.patch.size) + "x" +
                             std::to_string(s.patch.size) + "x" + std::to_string(s.patch.channels) +
                             " but the model expects " + std::to_string(spec.patch_size) + "x" +
                             std::to_string(spec.patch_size) + "x" + std::to_string(spec.input_channels));
    }
}

Tensor batch_loss(const Model& model, const TrainConfig& cfg, const Tensor& out, const Tensor& target,
                  const ClassWeights& w) {
    return model.spec().segmentation() ? segmentation_loss(cfg.loss, out, target, w)
                                       : classification_bce(out, target, w);
}

template <typename Fn>
void for_each_batch(std::span<const std::size_t> indices, std::size_t batch_size, Fn&& fn) {
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        fn(indices.subspan(start, std::min(batch_size, indices.size() - start)));
    }
}

}  // namespace

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices, const ModelSpec& spec) {
    if (indices.empty()) throw UsageError("empty batch");
    const std::size_t n = indices.size(), p = spec.patch_size, c = spec.input_channels;
    std::vector<double> pre(n * p * p * c), post(n * p * p * c), target;
    for (std::size_t b = 0; b < n; ++b) {
        const PatchSample& s = dataset.samples.at(indices[b]);
        check_sample(s, spec);
        const std::size_t offset = b * p * p * c;
        for (std::size_t i = 0; i < p * p * c; ++i) {
            pre[offset + i] = normalize_reflectance(s.patch.pre[i], dataset.dtype);
            post[offset + i] = normalize_reflectance(s.patch.post[i], dataset.dtype);
        }
        if (spec.segmentation()) {
            target.insert(target.end(), s.patch.gt.begin(), s.patch.gt.end());
        } else {
            target.push_back(label_classification(s.patch.gt));
        }
    }
    Batch batch;
    batch.pre = Tensor::from({n, p, p, c}, std::move(pre));
    batch.post = Tensor::from({n, p, p, c}, std::move(post));
    batch.target = spec.segmentation() ? Tensor::from({n, p, p}, std::move(target))
                                       : Tensor::from({n}, std::move(target));
    return batch;
}

ClassWeights training_class_weights(const Dataset& dataset, std::span<const std::size_t> train, ModelKind kind,
                                    ClassWeighting weighting) {
    std::size_t changed = 0, total = 0;
    for (std::size_t i : train) {
        const PatchSample& s = dataset.samples.at(i);
        if (kind == ModelKind::ef_cnn) {
            changed += static_cast<std::size_t>(label_classification(s.patch.gt));
            total += 1;
        } else {
            changed += static_cast<std::size_t>(std::count(s.patch.gt.begin(), s.patch.gt.end(), 1));
            total += s.patch.gt.size();
        }
    }
    const ClassWeights inverse = class_weights(changed, total);  // throws on a single-class split
    return weighting == ClassWeighting::uniform ? ClassWeights{1.0, 1.0} : inverse;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::string out = "epoch,train_loss,val_loss\n";
    char buf[96];
    for (const EpochRecord& r : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,", r.epoch, r.train_loss);
        out += buf;
        if (r.val_loss) {
            std::snprintf(buf, sizeof buf, "%.17g", *r.val_loss);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train_model(const Dataset& dataset, const std::vector<std::size_t>& train,
                        const std::vector<std::size_t>& val, const TrainConfig& cfg, std::uint64_t stream) {
    cfg.validate();
    if (train.empty()) throw UsageError("empty training split");

    // Every fold starts from the same initial weights; shuffling and dropout
    // draw from per-stream substreams.
    const Rng root = Rng(cfg.seed).split(stream);
    TrainResult result;
    result.model = Model::build(cfg.model, Rng(cfg.seed).split("init").seed());
    result.weights = training_class_weights(dataset, train, cfg.model.kind, cfg.weighting);
    Model& model = result.model;
    Adam optimizer(cfg.learning_rate);
    Rng shuffle = root.split("shuffle");
    Rng noise = root.split("dropout");

    std::vector<std::size_t> order = train;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(i)]);

        double total = 0.0;
        for_each_batch(order, cfg.batch_size, [&](std::span<const std::size_t> ids) {
            const Batch batch = make_batch(dataset, ids, cfg.model);
            model.zero_grad();
            const Tensor out = model.forward(batch.pre, batch.post, Mode::train, noise);
            const Tensor loss = batch_loss(model, cfg, out, batch.target, result.weights);
            if (!std::isfinite(loss.item())) {
                throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch));
            }
            backward(loss);
            optimizer.step(model.parameters());
            total += loss.item() * static_cast<double>(ids.size());
        });

        EpochRecord record{epoch, total / static_cast<double>(order.size()), std::nullopt};
        if (!val.empty()) {
            double val_total = 0.0;
            for_each_batch(val, cfg.batch_size, [&](std::span<const std::size_t> ids) {
                const Batch batch = make_batch(dataset, ids, cfg.model);
                const Tensor out = model.predict(batch.pre, batch.post).detach();
                val_total += batch_loss(model, cfg, out, batch.target, result.weights).item() *
                             static_cast<double>(ids.size());
            });
            record.val_loss = val_total / static_cast<double>(val.size());
        }
        result.history.push_back(record);
    }
    model.zero_grad();
    return result;
}

ScoredSamples collect_scores(Model& model, const Dataset& dataset, std::span<const std::size_t> indices,
                             std::size_t batch_size) {
    ScoredSamples out;
    const bool segmentation = model.spec().segmentation();
    for_each_batch(indices, std::max<std::size_t>(1, batch_size), [&](std::span<const std::size_t> ids) {
        const Batch batch = make_batch(dataset, ids, model.spec());
        const Tensor pred = model.predict(batch.pre, batch.post);
        const std::span<const double> p = pred.data();
        const std::span<const double> t = batch.target.data();
        for (std::size_t i = 0; i < t.size(); ++i) {
            out.scores.push_back(segmentation ? p[2 * i] : p[i]);
            out.labels.push_back(t[i]);
        }
    });
    return out;
}

std::vector<MetricsReport> evaluate_sweep(Model& model, const Dataset& dataset, std::span<const std::size_t> indices,
                                          const std::vector<double>& grid, std::size_t batch_size) {
    std::vector<ConfusionCounts> counts(grid.size());
    const bool segmentation = model.spec().segmentation();
    for_each_batch(indices, std::max<std::size_t>(1, batch_size), [&](std::span<const std::size_t> ids) {
        const Batch batch = make_batch(dataset, ids, model.spec());
        const Tensor pred = model.predict(batch.pre, batch.post);
        std::vector<double> scores(batch.target.numel());
        for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = pred.at(segmentation ? 2 * i : i);
        for (std::size_t g = 0; g < grid.size(); ++g) {
            counts[g] += confusion_counts(scores, batch.target.data(), grid[g]);
        }
    });
    std::vector<MetricsReport> reports;
    for (std::size_t g = 0; g < grid.size(); ++g) reports.push_back(metrics(counts[g], grid[g]));
    return reports;
}

FoldResult train_fold(const Dataset& dataset, const FoldAssignment& folds, std::size_t fold, const TrainConfig& cfg) {
    if (fold >= folds.k) {
        throw UsageError("fold index " + std::to_string(fold) + " out of range for k=" + std::to_string(folds.k));
    }
    if (folds.fold_of.size() != dataset.samples.size()) {
        throw DimensionError("fold assignment covers " + std::to_string(folds.fold_of.size()) +
                             " samples but the dataset has " + std::to_string(dataset.samples.size()));
    }
    FoldResult result;
    result.fold = fold;
    const std::vector<std::size_t> val = folds.members(fold);
    result.training = train_model(dataset, folds.complement(fold), val, cfg, fold);
    result.sweep = evaluate_sweep(result.training.model, dataset, val, cfg.threshold_grid, cfg.batch_size);
    return result;
}

CrossValidationResult cross_validate(const Dataset& dataset, const FoldAssignment& folds, const TrainConfig& cfg,
                                     std::size_t jobs) {
    cfg.validate();
    if (folds.k != cfg.k) {
        throw ConfigError("fold assignment has k=" + std::to_string(folds.k) + " but the config asks for k=" +
                          std::to_string(cfg.k));
    }
    CrossValidationResult result;
    result.folds.resize(folds.k);
    parallel_for(folds.k, jobs, [&](std::size_t f) {
        try {
            result.folds[f] = train_fold(dataset, folds, f, cfg);
        } catch (const Error& e) {
            throw FoldError(f, e);
        }
    });

    if (cfg.threshold) {
        result.threshold = *cfg.threshold;
    } else {
        std::vector<std::vector<MetricsReport>> sweeps;
        for (const FoldResult& f : result.folds) sweeps.push_back(f.sweep);
        result.threshold = working_point(cfg.threshold_grid, sweeps);
    }
    const auto grid_pos = std::find(cfg.threshold_grid.begin(), cfg.threshold_grid.end(), result.threshold);
    for (FoldResult& f : result.folds) {
        if (grid_pos != cfg.threshold_grid.end()) {
            result.reports.push_back(f.sweep[static_cast<std::size_t>(grid_pos - cfg.threshold_grid.begin())]);
        } else {
            result.reports.push_back(evaluate_sweep(f.training.model, dataset, folds.members(f.fold),
                                                    {result.threshold}, cfg.batch_size)[0]);
        }
    }
    result.summary = cross_fold_summary(result.reports);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<float> parameter_blob(const Model& model) {
    std::vector<float> blob;
    blob.reserve(model.count_parameters());
    for (const auto& p : model.parameters()) {
        for (double v : p.value.data()) blob.push_back(static_cast<float>(v));
    }
    return blob;
}

namespace {

std::vector<char> encode_le(const std::vector<float>& blob) {
    std::vector<char> bytes(blob.size() * 4);
    for (std::size_t i = 0; i < blob.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(blob[i]);
        for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    return bytes;
}

}  // namespace

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const fs::path& base) {
    const fs::path json_path = fs::path(base).concat(".json");
    const fs::path bin_path = fs::path(base).concat(".bin");
    if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());

    json layout = json::array();
    for (const auto& p : model.parameters()) layout.push_back({{"name", p.name}, {"shape", p.value.shape()}});
    json norms = json::array();
    for (const auto& n : model.batch_norms()) {
        norms.push_back({{"name", n.name},
                         {"running_mean", n.state.running_mean},
                         {"running_var", n.state.running_var},
                         {"updates", n.state.updates}});
    }
    json doc = {{"format", "deltascope-checkpoint"},
                {"version", 1},
                {"spec", to_json(model.spec())},
                {"meta",
                 {{"name", meta.name},
                  {"config_hash", meta.config_hash},
                  {"fold", meta.fold},
                  {"epoch", meta.epoch},
                  {"threshold", meta.threshold ? json(*meta.threshold) : json(nullptr)}}},
                {"parameter_count", model.count_parameters()},
                {"parameters", layout},
                {"batch_norm", norms},
                {"blob", bin_path.filename().string()}};

    const std::vector<char> bytes = encode_le(parameter_blob(model));
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot write " + bin_path.string());
    bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    std::ofstream js(json_path, std::ios::trunc);
    if (!js) throw IoError("cannot write " + json_path.string());
    js << doc.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const fs::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw IoError("cannot open checkpoint " + json_path.string());
    LoadedCheckpoint out;
    try {
        const json doc = json::parse(in);
        out.model = Model::build(model_spec_from_json(doc.at("spec")), 0);
        const json& meta = doc.at("meta");
        out.meta.name = meta.at("name").get<std::string>();
        out.meta.config_hash = meta.at("config_hash").get<std::string>();
        out.meta.fold = meta.at("fold").get<std::size_t>();
        out.meta.epoch = meta.at("epoch").get<std::size_t>();
        if (!meta.at("threshold").is_null()) out.meta.threshold = meta.at("threshold").get<double>();

        auto& params = out.model.parameters();
        const json& layout = doc.at("parameters");
        if (layout.size() != params.size()) {
            throw CorruptionError("checkpoint lists " + std::to_string(layout.size()) + " parameter tensors, spec has " +
                                  std::to_string(params.size()));
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (layout[i].at("name").get<std::string>() != params[i].name ||
                layout[i].at("shape").get<Shape>() != params[i].value.shape()) {
                throw CorruptionError("checkpoint parameter " + std::to_string(i) + " does not match the spec layout");
            }
        }

        const fs::path bin_path = json_path.parent_path() / doc.at("blob").get<std::string>();
        std::ifstream bin(bin_path, std::ios::binary);
        if (!bin) throw IoError("cannot open checkpoint blob " + bin_path.string());
        const std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
        const std::size_t expected = out.model.count_parameters() * 4;
        if (bytes.size() != expected) {
            throw CorruptionError("checkpoint blob " + bin_path.string() + ": expected " + std::to_string(expected) +
                                  " bytes for " + std::to_string(expected / 4) + " parameters, got " +
                                  std::to_string(bytes.size()));
        }
        std::size_t pos = 0;
        for (auto& p : params) {
            for (double& v : p.value.mutable_data()) {
                std::uint32_t bits = 0;
                for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + b])) << (8 * b);
                v = static_cast<double>(std::bit_cast<float>(bits));
                pos += 4;
            }
        }

        auto& norms = out.model.batch_norms();
        const json& saved = doc.at("batch_norm");
        if (saved.size() != norms.size()) throw CorruptionError("checkpoint batch-norm list does not match the spec");
        for (std::size_t i = 0; i < norms.size(); ++i) {
            auto mean = saved[i].at("running_mean").get<std::vector<double>>();
            auto var = saved[i].at("running_var").get<std::vector<double>>();
            if (mean.size() != norms[i].state.running_mean.size() || var.size() != mean.size()) {
                throw CorruptionError("checkpoint batch-norm statistics for " + norms[i].name + " have the wrong size");
            }
            norms[i].state.running_mean = std::move(mean);
            norms[i].state.running_var = std::move(var);
            norms[i].state.updates = saved[i].at("updates").get<std::size_t>();
        }
    } catch (const json::exception& e) {
        throw FormatError("checkpoint " + json_path.string() + ": " + e.what());
    }
    return out;
}

}  // namespace deltascope
