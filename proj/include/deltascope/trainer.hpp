#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "deltascope/dataset.hpp"
#include "deltascope/errors.hpp"
#include "deltascope/evaluation.hpp"
#include "deltascope/losses.hpp"
#include "deltascope/models.hpp"

namespace deltascope {

/// How w0/w1 are chosen for a training split.
enum class ClassWeighting { inverse_population, uniform };

struct TrainConfig {
    ModelSpec model;
    LossKind loss = LossKind::bce;
    ClassWeighting weighting = ClassWeighting::inverse_population;
    std::size_t k = 5;
    std::size_t epochs = 50;
    std::size_t batch_size = 8;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::vector<double> threshold_grid = default_threshold_grid();
    std::optional<double> threshold;  // fixed evaluation threshold; the working point when unset

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// 16 hex digits of FNV-1a over the canonical JSON form.
std::string config_hash(const TrainConfig& cfg);

/// "EF-bce", "Siam-wbced", "EF-CNN", ...
std::string architecture_loss_name(ModelKind kind, LossKind loss);

/// A fold failure, keeping the category of the underlying error.
class FoldError : public Error {
public:
    FoldError(std::size_t fold, const Error& cause)
        : Error(cause.category(), "fold " + std::to_string(fold) + ": " + cause.what()), fold_(fold) {}
    std::size_t fold() const noexcept { return fold_; }

private:
    std::size_t fold_;
};

/// Adaptive-moment optimizer with bias correction. Moment buffers are keyed by
/// position in the parameter list.
class Adam {
public:
    explicit Adam(double learning_rate = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);

    /// Applies one update from the accumulated gradients. A parameter without
    /// a gradient counts as zero gradient. Non-finite gradients throw
    /// NumericalError naming the parameter; nothing is modified in that case.
    void step(std::vector<NamedParameter>& params);

    std::size_t steps() const { return t_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Network inputs for a list of samples. `target` is N x P x P change
/// indicators for segmentation models and N pair labels for EF-CNN.
struct Batch {
    Tensor pre;
    Tensor post;
    Tensor target;
};

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices, const ModelSpec& spec);

/// Weights from the given (training) samples only: pixel counts for
/// segmentation, pair labels for classification. Throws
/// DegenerateDatasetError when the split holds a single class, whatever the
/// weighting mode.
ClassWeights training_class_weights(const Dataset& dataset, std::span<const std::size_t> train, ModelKind kind,
                                    ClassWeighting weighting);

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
};

/// "epoch,train_loss,val_loss" with an empty field when there is no validation split.
std::string history_csv(const std::vector<EpochRecord>& history);

struct TrainResult {
    Model model;
    std::vector<EpochRecord> history;
    ClassWeights weights;
};

/// Trains a fresh model on `train`, reporting validation loss on `val` each
/// epoch (infer mode). `stream` selects independent initialization, shuffle
/// and dropout streams under cfg.seed.
TrainResult train_model(const Dataset& dataset, const std::vector<std::size_t>& train,
                        const std::vector<std::size_t>& val, const TrainConfig& cfg, std::uint64_t stream);

/// Change-class scores with their truth: per pixel for segmentation models,
/// per pair for EF-CNN.
struct ScoredSamples {
    std::vector<double> scores;
    std::vector<double> labels;
};

ScoredSamples collect_scores(Model& model, const Dataset& dataset, std::span<const std::size_t> indices,
                             std::size_t batch_size);

/// One MetricsReport per grid threshold, counted in a single pass.
std::vector<MetricsReport> evaluate_sweep(Model& model, const Dataset& dataset, std::span<const std::size_t> indices,
                                          const std::vector<double>& grid, std::size_t batch_size);

struct FoldResult {
    std::size_t fold = 0;
    TrainResult training;
    std::vector<MetricsReport> sweep;  // validation reports over cfg.threshold_grid
};

FoldResult train_fold(const Dataset& dataset, const FoldAssignment& folds, std::size_t fold, const TrainConfig& cfg);

struct CrossValidationResult {
    std::vector<FoldResult> folds;
    double threshold = 0.0;
    std::vector<MetricsReport> reports;  // per fold at `threshold`
    CrossFoldSummary summary;
};

/// Trains all k folds (up to `jobs` concurrently) and evaluates each on its
/// held-out fold at cfg.threshold or, when unset, the recall working point.
CrossValidationResult cross_validate(const Dataset& dataset, const FoldAssignment& folds, const TrainConfig& cfg,
                                     std::size_t jobs = 1);

struct CheckpointMeta {
    std::string name;
    std::string config_hash;
    std::size_t fold = 0;
    std::size_t epoch = 0;
    std::optional<double> threshold;
};

struct LoadedCheckpoint {
    Model model;
    CheckpointMeta meta;
};

/// Parameters in model order as little-endian f32.
std::vector<float> parameter_blob(const Model& model);

/// Writes `<base>.json` (spec, meta, batch-norm statistics) and `<base>.bin`.
void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& base);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& json_path);

}  // namespace deltascope
