#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace deltascope {

/// Change is the positive class.
struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const { return tp + tn + fp + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& other);
    bool operator==(const ConfusionCounts&) const = default;
};

/// Positive prediction iff pred > threshold. Truth values must be 0 or 1.
ConfusionCounts confusion_counts(std::span<const double> pred, std::span<const double> truth, double threshold);
ConfusionCounts confusion_counts(std::span<const float> pred, std::span<const float> truth, double threshold);

/// A metric whose denominator vanished is std::nullopt.
struct MetricsReport {
    double threshold = 0.5;
    ConfusionCounts counts;
    std::optional<double> balanced_accuracy;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> f1;
};

MetricsReport metrics(const ConfusionCounts& counts, double threshold = 0.5);

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

/// Points run from the sentinel above the highest score (0, 0) to the
/// sentinel below the lowest score (1, 1). Tied scores share one point.
struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0.0;
};

RocCurve roc_curve(std::span<const double> scores, std::span<const double> labels);

/// "threshold,fpr,tpr" rows followed by "auc,<value>".
std::string roc_to_csv(const RocCurve& curve);

/// {0.1, 0.2, ..., 0.9}
std::vector<double> default_threshold_grid();

/// One report per grid threshold.
std::vector<MetricsReport> threshold_sweep(std::span<const double> scores, std::span<const double> labels,
                                           const std::vector<double>& grid);

/// Grid threshold with the highest mean recall across folds, skipping
/// thresholds where some fold has undefined precision or recall. Ties go to the
/// larger threshold. per_fold[f][g] is fold f's report at grid[g].
double working_point(const std::vector<double>& grid, const std::vector<std::vector<MetricsReport>>& per_fold);

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n - 1)
};

/// Undefined when any fold left the metric undefined.
struct CrossFoldSummary {
    std::size_t folds = 0;
    std::optional<MetricSummary> balanced_accuracy;
    std::optional<MetricSummary> precision;
    std::optional<MetricSummary> recall;
    std::optional<MetricSummary> f1;
};

CrossFoldSummary cross_fold_summary(const std::vector<MetricsReport>& reports);

/// Mean and sample standard deviation of at least two values.
MetricSummary mean_std(std::span<const double> values);

/// Percentage with two decimals, "n/a" when undefined.
std::string format_percent(const std::optional<double>& value);

nlohmann::json to_json(const ConfusionCounts& counts);
nlohmann::json to_json(const MetricsReport& report);
nlohmann::json to_json(const CrossFoldSummary& summary);

}  // namespace deltascope
