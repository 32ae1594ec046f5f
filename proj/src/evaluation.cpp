#include "deltascope/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "deltascope/errors.hpp"

namespace deltascope {

using nlohmann::json;

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
    tp += other.tp;
    tn += other.tn;
    fp += other.fp;
    fn += other.fn;
    return *this;
}

namespace {

template <typename T>
ConfusionCounts count_impl(std::span<const T> pred, std::span<const T> truth, double threshold) {
    if (pred.size() != truth.size()) {
        throw DimensionError("confusion counts: " + std::to_string(pred.size()) + " predictions but " +
                             std::to_string(truth.size()) + " truth values");
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool positive = pred[i] > static_cast<T>(threshold);  // at the precision the scores are stored in
        if (truth[i] == T(1)) {
            ++(positive ? c.tp : c.fn);
        } else if (truth[i] == T(0)) {
            ++(positive ? c.fp : c.tn);
        } else {
            throw ValidationError("confusion counts: truth must be 0 or 1, found " +
                                  std::to_string(static_cast<double>(truth[i])));
        }
    }
    return c;
}

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

void require_binary(std::span<const double> labels) {
    for (double v : labels) {
        if (v != 0.0 && v != 1.0) {
            throw ValidationError("labels must be 0 or 1, found " + std::to_string(v));
        }
    }
}

std::optional<MetricSummary> summarize(const std::vector<MetricsReport>& reports,
                                       std::optional<double> MetricsReport::*field) {
    std::vector<double> values;
    for (const MetricsReport& r : reports) {
        if (!(r.*field)) return std::nullopt;
        values.push_back(*(r.*field));
    }
    return mean_std(values);
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json summary_json(const std::optional<MetricSummary>& s) {
    if (!s) return nullptr;
    char mean[32], sd[32];
    std::snprintf(mean, sizeof mean, "%.2f", 100.0 * s->mean);
    std::snprintf(sd, sizeof sd, "%.2f", 100.0 * s->std);
    return {{"mean", s->mean}, {"std", s->std}, {"percent", std::string(mean) + " ± " + sd}};
}

}  // namespace

ConfusionCounts confusion_counts(std::span<const double> pred, std::span<const double> truth, double threshold) {
    return count_impl(pred, truth, threshold);
}

ConfusionCounts confusion_counts(std::span<const float> pred, std::span<const float> truth, double threshold) {
    return count_impl(pred, truth, threshold);
}

MetricsReport metrics(const ConfusionCounts& c, double threshold) {
    MetricsReport r;
    r.threshold = threshold;
    r.counts = c;
    r.precision = ratio(c.tp, c.tp + c.fp);
    r.recall = ratio(c.tp, c.tp + c.fn);
    const auto specificity = ratio(c.tn, c.tn + c.fp);
    if (r.recall && specificity) {
        r.balanced_accuracy = 0.5 * (*r.recall + *specificity);
    }
    if (r.precision && r.recall && *r.precision + *r.recall > 0.0) {
        r.f1 = 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall);
    }
    return r;
}

RocCurve roc_curve(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) {
        throw DimensionError("roc: " + std::to_string(scores.size()) + " scores but " +
                             std::to_string(labels.size()) + " labels");
    }
    require_binary(labels);
    const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1.0));
    const std::size_t negatives = labels.size() - positives;
    if (positives == 0 || negatives == 0) {
        throw UsageError("roc: labels must contain both classes");
    }
    for (double s : scores) {
        if (!std::isfinite(s)) throw NumericalError("roc: non-finite score");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve curve;
    const double np = static_cast<double>(positives), nn = static_cast<double>(negatives);
    const double top = scores[order.front()], bottom = scores[order.back()];
    curve.points.push_back({std::nextafter(top, INFINITY), 0.0, 0.0});
    // Walking scores downward; once a tie group is consumed, every score above the
    // next distinct value is counted positive, which is the strict-threshold point
    // for that value.
    // The trapezoid areas are summed in integer units of 1 / (2 * P * N), so the
    // area is a single rounding of the exact rational value.
    std::uint64_t tp = 0, fp = 0, twice_area = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double value = scores[order[i]];
        curve.points.push_back({value, fp / nn, tp / np});
        const std::uint64_t fp_before = fp, tp_before = tp;
        while (i < order.size() && scores[order[i]] == value) {
            ++(labels[order[i]] == 1.0 ? tp : fp);
            ++i;
        }
        twice_area += (fp - fp_before) * (tp_before + tp);
    }
    curve.points.push_back({std::nextafter(bottom, -INFINITY), 1.0, 1.0});
    curve.auc = static_cast<double>(twice_area) / (2.0 * np * nn);
    return curve;
}

std::string roc_to_csv(const RocCurve& curve) {
    std::ostringstream out;
    out.precision(17);
    out << "threshold,fpr,tpr\n";
    for (const RocPoint& p : curve.points) out << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
    out << "auc," << curve.auc << '\n';
    return out.str();
}

std::vector<double> default_threshold_grid() {
    std::vector<double> grid;
    for (int i = 1; i <= 9; ++i) grid.push_back(i / 10.0);
    return grid;
}

std::vector<MetricsReport> threshold_sweep(std::span<const double> scores, std::span<const double> labels,
                                           const std::vector<double>& grid) {
    std::vector<MetricsReport> reports;
    for (double t : grid) reports.push_back(metrics(confusion_counts(scores, labels, t), t));
    return reports;
}

double working_point(const std::vector<double>& grid, const std::vector<std::vector<MetricsReport>>& per_fold) {
    if (grid.empty()) {
        throw UsageError("working point: empty threshold grid");
    }
    if (per_fold.empty()) {
        throw UsageError("working point: no fold reports");
    }
    for (const auto& fold : per_fold) {
        if (fold.size() != grid.size()) {
            throw DimensionError("working point: fold has " + std::to_string(fold.size()) + " reports for " +
                                 std::to_string(grid.size()) + " thresholds");
        }
    }
    std::optional<std::size_t> best;
    double best_recall = -1.0;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        double total = 0.0;
        bool defined = true;
        for (const auto& fold : per_fold) {
            if (!fold[g].precision || !fold[g].recall) {
                defined = false;
                break;
            }
            total += *fold[g].recall;
        }
        if (!defined) continue;
        const double mean = total / static_cast<double>(per_fold.size());
        if (!best || mean > best_recall || (mean == best_recall && grid[g] > grid[*best])) {
            best = g;
            best_recall = mean;
        }
    }
    if (!best) {
        throw DegenerateDatasetError("working point: precision is undefined at every grid threshold");
    }
    return grid[*best];
}

MetricSummary mean_std(std::span<const double> values) {
    if (values.size() < 2) {
        throw UsageError("summary needs at least 2 folds, got " + std::to_string(values.size()));
    }
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

CrossFoldSummary cross_fold_summary(const std::vector<MetricsReport>& reports) {
    if (reports.size() < 2) {
        throw UsageError("cross-fold summary needs at least 2 folds, got " + std::to_string(reports.size()));
    }
    CrossFoldSummary s;
    s.folds = reports.size();
    s.balanced_accuracy = summarize(reports, &MetricsReport::balanced_accuracy);
    s.precision = summarize(reports, &MetricsReport::precision);
    s.recall = summarize(reports, &MetricsReport::recall);
    s.f1 = summarize(reports, &MetricsReport::f1);
    return s;
}

std::string format_percent(const std::optional<double>& value) {
    if (!value) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *value);
    return buf;
}

json to_json(const ConfusionCounts& c) { return {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}}; }

json to_json(const MetricsReport& r) {
    return {{"threshold", r.threshold},
            {"counts", to_json(r.counts)},
            {"balanced_accuracy", optional_json(r.balanced_accuracy)},
            {"precision", optional_json(r.precision)},
            {"recall", optional_json(r.recall)},
            {"f1", optional_json(r.f1)},
            {"percent",
             {{"balanced_accuracy", format_percent(r.balanced_accuracy)},
              {"precision", format_percent(r.precision)},
              {"recall", format_percent(r.recall)},
              {"f1", format_percent(r.f1)}}}};
}

json to_json(const CrossFoldSummary& s) {
    return {{"folds", s.folds},
            {"balanced_accuracy", summary_json(s.balanced_accuracy)},
            {"precision", summary_json(s.precision)},
            {"recall", summary_json(s.recall)},
            {"f1", summary_json(s.f1)}};
}

}  // namespace deltascope
