#include "deltascope/losses.hpp"

#include <cmath>

#include "deltascope/errors.hpp"
#include "deltascope/ops.hpp"

namespace deltascope {

namespace {

double* grad_target(const std::shared_ptr<TensorImpl>& input) {
    return input->requires_grad ? input->grad_buffer().data() : nullptr;
}

void check_targets(const Tensor& t, const char* what) {
    for (double v : t.data()) {
        if (v != 0.0 && v != 1.0) {
            throw ValidationError(std::string(what) + ": targets must be 0 or 1, found " + std::to_string(v));
        }
    }
}

void check_segmentation(const Tensor& s, const Tensor& t0, const char* what) {
    if (s.rank() < 1 || s.shape().back() != 2) {
        throw DimensionError(std::string(what) + ": predictions need a 2-channel last axis, got " +
                             shape_to_string(s.shape()));
    }
    if (t0.numel() * 2 != s.numel()) {
        throw DimensionError(std::string(what) + ": " + std::to_string(s.numel() / 2) +
                             " predicted pixels but " + std::to_string(t0.numel()) + " targets");
    }
    if (t0.numel() == 0) {
        throw DimensionError(std::string(what) + ": empty batch");
    }
    check_targets(t0, what);
}

// Clamped probability and whether the clamp was active.
struct Clamped {
    double value;
    bool active;
};

Clamped clamp_probability(double p) {
    if (p < kLogClamp) return {kLogClamp, true};
    if (p > 1.0 - kLogClamp) return {1.0 - kLogClamp, true};
    return {p, false};
}

// Shared by the pixel and pair losses: mean over `count` entries read with
// `stride` from `s`, cross-entropy against binary `t`.
Tensor mean_weighted_bce(const Tensor& s, const Tensor& t, std::size_t stride, const ClassWeights& w) {
    const std::span<const double> ps = s.data();
    const std::span<const double> ts = t.data();
    const std::size_t count = ts.size();
    double total = 0.0;
    std::uint64_t clamp_bits = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const Clamped c = clamp_probability(ps[i * stride]);
        if (c.active) clamp_bits = mix64(clamp_bits ^ (i + 1));
        total += ts[i] == 1.0 ? w.w0 * std::log(c.value) : w.w1 * std::log(1.0 - c.value);
    }
    detail::note_branch(clamp_bits);
    const double n = static_cast<double>(count);
    return make_result(OpKind::reduce, {1}, {-total / n}, {s, t}, [stride, w, n](const TensorImpl& self) {
        double* gs = grad_target(self.node->inputs[0]);
        if (!gs) return;
        const std::vector<double>& ps = self.node->inputs[0]->data;
        const std::vector<double>& ts = self.node->inputs[1]->data;
        const double g = self.grad[0] / n;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const Clamped c = clamp_probability(ps[i * stride]);
            if (c.active) continue;
            gs[i * stride] += ts[i] == 1.0 ? -g * w.w0 / c.value : g * w.w1 / (1.0 - c.value);
        }
    });
}

}  // namespace

void ClassWeights::validate() const {
    if (!(w0 > 0.0 && std::isfinite(w0) && w1 > 0.0 && std::isfinite(w1))) {
        throw ConfigError("class weights must be positive and finite, got w0=" + std::to_string(w0) +
                          ", w1=" + std::to_string(w1));
    }
}

ClassWeights class_weights(std::size_t changed, std::size_t total) {
    if (changed == 0 || changed >= total) {
        throw DegenerateDatasetError("class weights need both classes present: " + std::to_string(changed) +
                                     " changed of " + std::to_string(total) + " pixels");
    }
    const double n = static_cast<double>(total);
    const double c = static_cast<double>(changed);
    return {n / (2.0 * c), n / (2.0 * (n - c))};
}

const char* loss_kind_name(LossKind kind) { return kind == LossKind::bce ? "bce" : "wbced"; }

LossKind parse_loss_kind(std::string_view name) {
    if (name == "bce") return LossKind::bce;
    if (name == "wbced") return LossKind::wbced;
    throw UsageError("unknown loss '" + std::string(name) + "' (expected bce or wbced)");
}

Tensor weighted_bce(const Tensor& s, const Tensor& t0, const ClassWeights& w) {
    w.validate();
    check_segmentation(s, t0, "weighted_bce");
    return mean_weighted_bce(s, t0, 2, w);
}

Tensor dice_loss(const Tensor& s, const Tensor& t0) {
    check_segmentation(s, t0, "dice_loss");
    const std::span<const double> ps = s.data();
    const std::span<const double> ts = t0.data();
    double overlap = 0.0, sum_s = 0.0, sum_t = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        overlap += ps[2 * i] * ts[i];
        sum_s += ps[2 * i];
        sum_t += ts[i];
    }
    const double num = 2.0 * overlap + 1.0;
    const double den = sum_s + sum_t + 1.0;
    return make_result(OpKind::reduce, {1}, {1.0 - num / den}, {s, t0}, [num, den](const TensorImpl& self) {
        double* gs = grad_target(self.node->inputs[0]);
        if (!gs) return;
        const std::vector<double>& ts = self.node->inputs[1]->data;
        const double g = self.grad[0];
        // d/ds_i of -(num/den) = -(2 t_i den - num) / den^2
        for (std::size_t i = 0; i < ts.size(); ++i) {
            gs[2 * i] += -g * (2.0 * ts[i] * den - num) / (den * den);
        }
    });
}

Tensor wbced(const Tensor& s, const Tensor& t0, const ClassWeights& w) {
    return add(weighted_bce(s, t0, w), dice_loss(s, t0));
}

Tensor segmentation_loss(LossKind kind, const Tensor& s, const Tensor& t0, const ClassWeights& w) {
    return kind == LossKind::bce ? weighted_bce(s, t0, w) : wbced(s, t0, w);
}

Tensor classification_bce(const Tensor& scores, const Tensor& labels, const ClassWeights& w) {
    w.validate();
    if (scores.numel() != labels.numel()) {
        throw DimensionError("classification_bce: " + std::to_string(scores.numel()) + " scores but " +
                             std::to_string(labels.numel()) + " labels");
    }
    if (labels.numel() == 0) {
        throw DimensionError("classification_bce: empty batch");
    }
    check_targets(labels, "classification_bce");
    return mean_weighted_bce(scores, labels, 1, w);
}

}  // namespace deltascope
