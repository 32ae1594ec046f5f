#include "deltascope/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "deltascope/errors.hpp"
#include "deltascope/ops.hpp"

namespace deltascope {

namespace {

struct Evaluation {
    double value;
    std::uint64_t branches;
};

class TraceScope {
public:
    TraceScope() : saved_(detail::branch_trace()) {}
    ~TraceScope() { detail::branch_trace() = saved_; }
    TraceScope(const TraceScope&) = delete;
    TraceScope& operator=(const TraceScope&) = delete;

private:
    detail::BranchTrace saved_;
};

Evaluation evaluate(const std::function<Tensor()>& build, Tensor* keep = nullptr) {
    detail::BranchTrace& trace = detail::branch_trace();
    trace.active = true;
    trace.hash = 0;
    Tensor loss = build();
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("grad_check: build() must return a scalar tensor");
    }
    Evaluation result{loss.item(), trace.hash};
    if (keep) *keep = loss;
    return result;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& build, std::vector<Tensor> inputs,
                           double eps) {
    if (!(eps > 0.0)) {
        throw UsageError("grad_check: eps must be positive");
    }
    TraceScope scope;

    for (Tensor& t : inputs) {
        if (!t.is_leaf()) {
            throw UsageError("grad_check: inputs must be leaf tensors");
        }
        t.set_requires_grad(true);
        t.zero_grad();
    }

    Tensor loss;
    const Evaluation base = evaluate(build, &loss);
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (Tensor& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(t.numel(), 0.0);
        }
    }

    double scale = 0.0;
    for (const auto& g : analytic) {
        for (double v : g) scale = std::max(scale, std::abs(v));
    }
    const double floor = std::max(1e-8, 1e-6 * scale);

    const Evaluation replay = evaluate(build);
    if (replay.value != base.value || replay.branches != base.branches) {
        throw UsageError(
            "grad_check: graph is not deterministic (e.g. train-mode dropout without a fixed seed)");
    }

    GradCheckResult result;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        std::span<double> values = inputs[k].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            values[i] = original + eps;
            const Evaluation plus = evaluate(build);
            values[i] = original - eps;
            const Evaluation minus = evaluate(build);
            values[i] = original;
            if (plus.branches != base.branches || minus.branches != base.branches) {
                ++result.excluded;
                continue;
            }
            const double numeric = (plus.value - minus.value) / (2.0 * eps);
            const double a = analytic[k][i];
            const double err = std::abs(a - numeric) / std::max(floor, std::abs(a) + std::abs(numeric));
            result.max_relative_error = std::max(result.max_relative_error, err);
            ++result.checked;
        }
        inputs[k].zero_grad();
    }
    return result;
}

}  // namespace deltascope
