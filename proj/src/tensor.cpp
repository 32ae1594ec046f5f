#include "deltascope/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "deltascope/errors.hpp"

namespace deltascope {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

const char* op_kind_name(OpKind kind) {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::conv2d: return "conv2d";
        case OpKind::transpose_conv2d: return "transpose_conv2d";
        case OpKind::max_pool2d: return "max_pool2d";
        case OpKind::batch_norm: return "batch_norm";
        case OpKind::dense: return "dense";
        case OpKind::relu: return "relu";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::softmax: return "softmax";
        case OpKind::dropout: return "dropout";
        case OpKind::concat: return "concat";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::reduce: return "reduce";
        case OpKind::reshape: return "reshape";
        case OpKind::slice: return "slice";
        case OpKind::upsample: return "upsample";
    }
    return "unknown";
}

std::vector<double>& TensorImpl::grad_buffer() {
    if (grad.size() != data.size()) {
        grad.assign(data.size(), 0.0);
    }
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_to_string(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1) {
        throw UsageError("item() on tensor of shape " + shape_to_string(shape()));
    }
    return impl_->data[0];
}

void Tensor::zero_grad() {
    impl_->grad.clear();
}

Tensor Tensor::detach() const {
    return from(impl_->shape, impl_->data, false);
}

Tensor make_result(OpKind kind, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward_fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    const bool needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                        [](const Tensor& t) { return t.requires_grad(); });
    if (needs_grad) {
        impl->requires_grad = true;
        auto node = std::make_shared<OpNode>();
        node->kind = kind;
        node->inputs.reserve(inputs.size());
        for (const Tensor& t : inputs) {
            node->inputs.push_back(t.impl());
        }
        node->backward = std::move(backward_fn);
        impl->node = std::move(node);
    }
    return Tensor(std::move(impl));
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward() needs a scalar loss, got " +
                         (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
    }
    TensorImpl* root = loss.impl().get();
    if (!root->requires_grad) {
        throw UsageError("backward() on a loss that does not depend on any requires_grad tensor");
    }

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [impl, next_child] = stack.back();
        if (impl->node && next_child < impl->node->inputs.size()) {
            TensorImpl* child = impl->node->inputs[next_child++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(impl);
        stack.pop_back();
    }

    // Each sweep accumulates into fresh buffers; leaf gradients from earlier
    // sweeps are added back once at the end, so k sweeps give exactly k times
    // the single-sweep gradient.
    std::vector<std::pair<TensorImpl*, std::vector<double>>> previous;
    for (TensorImpl* impl : order) {
        if (!impl->node && !impl->grad.empty()) {
            previous.emplace_back(impl, std::move(impl->grad));
        }
        impl->grad.assign(impl->data.size(), 0.0);
    }
    root->grad[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        if (impl->node && impl->node->backward) {
            impl->node->backward(*impl);
        }
    }

    for (auto& [impl, earlier] : previous) {
        for (std::size_t i = 0; i < earlier.size(); ++i) {
            impl->grad[i] += earlier[i];
        }
    }
}

}  // namespace deltascope
