#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace deltascope {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

enum class OpKind {
    leaf,
    conv2d,
    transpose_conv2d,
    max_pool2d,
    batch_norm,
    dense,
    relu,
    sigmoid,
    softmax,
    dropout,
    concat,
    add,
    mul,
    reduce,
    reshape,
    slice,
    upsample,
};

const char* op_kind_name(OpKind kind);

struct TensorImpl;

/// One recorded operation. `backward` receives the output (values and
/// gradient) and accumulates into the gradients of inputs that require them.
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct OpNode {
    OpKind kind = OpKind::leaf;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<OpNode> node;  // null for leaves

    /// Zero-filled gradient buffer of matching size, allocated on demand.
    std::vector<double>& grad_buffer();
};

/// Handle to a dense row-major array of doubles that may take part in a
/// reverse-mode differentiation graph. Copies share storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    /// Direct write access. Only meaningful for leaves (parameters, inputs).
    std::span<double> mutable_data() { return impl_->data; }
    double item() const;
    double at(std::size_t flat_index) const { return impl_->data.at(flat_index); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() { return impl_->grad_buffer(); }
    void zero_grad();

    bool is_leaf() const { return impl_->node == nullptr; }
    OpKind op_kind() const { return impl_->node ? impl_->node->kind : OpKind::leaf; }

    /// Leaf copy of the values with no graph history.
    Tensor detach() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Builds an op output. When no input requires a gradient the node is
/// dropped and the result is a plain leaf.
Tensor make_result(OpKind kind, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward);

/// Reverse sweep from a scalar loss. Intermediate gradients are reset on
/// every call; leaf gradients accumulate until zero_grad().
void backward(const Tensor& loss);

}  // namespace deltascope
