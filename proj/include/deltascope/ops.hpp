#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "deltascope/rng.hpp"
#include "deltascope/tensor.hpp"

namespace deltascope {

enum class Mode { train, infer };
enum class Padding { same, valid };
enum class Activation { relu, sigmoid, softmax_channels };

struct Conv2dOptions {
    std::size_t stride = 1;
    Padding padding = Padding::same;
};

/// Per-channel running statistics for batch normalization.
///
/// A default-constructed state holds no statistics; inference against it is an
/// error until a training-mode pass has populated it. Model builders start
/// from `identity(C)` (mean 0, variance 1).
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.9;
    double epsilon = 1e-5;
    std::size_t updates = 0;

    static BatchNormState identity(std::size_t channels);
    bool has_statistics() const { return !running_mean.empty(); }
};

// All image tensors are B x H x W x C (channels last). Kernels are
// Kh x Kw x Cin x Cout. Convolutions use cross-correlation and zero padding.

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
              Conv2dOptions options = {});

/// Stride-2 transposed convolution producing exactly 2H x 2W. Kernels larger
/// than 2 are centre-cropped so the output extent stays doubled.
Tensor transpose_conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
                        std::size_t stride = 2);

/// Non-overlapping max pooling. The gradient goes to the first maximum in
/// row-major scan order of each window.
Tensor max_pool2d(const Tensor& x, std::size_t window = 2);

/// Nearest-neighbour upsampling by an integer factor on both spatial axes.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// Normalizes over every axis except the last (channel) axis. Accepts both
/// B x H x W x C feature maps and B x F dense activations.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, Mode mode);

/// x: B x F, weights: F x G, bias: G.
Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias);

Tensor activate(const Tensor& x, Activation kind);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Softmax across the last axis, independently for every pixel.
Tensor softmax_channels(const Tensor& x);

/// Inverted dropout: survivors are scaled by 1/(1-rate). Infer mode and
/// rate 0 return `x` unchanged.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);

/// Concatenation along the last axis; `a` channels come first.
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// B x ... -> B x (product of the rest).
Tensor flatten(const Tensor& x);

namespace detail {

/// Fingerprint of the non-differentiable branch decisions (relu signs,
/// pooling argmaxes, clamps) taken during a forward pass. Gradient checking
/// uses it to skip perturbations that cross a kink.
struct BranchTrace {
    bool active = false;
    std::uint64_t hash = 0;
};

BranchTrace& branch_trace();

inline void note_branch(std::uint64_t value) {
    BranchTrace& trace = branch_trace();
    if (trace.active) {
        trace.hash = mix64(trace.hash ^ value);
    }
}

inline bool tracing_branches() { return branch_trace().active; }

}  // namespace detail

}  // namespace deltascope
