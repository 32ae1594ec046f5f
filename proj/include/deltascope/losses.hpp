#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "deltascope/tensor.hpp"

namespace deltascope {

/// Log arguments are clamped into [kLogClamp, 1 - kLogClamp].
inline constexpr double kLogClamp = 1e-7;

/// w0 weighs the change class, w1 the no-change class.
struct ClassWeights {
    double w0 = 1.0;
    double w1 = 1.0;

    void validate() const;
};

/// Inverse-population weights normalized so a balanced set gives 1 and 1:
/// w0 = n / (2c), w1 = n / (2(n - c)).
ClassWeights class_weights(std::size_t changed, std::size_t total);

enum class LossKind { bce, wbced };

const char* loss_kind_name(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

// Segmentation losses take per-pixel probabilities `s` whose last axis has two
// channels (channel 0 = change) and a target tensor `t0` holding the change
// indicator for every pixel, so t0.numel() * 2 == s.numel().

/// Mean weighted binary cross-entropy over all N*M pixels.
Tensor weighted_bce(const Tensor& s, const Tensor& t0, const ClassWeights& w);

/// Soft dice over the whole batch with +1 smoothing.
Tensor dice_loss(const Tensor& s, const Tensor& t0);

/// weighted_bce + dice_loss.
Tensor wbced(const Tensor& s, const Tensor& t0, const ClassWeights& w);

/// Dispatches on `kind`. Plain "bce" still applies `w`.
Tensor segmentation_loss(LossKind kind, const Tensor& s, const Tensor& t0, const ClassWeights& w);

/// Per-pair weighted cross-entropy of scalar scores, averaged over the batch.
Tensor classification_bce(const Tensor& scores, const Tensor& labels, const ClassWeights& w);

}  // namespace deltascope
