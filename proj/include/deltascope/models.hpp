#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "deltascope/ops.hpp"
#include "deltascope/rng.hpp"
#include "deltascope/tensor.hpp"

namespace deltascope {

enum class ModelKind { ef_unet, siam_unet, ef_cnn };

const char* model_kind_name(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

struct ConvUnitSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    double dropout_rate = 0.2;

    void validate() const;
    /// Weights, biases and batch-norm scale/shift of both convolutions.
    std::size_t parameter_count() const;
};

struct ModelSpec {
    ModelKind kind = ModelKind::ef_unet;
    std::size_t depth = 4;            // encoder levels, each followed by a 2x2 max-pool
    std::size_t base_width = 16;      // kernels in the first level, doubled per level
    std::size_t input_channels = 13;  // bands per image
    std::size_t patch_size = 128;
    double dropout_rate = 0.2;
    std::vector<std::size_t> dense_units = {64, 16};  // EF-CNN hidden layers

    void validate() const;
    std::size_t width(std::size_t level) const { return base_width << level; }
    bool segmentation() const { return kind != ModelKind::ef_cnn; }
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct NamedParameter {
    std::string name;
    Tensor value;
};

struct NamedBatchNorm {
    std::string name;
    BatchNormState state;
};

/// Parameter handles of one conv_unit. Indices point into the owning model's
/// parameter and batch-norm lists.
struct ConvUnit {
    ConvUnitSpec spec;
    std::size_t kernel1 = 0, bias1 = 0, gamma1 = 0, beta1 = 0, bn1 = 0;
    std::size_t kernel2 = 0, bias2 = 0, gamma2 = 0, beta2 = 0, bn2 = 0;
};

struct UpLevel {
    std::size_t up_kernel = 0, up_bias = 0;
    ConvUnit unit;
};

class Model {
public:
    /// An empty placeholder; use build() for a usable model.
    Model() = default;

    /// Builds the architecture named by spec.kind with seeded fan-in scaled
    /// uniform weights. Same spec and seed give bit-identical parameters.
    static Model build(const ModelSpec& spec, std::uint64_t seed);

    const ModelSpec& spec() const { return spec_; }

    /// pre/post: N x P x P x C. Segmentation models return N x P x P x 2
    /// softmax probabilities (channel 0 = change); EF-CNN returns N x 1.
    Tensor forward(const Tensor& pre, const Tensor& post, Mode mode, Rng& rng);
    Tensor predict(const Tensor& pre, const Tensor& post);

    std::vector<NamedParameter>& parameters() { return params_; }
    const std::vector<NamedParameter>& parameters() const { return params_; }
    std::vector<NamedBatchNorm>& batch_norms() { return norms_; }
    const std::vector<NamedBatchNorm>& batch_norms() const { return norms_; }

    /// Trainable scalars; running batch-norm statistics are not counted.
    std::size_t count_parameters() const;
    /// Scalars held by the encoder levels (and, for U-Nets, the bottleneck).
    std::size_t count_encoder_parameters() const;

    void zero_grad();
    /// Copy with fresh leaf tensors, so gradients do not flow back into `this`.
    Model clone() const;

    // Layer-level access used by the Siamese forward below.
    const std::vector<ConvUnit>& encoder() const { return encoder_; }
    Tensor run_unit(const ConvUnit& unit, const Tensor& x, Mode mode, Rng& rng);
    std::vector<Tensor> encode(const Tensor& x, Mode mode, Rng& rng);

    /// Siamese forward where the pre and post branches take their encoder
    /// weights from `pre_encoder` and `post_encoder`, and bottleneck, decoder
    /// and head come from `this`. With both set to `this` it is forward().
    Tensor siamese_forward(Model& pre_encoder, Model& post_encoder, const Tensor& pre, const Tensor& post,
                           Mode mode, Rng& rng);

private:
    ModelSpec spec_;
    std::vector<NamedParameter> params_;
    std::vector<NamedBatchNorm> norms_;
    std::vector<ConvUnit> encoder_;
    ConvUnit bottleneck_;
    std::vector<UpLevel> decoder_;  // deepest level first
    std::size_t head_kernel_ = 0, head_bias_ = 0;
    std::size_t flat_gamma_ = 0, flat_beta_ = 0, flat_bn_ = 0;
    std::vector<std::pair<std::size_t, std::size_t>> dense_;  // (weights, bias)
    std::size_t encoder_param_end_ = 0;

    const Tensor& p(std::size_t i) const { return params_[i].value; }
    std::size_t add_param(const std::string& name, Shape shape, double limit, Rng& rng);
    std::size_t add_constant(const std::string& name, Shape shape, double value);
    std::size_t add_norm(const std::string& name, std::size_t channels);
    ConvUnit add_unit(const std::string& name, const ConvUnitSpec& spec, Rng& rng);
    Tensor decode(std::vector<Tensor> skips, Tensor deepest, Mode mode, Rng& rng);
    Tensor ef_cnn_head(const Tensor& features, Mode mode);
};

/// Applies one stand-alone conv_unit, for shape and parameter checks.
struct ConvUnitLayer {
    ConvUnitSpec spec;
    Tensor kernel1, bias1, gamma1, beta1, kernel2, bias2, gamma2, beta2;
    BatchNormState bn1, bn2;

    static ConvUnitLayer build(const ConvUnitSpec& spec, std::uint64_t seed);
    Tensor forward(const Tensor& x, Mode mode, Rng& rng);
    std::size_t count_parameters() const;
};

}  // namespace deltascope
