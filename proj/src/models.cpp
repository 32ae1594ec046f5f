#include "deltascope/models.hpp"

#include <cmath>

#include "deltascope/errors.hpp"

namespace deltascope {

using nlohmann::json;

const char* model_kind_name(ModelKind kind) {
    switch (kind) {
        case ModelKind::ef_unet: return "ef_unet";
        case ModelKind::siam_unet: return "siam_unet";
        case ModelKind::ef_cnn: return "ef_cnn";
    }
    return "unknown";
}

ModelKind parse_model_kind(std::string_view name) {
    if (name == "ef_unet") return ModelKind::ef_unet;
    if (name == "siam_unet") return ModelKind::siam_unet;
    if (name == "ef_cnn") return ModelKind::ef_cnn;
    throw ConfigError("unknown model kind '" + std::string(name) + "'");
}

void ConvUnitSpec::validate() const {
    if (kernel != 3) {
        throw ConfigError("conv_unit kernel is fixed at 3, got " + std::to_string(kernel));
    }
    if (in_channels < 1 || out_channels < 1) {
        throw ConfigError("conv_unit needs at least one input and one output channel");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(dropout_rate));
    }
}

std::size_t ConvUnitSpec::parameter_count() const {
    const std::size_t k2 = kernel * kernel;
    return (k2 * in_channels * out_channels + 3 * out_channels) + (k2 * out_channels * out_channels + 3 * out_channels);
}

void ModelSpec::validate() const {
    if (depth < 1) {
        throw ConfigError("model depth must be >= 1");
    }
    if (base_width < 1) {
        throw ConfigError("base width must be >= 1");
    }
    if (input_channels < 1) {
        throw ConfigError("input channel count must be >= 1");
    }
    if (depth >= 16 || patch_size == 0 || patch_size % (std::size_t{1} << depth) != 0) {
        throw ConfigError("patch size " + std::to_string(patch_size) + " is not divisible by 2^" +
                          std::to_string(depth) + " = " + std::to_string(std::size_t{1} << std::min<std::size_t>(depth, 63)));
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(dropout_rate));
    }
    for (std::size_t u : dense_units) {
        if (u < 1) throw ConfigError("dense layer widths must be >= 1");
    }
}

json to_json(const ModelSpec& s) {
    return {{"kind", model_kind_name(s.kind)},   {"depth", s.depth},
            {"base_width", s.base_width},         {"input_channels", s.input_channels},
            {"patch_size", s.patch_size},         {"dropout_rate", s.dropout_rate},
            {"dense_units", s.dense_units}};
}

ModelSpec model_spec_from_json(const json& j) {
    try {
        ModelSpec s;
        s.kind = parse_model_kind(j.at("kind").get<std::string>());
        s.depth = j.at("depth").get<std::size_t>();
        s.base_width = j.at("base_width").get<std::size_t>();
        s.input_channels = j.at("input_channels").get<std::size_t>();
        s.patch_size = j.at("patch_size").get<std::size_t>();
        s.dropout_rate = j.value("dropout_rate", 0.2);
        s.dense_units = j.value("dense_units", std::vector<std::size_t>{64, 16});
        s.validate();
        return s;
    } catch (const json::exception& e) {
        throw FormatError(std::string("model spec: ") + e.what());
    }
}

namespace {

Tensor uniform_tensor(Shape shape, double limit, Rng rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(-limit, limit);
    return Tensor::from(std::move(shape), std::move(v), true);
}

double fan_in_limit(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

struct UnitTensors {
    const Tensor &k1, &b1, &g1, &be1;
    BatchNormState& bn1;
    const Tensor &k2, &b2, &g2, &be2;
    BatchNormState& bn2;
};

Tensor apply_unit(const UnitTensors& t, double rate, const Tensor& x, Mode mode, Rng& rng) {
    Tensor h = relu(batch_norm(conv2d(x, t.k1, t.b1), t.g1, t.be1, t.bn1, mode));
    h = relu(batch_norm(conv2d(h, t.k2, t.b2), t.g2, t.be2, t.bn2, mode));
    return dropout(h, rate, mode, rng);
}

void check_pair(const ModelSpec& spec, const Tensor& pre, const Tensor& post) {
    if (pre.shape() != post.shape()) {
        throw DimensionError("pre image " + shape_to_string(pre.shape()) + " and post image " +
                             shape_to_string(post.shape()) + " differ in shape");
    }
    if (pre.rank() != 4 || pre.dim(1) != spec.patch_size || pre.dim(2) != spec.patch_size ||
        pre.dim(3) != spec.input_channels) {
        throw DimensionError("model expects N x " + std::to_string(spec.patch_size) + " x " +
                             std::to_string(spec.patch_size) + " x " + std::to_string(spec.input_channels) +
                             " inputs, got " + shape_to_string(pre.shape()));
    }
}

}  // namespace

std::size_t Model::add_param(const std::string& name, Shape shape, double limit, Rng& rng) {
    params_.push_back({name, uniform_tensor(std::move(shape), limit, rng.split(name))});
    return params_.size() - 1;
}

std::size_t Model::add_constant(const std::string& name, Shape shape, double value) {
    params_.push_back({name, Tensor::full(std::move(shape), value, true)});
    return params_.size() - 1;
}

std::size_t Model::add_norm(const std::string& name, std::size_t channels) {
    norms_.push_back({name, BatchNormState::identity(channels)});
    return norms_.size() - 1;
}

ConvUnit Model::add_unit(const std::string& name, const ConvUnitSpec& s, Rng& rng) {
    s.validate();
    ConvUnit u;
    u.spec = s;
    const std::size_t k = s.kernel, ci = s.in_channels, co = s.out_channels;
    u.kernel1 = add_param(name + ".conv1.kernel", {k, k, ci, co}, fan_in_limit(k * k * ci), rng);
    u.bias1 = add_constant(name + ".conv1.bias", {co}, 0.0);
    u.gamma1 = add_constant(name + ".bn1.gamma", {co}, 1.0);
    u.beta1 = add_constant(name + ".bn1.beta", {co}, 0.0);
    u.bn1 = add_norm(name + ".bn1", co);
    u.kernel2 = add_param(name + ".conv2.kernel", {k, k, co, co}, fan_in_limit(k * k * co), rng);
    u.bias2 = add_constant(name + ".conv2.bias", {co}, 0.0);
    u.gamma2 = add_constant(name + ".bn2.gamma", {co}, 1.0);
    u.beta2 = add_constant(name + ".bn2.beta", {co}, 0.0);
    u.bn2 = add_norm(name + ".bn2", co);
    return u;
}

Model Model::build(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    Rng rng(seed);
    const bool siamese = spec.kind == ModelKind::siam_unet;
    const std::size_t first_in = siamese ? spec.input_channels : 2 * spec.input_channels;
    const double rate = spec.dropout_rate;

    for (std::size_t l = 0; l < spec.depth; ++l) {
        const std::size_t in = l == 0 ? first_in : spec.width(l - 1);
        m.encoder_.push_back(m.add_unit("enc" + std::to_string(l), {in, spec.width(l), 3, rate}, rng));
    }

    if (spec.segmentation()) {
        const std::size_t deepest = spec.width(spec.depth - 1) * (siamese ? 2 : 1);
        m.bottleneck_ = m.add_unit("bottleneck", {deepest, spec.width(spec.depth), 3, rate}, rng);
        m.encoder_param_end_ = m.params_.size();
        for (std::size_t l = spec.depth; l-- > 0;) {
            const std::string name = "dec" + std::to_string(l);
            const std::size_t below = spec.width(l + 1), w = spec.width(l);
            UpLevel up;
            up.up_kernel = m.add_param(name + ".up.kernel", {2, 2, below, w}, fan_in_limit(below), rng);
            up.up_bias = m.add_constant(name + ".up.bias", {w}, 0.0);
            const std::size_t skip = siamese ? 2 * w : w;
            up.unit = m.add_unit(name, {w + skip, w, 3, rate}, rng);
            m.decoder_.push_back(up);
        }
        m.head_kernel_ = m.add_param("head.kernel", {1, 1, spec.width(0), 2}, fan_in_limit(spec.width(0)), rng);
        m.head_bias_ = m.add_constant("head.bias", {2}, 0.0);
    } else {
        m.encoder_param_end_ = m.params_.size();
        const std::size_t side = spec.patch_size >> spec.depth;
        std::size_t features = side * side * spec.width(spec.depth - 1);
        m.flat_gamma_ = m.add_constant("flat.bn.gamma", {features}, 1.0);
        m.flat_beta_ = m.add_constant("flat.bn.beta", {features}, 0.0);
        m.flat_bn_ = m.add_norm("flat.bn", features);
        std::vector<std::size_t> widths = spec.dense_units;
        widths.push_back(1);
        for (std::size_t i = 0; i < widths.size(); ++i) {
            const std::string name = "dense" + std::to_string(i);
            // sigmoid layers: LeCun-style fan-in scaling
            const double limit = std::sqrt(3.0 / static_cast<double>(features));
            const std::size_t w = m.add_param(name + ".weights", {features, widths[i]}, limit, rng);
            const std::size_t b = m.add_constant(name + ".bias", {widths[i]}, 0.0);
            m.dense_.emplace_back(w, b);
            features = widths[i];
        }
    }
    return m;
}

Tensor Model::run_unit(const ConvUnit& u, const Tensor& x, Mode mode, Rng& rng) {
    UnitTensors t{p(u.kernel1), p(u.bias1), p(u.gamma1), p(u.beta1), norms_[u.bn1].state,
                  p(u.kernel2), p(u.bias2), p(u.gamma2), p(u.beta2), norms_[u.bn2].state};
    return apply_unit(t, u.spec.dropout_rate, x, mode, rng);
}

std::vector<Tensor> Model::encode(const Tensor& x, Mode mode, Rng& rng) {
    std::vector<Tensor> levels;
    Tensor h = x;
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
        if (l > 0) h = max_pool2d(h);
        h = run_unit(encoder_[l], h, mode, rng);
        levels.push_back(h);
    }
    return levels;
}

Tensor Model::decode(std::vector<Tensor> skips, Tensor deepest, Mode mode, Rng& rng) {
    Tensor h = run_unit(bottleneck_, deepest, mode, rng);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        const UpLevel& up = decoder_[i];
        const std::size_t level = spec_.depth - 1 - i;
        h = transpose_conv2d(h, p(up.up_kernel), p(up.up_bias), 2);
        h = run_unit(up.unit, concat_channels(h, skips[level]), mode, rng);
    }
    return softmax_channels(conv2d(h, p(head_kernel_), p(head_bias_)));
}

Tensor Model::ef_cnn_head(const Tensor& features, Mode mode) {
    Tensor h = batch_norm(flatten(features), p(flat_gamma_), p(flat_beta_), norms_[flat_bn_].state, mode);
    for (const auto& [w, b] : dense_) h = sigmoid(dense(h, p(w), p(b)));
    return h;
}

Tensor Model::siamese_forward(Model& pre_encoder, Model& post_encoder, const Tensor& pre, const Tensor& post,
                              Mode mode, Rng& rng) {
    if (spec_.kind != ModelKind::siam_unet) {
        throw UsageError("siamese_forward on a " + std::string(model_kind_name(spec_.kind)) + " model");
    }
    check_pair(spec_, pre, post);
    std::vector<Tensor> a = pre_encoder.encode(pre, mode, rng);
    std::vector<Tensor> b = post_encoder.encode(post, mode, rng);
    std::vector<Tensor> skips;
    for (std::size_t l = 0; l < a.size(); ++l) skips.push_back(concat_channels(a[l], b[l]));
    Tensor deepest = max_pool2d(skips.back());
    return decode(std::move(skips), deepest, mode, rng);
}

Tensor Model::forward(const Tensor& pre, const Tensor& post, Mode mode, Rng& rng) {
    check_pair(spec_, pre, post);
    if (spec_.kind == ModelKind::siam_unet) {
        return siamese_forward(*this, *this, pre, post, mode, rng);
    }
    std::vector<Tensor> levels = encode(concat_channels(pre, post), mode, rng);
    Tensor deepest = max_pool2d(levels.back());
    if (spec_.kind == ModelKind::ef_cnn) {
        return ef_cnn_head(deepest, mode);
    }
    return decode(std::move(levels), deepest, mode, rng);
}

Tensor Model::predict(const Tensor& pre, const Tensor& post) {
    Rng unused(0);
    return forward(pre, post, Mode::infer, unused);
}

std::size_t Model::count_parameters() const {
    std::size_t n = 0;
    for (const auto& param : params_) n += param.value.numel();
    return n;
}

std::size_t Model::count_encoder_parameters() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < encoder_param_end_; ++i) n += params_[i].value.numel();
    return n;
}

void Model::zero_grad() {
    for (auto& param : params_) param.value.zero_grad();
}

Model Model::clone() const {
    Model copy = *this;
    for (auto& param : copy.params_) {
        param.value = Tensor::from(param.value.shape(),
                                   std::vector<double>(param.value.data().begin(), param.value.data().end()), true);
    }
    return copy;
}

ConvUnitLayer ConvUnitLayer::build(const ConvUnitSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    const std::size_t k = spec.kernel, ci = spec.in_channels, co = spec.out_channels;
    ConvUnitLayer l;
    l.spec = spec;
    l.kernel1 = uniform_tensor({k, k, ci, co}, fan_in_limit(k * k * ci), rng.split("conv1.kernel"));
    l.kernel2 = uniform_tensor({k, k, co, co}, fan_in_limit(k * k * co), rng.split("conv2.kernel"));
    l.bias1 = Tensor::zeros({co}, true);
    l.bias2 = Tensor::zeros({co}, true);
    l.gamma1 = Tensor::full({co}, 1.0, true);
    l.gamma2 = Tensor::full({co}, 1.0, true);
    l.beta1 = Tensor::zeros({co}, true);
    l.beta2 = Tensor::zeros({co}, true);
    l.bn1 = BatchNormState::identity(co);
    l.bn2 = BatchNormState::identity(co);
    return l;
}

Tensor ConvUnitLayer::forward(const Tensor& x, Mode mode, Rng& rng) {
    UnitTensors t{kernel1, bias1, gamma1, beta1, bn1, kernel2, bias2, gamma2, beta2, bn2};
    return apply_unit(t, spec.dropout_rate, x, mode, rng);
}

std::size_t ConvUnitLayer::count_parameters() const {
    std::size_t n = 0;
    for (const Tensor* t : {&kernel1, &bias1, &gamma1, &beta1, &kernel2, &bias2, &gamma2, &beta2}) n += t->numel();
    return n;
}

}  // namespace deltascope
