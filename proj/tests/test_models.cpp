#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "deltascope/errors.hpp"
#include "deltascope/grad_check.hpp"
#include "deltascope/models.hpp"

using namespace deltascope;

namespace {

Tensor random_images(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform();
    return Tensor::from(std::move(shape), std::move(v));
}

// Layer-by-layer enumeration, written without reference to the builder.
std::size_t unit_count(std::size_t ci, std::size_t co) {
    return 3 * 3 * ci * co + co + 2 * co + 3 * 3 * co * co + co + 2 * co;
}

std::size_t unet_count(std::size_t c, std::size_t depth, std::size_t base, bool siamese, std::size_t* encoder) {
    auto w = [&](std::size_t l) { return base << l; };
    std::size_t enc = unit_count(siamese ? c : 2 * c, w(0));
    for (std::size_t l = 1; l < depth; ++l) enc += unit_count(w(l - 1), w(l));
    enc += unit_count(siamese ? 2 * w(depth - 1) : w(depth - 1), w(depth));
    std::size_t dec = 0;
    for (std::size_t l = 0; l < depth; ++l) {
        dec += 2 * 2 * w(l + 1) * w(l) + w(l);
        dec += unit_count(siamese ? 3 * w(l) : 2 * w(l), w(l));
    }
    const std::size_t head = w(0) * 2 + 2;
    if (encoder) *encoder = enc;
    return enc + dec + head;
}

ModelSpec small_spec(ModelKind kind, std::size_t depth = 2, std::size_t base = 4, std::size_t patch = 16,
                     std::size_t channels = 3) {
    ModelSpec s;
    s.kind = kind;
    s.depth = depth;
    s.base_width = base;
    s.patch_size = patch;
    s.input_channels = channels;
    return s;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.numel() == b.numel() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("conv_unit") {
    ConvUnitLayer unit = ConvUnitLayer::build({13, 16, 3, 0.2}, 1);
    Rng rng(2);
    Tensor x = random_images({1, 16, 16, 13}, 3);
    CHECK(unit.forward(x, Mode::train, rng).shape() == Shape{1, 16, 16, 16});
    CHECK(unit.count_parameters() == unit_count(13, 16));
    CHECK(ConvUnitSpec{13, 16, 3, 0.2}.parameter_count() == unit_count(13, 16));
    CHECK(same_bits(unit.forward(x, Mode::infer, rng), unit.forward(x, Mode::infer, rng)));
    CHECK_THROWS_AS(ConvUnitLayer::build({13, 16, 5, 0.2}, 1), ConfigError);
    CHECK_THROWS_AS(ConvUnitLayer::build({13, 0, 3, 0.2}, 1), ConfigError);
}

TEST_CASE("full-size EF-UNet and Siam-UNet shapes") {
    ModelSpec spec;  // depth 4, base 16, 13 bands, 128 px
    for (ModelKind kind : {ModelKind::ef_unet, ModelKind::siam_unet}) {
        spec.kind = kind;
        Model m = Model::build(spec, 7);
        Tensor pre = random_images({1, 128, 128, 13}, 1), post = random_images({1, 128, 128, 13}, 2);
        Tensor out = m.predict(pre, post);
        CHECK(out.shape() == Shape{1, 128, 128, 2});
        for (std::size_t i = 0; i < out.numel(); i += 2) {
            CHECK(std::abs(out.at(i) + out.at(i + 1) - 1.0) <= 1e-12);
        }
        std::size_t encoder = 0;
        CHECK(m.count_parameters() == unet_count(13, 4, 16, kind == ModelKind::siam_unet, &encoder));
        CHECK(m.count_encoder_parameters() == encoder);

        Rng rng(0);
        auto levels = m.encode(kind == ModelKind::siam_unet ? pre : concat_channels(pre, post), Mode::infer, rng);
        CHECK(levels[0].dim(3) == 16);  // per image for Siamese, in total for early fusion
        CHECK(levels[3].shape() == Shape{1, 16, 16, 128});
    }
}

TEST_CASE("parameter counting") {
    for (std::size_t depth : {1, 2, 3}) {
        for (std::size_t base : {2, 5}) {
            ModelSpec ef = small_spec(ModelKind::ef_unet, depth, base, 16, 4);
            ModelSpec siam = small_spec(ModelKind::siam_unet, depth, base, 16, 4);
            CHECK(Model::build(ef, 1).count_parameters() == unet_count(4, depth, base, false, nullptr));
            CHECK(Model::build(siam, 1).count_parameters() == unet_count(4, depth, base, true, nullptr));
        }
    }
    // EF-CNN: conv stack, flatten BN, dense 64, 16, 1
    ModelSpec cnn = small_spec(ModelKind::ef_cnn, 2, 4, 16, 3);
    const std::size_t features = 4 * 4 * 8;
    const std::size_t expected = unit_count(6, 4) + unit_count(4, 8) + 2 * features + features * 64 + 64 +
                                 64 * 16 + 16 + 16 * 1 + 1;
    CHECK(Model::build(cnn, 1).count_parameters() == expected);
}

TEST_CASE("spec validation and JSON") {
    CHECK_THROWS_AS(Model::build(small_spec(ModelKind::ef_unet, 3, 4, 20), 1), ConfigError);
    CHECK_THROWS_AS(Model::build(small_spec(ModelKind::ef_unet, 2, 0, 16), 1), ConfigError);
    CHECK_THROWS_AS(parse_model_kind("unetpp"), ConfigError);
    ModelSpec s = small_spec(ModelKind::siam_unet, 3, 6, 24, 5);
    s.dropout_rate = 0.1;
    ModelSpec back = model_spec_from_json(to_json(s));
    CHECK(back.kind == s.kind);
    CHECK(back.depth == 3);
    CHECK(back.patch_size == 24);
    CHECK(back.dropout_rate == 0.1);

    Model m = Model::build(small_spec(ModelKind::ef_unet), 1);
    Tensor wrong = random_images({1, 16, 16, 4}, 1);
    CHECK_THROWS_AS(m.predict(wrong, wrong), DimensionError);
}

TEST_CASE("builders are pure") {
    for (ModelKind kind : {ModelKind::ef_unet, ModelKind::siam_unet, ModelKind::ef_cnn}) {
        Model a = Model::build(small_spec(kind), 42);
        Model b = Model::build(small_spec(kind), 42);
        Model c = Model::build(small_spec(kind), 43);
        bool all_same = true, any_diff = false;
        for (std::size_t i = 0; i < a.parameters().size(); ++i) {
            all_same = all_same && same_bits(a.parameters()[i].value, b.parameters()[i].value);
            any_diff = any_diff || !same_bits(a.parameters()[i].value, c.parameters()[i].value);
        }
        CHECK(all_same);
        CHECK(any_diff);
    }
}

TEST_CASE("segmentation outputs match input extents across depths") {
    for (std::size_t depth : {1, 2, 3}) {
        for (ModelKind kind : {ModelKind::ef_unet, ModelKind::siam_unet}) {
            Model m = Model::build(small_spec(kind, depth, 3, 16, 2), depth);
            Tensor pre = random_images({2, 16, 16, 2}, 1), post = random_images({2, 16, 16, 2}, 2);
            Rng rng(1);
            Tensor out = m.forward(pre, post, Mode::train, rng);
            CHECK(out.shape() == Shape{2, 16, 16, 2});
            // swapping the pair keeps the output valid; no symmetry is claimed
            Tensor swapped = m.predict(post, pre);
            for (double v : swapped.data()) CHECK((std::isfinite(v) && v >= 0.0 && v <= 1.0));
        }
    }
}

TEST_CASE("EF-CNN") {
    ModelSpec spec;
    spec.kind = ModelKind::ef_cnn;
    Model full = Model::build(spec, 3);
    Tensor pre = random_images({1, 128, 128, 13}, 1), post = random_images({1, 128, 128, 13}, 2);
    CHECK(full.predict(pre, post).shape() == Shape{1, 1});

    Model m = Model::build(small_spec(ModelKind::ef_cnn), 3);
    Tensor a = random_images({3, 16, 16, 3}, 4), b = random_images({3, 16, 16, 3}, 5);
    Tensor out = m.predict(a, b);
    CHECK(out.shape() == Shape{3, 1});
    for (double v : out.data()) CHECK((v > 0.0 && v < 1.0));

    std::vector<double> twice(a.data().begin(), a.data().begin() + 16 * 16 * 3);
    twice.insert(twice.end(), twice.begin(), twice.end());
    std::vector<double> twice_b(b.data().begin(), b.data().begin() + 16 * 16 * 3);
    twice_b.insert(twice_b.end(), twice_b.begin(), twice_b.end());
    Tensor dup = m.predict(Tensor::from({2, 16, 16, 3}, twice), Tensor::from({2, 16, 16, 3}, twice_b));
    CHECK(dup.at(0) == dup.at(1));
}

TEST_CASE("Siamese gradients are the sum of the two branch contributions") {
    ModelSpec spec = small_spec(ModelKind::siam_unet, 2, 3, 8, 2);
    spec.dropout_rate = 0.0;
    Model m = Model::build(spec, 9);
    Tensor pre = random_images({2, 8, 8, 2}, 1), post = random_images({2, 8, 8, 2}, 2);
    Tensor weights = random_images({2, 8, 8, 2}, 3);
    Rng rng(0);

    m.zero_grad();
    backward(sum(mul(m.forward(pre, post, Mode::train, rng), weights)));
    const std::size_t encoder_params = 8 * spec.depth;  // eight tensors per conv_unit
    std::vector<std::vector<double>> full;
    for (std::size_t i = 0; i < encoder_params; ++i) {
        const auto g = m.parameters()[i].value.grad();
        full.emplace_back(g.begin(), g.end());
    }

    // Each pass lets gradient reach the shared weights through one branch only.
    Model frozen = m.clone();
    m.zero_grad();
    backward(sum(mul(m.siamese_forward(m, frozen, pre, post, Mode::train, rng), weights)));
    backward(sum(mul(m.siamese_forward(frozen, m, pre, post, Mode::train, rng), weights)));
    double worst = 0.0;
    for (std::size_t i = 0; i < encoder_params; ++i) {
        const auto g = m.parameters()[i].value.grad();
        double scale = 1e-6;  // conv biases ahead of batch norm have zero gradient
        for (double v : full[i]) scale = std::max(scale, std::abs(v));
        for (std::size_t j = 0; j < g.size(); ++j) worst = std::max(worst, std::abs(g[j] - full[i][j]) / scale);
    }
    CHECK(worst < 1e-9);
    CHECK(m.parameters()[0].name == "enc0.conv1.kernel");
}

TEST_CASE("model gradients match finite differences") {
    for (ModelKind kind : {ModelKind::ef_unet, ModelKind::siam_unet, ModelKind::ef_cnn}) {
        ModelSpec spec = small_spec(kind, 1, 2, 4, 1);
        spec.dropout_rate = 0.0;
        spec.dense_units = {3};
        Model m = Model::build(spec, 5);
        Tensor pre = random_images({4, 4, 4, 1}, 1), post = random_images({4, 4, 4, 1}, 2);
        Rng rng(0);
        std::vector<Tensor> inputs;
        for (auto& p : m.parameters()) {
            if (p.name.find("kernel") != std::string::npos || p.name.find("weights") != std::string::npos) {
                inputs.push_back(p.value);
            }
        }
        Tensor probe = random_images(kind == ModelKind::ef_cnn ? Shape{4, 1} : Shape{4, 4, 4, 2}, 6);
        auto result = grad_check([&] { return sum(mul(m.forward(pre, post, Mode::train, rng), probe)); }, inputs);
        INFO(std::string(model_kind_name(kind)));
        CHECK(result.max_relative_error < 1e-4);
        CHECK(result.checked > 0);
    }
}
