#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deltascope/errors.hpp"
#include "deltascope/grad_check.hpp"
#include "deltascope/losses.hpp"
#include "deltascope/ops.hpp"
#include "deltascope/rng.hpp"

using namespace deltascope;

namespace {

// Two-channel probabilities with channel 0 taken from `s0`.
Tensor probs(const std::vector<double>& s0) {
    std::vector<double> v;
    for (double p : s0) {
        v.push_back(p);
        v.push_back(1.0 - p);
    }
    return Tensor::from({s0.size(), 2}, v);
}

Tensor targets(const std::vector<double>& t) { return Tensor::from({t.size()}, t); }

// Straight transcription of the loss formulas, no clamping.
double oracle_bce(const std::vector<double>& s, const std::vector<double>& t, double w0, double w1) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        total += w0 * t[i] * std::log(s[i]) + w1 * (1 - t[i]) * std::log(1 - s[i]);
    }
    return -total / static_cast<double>(s.size());
}

double oracle_dice(const std::vector<double>& s, const std::vector<double>& t) {
    double yp = 0, ys = 0, yt = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        yp += s[i] * t[i];
        ys += s[i];
        yt += t[i];
    }
    return 1 - (2 * yp + 1) / (ys + yt + 1);
}

struct Random {
    std::vector<double> s, t;
};

Random random_batch(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Random r;
    for (std::size_t i = 0; i < n; ++i) {
        r.s.push_back(rng.uniform(0.1, 0.9));
        r.t.push_back(rng.bernoulli(0.3) ? 1.0 : 0.0);
    }
    return r;
}

}  // namespace

TEST_CASE("class weights") {
    ClassWeights balanced = class_weights(50, 100);
    CHECK(balanced.w0 == 1.0);
    CHECK(balanced.w1 == 1.0);
    ClassWeights rare = class_weights(2, 100);
    CHECK(rare.w0 == doctest::Approx(25.0));
    CHECK(rare.w1 == doctest::Approx(0.5102).epsilon(1e-4));
    CHECK_THROWS_AS(class_weights(0, 100), DegenerateDatasetError);
    CHECK_THROWS_AS(class_weights(100, 100), DegenerateDatasetError);
}

TEST_CASE("weighted bce hand values") {
    CHECK(weighted_bce(probs({0.5}), targets({1}), {}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const double perfect = weighted_bce(probs({1, 0, 1}), targets({1, 0, 1}), {3, 2}).item();
    CHECK(perfect >= 0.0);
    CHECK(perfect <= 3 * std::abs(std::log(1 - kLogClamp)) + 1e-15);

    Random r = random_batch(40, 1);
    CHECK(weighted_bce(probs(r.s), targets(r.t), {}).item() ==
          doctest::Approx(oracle_bce(r.s, r.t, 1, 1)).epsilon(1e-12));
    CHECK(weighted_bce(probs(r.s), targets(r.t), {4, 0.3}).item() ==
          doctest::Approx(oracle_bce(r.s, r.t, 4, 0.3)).epsilon(1e-12));
}

TEST_CASE("dice hand values") {
    CHECK(dice_loss(probs({0, 0, 0}), targets({0, 0, 0})).item() == 0.0);
    CHECK(dice_loss(probs({1}), targets({1})).item() == 0.0);
    CHECK(dice_loss(probs({1}), targets({0})).item() == doctest::Approx(0.5));
    Random r = random_batch(30, 2);
    CHECK(dice_loss(probs(r.s), targets(r.t)).item() == doctest::Approx(oracle_dice(r.s, r.t)).epsilon(1e-12));
}

TEST_CASE("wbced is the sum of its parts") {
    CHECK(wbced(probs({0.5}), targets({1}), {}).item() == doctest::Approx(0.8931).epsilon(1e-4));
    Random r = random_batch(25, 3);
    const ClassWeights w{2.5, 0.7};
    const double total = wbced(probs(r.s), targets(r.t), w).item();
    const double parts =
        weighted_bce(probs(r.s), targets(r.t), w).item() + dice_loss(probs(r.s), targets(r.t)).item();
    CHECK(std::abs(total - parts) <= 1e-12);
    CHECK(wbced(probs({1, 0}), targets({1, 0}), {}).item() == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(segmentation_loss(LossKind::bce, probs(r.s), targets(r.t), w).item() ==
          weighted_bce(probs(r.s), targets(r.t), w).item());
}

TEST_CASE("classification bce") {
    CHECK(classification_bce(Tensor::from({1, 1}, {0.5}), Tensor::from({1}, {1}), {}).item() ==
          doctest::Approx(std::log(2.0)));
    CHECK(classification_bce(Tensor::from({1}, {1e-12}), Tensor::from({1}, {0}), {}).item() <= 1e-6);
    const double one = classification_bce(Tensor::from({1}, {0.3}), Tensor::from({1}, {1}), {2, 1}).item();
    const double two =
        classification_bce(Tensor::from({2}, {0.3, 0.3}), Tensor::from({2}, {1, 1}), {2, 1}).item();
    CHECK(one == doctest::Approx(two).epsilon(1e-15));
    CHECK_THROWS_AS(classification_bce(Tensor::from({1}, {0.3}), Tensor::from({1}, {2}), {}), ValidationError);
}

TEST_CASE("loss errors") {
    CHECK_THROWS_AS(weighted_bce(probs({0.5, 0.5}), targets({1}), {}), DimensionError);
    CHECK_THROWS_AS(dice_loss(Tensor::from({2, 3}, std::vector<double>(6, 0.3)), targets({1, 0})),
                    DimensionError);
    CHECK_THROWS_AS(weighted_bce(probs({0.5}), targets({1}), {0, 1}), ConfigError);
    CHECK_THROWS_AS(parse_loss_kind("focal"), UsageError);
    CHECK(parse_loss_kind("wbced") == LossKind::wbced);
}

TEST_CASE("loss properties") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Random r = random_batch(5 + rng.uniform_int(30), 100 + trial);
        const ClassWeights w{rng.uniform(0.1, 5), rng.uniform(0.1, 5)};
        const double base = weighted_bce(probs(r.s), targets(r.t), w).item();

        // permutation invariance
        std::vector<std::size_t> order(r.s.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
        Random p;
        for (auto i : order) {
            p.s.push_back(r.s[i]);
            p.t.push_back(r.t[i]);
        }
        CHECK(weighted_bce(probs(p.s), targets(p.t), w).item() == doctest::Approx(base).epsilon(1e-12));
        CHECK(dice_loss(probs(p.s), targets(p.t)).item() ==
              doctest::Approx(dice_loss(probs(r.s), targets(r.t)).item()).epsilon(1e-12));

        // linearity in the weights
        const double lambda = rng.uniform(0.5, 4);
        CHECK(weighted_bce(probs(r.s), targets(r.t), {lambda * w.w0, lambda * w.w1}).item() ==
              doctest::Approx(lambda * base).epsilon(1e-12));

        // dice symmetry for binary arguments
        std::vector<double> b;
        for (std::size_t i = 0; i < r.s.size(); ++i) b.push_back(rng.bernoulli(0.5) ? 1.0 : 0.0);
        CHECK(dice_loss(probs(b), targets(r.t)).item() ==
              doctest::Approx(dice_loss(probs(r.t), targets(b)).item()).epsilon(1e-12));
    }
    // finite at the extremes thanks to the clamp
    for (double p : {0.0, 1.0}) {
        for (double t : {0.0, 1.0}) {
            CHECK(std::isfinite(wbced(probs({p}), targets({t}), {25, 0.5}).item()));
        }
    }
}

TEST_CASE("loss gradients match finite differences") {
    Random r = random_batch(12, 9);
    Tensor s = probs(r.s);
    Tensor t = targets(r.t);
    const ClassWeights w{3.0, 0.6};
    CHECK(grad_check([&] { return weighted_bce(s, t, w); }, {s}).max_relative_error < 1e-4);
    CHECK(grad_check([&] { return dice_loss(s, t); }, {s}).max_relative_error < 1e-4);
    CHECK(grad_check([&] { return wbced(s, t, w); }, {s}).max_relative_error < 1e-4);

    // end to end through a softmax head
    Rng rng(4);
    std::vector<double> logits(24);
    for (double& v : logits) v = rng.uniform(-2, 2);
    Tensor z = Tensor::from({12, 2}, logits);
    CHECK(grad_check([&] { return wbced(softmax_channels(z), t, w); }, {z}).max_relative_error < 1e-4);

    Tensor scores = Tensor::from({4, 1}, {0.2, 0.7, 0.4, 0.9});
    Tensor labels = Tensor::from({4}, {0, 1, 1, 0});
    CHECK(grad_check([&] { return classification_bce(scores, labels, w); }, {scores}).max_relative_error < 1e-4);
}
