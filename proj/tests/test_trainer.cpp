#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>

#include "deltascope/trainer.hpp"
#include "synthetic.hpp"
#include "test_support.hpp"

using namespace deltascope;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config(ModelKind kind, std::size_t patch = 8, std::size_t channels = 2) {
    TrainConfig cfg;
    cfg.model.kind = kind;
    cfg.model.depth = 1;
    cfg.model.base_width = 4;
    cfg.model.patch_size = patch;
    cfg.model.input_channels = channels;
    cfg.model.dense_units = {8};
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;
    cfg.seed = 5;
    return cfg;
}

bool same_parameters(const Model& a, const Model& b) {
    if (a.parameters().size() != b.parameters().size()) return false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        const auto& x = a.parameters()[i].value;
        const auto& y = b.parameters()[i].value;
        if (x.numel() != y.numel() || std::memcmp(x.data().data(), y.data().data(), x.numel() * 8) != 0) return false;
    }
    return true;
}

NamedParameter scalar_param(double v) { return {"x", Tensor::from({1}, {v}, true)}; }

}  // namespace

TEST_CASE("adam") {
    SUBCASE("zero gradient leaves fresh parameters alone and decays moments") {
        std::vector<NamedParameter> params{scalar_param(2.0)};
        Adam opt(0.1);
        opt.step(params);
        CHECK(params[0].value.at(0) == 2.0);
        params[0].value.mutable_grad()[0] = 1.0;
        opt.step(params);
        const double m = opt.first_moments()[0][0];
        params[0].value.zero_grad();
        opt.step(params);
        CHECK(opt.first_moments()[0][0] == doctest::Approx(0.9 * m));
    }
    SUBCASE("constant gradient moves against its sign") {
        std::vector<NamedParameter> params{scalar_param(0.0)};
        Adam opt(0.01);
        double last = 0.0;
        for (int i = 0; i < 100; ++i) {
            params[0].value.zero_grad();
            params[0].value.mutable_grad()[0] = 0.5;
            opt.step(params);
            CHECK(params[0].value.at(0) < last);
            last = params[0].value.at(0);
        }
    }
    SUBCASE("quadratic converges") {
        std::vector<NamedParameter> params{scalar_param(0.0)};
        Adam opt(0.01);
        for (int i = 0; i < 500; ++i) {
            params[0].value.zero_grad();
            Tensor x = params[0].value;
            Tensor d = add(x, Tensor::from({1}, {-1.0}));
            backward(sum(mul(d, d)));
            opt.step(params);
        }
        CHECK(std::abs(params[0].value.at(0) - 1.0) < 1e-3);
    }
    SUBCASE("non-finite gradient names the parameter") {
        std::vector<NamedParameter> params{scalar_param(1.0)};
        params[0].value.mutable_grad()[0] = NAN;
        Adam opt;
        try {
            opt.step(params);
            FAIL("expected NumericalError");
        } catch (const NumericalError& e) {
            CHECK(std::string(e.what()).find("x") != std::string::npos);
        }
        CHECK(params[0].value.at(0) == 1.0);
    }
}

TEST_CASE("batches and class weights") {
    Dataset d = synthetic::separable(10, 8, 2, 1);
    const std::vector<std::size_t> ids{0, 1, 2};
    TrainConfig cfg = small_config(ModelKind::ef_unet);
    Batch b = make_batch(d, ids, cfg.model);
    CHECK(b.pre.shape() == Shape{3, 8, 8, 2});
    CHECK(b.target.shape() == Shape{3, 8, 8});
    CHECK(make_batch(d, ids, small_config(ModelKind::ef_cnn).model).target.shape() == Shape{3});

    ModelSpec wrong = cfg.model;
    wrong.input_channels = 3;
    CHECK_THROWS_AS(make_batch(d, ids, wrong), DimensionError);

    // weights use the given split only: editing other samples changes nothing
    const std::vector<std::size_t> train{0, 1, 2, 3};
    const ClassWeights before = training_class_weights(d, train, ModelKind::ef_unet, ClassWeighting::inverse_population);
    Dataset edited = d;
    std::fill(edited.samples[4].patch.gt.begin(), edited.samples[4].patch.gt.end(), 1);
    const ClassWeights after =
        training_class_weights(edited, train, ModelKind::ef_unet, ClassWeighting::inverse_population);
    CHECK(before.w0 == after.w0);
    CHECK(before.w1 == after.w1);
    CHECK(training_class_weights(d, train, ModelKind::ef_unet, ClassWeighting::uniform).w0 == 1.0);

    const std::vector<std::size_t> negatives_only{1, 3, 5};
    CHECK_THROWS_AS(training_class_weights(d, negatives_only, ModelKind::ef_unet, ClassWeighting::uniform),
                    DegenerateDatasetError);
}

TEST_CASE("config") {
    TrainConfig cfg = small_config(ModelKind::ef_cnn);
    cfg.loss = LossKind::wbced;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config(ModelKind::siam_unet);
    cfg.loss = LossKind::wbced;
    cfg.threshold = 0.3;
    TrainConfig back = train_config_from_json(to_json(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
    back.seed = 6;
    CHECK(config_hash(back) != config_hash(cfg));
    CHECK(architecture_loss_name(ModelKind::siam_unet, LossKind::wbced) == "Siam-wbced");
    CHECK(architecture_loss_name(ModelKind::ef_unet, LossKind::bce) == "EF-bce");
    CHECK(architecture_loss_name(ModelKind::ef_cnn, LossKind::bce) == "EF-CNN");
    cfg.k = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("training loss decreases and runs are reproducible") {
    Dataset d = synthetic::separable(8, 32, 4, 2);
    TrainConfig cfg;
    cfg.model.depth = 2;
    cfg.model.base_width = 8;
    cfg.model.patch_size = 32;
    cfg.model.input_channels = 4;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;
    std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7};
    TrainResult a = train_model(d, all, {}, cfg, 0);
    REQUIRE(a.history.size() == 5);
    for (std::size_t e = 1; e < a.history.size(); ++e) {
        CHECK(a.history[e].train_loss < a.history[e - 1].train_loss);
    }
    TrainResult b = train_model(d, all, {}, cfg, 0);
    CHECK(same_parameters(a.model, b.model));
    CHECK(history_csv(a.history) == history_csv(b.history));
    CHECK(history_csv(a.history).rfind("epoch,train_loss,val_loss\n1,", 0) == 0);
}

TEST_CASE("folds") {
    Dataset d = synthetic::separable(10, 8, 2, 3, 1);
    FoldAssignment folds = kfold_split(10, 5, 1);
    TrainConfig cfg = small_config(ModelKind::ef_unet);
    cfg.epochs = 15;
    CHECK(folds.complement(0).size() == 8);
    CHECK(folds.members(0).size() == 2);

    FoldResult r = train_fold(d, folds, 0, cfg);
    CHECK(r.sweep.size() == cfg.threshold_grid.size());
    CHECK(r.sweep[0].counts.total() == 2 * 8 * 8);
    REQUIRE(r.training.history.back().val_loss.has_value());

    CrossValidationResult one = cross_validate(d, folds, cfg, 1);
    CrossValidationResult many = cross_validate(d, folds, cfg, 3);
    REQUIRE(one.reports.size() == 5);
    for (std::size_t f = 0; f < 5; ++f) {
        CHECK(same_parameters(one.folds[f].training.model, many.folds[f].training.model));
        CHECK(one.reports[f].counts == many.reports[f].counts);
    }
    std::vector<double> recalls;
    for (const auto& rep : one.reports) recalls.push_back(*rep.recall);
    if (one.summary.recall) {
        const MetricSummary oracle = mean_std(recalls);
        CHECK(one.summary.recall->mean == oracle.mean);
        CHECK(one.summary.recall->std == oracle.std);
    }
    CHECK(std::find(cfg.threshold_grid.begin(), cfg.threshold_grid.end(), one.threshold) != cfg.threshold_grid.end());

    cfg.threshold = 0.3;
    CHECK(cross_validate(d, folds, cfg, 2).threshold == 0.3);
}

TEST_CASE("identical folds agree") {
    Dataset d = synthetic::separable(1, 8, 2, 4);
    for (int i = 0; i < 9; ++i) d.samples.push_back(d.samples[0]);
    TrainConfig cfg = small_config(ModelKind::ef_unet);
    cfg.model.dropout_rate = 0.0;
    cfg.threshold = 0.5;
    CrossValidationResult r = cross_validate(d, kfold_split(10, 5, 0), cfg, 2);
    REQUIRE(r.summary.balanced_accuracy.has_value());
    CHECK(r.summary.balanced_accuracy->std <= 1e-12);
}

TEST_CASE("fold failures carry the fold identity") {
    Dataset d = synthetic::separable(10, 8, 2, 5);
    FoldAssignment folds = kfold_split(10, 5, 2);
    // only sample 0 has change: its fold's training split is single-class
    for (std::size_t i = 1; i < 10; ++i) std::fill(d.samples[i].patch.gt.begin(), d.samples[i].patch.gt.end(), 0);
    try {
        cross_validate(d, folds, small_config(ModelKind::ef_unet), 2);
        FAIL("expected a fold error");
    } catch (const FoldError& e) {
        CHECK(e.fold() == folds.fold_of[0]);
        CHECK(e.category() == ErrorCategory::data);
    }
}

TEST_CASE("classification training") {
    Dataset d = synthetic::separable(10, 16, 2, 6);
    TrainConfig cfg = small_config(ModelKind::ef_cnn, 16);
    cfg.threshold = 0.5;
    CrossValidationResult r = cross_validate(d, kfold_split(10, 5, 3), cfg, 2);
    CHECK(r.reports.size() == 5);
    CHECK(r.reports[0].counts.total() == 2);
}

TEST_CASE("checkpoints") {
    TempDir dir;
    Dataset d = synthetic::separable(4, 16, 2, 7);
    for (ModelKind kind : {ModelKind::ef_unet, ModelKind::siam_unet, ModelKind::ef_cnn}) {
        TrainConfig cfg = small_config(kind, 16);
        cfg.epochs = 2;
        TrainResult trained = train_model(d, {0, 1, 2, 3}, {}, cfg, 0);
        CheckpointMeta meta{architecture_loss_name(kind, cfg.loss), config_hash(cfg), 2, cfg.epochs, 0.3};
        const fs::path base = dir.path / model_kind_name(kind);
        save_checkpoint(trained.model, meta, base);

        CHECK(fs::file_size(fs::path(base).concat(".bin")) == trained.model.count_parameters() * 4);
        LoadedCheckpoint loaded = load_checkpoint(fs::path(base).concat(".json"));
        CHECK(loaded.meta.fold == 2);
        CHECK(loaded.meta.config_hash == meta.config_hash);
        CHECK(*loaded.meta.threshold == 0.3);

        const std::vector<std::size_t> probe_ids{0, 1, 2, 3};
        Batch probe = make_batch(d, probe_ids, cfg.model);
        const Tensor before = trained.model.predict(probe.pre, probe.post);
        const Tensor after = loaded.model.predict(probe.pre, probe.post);
        double worst = 0.0;
        for (std::size_t i = 0; i < before.numel(); ++i) {
            worst = std::max(worst, std::abs(before.at(i) - after.at(i)) / std::max(1e-12, std::abs(before.at(i))));
        }
        CHECK(worst <= 1e-5);

        const fs::path again = dir.path / (std::string(model_kind_name(kind)) + "_again");
        save_checkpoint(loaded.model, loaded.meta, again);
        CHECK(read_bytes(fs::path(base).concat(".bin")) == read_bytes(fs::path(again).concat(".bin")));

        fs::resize_file(fs::path(base).concat(".bin"), trained.model.count_parameters() * 4 - 4);
        CHECK_THROWS_AS(load_checkpoint(fs::path(base).concat(".json")), CorruptionError);
    }
    CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.json"), IoError);
}

TEST_CASE("validation loss uses infer mode") {
    Dataset d = synthetic::separable(8, 8, 2, 8);
    TrainConfig cfg = small_config(ModelKind::ef_unet);
    cfg.model.dropout_rate = 0.5;
    cfg.epochs = 2;
    const std::vector<std::size_t> train{0, 1, 2, 3}, val{4, 5, 6, 7};
    TrainResult r = train_model(d, train, val, cfg, 0);
    Batch b = make_batch(d, val, cfg.model);
    const double expected = weighted_bce(r.model.predict(b.pre, b.post), b.target, r.weights).item();
    REQUIRE(r.history.back().val_loss.has_value());
    CHECK(*r.history.back().val_loss == doctest::Approx(expected).epsilon(1e-12));
}
