#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "nlsg/trainer.hpp"
#include "support.hpp"

using namespace nlsg;

namespace {

Dataset toy(int count, LabelRegime regime, std::uint64_t seed) {
    Rng shapes = Rng(seed).split(10);
    return simulate_annotations(synth_shapes(count, 16, 16, 2, shapes), default_profiles(), regime, 2,
                                Rng(seed).split(11));
}

ModelArch arch_for(const Dataset& d, int annotators) {
    ModelArch a;
    a.in_channels = 1;
    a.trunk_layers = 2;
    a.trunk_channels = 6;
    a.classes = d.classes;
    a.annotators = annotators;
    return a;
}

double median3(double a, double b, double c) { return std::max(std::min(a, b), std::min(std::max(a, b), c)); }

}  // namespace

TEST_CASE("zero learning rate leaves parameters unchanged") {
    const auto d = toy(10, LabelRegime::Dense, 3);
    const auto arch = arch_for(d, d.annotators);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    cfg.seed = 17;
    const auto res = train(d, arch, cfg);
    Rng init_rng = Rng(17).split(1);
    CHECK(res.params == init_params(arch, init_rng));
    CHECK(res.history.epochs.size() == 1);
}

TEST_CASE("training is deterministic given the seed") {
    const auto d = toy(12, LabelRegime::Dense, 4);
    const auto arch = arch_for(d, d.annotators);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 5;
    const auto a = train(d, arch, cfg);
    const auto b = train(d, arch, cfg);
    CHECK(a.params == b.params);
    CHECK(a.history.to_csv() == b.history.to_csv());
    cfg.seed = 6;
    CHECK_FALSE(train(d, arch, cfg).params == a.params);
}

TEST_CASE("history has one record per epoch and validation columns") {
    const auto d = toy(10, LabelRegime::Dense, 2);
    TrainConfig cfg;
    cfg.epochs = 3;
    const auto res = train(d, arch_for(d, d.annotators), cfg);
    REQUIRE(res.history.epochs.size() == 3);
    for (int e = 0; e < 3; ++e) {
        const auto& rec = res.history.epochs[e];
        CHECK(rec.epoch == e);
        CHECK(rec.val_dice.has_value());
        CHECK(rec.val_cm_rmse.has_value());
        // Bias-init warm-up only freezes the annotator head; the objective keeps +lambda.
        CHECK(rec.total == doctest::Approx(rec.ce + cfg.lambda * rec.trace));
    }
    const auto csv = res.history.to_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("negative-trace warm-up optimises minus lambda") {
    const auto d = toy(10, LabelRegime::Dense, 2);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.warmup_mode = WarmupMode::NegativeTrace;
    const auto res = train(d, arch_for(d, d.annotators), cfg);
    const auto& w = res.history.epochs[0];
    CHECK(w.total == doctest::Approx(w.ce - cfg.lambda * w.trace));
    const auto& p = res.history.epochs[1];
    CHECK(p.total == doctest::Approx(p.ce + cfg.lambda * p.trace));
}

TEST_CASE("training cross-entropy decreases over the first epochs") {
    std::vector<std::vector<double>> ce;
    for (std::uint64_t seed : {0, 1, 2}) {
        const auto d = toy(30, LabelRegime::Dense, 10 + seed);
        TrainConfig cfg;
        cfg.epochs = 5;
        cfg.seed = seed;
        std::vector<double> row;
        for (const auto& e : train(d, arch_for(d, d.annotators), cfg).history.epochs) row.push_back(e.ce);
        ce.push_back(row);
    }
    for (int e = 1; e < 5; ++e) {
        const double prev = median3(ce[0][e - 1], ce[1][e - 1], ce[2][e - 1]);
        const double cur = median3(ce[0][e], ce[1][e], ce[2][e]);
        INFO("epoch " << e << ": " << prev << " -> " << cur);
        CHECK(cur < prev);
    }
}

TEST_CASE("estimated trace does not increase after warm-up") {
    const int epochs = 6;
    std::vector<std::vector<double>> trace;
    for (std::uint64_t seed : {0, 1, 2}) {
        const auto d = toy(30, LabelRegime::Dense, 20 + seed);
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.seed = seed;
        std::vector<double> row;
        for (const auto& e : train(d, arch_for(d, d.annotators), cfg).history.epochs) row.push_back(*e.train_cm_trace);
        trace.push_back(row);
    }
    TrainConfig defaults;
    for (int e = defaults.warmup_epochs + 1; e < epochs; ++e) {
        const double prev = median3(trace[0][e - 1], trace[1][e - 1], trace[2][e - 1]);
        const double cur = median3(trace[0][e], trace[1][e], trace[2][e]);
        INFO("epoch " << e << ": " << prev << " -> " << cur);
        CHECK(cur <= prev + 1e-9);
    }
}

TEST_CASE("estimated CMs stay diagonally dominant just after warm-up") {
    const auto d = toy(30, LabelRegime::Dense, 7);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.warmup_epochs = 2;
    cfg.lambda = 0.03;
    cfg.learning_rate = 5e-4;
    const auto res = train(d, arch_for(d, d.annotators), cfg);
    CHECK(mean_diag_dominance(res.params, d) >= 0.95);
}

TEST_CASE("single-label regime yields CMs for every annotator") {
    const auto d = toy(20, LabelRegime::SingleRandom, 8);
    for (int n = 0; n < d.size(); ++n) {
        CHECK(std::count(d.available[n].begin(), d.available[n].end(), true) == 1);
    }
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    const auto res = train(d, arch_for(d, d.annotators), cfg);
    const auto out = forward(res.params, d.images[0]);
    CHECK(out.cms.size() == std::size_t(d.annotators));
    const auto rep = evaluate(res.params, d);
    CHECK(rep.cm_rmse_true_column.has_value());
    CHECK(std::isfinite(rep.dice_mean));
}

TEST_CASE("evaluation with injected reference CMs has zero CM error") {
    const auto d = toy(6, LabelRegime::Dense, 9);
    Rng rng(1);
    const auto params = init_params(arch_for(d, d.annotators), rng);
    EvalOptions opts;
    opts.injected_cms.emplace();
    for (int n = 0; n < d.size(); ++n) {
        std::vector<ConfusionField> row;
        for (int r = 0; r < d.annotators; ++r) row.push_back(build_reference_cms(d.gt[n], d.noisy[n][r]));
        opts.injected_cms->push_back(row);
    }
    const auto rep = evaluate(params, d, opts);
    CHECK(*rep.cm_rmse_true_column == 0.0);
    CHECK(*rep.cm_rmse_full == 0.0);
    CHECK(*evaluate(params, d).cm_rmse_true_column > 0.0);
    opts.injected_cms->pop_back();
    CHECK_THROWS_AS(evaluate(params, d, opts), ShapeError);
}

TEST_CASE("a model that predicts only background scores Dice 0") {
    const auto d = toy(4, LabelRegime::Dense, 11);
    Rng rng(2);
    auto params = init_params(arch_for(d, 0), rng);
    params.seg_bias[0] = 1e3;
    const auto rep = evaluate(params, d);
    CHECK(rep.dice_mean == 0.0);
    CHECK_FALSE(rep.cm_rmse_true_column.has_value());
    CHECK_FALSE(rep.ged.has_value());
}

TEST_CASE("supervised training on ground truth fits the toy shapes") {
    const auto d = toy(30, LabelRegime::Dense, 12);
    std::vector<ProbabilityMap> targets;
    for (const auto& g : d.gt) targets.push_back(one_hot(g, 2));
    TrainConfig cfg;
    cfg.epochs = 6;
    const auto res = train_supervised(d, targets, arch_for(d, 0), cfg);
    CHECK(evaluate(res.params, d).dice_mean > 0.9);
    CHECK_THROWS_AS(train_supervised(d, targets, arch_for(d, 5), cfg), DomainError);
    targets.pop_back();
    CHECK_THROWS_AS(train_supervised(d, targets, arch_for(d, 0), cfg), ShapeError);
}

TEST_CASE("validation split") {
    const auto [tr, va] = validation_split(50, 0.2, 3);
    CHECK(va.size() == 10);
    CHECK(tr.size() == 40);
    std::set<int> all(tr.begin(), tr.end());
    all.insert(va.begin(), va.end());
    CHECK(all.size() == 50);
    CHECK(validation_split(50, 0.2, 3) == validation_split(50, 0.2, 3));
    CHECK(validation_split(7, 0.0, 1).second.empty());
}

TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.warmup_epochs = cfg.epochs;
    CHECK_THROWS_AS(cfg.validate(), DomainError);
    cfg = {};
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(cfg.validate(), DomainError);
    cfg = {};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), DomainError);
    CHECK(warmup_mode_from(to_string(WarmupMode::NegativeTrace)) == WarmupMode::NegativeTrace);
    CHECK(optimizer_from("sgd") == OptimizerKind::Sgd);
    CHECK_THROWS_AS(optimizer_from("rmsprop"), DomainError);
}

TEST_CASE("divergence aborts with the last good parameters") {
    const auto d = toy(8, LabelRegime::Dense, 13);
    const auto arch = arch_for(d, d.annotators);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.warmup_epochs = 0;
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.learning_rate = 1e200;
    cfg.checkpoint_dir = test::scratch_dir("divergence");
    try {
        train(d, arch, cfg);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        for (const auto& g : param_groups(e.last_good())) {
            for (double v : g.values) REQUIRE(std::isfinite(v));
        }
        CHECK(std::filesystem::exists(cfg.checkpoint_dir / "last_good"));
        CHECK(load_checkpoint(cfg.checkpoint_dir / "last_good") == e.last_good());
    }
}
