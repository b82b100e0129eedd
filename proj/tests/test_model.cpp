#include "doctest.h"

#include <cmath>
#include <numeric>

#include "nlsg/model.hpp"
#include "support.hpp"

using namespace nlsg;

namespace {

ModelArch small_arch(int L, int R, CmMode mode) {
    ModelArch a;
    a.trunk_layers = 2;
    a.trunk_channels = 4;
    a.classes = L;
    a.annotators = R;
    a.cm_mode = mode;
    a.rank = 1;
    return a;
}

// Pull the annotator head away from the identity so all terms carry gradient.
void scramble_heads(ModelParams& p, Rng& rng) {
    for (auto& g : param_groups(p)) {
        if (g.role != ParamRole::AnnHead) continue;
        for (double& v : g.values) v = rng.uniform(-1.0, 1.0);
    }
}

}  // namespace

TEST_CASE("complexity table for 192x192, four classes") {
    const auto full = complexity_estimate(192, 192, 4, CmMode::Full);
    CHECK(full.params == 589824);
    CHECK(full.flops == 1032192);
    const auto low = complexity_estimate(192, 192, 4, CmMode::LowRank, 1);
    CHECK(low.params == 294912);
    CHECK(low.flops == 405504);
    const auto tiny = complexity_estimate(1, 1, 2, CmMode::Full);
    CHECK(tiny.params == 4);
    CHECK(tiny.flops == 6);
    CHECK_THROWS_AS(complexity_estimate(0, 4, 2, CmMode::Full), DomainError);
}

TEST_CASE("fresh parameters give near-identity confusion matrices") {
    for (auto mode : {CmMode::Full, CmMode::LowRank}) {
        for (int L : {2, 3, 5}) {
            Rng rng(11);
            auto params = init_params(small_arch(L, 3, mode), rng);
            const ImageTensor zero(6, 5, 1);
            const auto out = forward(params, zero);
            for (const auto& cm : out.cms) {
                CHECK(trace_mean(cm) >= 0.99 * L);
                for (int p = 0; p < cm.pixels(); ++p) {
                    for (int i = 0; i < L; ++i) CHECK(std::abs(cm.at(p, i, i) - 1.0) <= 1e-3);
                }
            }
        }
    }
    Rng a(5), b(5);
    CHECK(init_params(small_arch(3, 2, CmMode::Full), a) == init_params(small_arch(3, 2, CmMode::Full), b));
}

TEST_CASE("annotator predictions are the confusion fields applied to the segmentation") {
    Rng rng(3);
    for (auto mode : {CmMode::Full, CmMode::LowRank}) {
        auto params = init_params(small_arch(3, 2, mode), rng);
        scramble_heads(params, rng);
        const auto image = test::random_image(5, 4, 1, rng);
        const auto out = forward(params, image);
        REQUIRE(out.cms.size() == 2);
        for (int r = 0; r < 2; ++r) {
            out.cms[r].validate();
            out.ann_probs[r].validate();
            CHECK(out.ann_probs[r] == cm_apply(out.cms[r], out.seg_probs));
        }
    }
}

TEST_CASE("forced identity head passes the segmentation through") {
    Rng rng(8);
    auto params = init_params(small_arch(2, 2, CmMode::Full), rng);
    std::fill(params.ann_weight.begin(), params.ann_weight.end(), 0.0);
    for (int r = 0; r < 2; ++r) {
        for (int i = 0; i < 2; ++i) params.ann_bias[r * 4 + i * 2 + i] = 800.0;
    }
    const auto image = test::random_image(4, 4, 1, rng);
    const auto out = forward(params, image);
    CHECK(out.ann_probs[0] == out.seg_probs);
    CHECK(out.ann_probs[1] == out.seg_probs);
}

TEST_CASE("permuting annotator blocks permutes the predictions") {
    Rng rng(21);
    auto params = init_params(small_arch(3, 2, CmMode::Full), rng);
    scramble_heads(params, rng);
    auto swapped = params;
    const std::size_t block = 9;
    const std::size_t F = params.arch.trunk_channels;
    for (std::size_t k = 0; k < block; ++k) {
        std::swap(swapped.ann_bias[k], swapped.ann_bias[block + k]);
        for (std::size_t f = 0; f < F; ++f) std::swap(swapped.ann_weight[k * F + f], swapped.ann_weight[(block + k) * F + f]);
    }
    const auto image = test::random_image(4, 3, 1, rng);
    const auto a = forward(params, image);
    const auto b = forward(swapped, image);
    CHECK(a.ann_probs[0] == b.ann_probs[1]);
    CHECK(a.ann_probs[1] == b.ann_probs[0]);
}

TEST_CASE("low-rank expansion") {
    SUBCASE("zero factors with a diagonal logit favour the diagonal") {
        const RealField z(3, 2, 3);
        const auto cm = low_rank_expand(z, z, identity_diag_logit(3), 3);
        for (int p = 0; p < cm.pixels(); ++p) {
            for (int i = 0; i < 3; ++i) CHECK(cm.at(p, i, i) > 0.998);
        }
    }
    SUBCASE("random factors stay column-stochastic and the logit matrix has rank one") {
        Rng rng(2);
        RealField b1(3, 3, 4), b2(3, 3, 4);
        for (double& v : b1.values()) v = rng.uniform(-3, 3);
        for (double& v : b2.values()) v = rng.uniform(-3, 3);
        const auto cm = low_rank_expand(b1, b2, 0.0, 4);
        cm.validate();
        // With no diagonal term, log A(i, j) - log A(i', j) = (b1_i - b1_i') b2_j, so every
        // 2x2 minor of the centred log matrix vanishes.
        for (int p = 0; p < cm.pixels(); ++p) {
            auto m = cm.matrix(p);
            auto lg = [&](int i, int j) { return std::log(m[i * 4 + j]) - std::log(m[0 * 4 + j]); };
            for (int i = 1; i < 4; ++i) {
                for (int j = 1; j < 4; ++j) {
                    CHECK(lg(i, j) * lg(1, 0) == doctest::Approx(lg(i, 0) * lg(1, j)).epsilon(1e-9));
                }
            }
        }
    }
    SUBCASE("mismatched factors are rejected") {
        CHECK_THROWS_AS(low_rank_expand(RealField(2, 2, 2), RealField(2, 2, 4), 0.0, 2), ShapeError);
    }
}

TEST_CASE("loss values on hand-built outputs") {
    const int W = 3, H = 2, L = 2;
    LabelMap y(W, H, L);
    y.set(0, 0, 1);
    y.set(2, 1, 1);

    SUBCASE("identity confusion and exact segmentation: zero cross-entropy") {
        ModelOutput out;
        out.seg_probs = one_hot(y, L);
        out.cms = {identity_field(W, H, L)};
        out.ann_probs = {out.seg_probs};
        std::vector<std::optional<LabelMap>> labels{y};
        const auto b = loss_total(out, labels, 0.7);
        CHECK(b.ce_per_annotator[0] == 0.0);
        CHECK(b.total == doctest::Approx(0.7 * L).epsilon(1e-15));
    }
    SUBCASE("uniform predictor: ln 2 per annotator, lambda 0 leaves pure cross-entropy") {
        ModelOutput out;
        out.seg_probs = ProbabilityMap(W, H, L, 0.5);
        for (int r = 0; r < 3; ++r) {
            out.cms.push_back(uniform_field(W, H, L));
            out.ann_probs.push_back(cm_apply(out.cms.back(), out.seg_probs));
        }
        std::vector<std::optional<LabelMap>> labels{y, std::nullopt, y};
        const auto b = loss_total(out, labels, 0.0);
        CHECK(b.ce_per_annotator[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
        CHECK(b.ce_per_annotator[1] == 0.0);
        CHECK_FALSE(b.present[1]);
        CHECK(b.total == doctest::Approx(2 * std::log(2.0)).epsilon(1e-14));
        CHECK(b.total == doctest::Approx(b.ce_sum()).epsilon(1e-15));
    }
    SUBCASE("every label absent is an error") {
        ModelOutput out;
        out.seg_probs = ProbabilityMap(W, H, L, 0.5);
        out.cms = {uniform_field(W, H, L)};
        out.ann_probs = {out.seg_probs};
        std::vector<std::optional<LabelMap>> labels{std::nullopt};
        CHECK_THROWS_AS(loss_total(out, labels, 0.7), DomainError);
    }
}

TEST_CASE("cross-entropy term equals the brute-force joint log-likelihood on 2x2 grids") {
    // -log p(all observed labels | x) summed over every pixel of every annotator, computed by
    // enumerating the product of independent per-pixel, per-annotator categorical draws.
    Rng rng(77);
    for (int trial = 0; trial < 5; ++trial) {
        const int L = 2 + trial % 2;
        const int R = 2;
        auto params = init_params(small_arch(L, R, CmMode::Full), rng);
        scramble_heads(params, rng);
        const auto image = test::random_image(2, 2, 1, rng);
        const auto out = forward(params, image);
        std::vector<std::optional<LabelMap>> labels;
        for (int r = 0; r < R; ++r) labels.push_back(test::random_labels(2, 2, L, rng));

        double joint = 1.0;
        for (int p = 0; p < 4; ++p) {
            for (int r = 0; r < R; ++r) {
                double q = 0.0;
                for (int j = 0; j < L; ++j) q += out.cms[r].at(p, (*labels[r])[p], j) * out.seg_probs.pixel(p)[j];
                joint *= q;
            }
        }
        const auto b = loss_total(out, labels, 0.0);
        CHECK(b.total * 4 == doctest::Approx(-std::log(joint)).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradient matches central differences") {
    Rng rng(1234);
    int checked = 0;
    for (int trial = 0; checked < 8; ++trial) {
        const int L = 2 + trial % 2;
        const int R = trial % 3 == 0 ? 1 : 3;
        const auto mode = trial % 2 == 0 ? CmMode::Full : CmMode::LowRank;
        const int side = 4 + trial % 3;
        auto params = init_params(small_arch(L, R, mode), rng);
        scramble_heads(params, rng);
        const auto image = test::random_image(side, side, 1, rng);
        if (min_abs_preactivation(params, image) < 1e-4) continue;
        std::vector<std::optional<LabelMap>> labels;
        for (int r = 0; r < R; ++r) {
            if (r == 1) labels.push_back(std::nullopt);
            else labels.push_back(test::random_labels(side, side, L, rng));
        }
        const auto result = test::gradient_check(params, image, labels, 0.7);
        INFO("trial " << trial << " worst " << result.worst_name << " analytic " << result.worst_analytic
                      << " numeric " << result.worst_numeric);
        CHECK(result.failures == 0);
        ++checked;
    }
}

TEST_CASE("stationary point has zero gradient") {
    Rng rng(4);
    auto params = init_params(small_arch(2, 1, CmMode::Full), rng);
    // Saturated segmentation head and identity CM reproduce a constant label exactly.
    std::fill(params.seg_weight.begin(), params.seg_weight.end(), 0.0);
    params.seg_bias = {0.0, 800.0};
    std::fill(params.ann_weight.begin(), params.ann_weight.end(), 0.0);
    params.ann_bias = {800.0, 0.0, 0.0, 800.0};
    const auto image = test::random_image(4, 4, 1, rng);
    std::vector<std::optional<LabelMap>> labels{LabelMap(4, 4, 2, 1)};
    const auto grads = backward(params, image, labels, 0.0);
    for (const auto& g : param_groups(grads)) {
        for (double v : g.values) CHECK(std::abs(v) <= 1e-10);
    }
}

TEST_CASE("trace contribution to the annotator bias gradient is linear in lambda") {
    Rng rng(9);
    auto params = init_params(small_arch(3, 2, CmMode::Full), rng);
    scramble_heads(params, rng);
    const auto image = test::random_image(4, 4, 1, rng);
    std::vector<std::optional<LabelMap>> labels{test::random_labels(4, 4, 3, rng), test::random_labels(4, 4, 3, rng)};
    const auto g0 = backward(params, image, labels, 0.0);
    const auto g1 = backward(params, image, labels, 0.5);
    const auto g2 = backward(params, image, labels, 1.0);
    for (std::size_t k = 0; k < g0.ann_bias.size(); ++k) {
        const double t1 = g1.ann_bias[k] - g0.ann_bias[k];
        const double t2 = g2.ann_bias[k] - g0.ann_bias[k];
        CHECK(t2 == doctest::Approx(2.0 * t1).epsilon(1e-9).scale(1e-12));
    }
}

TEST_CASE("absent annotators change neither loss nor gradient") {
    Rng rng(31);
    auto params = init_params(small_arch(2, 3, CmMode::Full), rng);
    scramble_heads(params, rng);
    const auto image = test::random_image(5, 5, 1, rng);
    const auto y0 = test::random_labels(5, 5, 2, rng);
    const auto y2 = test::random_labels(5, 5, 2, rng);
    std::vector<std::optional<LabelMap>> masked{y0, std::nullopt, y2};
    LossBreakdown la;
    const auto ga = backward(params, image, masked, 0.7, &la);
    // Gradients of independent annotator terms add: masking is the same as dropping the term.
    std::vector<std::optional<LabelMap>> first{y0, std::nullopt, std::nullopt};
    std::vector<std::optional<LabelMap>> last{std::nullopt, std::nullopt, y2};
    const auto g0 = backward(params, image, first, 0.7);
    const auto g2 = backward(params, image, last, 0.7);
    auto sum_groups = param_groups(ga);
    auto a_groups = param_groups(g0);
    auto b_groups = param_groups(g2);
    for (std::size_t gi = 0; gi < sum_groups.size(); ++gi) {
        for (std::size_t k = 0; k < sum_groups[gi].values.size(); ++k) {
            CHECK(sum_groups[gi].values[k] ==
                  doctest::Approx(a_groups[gi].values[k] + b_groups[gi].values[k]).epsilon(1e-12).scale(1e-12));
        }
    }
    // Annotator 1's head block receives no gradient.
    const std::size_t F = params.arch.trunk_channels;
    for (std::size_t k = 4; k < 8; ++k) {
        CHECK(ga.ann_bias[k] == 0.0);
        for (std::size_t f = 0; f < F; ++f) CHECK(ga.ann_weight[k * F + f] == 0.0);
    }
    // Total equals the sum over the two present annotators computed one at a time.
    const auto out = forward(params, image);
    CHECK(la.total == doctest::Approx(loss_total(out, first, 0.7).total + loss_total(out, last, 0.7).total));
}

TEST_CASE("supervised and fixed-confusion objectives match their finite differences") {
    Rng rng(55);
    auto arch = small_arch(3, 0, CmMode::Full);
    auto params = init_params(arch, rng);
    const auto image = test::random_image(4, 4, 1, rng);
    REQUIRE(min_abs_preactivation(params, image) >= 1e-4);
    const auto target = test::random_simplex_map(4, 4, 3, rng);
    double loss = 0.0;
    const auto grads = backward_supervised(params, image, target, &loss);
    CHECK(loss == doctest::Approx(supervised_loss(forward(params, image), target)).epsilon(1e-13));
    const double h = 1e-5;
    auto groups = param_groups(params);
    auto ggroups = param_groups(grads);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        for (std::size_t k = 0; k < groups[gi].values.size(); ++k) {
            const double keep = groups[gi].values[k];
            groups[gi].values[k] = keep + h;
            const double up = supervised_loss(forward(params, image), target);
            groups[gi].values[k] = keep - h;
            const double down = supervised_loss(forward(params, image), target);
            groups[gi].values[k] = keep;
            const double numeric = (up - down) / (2 * h);
            CHECK(test::close(ggroups[gi].values[k], numeric));
        }
    }

    auto arch_r = small_arch(2, 2, CmMode::Full);
    auto p2 = init_params(arch_r, rng);
    const auto img2 = test::random_image(4, 4, 1, rng);
    REQUIRE(min_abs_preactivation(p2, img2) >= 1e-4);
    std::vector<std::optional<LabelMap>> labels{test::random_labels(4, 4, 2, rng), test::random_labels(4, 4, 2, rng)};
    std::vector<ConfusionField> cms{test::random_confusion(4, 4, 2, rng), test::random_confusion(4, 4, 2, rng)};
    const auto g2 = backward_fixed_cms(p2, img2, labels, cms);
    auto groups2 = param_groups(p2);
    auto ggroups2 = param_groups(g2);
    for (std::size_t gi = 0; gi < groups2.size(); ++gi) {
        for (std::size_t k = 0; k < groups2[gi].values.size(); ++k) {
            if (groups2[gi].role == ParamRole::AnnHead) {
                CHECK(ggroups2[gi].values[k] == 0.0);
                continue;
            }
            const double keep = groups2[gi].values[k];
            groups2[gi].values[k] = keep + h;
            const double up = fixed_cm_loss(forward(p2, img2), labels, cms);
            groups2[gi].values[k] = keep - h;
            const double down = fixed_cm_loss(forward(p2, img2), labels, cms);
            groups2[gi].values[k] = keep;
            CHECK(test::close(ggroups2[gi].values[k], (up - down) / (2 * h)));
        }
    }
}

TEST_CASE("checkpoint round trip and arch validation") {
    Rng rng(6);
    auto params = init_params(small_arch(3, 2, CmMode::LowRank), rng);
    const auto dir = test::scratch_dir("ckpt");
    save_checkpoint(dir, params);
    CHECK(load_checkpoint(dir) == params);
    CHECK(arch_from_json(arch_to_json(params.arch)) == params.arch);
    CHECK_THROWS_AS(arch_from_json("{\"format\":\"other\"}"), FormatError);
    auto bad = small_arch(2, 1, CmMode::LowRank);
    bad.rank = 2;
    CHECK_THROWS_AS(bad.validate(), DomainError);
}

TEST_CASE("non-finite gradients name the offending parameter") {
    Rng rng(1);
    auto params = init_params(small_arch(2, 1, CmMode::Full), rng);
    // Segmentation certain of class 1, identity CM, observed class 0: the likelihood is exactly 0.
    std::fill(params.seg_weight.begin(), params.seg_weight.end(), 0.0);
    params.seg_bias = {0.0, 800.0};
    std::fill(params.ann_weight.begin(), params.ann_weight.end(), 0.0);
    params.ann_bias = {800.0, 0.0, 0.0, 800.0};
    const auto image = test::random_image(3, 3, 1, rng);
    std::vector<std::optional<LabelMap>> labels{LabelMap(3, 3, 2)};
    try {
        backward(params, image, labels, 0.7);
        FAIL("expected an error");
    } catch (const DomainError& e) {
        CHECK(std::string(e.what()).find("non-finite gradient at") != std::string::npos);
    }
}
