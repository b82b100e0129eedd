#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "nlsg/annotator_sim.hpp"
#include "nlsg/fusion.hpp"
#include "support.hpp"

using namespace nlsg;

namespace {

LabelMap pixel_labels(std::vector<std::uint8_t> v, int classes = 2) {
    const int n = static_cast<int>(v.size());
    return LabelMap(n, 1, classes, std::move(v));
}

void check_monotone(const std::vector<double>& ll) {
    for (std::size_t i = 1; i < ll.size(); ++i) CHECK(ll[i] >= ll[i - 1] - 1e-8);
}

}  // namespace

TEST_CASE("mean fusion and majority vote") {
    std::vector<LabelMap> one{pixel_labels({0, 1, 1})};
    const auto m1 = mean_fusion(one);
    CHECK(m1 == one_hot(one[0], 2));
    CHECK(majority_vote(one) == one[0]);

    std::vector<LabelMap> three{pixel_labels({1}), pixel_labels({1}), pixel_labels({0})};
    const auto m3 = mean_fusion(three);
    CHECK(m3.pixel(0)[0] == doctest::Approx(1.0 / 3));
    CHECK(m3.pixel(0)[1] == doctest::Approx(2.0 / 3));

    std::vector<LabelMap> votes{pixel_labels({0}), pixel_labels({0}), pixel_labels({1})};
    CHECK(majority_vote(votes)[0] == 0);
    std::vector<LabelMap> tie{pixel_labels({0}), pixel_labels({1})};
    CHECK(majority_vote(tie)[0] == 0);

    CHECK_THROWS_AS(mean_fusion(std::vector<LabelMap>{}), DomainError);
    std::vector<LabelMap> ragged{LabelMap(2, 2, 2), LabelMap(3, 2, 2)};
    CHECK_THROWS_AS(majority_vote(ragged), ShapeError);
}

TEST_CASE("majority vote against an independent mode count on simulated annotators") {
    Rng rng(6);
    auto shapes = synth_shapes(4, 20, 20, 3, rng);
    auto profiles = default_profiles();
    const auto data = simulate_annotations(shapes, profiles, LabelRegime::Dense, 3, Rng(1));
    for (int n = 0; n < data.size(); ++n) {
        const auto mv = majority_vote(data.noisy[n]);
        const auto mean = mean_fusion(data.noisy[n]);
        for (int p = 0; p < mv.pixels(); ++p) {
            int best = 0, best_count = -1;
            for (int c = 0; c < 3; ++c) {
                const auto cnt = std::count_if(data.noisy[n].begin(), data.noisy[n].end(),
                                               [&](const LabelMap& l) { return l[p] == c; });
                if (cnt > best_count) best = c, best_count = static_cast<int>(cnt);
            }
            CHECK(mv[p] == best);
            // argmax of the mean agrees wherever there is no tie.
            auto px = mean.pixel(p);
            const int top = static_cast<int>(std::max_element(px.begin(), px.end()) - px.begin());
            if (std::count(px.begin(), px.end(), px[top]) == 1) CHECK(top == mv[p]);
        }
    }
}

TEST_CASE("STAPLE on identical noise-free annotators") {
    Rng rng(3);
    const auto y = test::random_labels(9, 7, 3, rng);
    std::vector<LabelMap> labels(4, y);
    const auto res = staple(labels);
    CHECK(argmax(res.posterior) == y);
    for (int p = 0; p < y.pixels(); ++p) CHECK(res.posterior.pixel(p)[y[p]] == doctest::Approx(1.0).epsilon(1e-12));
    for (const auto& cm : res.annotator_cms) {
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) CHECK(std::abs(cm[i * 3 + j] - (i == j ? 1.0 : 0.0)) <= 1e-6);
        }
    }
    check_monotone(res.log_likelihood_trace);
}

TEST_CASE("STAPLE against a hand-run EM on four pixels") {
    // Four good annotators agree on (0, 0, 1, 1); the fifth is blank.
    std::vector<LabelMap> labels(4, pixel_labels({0, 0, 1, 1}));
    labels.push_back(pixel_labels({0, 0, 0, 0}));
    const std::vector<double> prior{0.6, 0.4};

    // Independent EM loop on the raw counts.
    double theta[5][2][2];
    for (auto& t : theta) t[0][0] = t[1][1] = 0.99, t[0][1] = t[1][0] = 0.01;
    double w[4][2];
    for (int iter = 0; iter < 200; ++iter) {
        for (int p = 0; p < 4; ++p) {
            double s = 0;
            for (int j = 0; j < 2; ++j) {
                w[p][j] = prior[j];
                for (int r = 0; r < 5; ++r) w[p][j] *= theta[r][labels[r][p]][j];
                s += w[p][j];
            }
            for (double& v : w[p]) v /= s;
        }
        for (int r = 0; r < 5; ++r) {
            for (int j = 0; j < 2; ++j) {
                double den = 0, num[2] = {0, 0};
                for (int p = 0; p < 4; ++p) den += w[p][j], num[labels[r][p]] += w[p][j];
                for (int i = 0; i < 2; ++i) theta[r][i][j] = num[i] / den;
            }
        }
    }
    const auto res = staple_with_prior(labels, prior, 200, 0.0);
    for (int r = 0; r < 5; ++r) {
        for (int i = 0; i < 2; ++i) {
            for (int j = 0; j < 2; ++j) CHECK(res.annotator_cms[r][i * 2 + j] == doctest::Approx(theta[r][i][j]));
        }
    }
    // The blank annotator reports background for true foreground.
    CHECK(res.annotator_cms[4][0 * 2 + 1] > 0.99);
    check_monotone(res.log_likelihood_trace);
}

TEST_CASE("STAPLE properties on simulated panels") {
    Rng rng(10);
    auto shapes = synth_shapes(6, 24, 24, 2, rng);
    const auto data = simulate_annotations(shapes, default_profiles(), LabelRegime::Dense, 2, Rng(2));
    for (int n = 0; n < data.size(); ++n) {
        const auto res = staple(data.noisy[n]);
        check_monotone(res.log_likelihood_trace);
        for (const auto& cm : res.annotator_cms) {
            for (int j = 0; j < 2; ++j) CHECK(cm[j] + cm[2 + j] == doctest::Approx(1.0).epsilon(1e-12));
        }
        // Permutation equivariance.
        std::vector<LabelMap> rev(data.noisy[n].rbegin(), data.noisy[n].rend());
        const auto rres = staple(rev);
        for (std::size_t i = 0; i < res.posterior.values().size(); ++i) {
            CHECK(res.posterior.values()[i] == doctest::Approx(rres.posterior.values()[i]).epsilon(1e-9));
        }
        for (int r = 0; r < 5; ++r) {
            for (int e = 0; e < 4; ++e) {
                CHECK(res.annotator_cms[r][e] == doctest::Approx(rres.annotator_cms[4 - r][e]).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("STAPLE agrees with majority vote for exchangeable symmetric annotators") {
    Rng rng(14);
    const auto truth = test::random_labels(12, 12, 2, rng);
    std::vector<LabelMap> labels;
    for (int r = 0; r < 5; ++r) {
        LabelMap y = truth;
        for (int p = 0; p < y.pixels(); ++p) {
            if (rng.bernoulli(0.2)) y.set_pixel(p, 1 - y[p]);
        }
        labels.push_back(y);
    }
    const auto res = staple_with_prior(labels, std::vector<double>{0.5, 0.5}, 100, 1e-9);
    // Symmetric flips estimated per annotator are close but not exactly equal; the decision
    // boundary only moves when counts are tied, which an odd panel never produces.
    CHECK(argmax(res.posterior) == majority_vote(labels));
}

TEST_CASE("spatial STAPLE") {
    Rng rng(7);
    auto shapes = synth_shapes(1, 16, 16, 2, rng);
    const auto data = simulate_annotations(shapes, default_profiles(), LabelRegime::Dense, 2, Rng(5));
    const auto& labels = data.noisy[0];

    SUBCASE("one image-sized window reduces to STAPLE") {
        const auto sp = spatial_staple(labels, 16, 16);
        const auto st = staple(labels);
        CHECK(sp.windows == 1);
        for (std::size_t i = 0; i < st.posterior.values().size(); ++i) {
            CHECK(sp.posterior.values()[i] == doctest::Approx(st.posterior.values()[i]).epsilon(1e-12));
        }
        for (int r = 0; r < 5; ++r) {
            for (int e = 0; e < 4; ++e) CHECK(sp.annotator_cms[r].matrix(0)[e] == doctest::Approx(st.annotator_cms[r][e]));
        }
    }
    SUBCASE("oversized window falls back to STAPLE") {
        const auto sp = spatial_staple(labels, 40, 8);
        CHECK(sp.windows == 1);
    }
    SUBCASE("overlapping windows give column-stochastic fields") {
        const auto sp = spatial_staple(labels, 8, 4);
        CHECK(sp.windows == 9);
        for (const auto& cm : sp.annotator_cms) cm.validate();
        sp.posterior.validate();
    }
    SUBCASE("annotator good on the left, blank on the right") {
        const int W = 24, H = 12;
        LabelMap truth(W, H, 2);
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                if ((w / 3 + h / 3) % 2 == 0) truth.set(w, h, 1);
            }
        }
        LabelMap half = truth;
        for (int h = 0; h < H; ++h) {
            for (int w = W / 2; w < W; ++w) half.set(w, h, 0);
        }
        std::vector<LabelMap> panel{truth, truth, truth, half};
        const auto sp = spatial_staple(panel, 6, 6);
        double left = 0, right = 0;
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                const auto m = sp.annotator_cms[3].matrix(h * W + w);
                (w < W / 2 ? left : right) += m[0] + m[3];
            }
        }
        CHECK(left > right);
    }
    CHECK_THROWS_AS(spatial_staple(labels, 3, 2), DomainError);
    CHECK_THROWS_AS(spatial_staple(labels, 6, 7), DomainError);
}
