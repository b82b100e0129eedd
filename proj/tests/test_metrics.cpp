#include "doctest.h"

#include <cmath>

#include "nlsg/annotator_sim.hpp"
#include "nlsg/metrics.hpp"
#include "support.hpp"

using namespace nlsg;

namespace {

LabelMap square(int size, int x0, int y0, int side, int cls = 1, int classes = 2) {
    LabelMap y(size, size, classes);
    for (int h = y0; h < y0 + side; ++h) {
        for (int w = x0; w < x0 + side; ++w) y.set(w, h, cls);
    }
    return y;
}

}  // namespace

TEST_CASE("dice") {
    const auto a = square(8, 1, 1, 3);
    CHECK(dice(a, a, 1) == 1.0);
    CHECK(dice(a, square(8, 5, 5, 3), 1) == 0.0);
    CHECK(dice(a, square(8, 2, 1, 3), 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(dice(LabelMap(4, 4, 2), LabelMap(4, 4, 2), 1) == 1.0);
    CHECK(dice(LabelMap(8, 8, 2), a, 1) == 0.0);

    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        const auto x = test::random_labels(6, 6, 3, rng);
        const auto y = test::random_labels(6, 6, 3, rng);
        CHECK(dice(x, y, 1) == dice(y, x, 1));
        // Relabel 1 <-> 2 on both maps.
        LabelMap xs = x, ys = y;
        for (int p = 0; p < 36; ++p) {
            if (x[p]) xs.set_pixel(p, 3 - x[p]);
            if (y[p]) ys.set_pixel(p, 3 - y[p]);
        }
        CHECK(dice(xs, ys, 2) == dice(x, y, 1));
    }
}

TEST_CASE("confusion-matrix error") {
    Rng rng(5);
    const auto cm = test::random_confusion(4, 4, 3, rng);
    const auto gt = test::random_labels(4, 4, 3, rng);
    CHECK(cm_rmse(cm, cm, gt, CmErrorMode::TrueColumn) == 0.0);
    CHECK(cm_rmse(cm, cm, gt, CmErrorMode::Full) == 0.0);

    ConfusionField est(1, 1, 2, std::vector<double>{0.5, 1.0, 0.5, 0.0});
    ConfusionField ref(1, 1, 2, std::vector<double>{0.5, 0.0, 0.5, 1.0});
    const LabelMap one(1, 1, 2, 1);
    CHECK(cm_rmse(est, ref, one, CmErrorMode::TrueColumn) == 1.0);
    CHECK(cm_rmse(est, ref, one, CmErrorMode::Full) == doctest::Approx(std::sqrt(2.0 / 4.0)));

    // Perfect true columns with uniform elsewhere match the reference convention exactly.
    const auto noisy = test::random_labels(4, 4, 3, rng);
    const auto reference = build_reference_cms(gt, noisy);
    CHECK(cm_rmse(reference, reference, gt, CmErrorMode::Full) == 0.0);

    CmErrorAccumulator acc;
    acc.add(est, ref, one);
    acc.add(ref, ref, one);
    CHECK(acc.rmse(CmErrorMode::TrueColumn) == doctest::Approx(std::sqrt(2.0 / 4.0)));
    CHECK_THROWS_AS(cm_rmse(cm, ConfusionField(3, 4, 3), gt, CmErrorMode::Full), ShapeError);
}

TEST_CASE("generalised energy distance") {
    const auto m = square(6, 0, 0, 2);
    const auto disjoint = square(6, 3, 3, 2);
    std::vector<LabelMap> a{m}, b{disjoint};
    CHECK(ged(a, b) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));

    Rng rng(2);
    std::vector<LabelMap> set;
    for (int i = 0; i < 4; ++i) set.push_back(test::random_labels(5, 5, 3, rng));
    CHECK(std::abs(ged(set, set)) <= 1e-12);
    std::vector<LabelMap> other;
    for (int i = 0; i < 3; ++i) other.push_back(test::random_labels(5, 5, 3, rng));
    CHECK(ged(set, other) == doctest::Approx(ged(other, set)).epsilon(1e-14));
    CHECK(ged(set, other) >= 0.0);
    CHECK_THROWS_AS(ged(set, std::vector<LabelMap>{}), DomainError);
}

TEST_CASE("consensus IoU") {
    const auto big = square(6, 1, 1, 4);
    std::vector<LabelMap> same{big, big, big};
    CHECK(consensus_iou(same) == 1.0);
    std::vector<LabelMap> with_blank{big, big, LabelMap(6, 6, 2)};
    CHECK(consensus_iou(with_blank) == 0.0);
    std::vector<LabelMap> nested{big, square(6, 2, 2, 2)};
    CHECK(consensus_iou(nested) == 0.25);
    std::vector<LabelMap> empty{LabelMap(3, 3, 2), LabelMap(3, 3, 2)};
    CHECK(consensus_iou(empty) == 1.0);
    CHECK_THROWS_AS(consensus_iou(std::vector<LabelMap>{big}), DomainError);
}

TEST_CASE("subgroup report") {
    const std::vector<double> high_c{0.9, 0.9}, d{0.8, 0.6};
    const auto only_high = subgroup_report(high_c, d);
    CHECK_FALSE(only_high.low.has_value());
    CHECK_FALSE(only_high.mid.has_value());
    CHECK(*only_high.high == doctest::Approx(0.7));

    const std::vector<double> c3{0.5, 0.7, 0.8}, d3{0.1, 0.2, 0.3};
    const auto three = subgroup_report(c3, d3);
    CHECK(*three.low == 0.1);
    CHECK(*three.mid == 0.2);
    CHECK(*three.high == 0.3);

    const std::vector<double> edges{0.65, 0.75}, de{0.4, 0.5};
    const auto e = subgroup_report(edges, de);
    CHECK_FALSE(e.low.has_value());
    CHECK(*e.mid == 0.4);
    CHECK(*e.high == 0.5);

    CHECK_THROWS_AS(subgroup_report(c3, d), ShapeError);
}
