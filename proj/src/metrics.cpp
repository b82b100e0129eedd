#include "nlsg/metrics.hpp"

#include <cmath>

#include "json.hpp"

namespace nlsg {

namespace {

void require_same_grid(const LabelMap& a, const LabelMap& b, const char* what) {
    if (a.width() != b.width() || a.height() != b.height()) throw ShapeError(std::string(what) + ": shape mismatch");
}

double pair_distance(const LabelMap& a, const LabelMap& b) {
    const int L = std::max(a.classes(), b.classes());
    double d = 0.0;
    for (int c = 1; c < L; ++c) d += 1.0 - dice(a, b, c);
    return d / (L - 1);
}

double mean_pair_distance(std::span<const LabelMap> x, std::span<const LabelMap> y) {
    double total = 0.0;
    for (const auto& a : x) {
        for (const auto& b : y) total += pair_distance(a, b);
    }
    return total / (double(x.size()) * double(y.size()));
}

}  // namespace

double dice(const LabelMap& pred, const LabelMap& gt, int cls) {
    require_same_grid(pred, gt, "dice");
    long inter = 0;
    long p_count = 0;
    long g_count = 0;
    for (int p = 0; p < pred.pixels(); ++p) {
        const bool in_p = pred[p] == cls;
        const bool in_g = gt[p] == cls;
        p_count += in_p;
        g_count += in_g;
        inter += in_p && in_g;
    }
    if (p_count + g_count == 0) return 1.0;
    return 2.0 * double(inter) / double(p_count + g_count);
}

double mean_foreground_dice(const LabelMap& pred, const LabelMap& gt) {
    const int L = gt.classes();
    double total = 0.0;
    for (int c = 1; c < L; ++c) total += dice(pred, gt, c);
    return total / (L - 1);
}

double cm_rmse(const ConfusionField& est, const ConfusionField& ref, const LabelMap& gt, CmErrorMode mode) {
    CmErrorAccumulator acc;
    acc.add(est, ref, gt);
    return acc.rmse(mode);
}

void CmErrorAccumulator::add(const ConfusionField& est, const ConfusionField& ref, const LabelMap& gt) {
    if (est.width() != ref.width() || est.height() != ref.height() || est.classes() != ref.classes() ||
        gt.width() != est.width() || gt.height() != est.height()) {
        throw ShapeError("cm_rmse: shape mismatch");
    }
    const int L = est.classes();
    for (int p = 0; p < est.pixels(); ++p) {
        const int k = gt[p];
        for (int i = 0; i < L; ++i) {
            for (int j = 0; j < L; ++j) {
                const double diff = est.at(p, i, j) - ref.at(p, i, j);
                full_sq_ += diff * diff;
                if (j == k) true_sq_ += diff * diff;
            }
        }
        true_count_ += L;
        full_count_ += double(L) * L;
    }
}

double CmErrorAccumulator::rmse(CmErrorMode mode) const {
    if (true_count_ == 0) return 0.0;
    return mode == CmErrorMode::TrueColumn ? std::sqrt(true_sq_ / true_count_) : std::sqrt(full_sq_ / full_count_);
}

double ged(std::span<const LabelMap> set_a, std::span<const LabelMap> set_b) {
    if (set_a.empty() || set_b.empty()) throw DomainError("ged: empty sample set");
    const double cross = mean_pair_distance(set_a, set_b);
    const double within_a = mean_pair_distance(set_a, set_a);
    const double within_b = mean_pair_distance(set_b, set_b);
    const double d2 = 2.0 * cross - within_a - within_b;
    return std::sqrt(std::max(d2, 0.0));
}

double consensus_iou(std::span<const LabelMap> labels) {
    if (labels.size() < 2) throw DomainError("consensus_iou: need at least two annotators");
    for (const auto& l : labels) require_same_grid(l, labels[0], "consensus_iou");
    long inter = 0;
    long uni = 0;
    for (int p = 0; p < labels[0].pixels(); ++p) {
        bool all = true;
        bool any = false;
        for (const auto& l : labels) {
            const bool fg = l[p] != 0;
            all = all && fg;
            any = any || fg;
        }
        inter += all;
        uni += any;
    }
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

SubgroupDice subgroup_report(std::span<const double> consensus, std::span<const double> dice_values,
                             ConsensusBounds bounds) {
    if (consensus.size() != dice_values.size()) throw ShapeError("subgroup_report: length mismatch");
    double sum[3] = {0, 0, 0};
    int count[3] = {0, 0, 0};
    for (std::size_t i = 0; i < consensus.size(); ++i) {
        const int bin = consensus[i] < bounds.low_hi ? 0 : consensus[i] < bounds.mid_hi ? 1 : 2;
        sum[bin] += dice_values[i];
        ++count[bin];
    }
    auto mean = [&](int b) -> std::optional<double> {
        if (count[b] == 0) return std::nullopt;
        return sum[b] / count[b];
    };
    return {mean(0), mean(1), mean(2)};
}

std::string MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
    j["dice_per_class"] = dice_per_class;
    j["dice_mean"] = dice_mean;
    j["cm_rmse_true_column"] = opt(cm_rmse_true_column);
    j["cm_rmse_full"] = opt(cm_rmse_full);
    j["ged"] = opt(ged);
    j["consensus_iou_per_image"] = consensus_iou_per_image;
    j["dice_per_image"] = dice_per_image;
    j["subgroup_dice"] = {{"low", opt(subgroup_dice.low)}, {"mid", opt(subgroup_dice.mid)},
                          {"high", opt(subgroup_dice.high)}};
    return j.dump(2);
}

}  // namespace nlsg
