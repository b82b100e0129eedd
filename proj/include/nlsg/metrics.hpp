#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlsg/grid.hpp"

namespace nlsg {

/// 2|P n G| / (|P| + |G|) for the masks of `cls`; two empty masks score 1.
double dice(const LabelMap& pred, const LabelMap& gt, int cls);

/// Mean Dice over the foreground classes 1..L-1.
double mean_foreground_dice(const LabelMap& pred, const LabelMap& gt);

enum class CmErrorMode { TrueColumn, Full };

/// RMSE between two confusion fields. TrueColumn only compares column gt(w, h) at each pixel.
double cm_rmse(const ConfusionField& est, const ConfusionField& ref, const LabelMap& gt, CmErrorMode mode);

/// Pools squared errors over many (image, annotator) pairs before taking the root.
class CmErrorAccumulator {
public:
    void add(const ConfusionField& est, const ConfusionField& ref, const LabelMap& gt);
    double rmse(CmErrorMode mode) const;
    bool empty() const { return true_count_ == 0; }

private:
    double true_sq_ = 0.0;
    double full_sq_ = 0.0;
    double true_count_ = 0.0;
    double full_count_ = 0.0;
};

/// Generalised energy distance with d = 1 - Dice (mean over foreground classes).
double ged(std::span<const LabelMap> set_a, std::span<const LabelMap> set_b);

/// |intersection| / |union| of all annotators' foreground masks; empty union scores 1.
double consensus_iou(std::span<const LabelMap> labels);

struct ConsensusBounds {
    double low_hi = 0.65;
    double mid_hi = 0.75;
};

struct SubgroupDice {
    std::optional<double> low;
    std::optional<double> mid;
    std::optional<double> high;
};

/// Mean Dice per consensus bin [.., low_hi), [low_hi, mid_hi), [mid_hi, ..]; empty bins stay absent.
SubgroupDice subgroup_report(std::span<const double> consensus, std::span<const double> dice_values,
                             ConsensusBounds bounds = {});

struct MetricsReport {
    std::vector<double> dice_per_class;  // index 0 unused (background), 1..L-1 foreground
    double dice_mean = 0.0;
    std::optional<double> cm_rmse_true_column;
    std::optional<double> cm_rmse_full;
    std::optional<double> ged;
    std::vector<double> consensus_iou_per_image;
    std::vector<double> dice_per_image;
    SubgroupDice subgroup_dice;

    std::string to_json() const;
};

}  // namespace nlsg
