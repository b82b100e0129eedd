#pragma once

// Mini-batch optimisation of the model, with identity warm-up of the
// annotator head, and evaluation of a trained model on a dataset split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nlsg/annotator_sim.hpp"
#include "nlsg/metrics.hpp"
#include "nlsg/model.hpp"

namespace nlsg {

enum class WarmupMode { BiasInit, NegativeTrace };
enum class OptimizerKind { Sgd, AdamDefaults };

std::string to_string(WarmupMode mode);
WarmupMode warmup_mode_from(const std::string& name);
std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from(const std::string& name);

struct TrainConfig {
    double learning_rate = 5e-3;
    int epochs = 30;
    int batch_size = 2;
    double lambda = 0.7;
    int warmup_epochs = 2;
    WarmupMode warmup_mode = WarmupMode::BiasInit;
    OptimizerKind optimizer = OptimizerKind::AdamDefaults;
    bool augment_flip = true;
    std::uint64_t seed = 0;
    double validation_fraction = 0.2;
    /// Empty disables checkpointing. A divergence also leaves `last_good` here.
    std::filesystem::path checkpoint_dir;
    int checkpoint_every = 0;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct EpochRecord {
    int epoch = 0;
    double total = 0.0;  // mean per-sample objective, as optimised
    double ce = 0.0;     // mean per-sample cross-entropy summed over present annotators
    double trace = 0.0;  // mean per-sample trace term (sum over present annotators, before lambda)
    /// Mean trace of the estimated CMs over training images and annotators, end of epoch.
    std::optional<double> train_cm_trace;
    std::optional<double> val_dice;
    std::optional<double> val_cm_rmse;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;

    std::string to_csv() const;
};

struct TrainResult {
    ModelParams params;
    TrainHistory history;
};

/// Raised when the objective or a gradient becomes non-finite. Carries the parameters at the
/// start of the failing epoch.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, ModelParams last_good)
        : Error(what), last_good_(std::move(last_good)) {}
    const ModelParams& last_good() const { return last_good_; }

private:
    ModelParams last_good_;
};

/// Trains on the visible noisy labels with the trace-regularised objective.
TrainResult train(const Dataset& data, const ModelArch& arch, const TrainConfig& cfg);

/// Trains a segmentation-only network (arch.annotators must be 0) on per-image soft targets.
TrainResult train_supervised(const Dataset& data, const std::vector<ProbabilityMap>& targets, const ModelArch& arch,
                             const TrainConfig& cfg);

/// Trains the segmentation network through fixed per-image, per-annotator confusion fields.
TrainResult train_with_fixed_cms(const Dataset& data, const std::vector<std::vector<ConfusionField>>& cms,
                                 const ModelArch& arch, const TrainConfig& cfg);

/// Training / validation split used by every trainer for a given seed.
std::pair<std::vector<int>, std::vector<int>> validation_split(int count, double fraction, std::uint64_t seed);

struct EvalOptions {
    /// Replaces the model's CM estimates (per image, per annotator) in CM error and GED.
    std::optional<std::vector<std::vector<ConfusionField>>> injected_cms;
};

/// Dice of argmax(seg_probs) against gt, CM error against the reference fields of every simulated
/// label, GED between annotator-head argmax maps and the visible labels, consensus IoU per image.
MetricsReport evaluate(const ModelParams& params, const Dataset& data, const EvalOptions& options = {});

/// Mean trace of the model's CMs over the dataset's images and annotators.
double mean_cm_trace(const ModelParams& params, const Dataset& data);

/// Fraction of pixels (over images and annotators) whose estimated CM is diagonally dominant.
double mean_diag_dominance(const ModelParams& params, const Dataset& data);

}  // namespace nlsg
