#pragma once

// Experiment configuration and the method runners behind the CLI: dataset
// construction, fusion baselines trained as segmentation networks, the
// confusion-matrix model with and without the trace term, and CSV / SVG
// emission.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nlsg/annotator_sim.hpp"
#include "nlsg/model.hpp"
#include "nlsg/trainer.hpp"

namespace nlsg {

/// Thrown for malformed or inconsistent configuration; the message names the field.
class ConfigError : public Error {
public:
    using Error::Error;
};

struct DatasetSpec {
    std::string source = "synthetic";  // "synthetic" | "idx"
    int train_count = 200;
    int test_count = 50;
    int width = 28;
    int height = 28;
    int classes = 2;
    std::string idx_images;
    std::string idx_labels;
    double idx_threshold = 0.5;

    bool operator==(const DatasetSpec&) const = default;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    std::vector<AnnotatorProfile> profiles = default_profiles();
    LabelRegime regime = LabelRegime::Dense;
    std::vector<std::string> methods{"mean", "mode", "staple", "ours_no_trace", "ours"};
    int trunk_layers = 2;
    int trunk_channels = 8;
    int low_rank = 1;  // rank used by "ours_low_rank"
    TrainConfig train;
    std::vector<std::uint64_t> seeds{0};
    std::string output_dir = "out";
    int spatial_window = 8;
    int spatial_stride = 4;
    int staple_max_iters = 100;
    /// Non-empty turns `report` into a noise sweep over these corruption magnitudes.
    std::vector<int> noise_levels;

    bool operator==(const ExperimentConfig&) const = default;
};

/// Methods understood by run_method.
const std::vector<std::string>& known_methods();

std::string config_to_json(const ExperimentConfig& cfg);
/// Strict parse: unknown keys, wrong types and invalid values raise ConfigError naming the field.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& cfg);
/// FNV-1a 64 of the canonical JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

ModelArch arch_for(const ExperimentConfig& cfg, const std::string& method, const Dataset& data);

/// Builds the train / test datasets for one seed.
DatasetSplits build_datasets(const ExperimentConfig& cfg, std::uint64_t seed);

/// Profiles with every non-blank corruption magnitude set to `level`; level 0 also removes fractures.
std::vector<AnnotatorProfile> profiles_at_level(const std::vector<AnnotatorProfile>& base, int level);

/// Mean Dice of the visible annotator labels against ground truth.
double mean_annotator_dice(const Dataset& data);

struct MethodResult {
    std::string method;
    std::uint64_t seed = 0;
    double dice = 0.0;
    std::optional<double> cm_rmse;  // true-class column
    std::optional<double> cm_rmse_full;
    std::optional<double> ged;
    std::optional<TrainHistory> history;
    std::optional<ModelParams> params;
};

/// Per-image fused targets for a label-fusion baseline ("mean", "naive", "mode", "staple",
/// "spatial_staple") built from the visible labels.
std::vector<ProbabilityMap> fused_targets(const ExperimentConfig& cfg, const std::string& method, const Dataset& data);

/// Reference CMs of every simulated label, per image and annotator.
std::vector<std::vector<ConfusionField>> reference_cms(const Dataset& data);

/// Trains the network behind `method` on the training split.
TrainResult fit_method(const ExperimentConfig& cfg, const std::string& method, const Dataset& train_set,
                       std::uint64_t seed);

/// Trains / runs one method on a prepared split and evaluates it on the test split.
MethodResult run_method(const ExperimentConfig& cfg, const std::string& method, const DatasetSplits& splits,
                        std::uint64_t seed);

struct ResultRow {
    std::string config_hash;
    std::optional<int> level;
    std::uint64_t seed = 0;
    std::string method;
    double dice = 0.0;
    std::optional<double> cm_rmse;
    std::optional<double> cm_rmse_full;
    std::optional<double> ged;
    double annotator_dice = 0.0;
};

struct ExperimentOutput {
    std::vector<ResultRow> rows;
    /// (method, seed) -> per-epoch history for trained annotator models.
    std::vector<std::pair<std::string, TrainHistory>> histories;
};

/// Runs every method for every seed (and every noise level if configured). Independent runs use up to
/// `workers` threads; results are ordered by (level, seed, method) regardless of scheduling.
ExperimentOutput run_experiment(const ExperimentConfig& cfg, int workers);

std::string rows_to_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> rows_from_csv(const std::string& text);

struct SummaryRow {
    std::optional<int> level;
    std::string method;
    int runs = 0;
    double median_dice = 0.0;
    std::optional<double> median_cm_rmse;
};

/// Median over seeds per (level, method), in first-appearance order.
std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows);
std::string summary_to_csv(const std::vector<SummaryRow>& rows);

/// Self-contained SVG charts.
std::string bar_chart_svg(const std::vector<SummaryRow>& rows, const std::string& title);
/// Median test Dice per method against the mean annotator Dice of each noise level.
std::string sweep_chart_svg(const std::vector<ResultRow>& rows, const std::string& title);
std::string loss_chart_svg(const std::vector<std::pair<std::string, TrainHistory>>& histories,
                           const std::string& title);

double median(std::vector<double> values);

/// Reads NLSG_WORKERS (positive integer), else the hardware concurrency.
int worker_count();

}  // namespace nlsg
