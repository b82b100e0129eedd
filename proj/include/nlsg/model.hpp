#pragma once

// Two-headed segmentation model with per-annotator pixelwise confusion
// matrices, the trace-regularised objective and its exact reverse-mode
// gradient.
//
// The shared trunk is a stack of stride-1 3x3 convolutions with rectifiers.
// A 1x1 segmentation head produces class logits; a 1x1 annotator head
// produces, per annotator, either L*L confusion logits (Full) or two L x l
// factors (LowRank). Confusion logits pass through an exponential and a
// column normalisation, i.e. a softmax down each column.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlsg/grid.hpp"
#include "nlsg/rng.hpp"

namespace nlsg {

enum class CmMode { Full, LowRank };

std::string to_string(CmMode mode);
CmMode cm_mode_from(const std::string& name);

struct ModelArch {
    int in_channels = 1;
    int trunk_layers = 2;
    int trunk_channels = 8;
    int classes = 2;
    int annotators = 5;  // 0 builds a segmentation-only network
    CmMode cm_mode = CmMode::Full;
    int rank = 1;  // LowRank only

    /// Output channels of the annotator head.
    int ann_head_channels() const;
    void validate() const;
    bool operator==(const ModelArch&) const = default;
};

/// Diagonal logit used at initialisation: exp(bias) = 1000 * L puts at most 1e-3 of
/// each column's mass off the diagonal.
double identity_diag_logit(int classes);

/// Trainable parameters. Trunk layer t stores its 3x3 kernel as [ky][kx][out][in].
/// Heads store [out][in]. `diag_bias` holds one additive diagonal logit per annotator
/// and is only used in LowRank mode.
struct ModelParams {
    ModelArch arch;
    std::vector<std::vector<double>> trunk_weight;
    std::vector<std::vector<double>> trunk_bias;
    std::vector<double> seg_weight;
    std::vector<double> seg_bias;
    std::vector<double> ann_weight;
    std::vector<double> ann_bias;
    std::vector<double> diag_bias;

    /// Same shapes, all zeros.
    ModelParams zeros_like() const;

    bool operator==(const ModelParams&) const = default;
};

enum class ParamRole { Trunk, SegHead, AnnHead };

struct ParamGroup {
    std::string name;
    std::span<double> values;
    ParamRole role;
};

struct ConstParamGroup {
    std::string name;
    std::span<const double> values;
    ParamRole role;
};

std::vector<ParamGroup> param_groups(ModelParams& params);
std::vector<ConstParamGroup> param_groups(const ModelParams& params);
std::size_t param_count(const ModelParams& params);

ModelParams init_params(const ModelArch& arch, Rng& rng);

struct ModelOutput {
    RealField seg_logits;
    ProbabilityMap seg_probs;
    std::vector<ConfusionField> cms;
    std::vector<ProbabilityMap> ann_probs;
};

ModelOutput forward(const ModelParams& params, const ImageTensor& image);

/// Raw per-pixel low-rank factors -> confusion field: exp(B1 B2^T + diag_logit * I), then column
/// normalisation. B1 and B2 have depth classes * rank and store factor rows contiguously.
ConfusionField low_rank_expand(const RealField& b1, const RealField& b2, double diag_logit, int classes);

struct Complexity {
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

/// Confusion-matrix variable count and the FLOPs of the annotator prediction A * p.
/// Full: WHL^2 and WH(2L-1)L. LowRank(l): 2WHLl and WH(4L(l - 1/4) - l).
Complexity complexity_estimate(int width, int height, int classes, CmMode mode, int rank = 1);

struct LossBreakdown {
    std::vector<double> ce_per_annotator;
    std::vector<double> trace_per_annotator;
    std::vector<bool> present;
    double lambda = 0.0;
    double total = 0.0;

    double ce_sum() const;
    double trace_sum() const;
};

/// Sum over present annotators of mean-pixel cross-entropy plus lambda times mean trace.
LossBreakdown loss_total(const ModelOutput& output, std::span<const std::optional<LabelMap>> labels, double lambda);

/// Exact gradient of loss_total with respect to every parameter.
/// Throws DomainError naming the parameter if any coordinate is non-finite.
ModelParams backward(const ModelParams& params, const ImageTensor& image,
                     std::span<const std::optional<LabelMap>> labels, double lambda, LossBreakdown* loss = nullptr);

/// Segmentation-only objective: mean-pixel cross-entropy of seg_probs against a soft target.
double supervised_loss(const ModelOutput& output, const ProbabilityMap& target);
ModelParams backward_supervised(const ModelParams& params, const ImageTensor& image, const ProbabilityMap& target,
                                double* loss = nullptr);

/// Annotator likelihood with externally supplied confusion fields; only the trunk and
/// segmentation head receive gradient.
double fixed_cm_loss(const ModelOutput& output, std::span<const std::optional<LabelMap>> labels,
                     std::span<const ConfusionField> cms);
ModelParams backward_fixed_cms(const ModelParams& params, const ImageTensor& image,
                               std::span<const std::optional<LabelMap>> labels, std::span<const ConfusionField> cms,
                               double* loss = nullptr);

/// Smallest |pre-activation| over all trunk units; gradient checks avoid rectifier kinks with it.
double min_abs_preactivation(const ModelParams& params, const ImageTensor& image);

void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& dir);

std::string arch_to_json(const ModelArch& arch);
ModelArch arch_from_json(const std::string& text);

}  // namespace nlsg
