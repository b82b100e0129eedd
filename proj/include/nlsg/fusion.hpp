#pragma once

// Classical label fusion: per-pixel mean, majority vote, STAPLE and a
// windowed spatially varying STAPLE.

#include <span>
#include <vector>

#include "nlsg/grid.hpp"

namespace nlsg {

ProbabilityMap mean_fusion(std::span<const LabelMap> labels);

/// Per-pixel mode; ties go to the lowest class index.
LabelMap majority_vote(std::span<const LabelMap> labels);

struct StapleResult {
    ProbabilityMap posterior;
    /// One row-major L x L column-stochastic matrix per annotator.
    std::vector<std::vector<double>> annotator_cms;
    /// Observed-data log-likelihood evaluated at each E-step.
    std::vector<double> log_likelihood_trace;
    int iterations = 0;
};

/// STAPLE expectation maximisation with global per-annotator confusion matrices.
/// The class prior is the pixel-averaged mean fusion and stays fixed.
StapleResult staple(std::span<const LabelMap> labels, int max_iters = 100, double tol = 1e-7);

/// Same EM with an explicit prior (length L).
StapleResult staple_with_prior(std::span<const LabelMap> labels, std::span<const double> prior, int max_iters,
                               double tol);

struct SpatialStapleResult {
    ProbabilityMap posterior;
    std::vector<ConfusionField> annotator_cms;
    int windows = 0;
};

/// Windowed spatial STAPLE: STAPLE inside overlapping square windows, per-pixel confusion
/// matrices averaged over covering windows, posterior recomputed per pixel.
SpatialStapleResult spatial_staple(std::span<const LabelMap> labels, int window, int stride, int max_iters = 100,
                                   double tol = 1e-7);

/// Posterior of the true label given per-pixel annotator confusion fields and a class prior.
ProbabilityMap posterior_from_cms(std::span<const LabelMap> labels, std::span<const ConfusionField> cms,
                                  std::span<const double> prior);

}  // namespace nlsg
