#pragma once

// Exhaustive small-instance checks of the trace-minimisation recovery
// result: among all confusion matrices and true-label distributions that
// reproduce the observed annotator distributions, the one of smallest
// average trace puts the true distribution on the true class and recovers
// every annotator's true-class column.

#include <cstdint>
#include <string>
#include <vector>

#include "nlsg/grid.hpp"
#include "nlsg/rng.hpp"

namespace nlsg {

struct RecoveryProblem {
    int classes = 2;
    int true_class = 0;
    /// One row-major L x L column-stochastic matrix per annotator. Columns other than
    /// `true_class` must be uniform 1/L.
    std::vector<std::vector<double>> true_cms;
    /// Annotator weights; empty means uniform.
    std::vector<double> pi;
    int grid_res = 50;
};

struct RecoveryReport {
    double min_trace = 0.0;
    std::vector<double> p_hat;
    /// True-class column of every annotator at the minimiser.
    std::vector<std::vector<double>> recovered_columns;
    double column_error = 0.0;  // max abs deviation from the true columns
    bool p_hat_is_true_class = false;
    /// Smallest admissible trace with p_hat != e_k (infinity when there is none).
    double runner_up_trace = 0.0;
    double gap = 0.0;
    double reference_trace = 0.0;  // trace of the true weighted-average matrix
    long long candidates = 0;      // admissible candidates visited
    bool recovered = false;        // p_hat = e_k and column error within two grid steps

    std::string to_json() const;
};

/// Enumerates every true-label distribution p on the simplex grid and, per annotator, every
/// matrix whose columns lie on the grid except column argmax(p), which is solved exactly from
/// A_hat p = A e_k. A candidate is admissible when the weighted-average estimate is strictly
/// diagonally dominant row-wise and each of its diagonal entries is at least 1/L. Reports the
/// admissible candidate of minimal average trace.
///
/// Throws DomainError if the true weighted average violates a*_kk > a*_kj for some j != k, naming
/// the entry, or if the problem is malformed.
RecoveryReport brute_force_trace_recovery(const RecoveryProblem& problem);

/// Fraction of pixels where every diagonal entry strictly exceeds the rest of its row.
double diag_dominance(const ConfusionField& cms);

/// Points of the L-simplex with coordinates in multiples of 1/res, in lexicographic order.
std::vector<std::vector<double>> simplex_grid(int classes, int res);

struct MajorityCheck {
    RecoveryReport recovery;
    int samples = 0;
    double true_class_fraction = 0.0;  // fraction of sampled labels equal to k
    bool absolute_majority = false;    // more than half of the samples are k
    bool plurality_is_true_class = false;
};

/// Single annotator whose true-class column has a_kk above every other entry of row k but below
/// their sum. Runs the recovery search and samples `samples` labels from the column.
MajorityCheck weak_dominance_check(const std::vector<double>& column, int true_class, int grid_res, int samples,
                                   Rng& rng);

/// Random problem with `annotators` annotators, uniform weights and a true average whose
/// true-class diagonal exceeds the other row entries by at least `margin`.
RecoveryProblem random_recovery_problem(int classes, int annotators, int grid_res, double margin, Rng& rng);

}  // namespace nlsg
