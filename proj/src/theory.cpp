#include "nlsg/theory.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace nlsg {

namespace {

constexpr double kTol = 1e-12;

void compositions(int classes, int remaining, std::vector<int>& cur, std::vector<std::vector<int>>& out) {
    if (static_cast<int>(cur.size()) == classes - 1) {
        cur.push_back(remaining);
        out.push_back(cur);
        cur.pop_back();
        return;
    }
    for (int v = remaining; v >= 0; --v) {
        cur.push_back(v);
        compositions(classes, remaining - v, cur, out);
        cur.pop_back();
    }
}

struct Search {
    int L = 2;
    int R = 1;
    int k = 0;
    std::vector<double> pi;
    // Per annotator: candidate matrices for the current p_hat.
    std::vector<std::vector<std::vector<double>>> cands;
    std::vector<double> avg;

    bool is_ek = false;
    const std::vector<double>* p = nullptr;
    std::vector<int> choice;

    double best_k = std::numeric_limits<double>::infinity();
    double best_other = std::numeric_limits<double>::infinity();
    std::vector<double> best_k_p;
    std::vector<double> best_other_p;
    std::vector<std::vector<double>> best_k_cols;
    std::vector<std::vector<double>> best_other_cols;
    long long admissible = 0;

    bool admissible_avg() const {
        for (int i = 0; i < L; ++i) {
            const double d = avg[i * L + i];
            if (d < 1.0 / L - kTol) return false;
            for (int j = 0; j < L; ++j) {
                if (j != i && !(d > avg[i * L + j] + kTol)) return false;
            }
        }
        return true;
    }

    std::vector<std::vector<double>> columns_k() const {
        std::vector<std::vector<double>> out;
        for (int r = 0; r < R; ++r) {
            const auto& m = cands[r][choice[r]];
            std::vector<double> col(L);
            for (int i = 0; i < L; ++i) col[i] = m[i * L + k];
            out.push_back(col);
        }
        return out;
    }

    void recurse(int r) {
        if (r == R) {
            if (!admissible_avg()) return;
            ++admissible;
            double tr = 0.0;
            for (int i = 0; i < L; ++i) tr += avg[i * L + i];
            // Strict '<' keeps the first (lowest-index) minimiser.
            if (is_ek) {
                if (tr < best_k) best_k = tr, best_k_p = *p, best_k_cols = columns_k();
            } else if (tr < best_other) {
                best_other = tr, best_other_p = *p, best_other_cols = columns_k();
            }
            return;
        }
        for (std::size_t c = 0; c < cands[r].size(); ++c) {
            const auto& m = cands[r][c];
            for (int e = 0; e < L * L; ++e) avg[e] += pi[r] * m[e];
            choice[r] = static_cast<int>(c);
            recurse(r + 1);
            for (int e = 0; e < L * L; ++e) avg[e] -= pi[r] * m[e];
        }
    }
};

// Matrices with every column on the grid except column m, solved from A p = target.
std::vector<std::vector<double>> solve_candidates(int L, const std::vector<std::vector<double>>& grid,
                                                  const std::vector<double>& p, int m,
                                                  const std::vector<double>& target) {
    std::vector<std::vector<double>> out;
    const std::size_t G = grid.size();
    const int free_cols = L - 1;
    std::vector<std::size_t> idx(free_cols, 0);
    std::vector<double> mat(std::size_t(L) * L);
    while (true) {
        int f = 0;
        std::vector<double> rest = target;
        for (int j = 0; j < L; ++j) {
            if (j == m) continue;
            const auto& col = grid[idx[f++]];
            for (int i = 0; i < L; ++i) {
                mat[i * L + j] = col[i];
                rest[i] -= col[i] * p[j];
            }
        }
        bool ok = true;
        for (int i = 0; i < L; ++i) {
            double v = rest[i] / p[m];
            if (v < -kTol) {
                ok = false;
                break;
            }
            mat[i * L + m] = std::max(v, 0.0);
        }
        if (ok) out.push_back(mat);
        int pos = 0;
        while (pos < free_cols && ++idx[pos] == G) idx[pos++] = 0;
        if (pos == free_cols) break;
    }
    return out;
}

}  // namespace

std::vector<std::vector<double>> simplex_grid(int classes, int res) {
    if (classes < 2 || res < 1) throw DomainError("simplex_grid: need classes >= 2 and res >= 1");
    std::vector<std::vector<int>> comps;
    std::vector<int> cur;
    compositions(classes, res, cur, comps);
    std::vector<std::vector<double>> out;
    out.reserve(comps.size());
    for (const auto& c : comps) {
        std::vector<double> p(classes);
        for (int i = 0; i < classes; ++i) p[i] = double(c[i]) / res;
        out.push_back(p);
    }
    return out;
}

RecoveryReport brute_force_trace_recovery(const RecoveryProblem& prob) {
    const int L = prob.classes;
    const int R = static_cast<int>(prob.true_cms.size());
    const int k = prob.true_class;
    if (L < 2 || L > 4) throw DomainError("trace recovery: brute force supports 2 <= L <= 4");
    if (R < 1 || R > 3) throw DomainError("trace recovery: brute force supports 1 to 3 annotators");
    if (k < 0 || k >= L) throw DomainError("trace recovery: true class out of range");
    if (prob.grid_res < 2 || prob.grid_res > 100) throw DomainError("trace recovery: grid_res must lie in [2, 100]");
    std::vector<double> pi = prob.pi.empty() ? std::vector<double>(R, 1.0 / R) : prob.pi;
    if (pi.size() != std::size_t(R)) throw DomainError("trace recovery: one weight per annotator");
    double pi_sum = 0.0;
    for (double w : pi) {
        if (w < 0.0) throw DomainError("trace recovery: negative annotator weight");
        pi_sum += w;
    }
    if (std::abs(pi_sum - 1.0) > 1e-9) throw DomainError("trace recovery: annotator weights must sum to 1");

    std::vector<double> avg(std::size_t(L) * L, 0.0);
    for (int r = 0; r < R; ++r) {
        const auto& A = prob.true_cms[r];
        if (A.size() != std::size_t(L) * L) throw DomainError("trace recovery: matrix size differs from L x L");
        for (int j = 0; j < L; ++j) {
            double s = 0.0;
            for (int i = 0; i < L; ++i) {
                if (A[i * L + j] < 0.0) throw DomainError("trace recovery: negative matrix entry");
                s += A[i * L + j];
                if (j != k && std::abs(A[i * L + j] - 1.0 / L) > 1e-9) {
                    throw DomainError("trace recovery: column " + std::to_string(j) + " of annotator " +
                                      std::to_string(r) + " must be uniform");
                }
            }
            if (std::abs(s - 1.0) > 1e-9) throw DomainError("trace recovery: matrix is not column-stochastic");
        }
        for (int e = 0; e < L * L; ++e) avg[e] += pi[r] * A[e];
    }
    for (int j = 0; j < L; ++j) {
        if (j != k && !(avg[k * L + k] > avg[k * L + j])) {
            std::ostringstream s;
            s << "trace recovery: dominance violated, a*[" << k << "][" << j << "] = " << avg[k * L + j]
              << " is not below a*[" << k << "][" << k << "] = " << avg[k * L + k];
            throw DomainError(s.str());
        }
    }

    const auto grid = simplex_grid(L, prob.grid_res);
    Search s;
    s.L = L;
    s.R = R;
    s.k = k;
    s.pi = pi;
    s.cands.resize(R);
    s.avg.assign(std::size_t(L) * L, 0.0);
    s.choice.assign(R, 0);
    for (const auto& p : grid) {
        int m = 0;
        for (int j = 1; j < L; ++j) {
            if (p[j] > p[m]) m = j;
        }
        for (int r = 0; r < R; ++r) {
            std::vector<double> target(L);
            for (int i = 0; i < L; ++i) target[i] = prob.true_cms[r][i * L + k];
            s.cands[r] = solve_candidates(L, grid, p, m, target);
        }
        s.p = &p;
        s.is_ek = p[k] == 1.0;
        s.recurse(0);
    }

    RecoveryReport rep;
    rep.candidates = s.admissible;
    rep.reference_trace = 0.0;
    for (int i = 0; i < L; ++i) rep.reference_trace += avg[i * L + i];
    rep.runner_up_trace = s.best_other;
    const bool k_wins = s.best_k < s.best_other - kTol;
    if (s.best_k == std::numeric_limits<double>::infinity() && s.best_other == std::numeric_limits<double>::infinity()) {
        throw DomainError("trace recovery: no admissible candidate on the grid");
    }
    rep.p_hat_is_true_class = k_wins;
    rep.min_trace = k_wins ? s.best_k : s.best_other;
    rep.p_hat = k_wins ? s.best_k_p : s.best_other_p;
    rep.recovered_columns = k_wins ? s.best_k_cols : s.best_other_cols;
    rep.gap = s.best_other - s.best_k;
    for (int r = 0; r < R; ++r) {
        for (int i = 0; i < L; ++i) {
            rep.column_error = std::max(rep.column_error, std::abs(rep.recovered_columns[r][i] - prob.true_cms[r][i * L + k]));
        }
    }
    rep.recovered = rep.p_hat_is_true_class && rep.column_error <= 2.0 / prob.grid_res + kTol;
    return rep;
}

std::string RecoveryReport::to_json() const {
    nlohmann::ordered_json j;
    j["recovered"] = recovered;
    j["p_hat_is_true_class"] = p_hat_is_true_class;
    j["min_trace"] = min_trace;
    j["reference_trace"] = reference_trace;
    j["runner_up_trace"] = std::isfinite(runner_up_trace) ? nlohmann::ordered_json(runner_up_trace) : nullptr;
    j["gap"] = std::isfinite(gap) ? nlohmann::ordered_json(gap) : nullptr;
    j["p_hat"] = p_hat;
    j["recovered_columns"] = recovered_columns;
    j["column_error"] = column_error;
    j["admissible_candidates"] = candidates;
    return j.dump(2);
}

double diag_dominance(const ConfusionField& cms) {
    const int L = cms.classes();
    int good = 0;
    for (int p = 0; p < cms.pixels(); ++p) {
        bool ok = true;
        for (int i = 0; i < L && ok; ++i) {
            for (int j = 0; j < L; ++j) {
                if (j != i && !(cms.at(p, i, i) > cms.at(p, i, j))) {
                    ok = false;
                    break;
                }
            }
        }
        good += ok;
    }
    return cms.pixels() ? double(good) / cms.pixels() : 0.0;
}

MajorityCheck weak_dominance_check(const std::vector<double>& column, int true_class, int grid_res, int samples,
                                   Rng& rng) {
    const int L = static_cast<int>(column.size());
    if (samples < 1) throw DomainError("weak_dominance_check: need at least one sample");
    RecoveryProblem prob;
    prob.classes = L;
    prob.true_class = true_class;
    prob.grid_res = grid_res;
    std::vector<double> A(std::size_t(L) * L, 1.0 / L);
    for (int i = 0; i < L; ++i) A[i * L + true_class] = column[i];
    prob.true_cms = {A};

    MajorityCheck out;
    out.recovery = brute_force_trace_recovery(prob);
    out.samples = samples;
    std::vector<int> counts(L, 0);
    for (int s = 0; s < samples; ++s) {
        double u = rng.uniform();
        int label = L - 1;
        for (int i = 0; i < L; ++i) {
            if (u < column[i]) {
                label = i;
                break;
            }
            u -= column[i];
        }
        ++counts[label];
    }
    out.true_class_fraction = double(counts[true_class]) / samples;
    out.absolute_majority = 2 * counts[true_class] > samples;
    int top = 0;
    for (int i = 1; i < L; ++i) {
        if (counts[i] > counts[top]) top = i;
    }
    out.plurality_is_true_class = top == true_class;
    return out;
}

RecoveryProblem random_recovery_problem(int classes, int annotators, int grid_res, double margin, Rng& rng) {
    RecoveryProblem prob;
    prob.classes = classes;
    prob.grid_res = grid_res;
    prob.true_class = static_cast<int>(rng.uniform_int(classes));
    const int k = prob.true_class;
    for (int attempt = 0; attempt < 10000; ++attempt) {
        prob.true_cms.clear();
        std::vector<double> avg_col(classes, 0.0);
        for (int r = 0; r < annotators; ++r) {
            std::vector<double> col(classes);
            double s = 0.0;
            for (double& v : col) s += (v = -std::log(1.0 - rng.uniform()));
            for (double& v : col) v /= s;
            std::vector<double> A(std::size_t(classes) * classes, 1.0 / classes);
            for (int i = 0; i < classes; ++i) {
                A[i * classes + k] = col[i];
                avg_col[i] += col[i] / annotators;
            }
            prob.true_cms.push_back(A);
        }
        if (avg_col[k] > 1.0 / classes + margin) return prob;
    }
    throw DomainError("random_recovery_problem: could not draw a dominant instance");
}

}  // namespace nlsg
