#include "nlsg/fusion.hpp"

#include <algorithm>
#include <cmath>

namespace nlsg {

namespace {

constexpr double kSmoothing = 1e-8;

void check_labels(std::span<const LabelMap> labels, const char* what) {
    if (labels.empty()) throw DomainError(std::string(what) + ": no label maps");
    for (const auto& l : labels) {
        if (l.width() != labels[0].width() || l.height() != labels[0].height() ||
            l.classes() != labels[0].classes()) {
            throw ShapeError(std::string(what) + ": label maps differ in shape");
        }
    }
}

std::vector<double> mean_prior(std::span<const LabelMap> labels) {
    const int L = labels[0].classes();
    std::vector<double> prior(L, 0.0);
    for (const auto& l : labels) {
        for (int p = 0; p < l.pixels(); ++p) prior[l[p]] += 1.0;
    }
    const double total = double(labels.size()) * labels[0].pixels();
    for (double& v : prior) v /= total;
    return prior;
}

LabelMap crop(const LabelMap& in, int x0, int y0, int w, int h) {
    LabelMap out(w, h, in.classes());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) out.set(x, y, in.at(x0 + x, y0 + y));
    }
    return out;
}

std::vector<int> window_starts(int extent, int window, int stride) {
    std::vector<int> starts;
    for (int s = 0; s + window < extent; s += stride) starts.push_back(s);
    starts.push_back(extent - window);
    starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
    return starts;
}

}  // namespace

ProbabilityMap mean_fusion(std::span<const LabelMap> labels) {
    check_labels(labels, "mean_fusion");
    const auto& first = labels[0];
    ProbabilityMap out(first.width(), first.height(), first.classes());
    const double weight = 1.0 / double(labels.size());
    for (const auto& l : labels) {
        for (int p = 0; p < l.pixels(); ++p) out.pixel(p)[l[p]] += weight;
    }
    return out;
}

LabelMap majority_vote(std::span<const LabelMap> labels) {
    check_labels(labels, "majority_vote");
    const auto& first = labels[0];
    const int L = first.classes();
    LabelMap out(first.width(), first.height(), L);
    std::vector<int> votes(L);
    for (int p = 0; p < first.pixels(); ++p) {
        std::fill(votes.begin(), votes.end(), 0);
        for (const auto& l : labels) ++votes[l[p]];
        out.set_pixel(p, static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin()));
    }
    return out;
}

StapleResult staple(std::span<const LabelMap> labels, int max_iters, double tol) {
    check_labels(labels, "staple");
    const auto prior = mean_prior(labels);
    return staple_with_prior(labels, prior, max_iters, tol);
}

StapleResult staple_with_prior(std::span<const LabelMap> labels, std::span<const double> prior, int max_iters,
                               double tol) {
    check_labels(labels, "staple");
    const int R = static_cast<int>(labels.size());
    const int L = labels[0].classes();
    const int P = labels[0].pixels();
    if (prior.size() != std::size_t(L)) throw ShapeError("staple: prior length differs from class count");

    std::vector<std::vector<double>> theta(R, std::vector<double>(std::size_t(L) * L));
    for (auto& t : theta) {
        for (int i = 0; i < L; ++i) {
            for (int j = 0; j < L; ++j) t[i * L + j] = (i == j) ? 0.99 : (L > 1 ? 0.01 / (L - 1) : 0.0);
        }
    }

    StapleResult result;
    result.posterior = ProbabilityMap(labels[0].width(), labels[0].height(), L);

    // E-step with the current theta; returns the observed-data log-likelihood.
    auto e_step = [&]() {
        double ll = 0.0;
        for (int p = 0; p < P; ++p) {
            auto w = result.posterior.pixel(p);
            double sum = 0.0;
            for (int j = 0; j < L; ++j) {
                double v = prior[j];
                for (int r = 0; r < R; ++r) v *= theta[r][labels[r][p] * L + j];
                w[j] = v;
                sum += v;
            }
            if (sum > 0.0) {
                for (double& v : w) v /= sum;
                ll += std::log(sum);
            } else {
                std::copy(prior.begin(), prior.end(), w.begin());
                ll += std::log(1e-300);
            }
        }
        return ll;
    };

    std::vector<double> num(std::size_t(L) * L);
    std::vector<double> den(L);
    for (int iter = 0; iter < max_iters; ++iter) {
        result.log_likelihood_trace.push_back(e_step());
        double change = 0.0;
        for (int r = 0; r < R; ++r) {
            std::fill(num.begin(), num.end(), 0.0);
            std::fill(den.begin(), den.end(), 0.0);
            for (int p = 0; p < P; ++p) {
                auto w = result.posterior.pixel(p);
                const int obs = labels[r][p];
                for (int j = 0; j < L; ++j) {
                    num[obs * L + j] += w[j];
                    den[j] += w[j];
                }
            }
            for (int j = 0; j < L; ++j) {
                const bool degenerate = den[j] <= kSmoothing;
                for (int i = 0; i < L; ++i) {
                    const double updated =
                        degenerate ? (num[i * L + j] + kSmoothing) / (den[j] + L * kSmoothing) : num[i * L + j] / den[j];
                    change = std::max(change, std::abs(updated - theta[r][i * L + j]));
                    theta[r][i * L + j] = updated;
                }
            }
        }
        ++result.iterations;
        if (change < tol) break;
    }
    // Final posterior is consistent with the returned matrices.
    result.log_likelihood_trace.push_back(e_step());
    result.annotator_cms = std::move(theta);
    return result;
}

ProbabilityMap posterior_from_cms(std::span<const LabelMap> labels, std::span<const ConfusionField> cms,
                                  std::span<const double> prior) {
    check_labels(labels, "posterior_from_cms");
    if (cms.size() != labels.size()) throw ShapeError("posterior_from_cms: one confusion field per annotator");
    const int L = labels[0].classes();
    ProbabilityMap out(labels[0].width(), labels[0].height(), L);
    for (int p = 0; p < labels[0].pixels(); ++p) {
        auto w = out.pixel(p);
        double sum = 0.0;
        for (int j = 0; j < L; ++j) {
            double v = prior[j];
            for (std::size_t r = 0; r < labels.size(); ++r) v *= cms[r].at(p, labels[r][p], j);
            w[j] = v;
            sum += v;
        }
        if (sum > 0.0) {
            for (double& v : w) v /= sum;
        } else {
            std::copy(prior.begin(), prior.end(), w.begin());
        }
    }
    return out;
}

SpatialStapleResult spatial_staple(std::span<const LabelMap> labels, int window, int stride, int max_iters,
                                   double tol) {
    check_labels(labels, "spatial_staple");
    if (window < 4) throw DomainError("spatial_staple: window must be at least 4");
    if (stride < 1 || stride > window) throw DomainError("spatial_staple: stride must lie in [1, window]");
    const int W = labels[0].width();
    const int H = labels[0].height();
    const int L = labels[0].classes();
    const int R = static_cast<int>(labels.size());
    const auto prior = mean_prior(labels);

    SpatialStapleResult out;
    if (window > W || window > H) {
        auto global = staple_with_prior(labels, prior, max_iters, tol);
        for (int r = 0; r < R; ++r) out.annotator_cms.push_back(constant_field(W, H, L, global.annotator_cms[r]));
        out.posterior = std::move(global.posterior);
        out.windows = 1;
        return out;
    }

    std::vector<ConfusionField> acc(R, ConfusionField(W, H, L));
    std::vector<int> cover(std::size_t(W) * H, 0);
    std::vector<LabelMap> local(R);
    for (int y0 : window_starts(H, window, stride)) {
        for (int x0 : window_starts(W, window, stride)) {
            for (int r = 0; r < R; ++r) local[r] = crop(labels[r], x0, y0, window, window);
            const auto fit = staple_with_prior(local, prior, max_iters, tol);
            ++out.windows;
            for (int y = y0; y < y0 + window; ++y) {
                for (int x = x0; x < x0 + window; ++x) {
                    const int p = y * W + x;
                    ++cover[p];
                    for (int r = 0; r < R; ++r) {
                        auto m = acc[r].matrix(p);
                        for (std::size_t e = 0; e < m.size(); ++e) m[e] += fit.annotator_cms[r][e];
                    }
                }
            }
        }
    }
    for (int r = 0; r < R; ++r) {
        for (int p = 0; p < W * H; ++p) {
            auto m = acc[r].matrix(p);
            for (double& v : m) v /= cover[p];
            for (int j = 0; j < L; ++j) {
                double sum = 0.0;
                for (int i = 0; i < L; ++i) sum += m[i * L + j];
                for (int i = 0; i < L; ++i) m[i * L + j] /= sum;
            }
        }
    }
    out.posterior = posterior_from_cms(labels, acc, prior);
    out.annotator_cms = std::move(acc);
    return out;
}

}  // namespace nlsg
