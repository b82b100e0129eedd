#pragma once

// Shared helpers for the unit tests and the acceptance runner: random
// instances and the central-difference gradient oracle.

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nlsg/grid.hpp"
#include "nlsg/model.hpp"
#include "nlsg/rng.hpp"

namespace nlsg::test {

inline ImageTensor random_image(int w, int h, int c, Rng& rng) {
    ImageTensor img(w, h, c);
    for (double& v : img.values()) v = rng.uniform(-1.0, 1.0);
    return img;
}

inline LabelMap random_labels(int w, int h, int classes, Rng& rng) {
    LabelMap y(w, h, classes);
    for (int p = 0; p < y.pixels(); ++p) y.set_pixel(p, static_cast<int>(rng.uniform_int(classes)));
    return y;
}

inline ProbabilityMap random_simplex_map(int w, int h, int classes, Rng& rng) {
    ProbabilityMap m(w, h, classes);
    for (int p = 0; p < m.pixels(); ++p) {
        auto px = m.pixel(p);
        double sum = 0.0;
        for (double& v : px) sum += (v = rng.uniform(0.05, 1.0));
        for (double& v : px) v /= sum;
    }
    return m;
}

inline ConfusionField random_confusion(int w, int h, int classes, Rng& rng) {
    RealField raw(w, h, classes * classes);
    for (double& v : raw.values()) v = rng.uniform(0.05, 1.0);
    return normalize_columns(raw);
}

inline bool close(double analytic, double numeric, double rel = 1e-4, double abs_floor = 1e-7) {
    const double diff = std::abs(analytic - numeric);
    return diff <= abs_floor || diff <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

struct GradientCheck {
    int coordinates = 0;
    int failures = 0;
    std::string worst_name;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    double worst_excess = 0.0;
};

/// Compares backward() with central differences of loss_total over every parameter coordinate.
inline GradientCheck gradient_check(ModelParams params, const ImageTensor& image,
                                    const std::vector<std::optional<LabelMap>>& labels, double lambda,
                                    double h = 1e-5) {
    const auto grads = backward(params, image, labels, lambda);
    auto groups = param_groups(params);
    const auto ggroups = param_groups(grads);
    GradientCheck out;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        for (std::size_t k = 0; k < groups[gi].values.size(); ++k) {
            const double keep = groups[gi].values[k];
            groups[gi].values[k] = keep + h;
            const double up = loss_total(forward(params, image), labels, lambda).total;
            groups[gi].values[k] = keep - h;
            const double down = loss_total(forward(params, image), labels, lambda).total;
            groups[gi].values[k] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = ggroups[gi].values[k];
            ++out.coordinates;
            const double diff = std::abs(analytic - numeric);
            const double allowed = std::max(1e-7, 1e-4 * std::max(std::abs(analytic), std::abs(numeric)));
            if (diff > allowed) ++out.failures;
            if (diff / allowed > out.worst_excess) {
                out.worst_excess = diff / allowed;
                out.worst_name = groups[gi].name + "[" + std::to_string(k) + "]";
                out.worst_analytic = analytic;
                out.worst_numeric = numeric;
            }
        }
    }
    return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("nlsg_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace nlsg::test
